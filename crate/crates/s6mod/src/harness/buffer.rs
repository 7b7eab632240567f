//! Reservoir replay buffer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;

/// Bounded memory with the classic reservoir guarantee: after `j` items
/// have streamed past a capacity-M buffer, each of them is retained
/// with probability M/j.
#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<Sample>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReservoirBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Inserts one sample: unconditionally while under capacity, then
    /// item j (1-indexed) replaces a uniform slot with probability M/j.
    pub fn update(&mut self, sample: Sample) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(sample);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = self.rng.gen_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.items[j as usize] = sample;
        }
    }

    /// Uniform draw of `count` distinct stored samples (all of them if
    /// fewer are stored). Clones the samples; the buffer keeps its own.
    pub fn draw(&mut self, count: usize) -> Vec<Sample> {
        let take = count.min(self.items.len());
        if take == 0 {
            return Vec::new();
        }
        // partial Fisher–Yates over an index vector
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..take {
            let swap = i + self.rng.gen_range(0..(idx.len() - i) as u64) as usize;
            idx.swap(i, swap);
        }
        idx[..take].iter().map(|&i| self.items[i].clone()).collect()
    }
}
