//! Bit-exact CIFAR binary ingestion.
//!
//! CIFAR-10 records are 3073 bytes: one label byte then 1024 R, 1024 G,
//! 1024 B plane bytes. The 100-class layout prepends a coarse label
//! byte, giving 3074-byte records whose second byte is the fine label.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, Sample, TaskData};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// 3073-byte records, 10 classes.
    Ten,
    /// 3074-byte records (coarse + fine label), 100 classes.
    Hundred,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Ten => 1 + IMAGE_BYTES,
            CifarVariant::Hundred => 2 + IMAGE_BYTES,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }
}

/// One parsed record; pixels stay in channel-planar byte order so that
/// serialization is the identity round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    /// Fine label.
    pub label: u8,
    /// Coarse label byte of the 100-class layout.
    pub coarse: Option<u8>,
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    /// Pixels as `[h, w, c]` floats in [0, 1].
    pub fn to_input(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; IMAGE_BYTES];
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                for c in 0..3 {
                    out[(y * IMAGE_SIDE + x) * 3 + c] =
                        self.pixels[c * plane + y * IMAGE_SIDE + x] as f64 / 255.0;
                }
            }
        }
        out
    }
}

/// Parses a buffer of fixed-size records, validating total length and
/// label ranges. Errors carry the byte offset of the offending record.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant) -> Result<Vec<ImageRecord>> {
    let rec_len = variant.record_len();
    if bytes.len() % rec_len != 0 {
        let offset = (bytes.len() / rec_len * rec_len) as u64;
        return Err(Error::Format {
            offset,
            detail: format!(
                "file length {} is not a multiple of the {rec_len}-byte record size",
                bytes.len()
            ),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / rec_len);
    for (i, chunk) in bytes.chunks_exact(rec_len).enumerate() {
        let offset = (i * rec_len) as u64;
        let (coarse, label, pixels) = match variant {
            CifarVariant::Ten => (None, chunk[0], &chunk[1..]),
            CifarVariant::Hundred => (Some(chunk[0]), chunk[1], &chunk[2..]),
        };
        if (label as usize) >= variant.classes() {
            return Err(Error::Format {
                offset,
                detail: format!("label {label} outside {} classes", variant.classes()),
            });
        }
        records.push(ImageRecord { label, coarse, pixels: pixels.to_vec() });
    }
    Ok(records)
}

pub fn read_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Vec<ImageRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar_bytes(&bytes, variant)
}

/// Inverse of parsing: reproduces the source bytes exactly.
pub fn write_cifar_binary(records: &[ImageRecord], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for r in records {
        if r.pixels.len() != IMAGE_BYTES {
            return Err(Error::Contract("record with malformed pixel payload".into()));
        }
        match variant {
            CifarVariant::Ten => out.push(r.label),
            CifarVariant::Hundred => {
                out.push(r.coarse.unwrap_or(0));
                out.push(r.label);
            }
        }
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}

/// Splits label-ordered classes into `tasks` equal groups and buckets
/// the records accordingly.
pub fn cifar_dataset(
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
    variant: CifarVariant,
    tasks: usize,
) -> Result<Dataset> {
    let classes = variant.classes();
    if tasks == 0 || classes % tasks != 0 {
        return Err(Error::Config(format!("{classes} classes cannot split into {tasks} equal tasks")));
    }
    let per_task = classes / tasks;
    let mut train_tasks = Vec::with_capacity(tasks);
    let mut test_sets = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let class_range = t * per_task..(t + 1) * per_task;
        let samples: Vec<Sample> = train
            .iter()
            .filter(|r| class_range.contains(&(r.label as usize)))
            .map(|r| Sample { input: r.to_input(), label: r.label as usize })
            .collect();
        let test_samples: Vec<Sample> = test
            .iter()
            .filter(|r| class_range.contains(&(r.label as usize)))
            .map(|r| Sample { input: r.to_input(), label: r.label as usize })
            .collect();
        train_tasks.push(TaskData { classes: class_range.collect(), samples });
        test_sets.push(test_samples);
    }
    Ok(Dataset {
        input_size: IMAGE_SIDE,
        input_channels: 3,
        classes,
        train_tasks,
        test_sets,
    })
}
