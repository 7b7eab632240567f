//! Rough timing of one training step at desk-scale dimensions.
//!
//! Run with `cargo run -p s6mod --example bench_step --release`.

use std::time::Instant;

use s6mod::branch::{BranchConfig, RoutingMode};
use s6mod::data::{generate_synthetic, SyntheticSpec};
use s6mod::harness::{train_step, ReservoirBuffer, StepConfig, TaskStream};
use s6mod::model::{Model, ModelConfig};
use s6mod::scan::ZohMode;

fn main() {
    let spec = SyntheticSpec::default();
    let dataset = generate_synthetic(&spec, 5).unwrap();
    for channels in [[8, 16, 16, 32], [16, 16, 32, 64]] {
        let cfg = ModelConfig {
            classes: 10,
            input_size: dataset.input_size,
            input_channels: dataset.input_channels,
            backbone_channels: channels,
            kernel: 3,
            momentum: 0.9,
            branch: Some(BranchConfig {
                backbone_channels: channels[3],
                width: 16,
                nstate: 8,
                experts: 10,
                conv_kernel: 3,
                lambda0: 0.1,
                alpha: 1.0,
                beta: 5.0,
                zoh_mode: ZohMode::Exact,
                directions: 4,
                classes: 10,
                detach_q: false,
                etf_seed: 0,
            }),
            seed: 0,
        };
        let mut model = Model::new(cfg).unwrap();
        let stream = TaskStream::new(&dataset, 10, 1).unwrap();
        let mut buffer = ReservoirBuffer::new(200, 2);
        // warm the buffer so replay batches are full-size
        for s in stream.tasks[0].samples.iter().take(200) {
            buffer.update(s.clone());
        }
        let step_cfg = StepConfig {
            lr: 0.05,
            branch_on: true,
            routing: RoutingMode::ClassConditional,
        };
        let batches: Vec<&[s6mod::data::Sample]> = stream.batches(0).take(12).collect();
        // one untimed warmup
        train_step(&mut model, batches[0], &mut buffer, 64, &step_cfg).unwrap();
        let start = Instant::now();
        for batch in &batches[1..11] {
            train_step(&mut model, batch, &mut buffer, 64, &step_cfg).unwrap();
        }
        let per_step = start.elapsed().as_secs_f64() / 10.0;
        println!("channels {channels:?}: {:.1} ms/step -> {:.1} s per 500-step run", per_step * 1e3, per_step * 500.0);

        let step_cfg_er = StepConfig { lr: 0.05, branch_on: false, routing: RoutingMode::ClassConditional };
        let start = Instant::now();
        for batch in &batches[1..11] {
            train_step(&mut model, batch, &mut buffer, 64, &step_cfg_er).unwrap();
        }
        let per_step = start.elapsed().as_secs_f64() / 10.0;
        println!("  ER only: {:.1} ms/step -> {:.1} s per run", per_step * 1e3, per_step * 500.0);
    }
}
