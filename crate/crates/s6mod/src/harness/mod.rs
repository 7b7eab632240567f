//! Online class-incremental stream execution: single-epoch task
//! streams, the replay-based training step, and evaluation.

pub mod buffer;
pub mod metrics;

pub use buffer::ReservoirBuffer;
pub use metrics::AccuracyMatrix;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branch::RoutingMode;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{cont_loss, cross_entropy, diff_loss, dr_loss, s6mod_loss};
use crate::model::{Model, PredictHead};
use crate::routing::z_loss;
use crate::tensor::{Tape, Var};

/// One task of the stream: its class subset and the single-epoch sample
/// sequence.
#[derive(Debug, Clone)]
pub struct Task {
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

/// Ordered tasks with disjoint class subsets; every sample appears in
/// exactly one stream batch.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub batch_size: usize,
}

impl TaskStream {
    /// Shuffles each task's samples with a stream-specific seed.
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("stream batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = dataset
            .train_tasks
            .iter()
            .map(|t| {
                let mut samples = t.samples.clone();
                samples.shuffle(&mut rng);
                Task { classes: t.classes.clone(), samples }
            })
            .collect();
        Ok(TaskStream { tasks, batch_size })
    }

    pub fn batches(&self, task: usize) -> impl Iterator<Item = &[Sample]> {
        self.tasks[task].samples.chunks(self.batch_size)
    }
}

/// Per-step loss components, already reduced to plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub base: f64,
    pub dr: f64,
    pub diff: f64,
    pub cont: f64,
    pub z: f64,
    pub s6mod: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.base, self.dr, self.diff, self.cont, self.z, self.s6mod, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &LossValues) {
        self.base += other.base;
        self.dr += other.dr;
        self.diff += other.diff;
        self.cont += other.cont;
        self.z += other.z;
        self.s6mod += other.s6mod;
        self.total += other.total;
    }

    pub fn mean_of(values: &[LossValues]) -> LossValues {
        let mut acc = LossValues::default();
        for v in values {
            acc.add_assign(v);
        }
        let n = values.len().max(1) as f64;
        LossValues {
            base: acc.base / n,
            dr: acc.dr / n,
            diff: acc.diff / n,
            cont: acc.cont / n,
            z: acc.z / n,
            s6mod: acc.s6mod / n,
            total: acc.total / n,
        }
    }
}

/// Knobs of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub lr: f64,
    /// Run the branch and its losses; off reduces the step to plain ER.
    pub branch_on: bool,
    pub routing: RoutingMode,
}

/// Everything a step needs back from the forward pass: the total loss
/// node, the bound parameter handles, the pooled branch features for
/// the prototype update, and the loss components as plain values.
pub struct ForwardPass<'t> {
    pub total: Var<'t>,
    pub bound: crate::params::BoundParams<'t>,
    pub pooled_features: Vec<Vec<f64>>,
    pub losses: LossValues,
}

/// Forward pass and loss computation over a combined batch, without any
/// state mutation. Exposed separately so a step can be re-computed from
/// a checkpoint for verification.
pub fn compute_losses<'t>(
    tape: &'t Tape,
    model: &Model,
    batch: &[Sample],
    cfg: &StepConfig,
) -> Result<ForwardPass<'t>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let p = model.params.bind(tape);
    let g = model.config.input_size;
    let cin = model.config.input_channels;

    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let mut base_logits = Vec::with_capacity(batch.len());
    let mut feature_maps = Vec::with_capacity(batch.len());
    for sample in batch {
        let input = tape.constant(vec![g, g, cin], sample.input.clone())?;
        let (feature_map, _, logits) = model.forward_base(&p, input)?;
        base_logits.push(logits);
        feature_maps.push(feature_map);
    }
    let base = cross_entropy(tape, &base_logits, &labels)?;

    if !cfg.branch_on || model.branch.is_none() {
        let value = base.item();
        let losses = LossValues { base: value, total: value, ..Default::default() };
        return Ok(ForwardPass { total: base, bound: p, pooled_features: Vec::new(), losses });
    }

    let branch = model.branch.as_ref().expect("branch checked above");
    let mut mus = Vec::with_capacity(batch.len());
    let mut qs = Vec::with_capacity(batch.len());
    let mut delta_raws = Vec::with_capacity(batch.len());
    let mut gate_logits = Vec::with_capacity(batch.len());
    let mut pooled_features = Vec::with_capacity(batch.len());
    for (i, _) in batch.iter().enumerate() {
        let out = model.forward_branch(tape, &p, feature_maps[i], Some(labels[i]), cfg.routing)?;
        mus.push(out.mu);
        qs.push(out.q);
        delta_raws.push(out.delta_raw);
        gate_logits.push(out.gate_logits);
        pooled_features.push(out.pooled_x_hat);
    }

    let p_dists: Vec<Var<'t>> =
        base_logits.iter().map(|&l| l.softmax(0)).collect::<Result<_>>()?;
    let dr = dr_loss(tape, &mus, &labels, &branch.etf)?;
    let diff = diff_loss(tape, &p_dists, &qs, branch.config.detach_q)?;
    let cont = cont_loss(tape, &delta_raws, &labels)?;
    let z = z_loss(tape, &gate_logits)?;
    let branch_loss = s6mod_loss(dr, diff, cont, z, branch.config.alpha, branch.config.beta)?;
    let total = base.add(branch_loss.combined)?;

    let losses = LossValues {
        base: base.item(),
        dr: branch_loss.dr.item(),
        diff: branch_loss.diff.item(),
        cont: branch_loss.cont.item(),
        z: branch_loss.z.item(),
        s6mod: branch_loss.combined.item(),
        total: total.item(),
    };
    Ok(ForwardPass { total, bound: p, pooled_features, losses })
}

/// One online step: replay concatenation, loss, backward, SGD update,
/// prototype EMA, and reservoir insertion of the stream samples.
pub fn train_step(
    model: &mut Model,
    stream_batch: &[Sample],
    buffer: &mut ReservoirBuffer,
    replay_batch_size: usize,
    cfg: &StepConfig,
) -> Result<LossValues> {
    let replay = buffer.draw(replay_batch_size);
    let mut combined: Vec<Sample> = stream_batch.to_vec();
    combined.extend(replay);

    let tape = Tape::new();
    let pass = compute_losses(&tape, model, &combined, cfg)?;
    if !pass.losses.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss components: {:?}", pass.losses)));
    }

    tape.backward(pass.total)?;
    model.params.absorb_grads(&pass.bound)?;
    model.params.sgd_step(cfg.lr);
    model.params.zero_grad();

    if cfg.branch_on && model.branch.is_some() {
        let labels: Vec<usize> = combined.iter().map(|s| s.label).collect();
        model.prototypes.update(&pass.pooled_features, &labels)?;
    }

    for sample in stream_batch {
        buffer.update(sample.clone());
    }
    Ok(pass.losses)
}

/// Accuracy of the configured head on each provided test set, in order.
pub fn evaluate(model: &Model, test_sets: &[Vec<Sample>], head: PredictHead) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        if set.is_empty() {
            return Err(Error::Contract("empty test set".into()));
        }
        let mut correct = 0usize;
        for sample in set {
            if model.predict(&sample.input, head)? == sample.label {
                correct += 1;
            }
        }
        out.push(correct as f64 / set.len() as f64);
    }
    Ok(out)
}
