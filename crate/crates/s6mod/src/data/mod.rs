//! Dataset construction: seeded synthetic streams, CIFAR binary
//! ingestion, and embedding export.

pub mod cifar;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tape;

/// One labelled input: a flattened `[g, g, c]` grid in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// One task's worth of training data.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

/// A class-incremental dataset: per-task train splits plus the matching
/// test sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub input_size: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub train_tasks: Vec<TaskData>,
    /// test_sets[t] holds the held-out samples of task t's classes.
    pub test_sets: Vec<Vec<Sample>>,
}

/// Parameters of the synthetic Gaussian-cluster stream. Generation is a
/// pure function of this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clusters_per_class: usize,
    /// Cluster means sit on a circle of this radius.
    pub radius: f64,
    /// Seeded angular jitter as a fraction of the cluster spacing.
    pub angle_jitter: f64,
    /// Standard deviation of each Gaussian cluster.
    pub spread: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Rendered grid side length.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            clusters_per_class: 2,
            radius: 1.0,
            angle_jitter: 0.25,
            spread: 0.18,
            samples_per_class: 500,
            test_per_class: 100,
            grid: 8,
            seed: 0,
        }
    }
}

/// Renders a 2-D point into a `grid`×`grid`×1 map of radial bumps.
/// The grid spans [−span, span]² and the bump width matches the cell
/// spacing, so nearby points light up overlapping but distinct cells.
fn render_point(x: f64, y: f64, grid: usize, span: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid * grid);
    let step = 2.0 * span / (grid as f64 - 1.0);
    let inv = 1.0 / (2.0 * step * step);
    for gy in 0..grid {
        let cy = -span + step * gy as f64;
        for gx in 0..grid {
            let cx = -span + step * gx as f64;
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            out.push((-d2 * inv).exp());
        }
    }
    out
}

/// Generates the labelled sample set of a spec: per class,
/// `clusters_per_class` Gaussian clusters whose means sit at seeded
/// angles on the circle, rendered onto the grid.
pub fn generate_synthetic(spec: &SyntheticSpec, tasks: usize) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic stream needs at least 2 classes".into()));
    }
    if tasks == 0 || spec.classes % tasks != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot split into {} equal tasks",
            spec.classes, tasks
        )));
    }
    if spec.clusters_per_class == 0 || spec.samples_per_class == 0 {
        return Err(Error::Config("empty synthetic spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_clusters = spec.classes * spec.clusters_per_class;
    let spacing = std::f64::consts::TAU / total_clusters as f64;
    let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    // Cluster j of class k sits at slot j·K + k: consecutive classes are
    // neighbours on the circle and a class's own clusters sit far apart.
    let mut centers = vec![(0.0f64, 0.0f64); total_clusters];
    for k in 0..spec.classes {
        for j in 0..spec.clusters_per_class {
            let slot = j * spec.classes + k;
            let jitter: f64 = (rng.gen::<f64>() - 0.5) * 2.0 * spec.angle_jitter * spacing;
            let angle = phase + slot as f64 * spacing + jitter;
            centers[k * spec.clusters_per_class + j] =
                (spec.radius * angle.cos(), spec.radius * angle.sin());
        }
    }

    let span = spec.radius + 3.0 * spec.spread.max(0.05);
    let draw_class = |k: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let j = rng.gen_range(0..spec.clusters_per_class);
                let (cx, cy) = centers[k * spec.clusters_per_class + j];
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                let x = cx + spec.spread * dx;
                let y = cy + spec.spread * dy;
                Sample { input: render_point(x, y, spec.grid, span), label: k }
            })
            .collect()
    };

    let per_task = spec.classes / tasks;
    let mut train_tasks = Vec::with_capacity(tasks);
    let mut test_sets = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let mut samples = Vec::new();
        let mut test = Vec::new();
        for &k in &classes {
            samples.extend(draw_class(k, spec.samples_per_class, &mut rng));
            test.extend(draw_class(k, spec.test_per_class, &mut rng));
        }
        train_tasks.push(TaskData { classes, samples });
        test_sets.push(test);
    }
    Ok(Dataset {
        input_size: spec.grid,
        input_channels: 1,
        classes: spec.classes,
        train_tasks,
        test_sets,
    })
}

/// Writes one row per sample — label, then the pooled backbone feature —
/// as comma-separated text with a single header line.
pub fn export_embeddings(model: &Model, samples: &[Sample], path: &Path) -> Result<()> {
    let dim = model.backbone.out_channels;
    let mut out = String::new();
    out.push_str("label");
    for i in 0..dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for sample in samples {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let g = model.config.input_size;
        let input = tape.constant(vec![g, g, model.config.input_channels], sample.input.clone())?;
        let (_, pooled, _) = model.forward_base(&p, input)?;
        out.push_str(&sample.label.to_string());
        for v in pooled.value() {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub use cifar::{read_cifar_binary, write_cifar_binary, CifarVariant, ImageRecord};
