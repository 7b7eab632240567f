//! Fixed equiangular tight frame classifier.
//!
//! The weight matrix is built once and never updated by the optimizer:
//! K unit-norm rows in d dimensions (d ≥ K−1) with every pairwise inner
//! product equal to −1/(K−1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EtfClassifier {
    weights: Tensor,
    classes: usize,
    dim: usize,
}

impl EtfClassifier {
    /// Builds the frame: the K simplex vertices sqrt(K/(K−1))·(e_k − 1/K)
    /// expressed in an orthonormal basis of the subspace orthogonal to
    /// the all-ones vector, then rotated into d dimensions by a seeded
    /// random orthonormal map.
    pub fn build(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("ETF needs at least 2 classes".into()));
        }
        if dim < classes - 1 {
            return Err(Error::Config(format!(
                "ETF needs feature dim >= classes-1 ({} < {})",
                dim,
                classes - 1
            )));
        }
        let k = classes;
        // Helmert rows: orthonormal basis of the complement of the
        // all-ones direction. Row j has j ones, then −j, then zeros,
        // scaled by 1/sqrt(j(j+1)).
        let mut helmert = vec![vec![0.0f64; k]; k - 1];
        for j in 1..k {
            let s = 1.0 / ((j * (j + 1)) as f64).sqrt();
            for e in helmert[j - 1].iter_mut().take(j) {
                *e = s;
            }
            helmert[j - 1][j] = -(j as f64) * s;
        }
        // Seeded random orthonormal columns: QR of a Gaussian d×(k−1)
        // matrix by modified Gram–Schmidt with one re-orthogonalization
        // pass.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<Vec<f64>> = (0..k - 1)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        for j in 0..k - 1 {
            for _ in 0..2 {
                for i in 0..j {
                    let dot: f64 = u[j].iter().zip(&u[i]).map(|(a, b)| a * b).sum();
                    let ui = u[i].clone();
                    for (a, b) in u[j].iter_mut().zip(ui) {
                        *a -= dot * b;
                    }
                }
            }
            let norm: f64 = u[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("degenerate random basis for ETF".into()));
            }
            for v in u[j].iter_mut() {
                *v /= norm;
            }
        }
        // w_c = sqrt(K/(K−1)) · U · (H e_c)
        let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
        let mut w = vec![0.0f64; k * dim];
        for c in 0..k {
            for di in 0..dim {
                let mut s = 0.0;
                for (j, h_row) in helmert.iter().enumerate() {
                    s += u[j][di] * h_row[c];
                }
                w[c * dim + di] = scale * s;
            }
        }
        Ok(EtfClassifier { weights: Tensor::new(vec![k, dim], w)?, classes: k, dim })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Row `c` of the frame.
    pub fn class_vector(&self, c: usize) -> &[f64] {
        &self.weights.data()[c * self.dim..(c + 1) * self.dim]
    }

    /// W·μ as a [K] node; W enters the tape as a constant.
    pub fn logits<'t>(&self, tape: &'t Tape, mu: Var<'t>) -> Result<Var<'t>> {
        let w = tape.constant(vec![self.classes, self.dim], self.weights.data().to_vec())?;
        w.matmul(mu.reshape(vec![self.dim, 1])?)?.reshape(vec![self.classes])
    }

    /// L2 norm of each row (should all be 1).
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.class_vector(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Inner products of all row pairs c < c' (should all be −1/(K−1)).
    pub fn pairwise_dots(&self) -> Vec<f64> {
        let mut dots = Vec::new();
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                dots.push(
                    self.class_vector(a)
                        .iter()
                        .zip(self.class_vector(b))
                        .map(|(x, y)| x * y)
                        .sum(),
                );
            }
        }
        dots
    }
}
