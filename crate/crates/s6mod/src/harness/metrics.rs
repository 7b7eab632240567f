//! Continual learning metric suite over the task-accuracy grid.

use crate::error::{Error, Result};

/// Lower-triangular grid A[t][T]: accuracy on task `t` after finishing
/// task `T` (both 1-indexed, t ≤ T).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// entries[T-1][t-1]
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { tasks, rows: Vec::new() }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    /// Records the evaluation row after finishing task `t_now`
    /// (1-indexed): accuracies on tasks 1..=t_now, in order.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t_now = self.rows.len() + 1;
        if t_now > self.tasks {
            return Err(Error::Contract("accuracy matrix already complete".into()));
        }
        if row.len() != t_now {
            return Err(Error::Contract(format!(
                "row after task {t_now} must have {t_now} entries, got {}",
                row.len()
            )));
        }
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("accuracies must lie in [0,1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// A[t][T], 1-indexed, defined for t ≤ T ≤ completed.
    pub fn get(&self, t: usize, t_after: usize) -> Result<f64> {
        if t == 0 || t_after < t || t_after > self.rows.len() {
            return Err(Error::Contract(format!("A[{t}][{t_after}] is not defined")));
        }
        Ok(self.rows[t_after - 1][t - 1])
    }

    /// Average accuracy after task T: (1/T)·Σ_t A[t][T].
    pub fn acc(&self, t_after: usize) -> Result<f64> {
        if t_after == 0 || t_after > self.rows.len() {
            return Err(Error::Contract(format!("row {t_after} incomplete")));
        }
        let row = &self.rows[t_after - 1];
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Average forgetting after task T ≥ 2:
    /// (1/(T−1))·Σ_{t=2..T} max_{i<t}(A[i][i] − A[i][t]).
    pub fn af(&self, t_after: usize) -> Result<f64> {
        if t_after < 2 {
            return Err(Error::Contract("average forgetting needs at least 2 tasks".into()));
        }
        if t_after > self.rows.len() {
            return Err(Error::Contract(format!("row {t_after} incomplete")));
        }
        let mut sum = 0.0;
        for t in 2..=t_after {
            let mut worst = f64::NEG_INFINITY;
            for i in 1..t {
                worst = worst.max(self.get(i, i)? - self.get(i, t)?);
            }
            sum += worst;
        }
        Ok(sum / (t_after - 1) as f64)
    }

    /// New-task accuracy after task T: (1/T)·Σ_t A[t][t].
    pub fn nacc(&self, t_after: usize) -> Result<f64> {
        if t_after == 0 || t_after > self.rows.len() {
            return Err(Error::Contract(format!("diagonal through {t_after} incomplete")));
        }
        let mut sum = 0.0;
        for t in 1..=t_after {
            sum += self.get(t, t)?;
        }
        Ok(sum / t_after as f64)
    }
}
