//! Accuracy matrix and the two stream metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math::sqrt;

/// Fraction of positions where `preds` equals `truth`.
pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    ensure_dim("accuracy", truth.len(), preds.len())?;
    if preds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `R[i][j]`: accuracy after adapting through step `i` on step `j`'s test
/// split. Steps are 1-based in the API; only `j ≤ i` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AccMatrix {
    steps: usize,
    entries: Vec<Option<f64>>,
}

impl AccMatrix {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            entries: vec![None; steps * steps],
        }
    }

    /// Builds a matrix from its lower-triangular rows (`rows[i].len() == i + 1`).
    pub fn from_lower_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            ensure_dim("accuracy matrix row", i + 1, row.len())?;
            for (j, &v) in row.iter().enumerate() {
                m.set(i + 1, j + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn slot(&self, i: usize, j: usize) -> Result<usize> {
        if i == 0 || j == 0 || i > self.steps || j > i {
            return Err(invalid(
                "index",
                alloc::format!("R[{i}][{j}] outside lower triangle of {} steps", self.steps),
            ));
        }
        Ok((i - 1) * self.steps + (j - 1))
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(invalid("accuracy", "must lie in [0, 1]"));
        }
        let k = self.slot(i, j)?;
        self.entries[k] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.slot(i, j).ok().and_then(|k| self.entries[k])
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or(Error::MissingEntry { row: i, col: j })
    }

    /// Row `i` (1-based), entries `1..=i`.
    pub fn row(&self, i: usize) -> Vec<Option<f64>> {
        (1..=i).map(|j| self.get(i, j)).collect()
    }

    /// Mean of the diagonal: adaptation quality.
    pub fn acc_t(&self) -> Result<f64> {
        if self.steps == 0 {
            return Err(Error::Empty("accuracy matrix"));
        }
        let mut total = 0.0;
        for i in 1..=self.steps {
            total += self.require(i, i)?;
        }
        Ok(total / self.steps as f64)
    }

    /// Mean of the final row: memorization quality.
    pub fn acc_final(&self) -> Result<f64> {
        if self.steps == 0 {
            return Err(Error::Empty("accuracy matrix"));
        }
        let t = self.steps;
        let mut total = 0.0;
        for j in 1..=t {
            total += self.require(t, j)?;
        }
        Ok(total / t as f64)
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean ± sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("mean_std"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    Ok(MeanStd {
        mean,
        std,
        count: values.len(),
    })
}
