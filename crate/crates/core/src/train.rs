//! Plain mini-batch descent with an optional mean-teacher companion.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::model::{ce_loss, ce_loss_and_grad, consistency_loss_and_grad, MlpClassifier};
use crate::rng::{purpose, rng_for_step};
use crate::stream::LabeledSet;

/// Relative loss improvement below which an epoch counts as a plateau.
pub const PLATEAU_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once an epoch improves the full-data loss by less than
    /// [`PLATEAU_TOL`] relative.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            batch_size: 64,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid("lr", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// EMA teacher and the weight of its consistency term.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTeacher {
    pub teacher: MlpClassifier,
    pub weight: f64,
    pub momentum: f64,
}

/// Shuffled mini-batch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, tag: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for_step(seed, purpose::SHUFFLE, tag));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Mixes a run-level tag and an epoch index into one shuffle tag.
pub fn shuffle_tag(run_tag: u64, epoch: usize) -> u64 {
    run_tag.wrapping_mul(0x1_0000_0001).wrapping_add(epoch as u64)
}

/// Tracks the plateau rule across epochs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plateau {
    previous: Option<f64>,
}

impl Plateau {
    /// Records the loss after an epoch; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        let stop = match self.previous {
            Some(prev) if prev > 0.0 => (prev - loss) / prev < PLATEAU_TOL,
            Some(_) => true,
            None => false,
        };
        self.previous = Some(loss);
        stop
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

/// Mini-batch cross-entropy descent `θ ← θ − lr·∇L`. `tag` separates the
/// shuffle streams of different calls under one seed.
pub fn fit(
    model: &mut MlpClassifier,
    data: &LabeledSet,
    cfg: &TrainConfig,
    seed: u64,
    tag: u64,
    mut teacher: Option<&mut MeanTeacher>,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut report = FitReport {
        epochs_run: 0,
        final_loss: None,
    };
    if data.is_empty() {
        return Ok(report);
    }
    let mut plateau = Plateau::default();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, seed, shuffle_tag(tag, epoch)) {
            let part = data.select(&batch);
            let (_, mut grads) = ce_loss_and_grad(model, part.features(), part.labels())?;
            if let Some(mt) = teacher.as_deref_mut() {
                if mt.weight > 0.0 {
                    let (_, g) =
                        consistency_loss_and_grad(model, &mt.teacher, part.features(), mt.weight)?;
                    grads.add_scaled(&g, 1.0)?;
                }
            }
            model.apply_step(&grads, cfg.lr)?;
            if let Some(mt) = teacher.as_deref_mut() {
                mt.teacher.ema_update(model, mt.momentum)?;
            }
        }
        report.epochs_run = epoch + 1;
        if cfg.early_stop {
            let loss = ce_loss(model, data.features(), data.labels())?;
            report.final_loss = Some(loss);
            if plateau.observe(loss) {
                break;
            }
        }
    }
    Ok(report)
}
