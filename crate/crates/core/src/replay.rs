//! Anti-forgetting replay as a min-max game over a parameter perturbation.
//!
//! The memory `M` is built per linear layer from the inputs that layer saw
//! on previously learned data: a weight row's gradient is a combination of
//! those inputs, so the span of the inputs is the set of directions that
//! move the layer's outputs on old data. Rows are bias-augmented, i.e. a
//! layer with `k` inputs has bases in `ℝ^{k+1}` acting on `[w_o, b_o]`.
//!
//! The perturbation `ξ` ascends the loss inside `M`; the parameters descend
//! along the complement of `M`, both using the gradient taken at `θ + ξ`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::eval::{accuracy, mean_std};
use crate::linalg::{dot, energy_basis, RealMatrix};
use crate::model::{ce_loss, ce_loss_and_grad, GradientSet, LayerShape, MlpClassifier, MlpDims};
use crate::rng::{purpose, rng_for_step};
use crate::stream::{downsample, LabeledSet};
use crate::train::{epoch_batches, shuffle_tag, Plateau};

/// Layer-wise orthonormal bases spanning previously used input directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceMemory {
    dims: MlpDims,
    /// One `(inputs + 1) × k` basis per linear layer.
    bases: [RealMatrix; 3],
    pub energy: f64,
    pub time_index: usize,
}

impl SubspaceMemory {
    /// Memory with zero-column bases: projects everything to zero.
    pub fn empty(dims: MlpDims) -> Self {
        let bases = dims.layers().map(|l| RealMatrix::zeros(l.inputs + 1, 0));
        Self {
            dims,
            bases,
            energy: 0.0,
            time_index: 0,
        }
    }

    pub fn bases(&self) -> &[RealMatrix; 3] {
        &self.bases
    }

    pub fn is_empty(&self) -> bool {
        self.bases.iter().all(|b| b.cols() == 0)
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    /// Layer-wise `Proj_M` applied to a flat parameter-shaped vector.
    pub fn project_flat(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("projection input", self.dims.param_count(), v.len())?;
        let mut out = vec![0.0; v.len()];
        for (layer, basis) in self.dims.layers().iter().zip(&self.bases) {
            project_layer(layer, basis, v, &mut out);
        }
        Ok(out)
    }

    /// `(Proj_M g, (I − Proj_M) g)`.
    pub fn split(&self, g: &GradientSet) -> Result<(GradientSet, GradientSet)> {
        if g.dims() != self.dims {
            return Err(invalid("gradient", "shape differs from the memory"));
        }
        let inside = self.project_flat(g.as_slice())?;
        let outside: Vec<f64> = g.as_slice().iter().zip(&inside).map(|(a, b)| a - b).collect();
        Ok((
            GradientSet::from_flat(self.dims, inside)?,
            GradientSet::from_flat(self.dims, outside)?,
        ))
    }
}

fn project_layer(layer: &LayerShape, basis: &RealMatrix, v: &[f64], out: &mut [f64]) {
    if basis.cols() == 0 {
        return;
    }
    let width = layer.inputs + 1;
    let mut row = vec![0.0; width];
    for o in 0..layer.outputs {
        for (slot, idx) in row.iter_mut().zip(layer.augmented_row(o)) {
            *slot = v[idx];
        }
        let mut projected = vec![0.0; width];
        for c in 0..basis.cols() {
            let mut coef = 0.0;
            for (k, r) in row.iter().enumerate() {
                coef += basis[(k, c)] * r;
            }
            for (k, p) in projected.iter_mut().enumerate() {
                *p += coef * basis[(k, c)];
            }
        }
        for (p, idx) in projected.iter().zip(layer.augmented_row(o)) {
            out[idx] = *p;
        }
    }
}

/// Builds `M` from the layer inputs the model produces on `sample`
/// (at most `max_rows` rows, uniformly subsampled).
pub fn build_subspace(
    model: &MlpClassifier,
    sample: &LabeledSet,
    energy: f64,
    max_rows: usize,
    seed: u64,
    time_index: usize,
) -> Result<SubspaceMemory> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(invalid("energy", "must lie in (0, 1]"));
    }
    let dims = model.dims();
    let mut mem = SubspaceMemory::empty(dims);
    mem.energy = energy;
    mem.time_index = time_index;
    if sample.is_empty() {
        return Ok(mem);
    }
    let rows = downsample(sample, max_rows, seed ^ purpose::SUBSPACE, time_index as u64);
    let xs = rows.features();
    let pass = model.forward_batch(xs)?;
    let inputs = [xs, &pass.hidden, &pass.embeddings];
    for ((slot, layer), acts) in mem.bases.iter_mut().zip(dims.layers()).zip(inputs) {
        // columns are samples: (inputs + 1) × n
        let n = acts.rows();
        let mut a = RealMatrix::zeros(layer.inputs + 1, n);
        for (j, row) in acts.row_iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                a[(k, j)] = *v;
            }
            a[(layer.inputs, j)] = 1.0;
        }
        *slot = energy_basis(&a, energy)?;
    }
    Ok(mem)
}

/// Weight perturbation `ξ`, laid out like the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    values: Vec<f64>,
}

impl Perturbation {
    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perturbation"));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

fn perturbed(model: &MlpClassifier, xi: &Perturbation) -> Result<MlpClassifier> {
    ensure_dim("perturbation", model.param_count(), xi.values.len())?;
    let mut shifted = model.clone();
    for (p, x) in shifted.params_mut().iter_mut().zip(&xi.values) {
        *p += x;
    }
    Ok(shifted)
}

/// `ξ ← ξ + η₁ · Proj_M ∇L(θ + ξ)` on `batch`.
pub fn xi_step(
    xi: &Perturbation,
    model: &MlpClassifier,
    batch: &LabeledSet,
    mem: &SubspaceMemory,
    eta1: f64,
) -> Result<Perturbation> {
    if !(eta1 > 0.0 && eta1.is_finite()) {
        return Err(invalid("eta1", "must be positive"));
    }
    let (_, g) = ce_loss_and_grad(&perturbed(model, xi)?, batch.features(), batch.labels())?;
    let (inside, _) = mem.split(&g)?;
    let values = xi
        .values
        .iter()
        .zip(inside.as_slice())
        .map(|(x, d)| x + eta1 * d)
        .collect();
    Ok(Perturbation { values })
}

/// `θ ← θ − η₂ · (I − Proj_M) ∇L(θ + ξ)` on `batch`. Returns the batch
/// loss at `θ + ξ`.
pub fn theta_step(
    model: &mut MlpClassifier,
    xi: &Perturbation,
    batch: &LabeledSet,
    mem: &SubspaceMemory,
    eta2: f64,
) -> Result<f64> {
    if !(eta2 > 0.0 && eta2.is_finite()) {
        return Err(invalid("eta2", "must be positive"));
    }
    let (loss, g) = ce_loss_and_grad(&perturbed(model, xi)?, batch.features(), batch.labels())?;
    let (_, outside) = mem.split(&g)?;
    model.apply_step(&outside, eta2)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Energy kept when rebuilding `M`.
    pub energy: f64,
    /// Cap on the rows used to rebuild `M`.
    pub sample_rows: usize,
    /// Keep `ξ` at zero.
    pub freeze_xi: bool,
    pub early_stop: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            eta1: 0.01,
            eta2: 0.01,
            epochs: 20,
            batch_size: 64,
            energy: 0.97,
            sample_rows: 512,
            freeze_xi: false,
            early_stop: true,
        }
    }
}

/// Shuffle tag used by [`replay_train`] at `time_index`. Passing it to
/// [`crate::train::fit`] reproduces the same mini-batch order.
pub fn replay_tag(time_index: usize) -> u64 {
    time_index as u64 | (1 << 40)
}

/// Replays gold ∪ pseudo-labeled data, alternating one `θ` step and one
/// `ξ` step per mini-batch. `ξ` starts at zero and is dropped afterwards.
/// Returns the memory rebuilt for `time_index` from the replayed data.
#[allow(clippy::too_many_arguments)]
pub fn replay_train(
    model: &mut MlpClassifier,
    gold: &LabeledSet,
    pseudo: &LabeledSet,
    mem: &SubspaceMemory,
    cfg: &ReplayConfig,
    seed: u64,
    time_index: usize,
) -> Result<SubspaceMemory> {
    let data = gold.concat(pseudo)?;
    let mut xi = Perturbation::zeros(model.dims());
    let mut plateau = Plateau::default();
    let tag = replay_tag(time_index);
    for epoch in 0..cfg.epochs {
        if data.is_empty() {
            break;
        }
        for batch in epoch_batches(data.len(), cfg.batch_size, seed, shuffle_tag(tag, epoch)) {
            let part = data.select(&batch);
            theta_step(model, &xi, &part, mem, cfg.eta2)?;
            if !cfg.freeze_xi {
                xi = xi_step(&xi, model, &part, mem, cfg.eta1)?;
            }
        }
        if cfg.early_stop {
            let loss = ce_loss(model, data.features(), data.labels())?;
            if plateau.observe(loss) {
                break;
            }
        }
    }
    let energy = if cfg.energy > 0.0 { cfg.energy } else { 1.0 };
    build_subspace(model, &data, energy, cfg.sample_rows, seed, time_index)
}

/// Mean accuracy under uniform parameter noise of half-width `bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub bound: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// For each bound `b`, averages test accuracy over `draws` perturbations
/// with entries uniform in `[−b, b]`. `b = 0` is the clean accuracy.
pub fn flatness_probe(
    model: &MlpClassifier,
    test: &LabeledSet,
    bounds: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<ProbePoint>> {
    if draws == 0 {
        return Err(invalid("draws", "must be at least 1"));
    }
    if let Some(b) = bounds.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(invalid("bound", alloc::format!("{b} is not a nonnegative number")));
    }
    let clean = accuracy(&model.predict(test.features())?, test.labels())?;
    let mut points = Vec::with_capacity(bounds.len());
    for (k, &b) in bounds.iter().enumerate() {
        if b == 0.0 {
            points.push(ProbePoint {
                bound: b,
                mean_acc: clean,
                std_acc: 0.0,
            });
            continue;
        }
        let mut rng = rng_for_step(seed, purpose::PROBE, k as u64);
        let mut accs = Vec::with_capacity(draws);
        let mut noisy = model.clone();
        for _ in 0..draws {
            for (p, base) in noisy.params_mut().iter_mut().zip(model.params()) {
                *p = base + rng.random_range(-b..=b);
            }
            accs.push(accuracy(&noisy.predict(test.features())?, test.labels())?);
        }
        let stats = mean_std(&accs)?;
        points.push(ProbePoint {
            bound: b,
            mean_acc: stats.mean,
            std_acc: stats.std,
        });
    }
    Ok(points)
}

/// Largest |⟨Δθ row, b⟩| over every layer row and basis column.
pub fn max_basis_overlap(mem: &SubspaceMemory, delta: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (layer, basis) in mem.dims.layers().iter().zip(&mem.bases) {
        for o in 0..layer.outputs {
            let row: Vec<f64> = layer.augmented_row(o).map(|i| delta[i]).collect();
            for c in 0..basis.cols() {
                worst = worst.max(libm::fabs(dot(&row, &basis.column(c))));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn toy() -> (MlpClassifier, LabeledSet) {
        let dims = MlpDims::new(2, 6, 4, 2);
        let model = MlpClassifier::new(dims, &mut rng_for(4, 0)).unwrap();
        let rows: Vec<[f64; 2]> = (0..24)
            .map(|i| [(i as f64 * 0.37).sin() * 2.0, (i as f64 * 0.91).cos()])
            .collect();
        let labels = (0..24).map(|i| i % 2).collect();
        let data = LabeledSet::new(RealMatrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
        (model, data)
    }

    #[test]
    fn empty_memory_leaves_xi_unchanged() {
        let (model, data) = toy();
        let mem = SubspaceMemory::empty(model.dims());
        let xi = Perturbation::zeros(model.dims());
        assert_eq!(xi_step(&xi, &model, &data, &mem, 0.01).unwrap(), xi);
    }

    #[test]
    fn full_span_freezes_theta_and_moves_xi_by_gradient() {
        let (model, data) = toy();
        let mem = build_subspace(&model, &data, 1.0, 512, 0, 0).unwrap();
        // 24 generic samples span every augmented input space here
        for (b, l) in mem.bases().iter().zip(model.dims().layers()) {
            assert_eq!(b.cols(), l.inputs + 1);
        }
        let mut moved = model.clone();
        let xi = Perturbation::zeros(model.dims());
        theta_step(&mut moved, &xi, &data, &mem, 0.01).unwrap();
        for (a, b) in moved.params().iter().zip(model.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        let next = xi_step(&xi, &model, &data, &mem, 0.01).unwrap();
        let (_, g) = ce_loss_and_grad(&model, data.features(), data.labels()).unwrap();
        for (x, gi) in next.as_slice().iter().zip(g.as_slice()) {
            assert!((x - 0.01 * gi).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_activations_give_empty_memory() {
        let (model, _) = toy();
        let zero = MlpClassifier::zeros(model.dims()).unwrap();
        let xs = RealMatrix::zeros(5, 2);
        let data = LabeledSet::new(xs, vec![0; 5], 2).unwrap();
        let mem = build_subspace(&zero, &data, 0.99, 512, 0, 0).unwrap();
        // only the bias coordinate is active: one direction per layer
        for b in mem.bases() {
            assert_eq!(b.cols(), 1);
        }
        let empty = build_subspace(&model, &LabeledSet::empty(2, 2), 0.9, 512, 0, 0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn theta_update_is_orthogonal_to_memory() {
        let (model, data) = toy();
        let mem = build_subspace(&model, &data.select(&[0, 1, 2]), 0.9, 512, 0, 0).unwrap();
        assert!(!mem.is_empty());
        let mut moved = model.clone();
        let mut xi = Perturbation::zeros(model.dims());
        xi = xi_step(&xi, &model, &data, &mem, 0.01).unwrap();
        theta_step(&mut moved, &xi, &data, &mem, 0.01).unwrap();
        let delta: Vec<f64> = moved.params().iter().zip(model.params()).map(|(a, b)| a - b).collect();
        assert!(max_basis_overlap(&mem, &delta) <= 1e-8);
        // ξ stays inside M
        let back = mem.project_flat(xi.as_slice()).unwrap();
        for (a, b) in back.iter().zip(xi.as_slice()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_epochs_keep_model_and_rebuild_memory() {
        let (model, data) = toy();
        let mut m = model.clone();
        let cfg = ReplayConfig {
            epochs: 0,
            ..ReplayConfig::default()
        };
        let mem = replay_train(
            &mut m,
            &data,
            &LabeledSet::empty(2, 2),
            &SubspaceMemory::empty(model.dims()),
            &cfg,
            1,
            3,
        )
        .unwrap();
        assert_eq!(m, model);
        assert_eq!(mem.time_index, 3);
        assert!(!mem.is_empty());
    }

    #[test]
    fn probe_zero_bound_is_clean_accuracy() {
        let (model, data) = toy();
        let clean = accuracy(&model.predict(data.features()).unwrap(), data.labels()).unwrap();
        let pts = flatness_probe(&model, &data, &[0.0, 0.1], 3, 1).unwrap();
        assert_eq!(pts[0].mean_acc, clean);
        assert!(flatness_probe(&model, &data, &[-0.1], 3, 1).is_err());
        assert!(flatness_probe(&model, &data, &[0.1], 0, 1).is_err());
    }
}
