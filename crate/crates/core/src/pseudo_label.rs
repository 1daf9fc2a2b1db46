//! Robust pseudo-label generation.
//!
//! The model trained on gold and lookback data seeds class prototypes on the
//! new segment (softmax-weighted embedding means). Nearest-prototype
//! clustering under cosine distance then re-labels the segment, while the
//! prototypes are pulled onto the label subspace learned from the gold
//! prototypes at `t = 0`. Every clustering round also takes one descent step
//! on `L_CE + L_PL + w·‖U − U B Bᵀ‖²`.
//!
//! Centroid matrices are `d × C`: column `c` is the prototype of class `c`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::linalg::{cosine_distance, energy_cutoff, norm, svd, RealMatrix, NORM_EPS};
use crate::model::{ce_logit_grad, ce_loss_and_grad, softmax_rows, MlpClassifier};
use crate::stream::LabeledSet;
use crate::train::{fit, MeanTeacher, TrainConfig};

/// Softmax mass below which a class gets no initial prototype of its own.
pub const MIN_CLASS_MASS: f64 = 1e-8;

/// Per-class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `d × C`.
    pub centroids: RealMatrix,
    pub counts: Vec<usize>,
}

impl CentroidSet {
    pub fn classes(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, c: usize) -> Vec<f64> {
        self.centroids.column(c)
    }
}

/// Fixed label factor from the gold prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    /// `C × r`, orthonormal columns: leading right singular vectors of `U₀`.
    right_basis: RealMatrix,
}

impl LabelEmbedding {
    pub fn rank(&self) -> usize {
        self.right_basis.cols()
    }

    pub fn right_basis(&self) -> &RealMatrix {
        &self.right_basis
    }

    /// `V̂ = B_rᵀ`, `r × C`.
    pub fn label_factor(&self) -> RealMatrix {
        self.right_basis.transpose()
    }

    /// `B_r B_rᵀ`, the `C × C` projector onto the label subspace.
    pub fn projector(&self) -> RealMatrix {
        self.right_basis
            .matmul(&self.right_basis.transpose())
            .expect("basis shapes agree")
    }
}

/// Prototype initialization from soft predictions:
/// `u_c = Σ_i p_ic e_i / Σ_i p_ic`.
///
/// `embeddings` is `n × d`, `probs` is `n × C`.
pub fn init_centroids(embeddings: &RealMatrix, probs: &RealMatrix) -> Result<CentroidSet> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(Error::Empty("segment"));
    }
    ensure_dim("class probabilities", n, probs.rows())?;
    let (d, c) = (embeddings.cols(), probs.cols());
    let mut centroids = RealMatrix::zeros(d, c);
    let mut mass = vec![0.0; c];
    let mut global = vec![0.0; d];
    let mut counts = vec![0usize; c];
    for i in 0..n {
        let e = embeddings.row(i);
        let p = probs.row(i);
        for (g, v) in global.iter_mut().zip(e) {
            *g += v / n as f64;
        }
        for class in 0..c {
            mass[class] += p[class];
            for k in 0..d {
                centroids[(k, class)] += p[class] * e[k];
            }
        }
        counts[crate::model::argmax(p)] += 1;
    }
    for class in 0..c {
        if mass[class] < MIN_CLASS_MASS {
            centroids.set_column(class, &global);
            counts[class] = 0;
        } else {
            for k in 0..d {
                centroids[(k, class)] /= mass[class];
            }
        }
    }
    Ok(CentroidSet { centroids, counts })
}

/// Nearest prototype under cosine distance, lowest class index on ties.
pub fn assign_labels(centroids: &RealMatrix, embeddings: &RealMatrix) -> Result<Vec<usize>> {
    ensure_dim("embedding width", centroids.rows(), embeddings.cols())?;
    let cols: Vec<Vec<f64>> = (0..centroids.cols()).map(|c| centroids.column(c)).collect();
    let usable: Vec<bool> = cols.iter().map(|u| norm(u) > NORM_EPS).collect();
    if !usable.iter().any(|&u| u) {
        return Err(Error::DegenerateVector);
    }
    let mut labels = Vec::with_capacity(embeddings.rows());
    for e in embeddings.row_iter() {
        if norm(e) <= NORM_EPS {
            return Err(Error::DegenerateVector);
        }
        let mut best: Option<(usize, f64)> = None;
        for (c, u) in cols.iter().enumerate() {
            // a collapsed prototype cannot attract points
            if !usable[c] {
                continue;
            }
            let d = cosine_distance(e, u)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        labels.push(best.map(|(c, _)| c).unwrap_or(0));
    }
    Ok(labels)
}

/// Prototype `c` becomes the mean of the embeddings labeled `c`; classes
/// with no points keep their previous prototype and get count 0.
pub fn update_centroids(
    embeddings: &RealMatrix,
    labels: &[usize],
    prev: &CentroidSet,
) -> Result<CentroidSet> {
    ensure_dim("labels", embeddings.rows(), labels.len())?;
    ensure_dim("embedding width", prev.centroids.rows(), embeddings.cols())?;
    let c = prev.classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let d = embeddings.cols();
    let mut sums = RealMatrix::zeros(d, c);
    let mut counts = vec![0usize; c];
    for (e, &y) in embeddings.row_iter().zip(labels) {
        counts[y] += 1;
        for k in 0..d {
            sums[(k, y)] += e[k];
        }
    }
    let mut centroids = prev.centroids.clone();
    for class in 0..c {
        if counts[class] > 0 {
            for k in 0..d {
                centroids[(k, class)] = sums[(k, class)] / counts[class] as f64;
            }
        }
    }
    Ok(CentroidSet { centroids, counts })
}

/// Per-class means of `embeddings` under the true `labels`.
pub fn class_means(embeddings: &RealMatrix, labels: &[usize], classes: usize) -> Result<RealMatrix> {
    let empty = CentroidSet {
        centroids: RealMatrix::zeros(embeddings.cols(), classes),
        counts: vec![0; classes],
    };
    Ok(update_centroids(embeddings, labels, &empty)?.centroids)
}

/// Factorizes the gold prototype matrix and keeps the leading right
/// singular vectors carrying `energy` of its squared spectrum (at least one).
pub fn gold_label_embedding(u0: &RealMatrix, energy: f64) -> Result<LabelEmbedding> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(invalid("energy", "must lie in (0, 1]"));
    }
    let dec = svd(u0)?;
    let rank = dec.numerical_rank();
    if rank == 0 {
        return Err(invalid("u0", "gold prototype matrix has rank 0"));
    }
    let r = energy_cutoff(&dec.singular_values[..rank], energy).max(1);
    let classes = u0.cols();
    let mut right_basis = RealMatrix::zeros(classes, r);
    for k in 0..r {
        right_basis.set_column(k, &dec.right_vectors.column(k));
    }
    Ok(LabelEmbedding { right_basis })
}

/// `U B_r B_rᵀ`: the closest matrix to `U` of the form `Hᵀ V̂`.
pub fn refine_centroids(u: &RealMatrix, emb: &LabelEmbedding) -> Result<RealMatrix> {
    ensure_dim("refine class count", emb.right_basis.rows(), u.cols())?;
    u.matmul(&emb.projector())
}

/// Squared distance `‖U − U B Bᵀ‖²_F` between prototypes and their refinement.
pub fn refinement_residual(u: &RealMatrix, emb: &LabelEmbedding) -> Result<f64> {
    let refined = refine_centroids(u, emb)?;
    let r = u.sub(&refined)?.frobenius_norm();
    Ok(r * r)
}

/// How embeddings are prepared before any prototype arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingGeometry {
    /// Subtract the batch mean before normalizing.
    pub center: bool,
}

impl Default for EmbeddingGeometry {
    fn default() -> Self {
        Self { center: true }
    }
}

/// Prepared embeddings together with what is needed to backpropagate
/// through the preparation.
#[derive(Debug, Clone)]
pub struct PreparedEmbeddings {
    /// Unit rows, `n × d`.
    pub unit: RealMatrix,
    norms: Vec<f64>,
    centered: bool,
}

impl EmbeddingGeometry {
    pub fn prepare(&self, raw: &RealMatrix) -> Result<PreparedEmbeddings> {
        let (n, d) = (raw.rows(), raw.cols());
        let mut unit = raw.clone();
        if self.center && n > 0 {
            let mut mean = vec![0.0; d];
            for row in raw.row_iter() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            for i in 0..n {
                for (v, m) in unit.row_mut(i).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
        }
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = unit.row_mut(i);
            let len = norm(row);
            if len <= NORM_EPS {
                return Err(Error::DegenerateVector);
            }
            row.iter_mut().for_each(|v| *v /= len);
            norms.push(len);
        }
        Ok(PreparedEmbeddings {
            unit,
            norms,
            centered: self.center,
        })
    }
}

impl PreparedEmbeddings {
    /// Maps a gradient on the unit rows back to the raw embeddings.
    pub fn backward(&self, d_unit: &RealMatrix) -> RealMatrix {
        let (n, d) = (self.unit.rows(), self.unit.cols());
        let mut out = RealMatrix::zeros(n, d);
        for i in 0..n {
            let z = self.unit.row(i);
            let g = d_unit.row(i);
            let along: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
            for (k, slot) in out.row_mut(i).iter_mut().enumerate() {
                *slot = (g[k] - z[k] * along) / self.norms[i];
            }
        }
        if self.centered && n > 0 {
            let mut mean = vec![0.0; d];
            for row in out.row_iter() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            for i in 0..n {
                for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
        }
        out
    }
}

/// Settings of one generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Fit on gold ∪ lookback before clustering.
    pub warmup: TrainConfig,
    /// Step size of the joint descent step taken in each clustering round.
    pub lr: f64,
    /// Maximum clustering rounds.
    pub iterations: usize,
    /// Stop once fewer than this fraction of labels change in a round.
    pub change_tol: f64,
    /// Weight of the refinement residual; 0 disables refinement altogether.
    pub ils_weight: f64,
    pub geometry: EmbeddingGeometry,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            warmup: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            lr: 0.01,
            iterations: 10,
            change_tol: 1e-3,
            ils_weight: 0.1,
            geometry: EmbeddingGeometry::default(),
        }
    }
}

impl GenerationConfig {
    pub fn refines(&self) -> bool {
        self.ils_weight > 0.0
    }
}

/// One clustering round, for debugging dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub changed: usize,
    /// Prototypes used for assignment in this round.
    pub centroids: RealMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub labels: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
}

/// Gold prototypes in the configured geometry, factorized.
pub fn gold_embedding_for(
    model: &MlpClassifier,
    gold: &LabeledSet,
    geometry: EmbeddingGeometry,
    energy: f64,
) -> Result<LabelEmbedding> {
    let pass = model.forward_batch(gold.features())?;
    let prepared = geometry.prepare(&pass.embeddings)?;
    let u0 = class_means(&prepared.unit, gold.labels(), gold.classes())?;
    gold_label_embedding(&u0, energy)
}

/// Labels every row of `unlabeled` and updates `model` in place.
#[allow(clippy::too_many_arguments)]
pub fn generate_pseudo_labels(
    model: &mut MlpClassifier,
    gold: &LabeledSet,
    lookback: &LabeledSet,
    unlabeled: &RealMatrix,
    emb: &LabelEmbedding,
    cfg: &GenerationConfig,
    seed: u64,
    step: u64,
    teacher: Option<&mut MeanTeacher>,
) -> Result<GenerationOutput> {
    if unlabeled.rows() == 0 {
        return Err(Error::Empty("segment"));
    }
    let classes = model.dims().classes;
    let known = gold.concat(lookback)?;
    fit(model, &known, &cfg.warmup, seed, step, teacher)?;

    let prototypes = |u: &RealMatrix| -> Result<RealMatrix> {
        if cfg.refines() {
            refine_centroids(u, emb)
        } else {
            Ok(u.clone())
        }
    };

    let mut pass = model.forward_batch(unlabeled)?;
    let mut prepared = cfg.geometry.prepare(&pass.embeddings)?;
    let probs = softmax_rows(&pass.logits);
    let mut centroids = init_centroids(&prepared.unit, &probs)?;
    let mut previous: Option<Vec<usize>> = None;
    let mut rounds = Vec::new();
    let n = unlabeled.rows();

    for round in 0..cfg.iterations {
        let used = prototypes(&centroids.centroids)?;
        let labels = assign_labels(&used, &prepared.unit)?;
        let changed = match &previous {
            Some(p) => p.iter().zip(&labels).filter(|(a, b)| a != b).count(),
            None => n,
        };
        centroids = update_centroids(&prepared.unit, &labels, &centroids)?;
        rounds.push(RoundRecord {
            round,
            changed,
            centroids: used,
        });

        // joint step on L_CE(known) + L_PL(segment) + w·residual
        let (_, mut grads) = ce_loss_and_grad(model, known.features(), known.labels())?;
        let (_, d_logits) = ce_logit_grad(&pass.logits, &labels)?;
        let d_embed = if cfg.refines() {
            Some(residual_embedding_grad(
                &prepared, &labels, &centroids, emb, cfg.ils_weight,
            )?)
        } else {
            None
        };
        let seg_grads = model.backward(unlabeled, &pass, &d_logits, d_embed.as_ref())?;
        grads.add_scaled(&seg_grads, 1.0)?;
        model.apply_step(&grads, cfg.lr)?;

        pass = model.forward_batch(unlabeled)?;
        prepared = cfg.geometry.prepare(&pass.embeddings)?;
        let converged = previous.is_some() && (changed as f64) < cfg.change_tol * n as f64;
        previous = Some(labels);
        if converged {
            break;
        }
    }

    let labels = if rounds.is_empty() {
        assign_labels(&centroids.centroids, &prepared.unit)?
    } else {
        assign_labels(&prototypes(&centroids.centroids)?, &prepared.unit)?
    };
    debug_assert!(labels.iter().all(|&y| y < classes));
    Ok(GenerationOutput { labels, rounds })
}

/// Gradient of `w·‖U(I − P)‖²` with respect to the raw embeddings, where
/// `U` holds the class means of the prepared rows under `labels`. Classes
/// without points keep a constant prototype and contribute nothing.
fn residual_embedding_grad(
    prepared: &PreparedEmbeddings,
    labels: &[usize],
    centroids: &CentroidSet,
    emb: &LabelEmbedding,
    weight: f64,
) -> Result<RealMatrix> {
    let c = centroids.classes();
    let p = emb.projector();
    let mut complement = RealMatrix::identity(c);
    for i in 0..c {
        for j in 0..c {
            complement[(i, j)] -= p[(i, j)];
        }
    }
    // dR/dU = 2 U (I − P)
    let d_u = centroids.centroids.matmul(&complement)?;
    let (n, d) = (prepared.unit.rows(), prepared.unit.cols());
    let mut d_unit = RealMatrix::zeros(n, d);
    for (i, &y) in labels.iter().enumerate() {
        let count = centroids.counts[y];
        if count == 0 {
            continue;
        }
        let scale = 2.0 * weight / count as f64;
        for (k, slot) in d_unit.row_mut(i).iter_mut().enumerate() {
            *slot = scale * d_u[(k, y)];
        }
    }
    Ok(prepared.backward(&d_unit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> RealMatrix {
        RealMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn one_hot_init_reproduces_embeddings() {
        let e = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let p = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = init_centroids(&e, &p).unwrap();
        assert_eq!(c.centroid(0), vec![1.0, 2.0]);
        assert_eq!(c.centroid(1), vec![-3.0, 0.5]);
    }

    #[test]
    fn uniform_init_is_plain_mean() {
        let e = m(&[&[1.0, 2.0], &[3.0, 0.0], &[2.0, 1.0]]);
        let p = m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let c = init_centroids(&e, &p).unwrap();
        for class in 0..2 {
            let u = c.centroid(class);
            assert!((u[0] - 2.0).abs() < 1e-12 && (u[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_init() {
        let e = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = m(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let u = init_centroids(&e, &p).unwrap().centroid(0);
        // (0.9·(1,0) + 0.1·(0,1)) / 1.0
        assert!((u[0] - 0.9).abs() < 1e-12 && (u[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn massless_class_gets_global_mean() {
        let e = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let c = init_centroids(&e, &p).unwrap();
        assert_eq!(c.centroid(1), vec![0.5, 0.5]);
        assert_eq!(c.counts[1], 0);
        assert!(init_centroids(&RealMatrix::zeros(0, 2), &RealMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn assignment_examples() {
        let u = m(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]]);
        assert_eq!(assign_labels(&u, &m(&[&[2.0, 2.0]])).unwrap(), vec![2]);
        let u = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(assign_labels(&u, &m(&[&[1.0, 1.0]])).unwrap(), vec![0]);
        assert_eq!(
            assign_labels(&u, &m(&[&[0.0, 0.0]])).unwrap_err(),
            Error::DegenerateVector
        );
    }

    #[test]
    fn update_examples() {
        let prev = CentroidSet {
            centroids: m(&[&[9.0, 7.0], &[9.0, 7.0]]),
            counts: vec![0, 0],
        };
        let e = m(&[&[1.0, 0.0], &[3.0, 0.0]]);
        let c = update_centroids(&e, &[0, 0], &prev).unwrap();
        assert_eq!(c.centroid(0), vec![2.0, 0.0]);
        assert_eq!(c.centroid(1), vec![7.0, 7.0]);
        assert_eq!(c.counts, vec![2, 0]);
        assert!(update_centroids(&e, &[0, 2], &prev).is_err());
    }

    #[test]
    fn label_embedding_rank() {
        let rank1 = m(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        for energy in [0.1, 0.9, 1.0] {
            assert_eq!(gold_label_embedding(&rank1, energy).unwrap().rank(), 1);
        }
        let full = m(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(gold_label_embedding(&full, 0.9).unwrap().rank(), 2);
        assert_eq!(gold_label_embedding(&full, 1.0).unwrap().rank(), 3);
        assert!(gold_label_embedding(&RealMatrix::zeros(2, 2), 0.9).is_err());
    }

    #[test]
    fn refinement_is_identity_in_span_and_zero_outside() {
        let u0 = m(&[&[1.0, -1.0], &[2.0, -2.0]]);
        let emb = gold_label_embedding(&u0, 0.9).unwrap();
        let inside = m(&[&[3.0, -3.0], &[0.5, -0.5]]);
        let r = refine_centroids(&inside, &emb).unwrap();
        assert!(r.sub(&inside).unwrap().frobenius_norm() < 1e-10);
        let outside = m(&[&[1.0, 1.0], &[4.0, 4.0]]);
        assert!(refine_centroids(&outside, &emb).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn full_rank_refinement_is_identity() {
        let u0 = m(&[&[1.0, 0.2], &[0.3, 1.0]]);
        let emb = gold_label_embedding(&u0, 1.0).unwrap();
        let u = m(&[&[0.4, -2.0], &[1.5, 0.1]]);
        let r = refine_centroids(&u, &emb).unwrap();
        assert!(r.sub(&u).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn preparation_backward_matches_finite_differences() {
        let raw = m(&[&[1.0, 2.0, -0.5], &[0.3, -1.0, 2.0], &[-2.0, 0.1, 0.4]]);
        let weights = m(&[&[0.3, -0.7, 1.1], &[0.2, 0.5, -0.4], &[-1.0, 0.6, 0.9]]);
        for center in [false, true] {
            let geo = EmbeddingGeometry { center };
            let objective = |x: &RealMatrix| -> f64 {
                let p = geo.prepare(x).unwrap();
                p.unit.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
            };
            let analytic = geo.prepare(&raw).unwrap().backward(&weights);
            let h = 1e-6;
            for k in 0..raw.as_slice().len() {
                let mut plus = raw.clone();
                plus.as_mut_slice()[k] += h;
                let mut minus = raw.clone();
                minus.as_mut_slice()[k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - analytic.as_slice()[k]).abs() < 1e-7, "center={center} k={k}");
            }
        }
    }
}
