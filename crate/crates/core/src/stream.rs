//! Drifted streams: synthetic Gaussian drift, drift-inducing reordering of
//! stationary tables, and segmentation into time slots.
//!
//! A [`StreamSegment`] keeps its labels behind [`StreamSegment::oracle`];
//! learners receive a [`LearnerView`], which exposes features only.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::linalg::{svd, RealMatrix};
use crate::math::{round, sqrt};
use crate::rng::{purpose, rng_for_step};

/// Features with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: RealMatrix,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(features: RealMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        ensure_dim("labels", features.rows(), labels.len())?;
        if !features.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn empty(dims: usize, classes: usize) -> Self {
        Self {
            features: RealMatrix::zeros(0, dims),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn features(&self) -> &RealMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &LabeledSet) -> Result<Self> {
        if self.is_empty() {
            return Ok(Self {
                classes: self.classes.max(other.classes),
                ..other.clone()
            });
        }
        let features = self.features.vstack(&other.features)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            features,
            labels,
            classes: self.classes.max(other.classes),
        })
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        self.select(order)
    }
}

/// One time slot of the stream.
#[derive(Debug)]
pub struct StreamSegment {
    time_index: usize,
    unlabeled: RealMatrix,
    test_features: RealMatrix,
    test_labels: Vec<usize>,
    hidden_unlabeled_labels: Vec<usize>,
    hidden_reads: AtomicUsize,
}

impl Clone for StreamSegment {
    fn clone(&self) -> Self {
        Self {
            time_index: self.time_index,
            unlabeled: self.unlabeled.clone(),
            test_features: self.test_features.clone(),
            test_labels: self.test_labels.clone(),
            hidden_unlabeled_labels: self.hidden_unlabeled_labels.clone(),
            hidden_reads: AtomicUsize::new(self.hidden_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for StreamSegment {
    fn eq(&self, other: &Self) -> bool {
        self.time_index == other.time_index
            && self.unlabeled == other.unlabeled
            && self.test_features == other.test_features
            && self.test_labels == other.test_labels
            && self.hidden_unlabeled_labels == other.hidden_unlabeled_labels
    }
}

/// What a learner may see of a segment.
#[derive(Debug, Clone, Copy)]
pub struct LearnerView<'a> {
    segment: &'a StreamSegment,
}

impl<'a> LearnerView<'a> {
    pub fn time_index(&self) -> usize {
        self.segment.time_index
    }

    pub fn unlabeled(&self) -> &'a RealMatrix {
        &self.segment.unlabeled
    }
}

/// Evaluation-only access to a segment's labels.
#[derive(Debug, Clone, Copy)]
pub struct SegmentOracle<'a> {
    segment: &'a StreamSegment,
}

impl<'a> SegmentOracle<'a> {
    pub fn test_labels(&self) -> &'a [usize] {
        &self.segment.test_labels
    }

    /// True labels of the unlabeled pool. Every call is counted.
    pub fn hidden_unlabeled_labels(&self) -> &'a [usize] {
        self.segment.hidden_reads.fetch_add(1, Ordering::Relaxed);
        &self.segment.hidden_unlabeled_labels
    }
}

impl StreamSegment {
    pub fn new(
        time_index: usize,
        unlabeled: RealMatrix,
        hidden_unlabeled_labels: Vec<usize>,
        test_features: RealMatrix,
        test_labels: Vec<usize>,
    ) -> Result<Self> {
        if time_index == 0 {
            return Err(invalid("time_index", "segments start at 1"));
        }
        ensure_dim("hidden labels", unlabeled.rows(), hidden_unlabeled_labels.len())?;
        ensure_dim("test labels", test_features.rows(), test_labels.len())?;
        if !unlabeled.is_finite() || !test_features.is_finite() {
            return Err(Error::NonFinite("segment features"));
        }
        Ok(Self {
            time_index,
            unlabeled,
            test_features,
            test_labels,
            hidden_unlabeled_labels,
            hidden_reads: AtomicUsize::new(0),
        })
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn learner_view(&self) -> LearnerView<'_> {
        LearnerView { segment: self }
    }

    pub fn test_features(&self) -> &RealMatrix {
        &self.test_features
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.rows()
    }

    pub fn test_len(&self) -> usize {
        self.test_features.rows()
    }

    pub fn oracle(&self) -> SegmentOracle<'_> {
        SegmentOracle { segment: self }
    }

    /// How many times the hidden unlabeled labels have been read.
    pub fn hidden_label_reads(&self) -> usize {
        self.hidden_reads.load(Ordering::Relaxed)
    }

    /// Test split as a labeled set.
    pub fn test_set(&self, classes: usize) -> Result<LabeledSet> {
        LabeledSet::new(self.test_features.clone(), self.test_labels.clone(), classes)
    }
}

/// One Gaussian mode drifting along a straight line.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMode {
    pub class: usize,
    pub start: Vec<f64>,
    /// Displacement of the mean per time step.
    pub velocity: Vec<f64>,
}

impl DriftMode {
    pub fn mean_at(&self, t: usize) -> Vec<f64> {
        self.start
            .iter()
            .zip(&self.velocity)
            .map(|(s, v)| s + t as f64 * v)
            .collect()
    }
}

/// Parameters of a synthetic drifting stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub dims: usize,
    pub class_count: usize,
    pub modes: Vec<DriftMode>,
    /// Isotropic standard deviation of every mode.
    pub std: f64,
    pub instances_per_step: usize,
    /// Number of unlabeled segments after the gold step.
    pub steps: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

/// Compact description of the usual two-class families (UG = one mode per
/// class, MG = two).
#[derive(Debug, Clone, PartialEq)]
pub struct DriftFamily {
    pub dims: usize,
    pub classes: usize,
    pub modes_per_class: usize,
    /// Distance between neighbouring class means at t = 0.
    pub separation: f64,
    /// Distance travelled per step.
    pub speed: f64,
    /// Drift direction; normalized internally, zero-padded to `dims`.
    pub direction: Vec<f64>,
    pub std: f64,
    pub instances_per_step: usize,
    pub steps: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DriftFamily {
    fn default() -> Self {
        Self {
            dims: 2,
            classes: 2,
            modes_per_class: 1,
            separation: 6.0,
            speed: 0.5,
            direction: vec![1.0, 1.0],
            std: 1.0,
            instances_per_step: 1000,
            steps: 20,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

impl DriftFamily {
    /// Class means sit on a line (two classes, or one dimension) or on a
    /// circle in the first two axes, neighbours `separation` apart. Mode `k`
    /// of a class moves with `(−1)^k · speed · direction`.
    pub fn to_spec(&self) -> Result<DriftSpec> {
        if self.dims == 0 || self.classes < 2 || self.modes_per_class == 0 {
            return Err(invalid(
                "family",
                "needs dims ≥ 1, classes ≥ 2, modes_per_class ≥ 1",
            ));
        }
        let mut dir = vec![0.0; self.dims];
        for (d, v) in dir.iter_mut().zip(&self.direction) {
            *d = *v;
        }
        let len = sqrt(dir.iter().map(|v| v * v).sum());
        if len > 0.0 {
            dir.iter_mut().for_each(|v| *v /= len);
        }
        let c = self.classes;
        let mut modes = Vec::new();
        for class in 0..c {
            let mut start = vec![0.0; self.dims];
            if c == 2 || self.dims == 1 {
                start[0] = (class as f64 - (c as f64 - 1.0) / 2.0) * self.separation;
            } else {
                let angle = 2.0 * core::f64::consts::PI * class as f64 / c as f64;
                let radius = self.separation / (2.0 * libm::sin(core::f64::consts::PI / c as f64));
                start[0] = radius * libm::cos(angle);
                start[1] = radius * libm::sin(angle);
            }
            for k in 0..self.modes_per_class {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                modes.push(DriftMode {
                    class,
                    start: start.clone(),
                    velocity: dir.iter().map(|d| sign * self.speed * d).collect(),
                });
            }
        }
        let spec = DriftSpec {
            dims: self.dims,
            class_count: c,
            modes,
            std: self.std,
            instances_per_step: self.instances_per_step,
            steps: self.steps,
            test_fraction: self.test_fraction,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(invalid("std", "must be positive and finite"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if self.instances_per_step == 0 {
            return Err(invalid("instances_per_step", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(invalid("test_fraction", "must lie in [0, 1)"));
        }
        for class in 0..self.class_count {
            if !self.modes.iter().any(|m| m.class == class) {
                return Err(invalid("modes", alloc::format!("class {class} has no mode")));
            }
        }
        for m in &self.modes {
            if m.class >= self.class_count {
                return Err(Error::LabelOutOfRange {
                    label: m.class,
                    classes: self.class_count,
                });
            }
            ensure_dim("mode start", self.dims, m.start.len())?;
            ensure_dim("mode velocity", self.dims, m.velocity.len())?;
            if m.start.iter().chain(&m.velocity).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("drift mode"));
            }
        }
        Ok(())
    }

    /// Rows in the test split of each segment.
    pub fn test_count(&self) -> usize {
        round(self.instances_per_step as f64 * self.test_fraction) as usize
    }

    fn draw_step(&self, t: usize) -> (RealMatrix, Vec<usize>) {
        let mut rng = rng_for_step(self.seed, purpose::GENERATE, t as u64);
        let by_class: Vec<Vec<&DriftMode>> = (0..self.class_count)
            .map(|c| self.modes.iter().filter(|m| m.class == c).collect())
            .collect();
        let means: Vec<Vec<Vec<f64>>> = by_class
            .iter()
            .map(|ms| ms.iter().map(|m| m.mean_at(t)).collect())
            .collect();
        let n = self.instances_per_step;
        let mut features = RealMatrix::zeros(n, self.dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = rng.random_range(0..self.class_count);
            let mode = rng.random_range(0..means[class].len());
            let mean = &means[class][mode];
            for (slot, mu) in features.row_mut(i).iter_mut().zip(mean) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *slot = mu + self.std * z;
            }
            labels.push(class);
        }
        (features, labels)
    }
}

/// Gold set (step 0, fully labeled) and segments `1..=steps`.
pub fn generate_drift_stream(spec: &DriftSpec) -> Result<(LabeledSet, Vec<StreamSegment>)> {
    spec.validate()?;
    let (x0, y0) = spec.draw_step(0);
    let gold = LabeledSet::new(x0, y0, spec.class_count)?;
    let test_count = spec.test_count();
    let mut segments = Vec::with_capacity(spec.steps);
    for t in 1..=spec.steps {
        let (x, y) = spec.draw_step(t);
        let mut rng = rng_for_step(spec.seed, purpose::SPLIT, t as u64);
        segments.push(split_segment(t, &x, &y, test_count, &mut rng)?);
    }
    Ok((gold, segments))
}

fn split_segment<R: Rng + ?Sized>(
    t: usize,
    x: &RealMatrix,
    y: &[usize],
    test_count: usize,
    rng: &mut R,
) -> Result<StreamSegment> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(rng);
    let (test_idx, pool_idx) = order.split_at(test_count);
    StreamSegment::new(
        t,
        x.select_rows(pool_idx),
        pool_idx.iter().map(|&i| y[i]).collect(),
        x.select_rows(test_idx),
        test_idx.iter().map(|&i| y[i]).collect(),
    )
}

/// Permutation sorting rows by their score on the first principal
/// component (ascending, ties by index). The component's sign is fixed so
/// that its largest-magnitude entry is positive. Constant features give the
/// identity.
pub fn induce_drift_order(data: &LabeledSet) -> Result<Vec<usize>> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientRows {
            needed: 2,
            available: n,
        });
    }
    let x = data.features();
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = RealMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    let identity: Vec<usize> = (0..n).collect();
    if cov.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(identity);
    }
    let dec = svd(&cov)?;
    let mut pc = dec.left_vectors.column(0);
    let mut lead = 0;
    for (i, v) in pc.iter().enumerate() {
        if libm::fabs(*v) > libm::fabs(pc[lead]) {
            lead = i;
        }
    }
    if pc[lead] < 0.0 {
        pc.iter_mut().for_each(|v| *v = -*v);
    }
    let scores: Vec<f64> = x
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&pc)
                .map(|((v, m), p)| (v - m) * p)
                .sum()
        })
        .collect();
    let mut order = identity;
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(order)
}

/// A table cut into a gold block and labeled-pool segments.
#[derive(Debug, Clone)]
pub struct SegmentedStream {
    pub gold: LabeledSet,
    pub segments: Vec<StreamSegment>,
    /// Trailing rows that did not fill a whole step.
    pub dropped: usize,
}

/// First `per_step` rows become the gold set; every following full block
/// of `per_step` rows becomes a segment with a seeded random split of
/// `test_count` test rows.
pub fn segment_stream(
    data: &LabeledSet,
    per_step: usize,
    test_count: usize,
    seed: u64,
) -> Result<SegmentedStream> {
    if test_count >= per_step {
        return Err(invalid("test_count", "must be smaller than per_step"));
    }
    if data.len() < 2 * per_step {
        return Err(Error::InsufficientRows {
            needed: 2 * per_step,
            available: data.len(),
        });
    }
    let blocks = data.len() / per_step;
    let dropped = data.len() - blocks * per_step;
    let gold_idx: Vec<usize> = (0..per_step).collect();
    let gold = data.select(&gold_idx);
    let mut segments = Vec::with_capacity(blocks - 1);
    for t in 1..blocks {
        let idx: Vec<usize> = (t * per_step..(t + 1) * per_step).collect();
        let block = data.select(&idx);
        let mut rng = rng_for_step(seed, purpose::SPLIT, t as u64);
        segments.push(split_segment(
            t,
            block.features(),
            block.labels(),
            test_count,
            &mut rng,
        )?);
    }
    Ok(SegmentedStream {
        gold,
        segments,
        dropped,
    })
}

/// Uniform sample of at most `limit` rows, in original order.
pub fn downsample(data: &LabeledSet, limit: usize, seed: u64, step: u64) -> LabeledSet {
    if data.len() <= limit {
        return data.clone();
    }
    let mut rng = rng_for_step(seed, purpose::BUFFER, step);
    let mut idx = rand::seq::index::sample(&mut rng, data.len(), limit).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[[f64; 1]], labels: &[usize]) -> LabeledSet {
        LabeledSet::new(RealMatrix::from_rows(rows).unwrap(), labels.to_vec(), 2).unwrap()
    }

    #[test]
    fn paper_scale_split_sizes() {
        let spec = DriftFamily {
            steps: 2,
            ..DriftFamily::default()
        }
        .to_spec()
        .unwrap();
        let (gold, segs) = generate_drift_stream(&spec).unwrap();
        assert_eq!(gold.len(), 1000);
        for s in &segs {
            assert_eq!(s.unlabeled_len(), 700);
            assert_eq!(s.test_len(), 300);
        }
    }

    #[test]
    fn symmetric_modes_cancel() {
        let spec = DriftFamily {
            modes_per_class: 2,
            speed: 0.7,
            ..DriftFamily::default()
        }
        .to_spec()
        .unwrap();
        for class in 0..2 {
            let ms: Vec<_> = spec.modes.iter().filter(|m| m.class == class).collect();
            for t in [0, 5, 17] {
                let (a, b) = (ms[0].mean_at(t), ms[1].mean_at(t));
                for k in 0..2 {
                    let mid = (a[k] + b[k]) / 2.0;
                    assert!((mid - ms[0].start[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DriftFamily {
            steps: 3,
            instances_per_step: 50,
            seed: 9,
            ..DriftFamily::default()
        }
        .to_spec()
        .unwrap();
        let a = generate_drift_stream(&spec).unwrap();
        let b = generate_drift_stream(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = DriftFamily::default().to_spec().unwrap();
        spec.std = 0.0;
        assert!(generate_drift_stream(&spec).is_err());
        spec.std = 1.0;
        spec.steps = 0;
        assert!(generate_drift_stream(&spec).is_err());
    }

    #[test]
    fn drift_order_one_dimensional() {
        let data = table(&[[5.0], [1.0], [3.0]], &[0, 1, 0]);
        let order = induce_drift_order(&data).unwrap();
        assert_eq!(order, vec![1, 2, 0]);
        let sorted = data.permuted(&order);
        assert_eq!(induce_drift_order(&sorted).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn drift_order_degenerate_is_identity() {
        let data = table(&[[2.0], [2.0], [2.0]], &[0, 1, 0]);
        assert_eq!(induce_drift_order(&data).unwrap(), vec![0, 1, 2]);
        assert!(induce_drift_order(&table(&[[1.0]], &[0])).is_err());
    }

    #[test]
    fn segmentation_rules() {
        let rows: Vec<[f64; 1]> = (0..401).map(|i| [i as f64]).collect();
        let labels: Vec<usize> = (0..401).map(|i| i % 2).collect();
        let data = table(&rows, &labels);
        let s = segment_stream(&data, 200, 40, 1).unwrap();
        assert_eq!(s.gold.len(), 200);
        assert_eq!(s.segments.len(), 1);
        assert_eq!(s.dropped, 1);
        assert_eq!(s.segments[0].unlabeled_len(), 160);
        assert_eq!(s.segments[0].test_len(), 40);

        let rows: Vec<[f64; 1]> = (0..1200).map(|i| [i as f64]).collect();
        let labels: Vec<usize> = (0..1200).map(|i| i % 2).collect();
        let s = segment_stream(&table(&rows, &labels), 400, 120, 1).unwrap();
        assert_eq!(s.segments.len(), 2);
        assert_eq!(s.segments[1].unlabeled_len(), 280);
        assert_eq!(s.segments[1].test_len(), 120);

        assert!(matches!(
            segment_stream(&data, 300, 40, 1),
            Err(Error::InsufficientRows { .. })
        ));
        assert!(segment_stream(&data, 200, 200, 1).is_err());
    }

    #[test]
    fn oracle_reads_are_counted() {
        let rows: Vec<[f64; 1]> = (0..400).map(|i| [i as f64]).collect();
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let s = segment_stream(&table(&rows, &labels), 200, 40, 1).unwrap();
        let seg = &s.segments[0];
        let _ = seg.learner_view().unlabeled();
        let _ = seg.oracle().test_labels();
        assert_eq!(seg.hidden_label_reads(), 0);
        let _ = seg.oracle().hidden_unlabeled_labels();
        assert_eq!(seg.hidden_label_reads(), 1);
    }

    #[test]
    fn downsample_keeps_order_and_bound() {
        let rows: Vec<[f64; 1]> = (0..300).map(|i| [i as f64]).collect();
        let labels: Vec<usize> = (0..300).map(|i| i % 2).collect();
        let data = table(&rows, &labels);
        let d = downsample(&data, 100, 4, 1);
        assert_eq!(d.len(), 100);
        let xs: Vec<f64> = d.features().row_iter().map(|r| r[0]).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(downsample(&data.select(&[0, 1]), 100, 4, 1).len(), 2);
    }
}
