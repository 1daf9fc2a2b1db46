//! Stream pipelines: the generation-replay learner, its ablations and the
//! reference baselines, all driven by one loop and one evaluator.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::eval::{accuracy, AccMatrix};
use crate::linalg::RealMatrix;
use crate::model::{softmax_rows, MlpClassifier, MlpDims};
use crate::pseudo_label::{gold_embedding_for, generate_pseudo_labels, GenerationConfig};
use crate::replay::{build_subspace, replay_train, ReplayConfig, SubspaceMemory};
use crate::rng::{purpose, rng_for};
use crate::stream::{downsample, LabeledSet, StreamSegment};
use crate::train::{fit, MeanTeacher, TrainConfig};

/// Adaptation strategy run over a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Clustering generation with refinement, then flat-region replay.
    Ours,
    /// Generation without the refinement term.
    OursNoIls,
    /// Replay by plain descent: no memory, no perturbation.
    OursNoFr,
    /// Confidence selection in place of generation, then flat-region replay.
    OursPl,
    /// Trained once on gold, never adapted.
    St,
    /// Retrained from scratch on every true label seen so far.
    Jt,
    /// Retrained on gold plus the most confident self-labels.
    PlConf,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::OursNoIls,
        Method::OursNoFr,
        Method::OursPl,
        Method::St,
        Method::Jt,
        Method::PlConf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoIls => "ours-no-ils",
            Method::OursNoFr => "ours-no-fr",
            Method::OursPl => "ours-pl",
            Method::St => "st",
            Method::Jt => "jt",
            Method::PlConf => "pl-conf",
        }
    }

    /// Only the joint-training bound may read hidden labels.
    pub fn reads_hidden_labels(&self) -> bool {
        matches!(self, Method::Jt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub weight: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Training on the gold set before the stream starts; also used by the
    /// joint-training bound at every step.
    pub pretrain: TrainConfig,
    pub generation: GenerationConfig,
    pub replay: ReplayConfig,
    /// Maximum pseudo-labeled rows carried to the next step.
    pub lookback: usize,
    /// Energy kept when factorizing the gold prototypes.
    pub label_energy: f64,
    pub teacher: Option<TeacherConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 64,
            pretrain: TrainConfig::default(),
            generation: GenerationConfig::default(),
            replay: ReplayConfig::default(),
            lookback: 100,
            label_energy: 0.9,
            teacher: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(invalid("hidden", "layer widths must be positive"));
        }
        self.pretrain.validate()?;
        self.generation.warmup.validate()?;
        if !(self.generation.lr.is_finite() && self.generation.lr >= 0.0) {
            return Err(invalid("gen.lr", "must be finite and nonnegative"));
        }
        if !(self.generation.ils_weight.is_finite() && self.generation.ils_weight >= 0.0) {
            return Err(invalid("ils_weight", "must be finite and nonnegative"));
        }
        for (name, v) in [("eta1", self.replay.eta1), ("eta2", self.replay.eta2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.replay.batch_size == 0 {
            return Err(invalid("replay.batch_size", "must be positive"));
        }
        for (name, v) in [("energy", self.replay.energy), ("label_energy", self.label_energy)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(name, "must lie in (0, 1]"));
            }
        }
        if let Some(t) = self.teacher {
            if !(0.0..=1.0).contains(&t.momentum) {
                return Err(invalid("momentum", "must lie in [0, 1]"));
            }
            if !(t.weight.is_finite() && t.weight >= 0.0) {
                return Err(invalid("mt.weight", "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Everything one (method, stream, seed) run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub acc: AccMatrix,
    /// Accuracy of the labels the learner assigned to each segment's pool,
    /// for methods that assign them.
    pub pseudo_label_accuracy: Vec<f64>,
    pub model: MlpClassifier,
}

impl RunOutcome {
    pub fn mean_pseudo_label_accuracy(&self) -> Option<f64> {
        if self.pseudo_label_accuracy.is_empty() {
            None
        } else {
            let n = self.pseudo_label_accuracy.len() as f64;
            Some(self.pseudo_label_accuracy.iter().sum::<f64>() / n)
        }
    }
}

/// Indices of the `keep` rows with the highest top-class probability, in
/// ascending index order. Ties at the cutoff go to the earlier row.
pub fn most_confident(model: &MlpClassifier, xs: &RealMatrix, keep: usize) -> Result<Vec<usize>> {
    let probs = softmax_rows(&model.forward_batch(xs)?.logits);
    let conf: Vec<f64> = probs
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

fn evaluate_row(
    model: &MlpClassifier,
    segments: &[StreamSegment],
    t: usize,
    acc: &mut AccMatrix,
) -> Result<()> {
    for (j, seg) in segments.iter().enumerate().take(t) {
        let preds = model.predict(seg.test_features())?;
        acc.set(t, j + 1, accuracy(&preds, seg.oracle().test_labels())?)?;
    }
    Ok(())
}

fn pretrained(
    dims: MlpDims,
    gold: &LabeledSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<MlpClassifier> {
    let mut model = MlpClassifier::new(dims, &mut rng_for(seed, purpose::INIT))?;
    fit(&mut model, gold, cfg, seed, 0, None)?;
    Ok(model)
}

/// Runs `method` over the stream and fills the full lower triangle of `R`.
pub fn run_method(
    method: Method,
    gold: &LabeledSet,
    segments: &[StreamSegment],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if gold.is_empty() {
        return Err(Error::Empty("gold set"));
    }
    let classes = gold.classes();
    let dims = MlpDims::new(gold.dims(), cfg.hidden, cfg.embed, classes);
    let steps = segments.len();
    let mut acc = AccMatrix::new(steps);
    let mut pl_acc = Vec::new();

    let mut model = pretrained(dims, gold, &cfg.pretrain, seed)?;
    let mut teacher = cfg.teacher.map(|t| MeanTeacher {
        teacher: model.clone(),
        weight: t.weight,
        momentum: t.momentum,
    });

    let mut gen_cfg = cfg.generation.clone();
    if method == Method::OursNoIls {
        gen_cfg.ils_weight = 0.0;
    }
    let flat_region = matches!(method, Method::Ours | Method::OursNoIls | Method::OursPl);
    let mut replay_cfg = cfg.replay;
    if !flat_region {
        replay_cfg.freeze_xi = true;
    }
    let label_emb = gold_embedding_for(&model, gold, gen_cfg.geometry, cfg.label_energy)?;
    let mut mem = if flat_region {
        build_subspace(&model, gold, cfg.replay.energy, cfg.replay.sample_rows, seed, 0)?
    } else {
        SubspaceMemory::empty(dims)
    };
    let mut lookback = LabeledSet::empty(dims.input, classes);
    let mut seen = gold.clone();

    for (k, seg) in segments.iter().enumerate() {
        let t = k + 1;
        let reads_before = seg.hidden_label_reads();
        let view = seg.learner_view();
        let xs = view.unlabeled();
        let mut assigned: Option<Vec<usize>> = None;
        match method {
            Method::St => {}
            Method::Jt => {
                let truth = seg.oracle().hidden_unlabeled_labels().to_vec();
                seen = seen.concat(&LabeledSet::new(xs.clone(), truth, classes)?)?;
                model = pretrained(dims, &seen, &cfg.pretrain, seed)?;
            }
            Method::PlConf | Method::OursPl => {
                let labels = model.predict(xs)?;
                let keep = most_confident(&model, xs, cfg.lookback)?;
                let buffer = LabeledSet::new(xs.clone(), labels.clone(), classes)?.select(&keep);
                let next = replay_train(&mut model, gold, &buffer, &mem, &replay_cfg, seed, t)?;
                if flat_region {
                    mem = next;
                }
                assigned = Some(labels);
            }
            Method::Ours | Method::OursNoIls | Method::OursNoFr => {
                let out = generate_pseudo_labels(
                    &mut model,
                    gold,
                    &lookback,
                    xs,
                    &label_emb,
                    &gen_cfg,
                    seed,
                    t as u64,
                    teacher.as_mut(),
                )?;
                let pseudo = LabeledSet::new(xs.clone(), out.labels.clone(), classes)?;
                let buffer = downsample(&pseudo, cfg.lookback, seed, t as u64);
                let next = replay_train(&mut model, gold, &buffer, &mem, &replay_cfg, seed, t)?;
                if flat_region {
                    mem = next;
                }
                lookback = buffer;
                assigned = Some(out.labels);
            }
        }
        if !method.reads_hidden_labels() && seg.hidden_label_reads() != reads_before {
            return Err(invalid("method", format!("{method} read hidden labels at step {t}")));
        }
        if let Some(labels) = assigned {
            pl_acc.push(accuracy(&labels, seg.oracle().hidden_unlabeled_labels())?);
        }
        evaluate_row(&model, segments, t, &mut acc)?;
    }

    Ok(RunOutcome {
        acc,
        pseudo_label_accuracy: pl_acc,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::stream::{generate_drift_stream, DriftFamily};

    fn tiny() -> (LabeledSet, Vec<StreamSegment>) {
        let spec = DriftFamily {
            instances_per_step: 120,
            steps: 3,
            ..DriftFamily::default()
        }
        .to_spec()
        .unwrap();
        generate_drift_stream(&spec).unwrap()
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            hidden: 8,
            embed: 8,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn every_method_fills_the_triangle() {
        let (gold, segs) = tiny();
        for m in Method::ALL {
            let out = run_method(m, &gold, &segs, &small_cfg(), 1).unwrap();
            assert!(out.acc.acc_t().is_ok(), "{m}");
            assert!(out.acc.acc_final().is_ok(), "{m}");
        }
    }

    #[test]
    fn only_joint_training_reads_hidden_labels() {
        let (gold, segs) = tiny();
        // the guard inside run_method rejects reads during adaptation
        run_method(Method::PlConf, &gold, &segs, &small_cfg(), 1).unwrap();
        let (gold, segs) = tiny();
        run_method(Method::St, &gold, &segs, &small_cfg(), 1).unwrap();
        assert!(segs.iter().all(|s| s.hidden_label_reads() == 0));
        run_method(Method::Jt, &gold, &segs, &small_cfg(), 1).unwrap();
        assert!(segs.iter().all(|s| s.hidden_label_reads() > 0));
    }

    #[test]
    fn confidence_selection_keeps_everything_when_small() {
        let (gold, _) = tiny();
        let m = MlpClassifier::zeros(MlpDims::new(2, 4, 4, 2)).unwrap();
        // all-zero model: every row ties, so the earliest rows win
        let keep = most_confident(&m, gold.features(), 5).unwrap();
        assert_eq!(keep, vec![0, 1, 2, 3, 4]);
        let all = most_confident(&m, &gold.features().select_rows(&[0, 1, 2]), 100).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
    }
}
