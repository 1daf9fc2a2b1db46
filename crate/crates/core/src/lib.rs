//! Generation-replay learning on semi-supervised drifted streams.
//!
//! A learner starts from a small labeled gold set and then sees one
//! unlabeled segment per time step. At each step it labels the segment by
//! centroid clustering in embedding space, refined towards the label
//! structure of the gold set, and then replays gold plus a short window of
//! pseudo-labeled rows with projected updates that protect earlier
//! knowledge.
//!
//! The crate is `no_std` with `alloc`; enable the `std` feature for
//! `std::error::Error` impls.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod baselines;
pub mod error;
pub mod eval;
pub mod linalg;
mod math;
pub mod model;
pub mod pseudo_label;
pub mod replay;
pub mod rng;
pub mod stream;
pub mod train;

pub use baselines::{run_method, Method, PipelineConfig, RunOutcome};
pub use error::{Error, Result};
pub use eval::{accuracy, mean_std, AccMatrix, MeanStd};
pub use linalg::{cosine_distance, energy_basis, project, svd, RealMatrix, SvdResult};
pub use model::{GradientSet, MlpClassifier, MlpDims};
pub use pseudo_label::{CentroidSet, GenerationConfig, LabelEmbedding};
pub use replay::{flatness_probe, Perturbation, ReplayConfig, SubspaceMemory};
pub use stream::{DriftFamily, DriftSpec, LabeledSet, StreamSegment};
pub use train::TrainConfig;
