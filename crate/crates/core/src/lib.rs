//! Post-hoc calibration for class-incremental classifier streams.
//!
//! The crate scores every seen class by how far its prototype embedding sits
//! from the current task, fits a temperature that grows with that distance,
//! and at test time infers the distance of an unlabeled test set from
//! nearest-prototype assignments. Task-agnostic baselines (single temperature
//! on the current validation split or on the calibration buffer) and a
//! per-task oracle are provided for comparison, together with the usual
//! continual-calibration metrics.
//!
//! Module map:
//!
//! - [`stream`]: task dumps, ingestion of the on-disk format, calibration buffer.
//! - [`prototype`]: class prototypes, cosine similarity, per-class distance scores.
//! - [`calibrators`]: distance-aware temperature model and scalar baselines.
//! - [`testtime`]: test-set distance and temperature without task labels.
//! - [`metrics`]: ECE, NLL, accuracy and the continual report.
//! - [`synth`]: synthetic streams with known per-task temperatures.
//! - [`pipeline`]: the per-task loop tying everything together, plus report files.

pub mod calibrators;
pub mod error;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod prototype;
pub mod stream;
pub mod synth;
pub mod testtime;

pub use error::{Error, Result};
pub use stream::{ClassId, TaskId};
