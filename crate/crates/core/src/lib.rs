//! Queue-based continual prompt tuning at desk scale.
//!
//! A small frozen transformer encoder learns a stream of synthetic
//! classification tasks through soft prompts only: each task trains a
//! fresh prompt that is then frozen into a bounded queue, a rank-one
//! matrix reweighs the queued prompts per task, and a globally shared
//! prefix prompt carries cross-task knowledge under a memory-retention
//! regularizer. When the queue is full, a PCA-based eviction rule keeps
//! the top principal rows so training and inference cost stays constant
//! no matter how long the task stream grows.

pub mod aggregation;
pub mod backbone;
pub mod error;
pub mod metrics;
pub mod numkernel;
pub mod objectives;
#[cfg(feature = "oracles")]
pub mod oracle;
pub mod prompts;
pub mod taskstream;
pub mod trainer;

pub use error::{CheckpointErrorKind, Error, Result};
pub use numkernel::{Matrix, Tape};
