//! Dense-matrix substrate: deterministic SVD, a reverse-mode gradient
//! tape, finite-difference checking, and the Adam optimizer.

mod adam;
mod gradcheck;
mod matrix;
mod svd;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{
    finite_diff_check, finite_diff_compare, FiniteDiffReport, LossBuilder, ParamReport,
};
pub use matrix::Matrix;
pub use svd::{svd, truncate_rank, SvdResult, MAX_SWEEPS};
pub use tape::{Gradients, NodeId, Tape};

pub(crate) use tape::{check_probability_rows, row_nll, softplus, stable_softmax};
