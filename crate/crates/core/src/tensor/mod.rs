//! Dense row-major tensors and a reverse-mode tape.

mod dense;
pub mod gradcheck;
mod ops;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use ops::{softmax_in_place, BatchNormMode, PoolMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tape::{Gradients, Tape, Var};
