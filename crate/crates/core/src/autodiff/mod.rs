//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Training runs in `f32`; gradient audits run the identical code in `f64`.
//! Broadcasting is limited to adding or multiplying a trailing-axis vector
//! onto every row.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

/// `sqrt(2 / π)` used by the tanh approximation of gelu.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh gelu approximation.
pub const GELU_CUBIC: f64 = 0.044_715;
