//! Dense 2-D tensors and a reverse-mode autodiff tape.

pub mod functional;
pub mod gradcheck;
mod tape;
mod tensor;

pub use functional::{cosine_similarity, cross_entropy, kl_divergence, softmax};
pub use gradcheck::{check_gradient, check_gradients, Coordinates, GradCheckReport};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Guard added to norm products and floored into log arguments.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on `Σp = 1` when validating distributions.
pub const DIST_TOL: f64 = 1e-9;
