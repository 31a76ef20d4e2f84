//! Scalar arithmetic primitives: reduced-precision emulation, activations,
//! and norms.
//!
//! Emulated arithmetic follows a quantize-around-op discipline: inputs are
//! rounded to the working format, the operation runs in `f64`, and the
//! result is rounded again.

mod activation;
mod format;
mod norm;
mod policy;

pub use activation::{sigmoid, silu, silu_grad, softplus, softplus_grad, SOFTPLUS_LINEAR_THRESHOLD};
pub use format::{quantize, quantize_slice, NumericFormat, UnknownFormat};
pub use norm::{diag_product_specnorm, l2_norm, max_abs};
pub use policy::{PolicyError, PrecisionPolicy};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumericsError {
    #[error("empty product")]
    EmptyProduct,
    #[error("diagonal {index} has length {found}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
}
