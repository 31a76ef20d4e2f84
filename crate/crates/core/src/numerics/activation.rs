//! Scalar nonlinearities used by the SSM block.

/// Above this the softplus correction `log1p(exp(-x))` is below `f64` epsilon
/// relative to `x`, so the linear branch is taken.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

/// `log(1 + exp(x))`, overflow-safe.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_THRESHOLD {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus, i.e. the logistic sigmoid.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
