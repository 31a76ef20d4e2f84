use super::{MambaParams, SsmError};
use crate::numerics::{softplus, NumericFormat};

/// Per-step decay and input coefficient for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    /// Step size after softplus.
    pub delta_bar: Vec<f64>,
    /// Decay `exp(Δ̄ ⊙ A)`, each entry in `(0, 1]`.
    pub a: Vec<f64>,
    /// `(a - 1) / A ⊙ B`.
    pub bcoef: Vec<f64>,
}

/// Zero-order-hold discretisation of a diagonal SSM step.
///
/// `Δ̄ = softplus(delta_raw + delta_bias)`, `a = exp(Δ̄ A)` and
/// `bcoef = (a - 1) / A * B`, with `A = -exp(a_log)`.
pub fn discretize(params: &MambaParams, delta_raw: &[f64], b_diag: &[f64]) -> Result<Discretized, SsmError> {
    let d = params.d;
    if delta_raw.len() != d || b_diag.len() != d {
        return Err(SsmError::ShapeMismatch(format!(
            "discretize expects vectors of length {d}, got {} and {}",
            delta_raw.len(),
            b_diag.len()
        )));
    }
    let a_mat = params.a();
    let mut out = Discretized {
        delta_bar: vec![0.0; d],
        a: vec![0.0; d],
        bcoef: vec![0.0; d],
    };
    for j in 0..d {
        let delta_bar = softplus(delta_raw[j] + params.delta_bias.data()[j]);
        let (a, bc) = zoh(delta_bar, a_mat[j], b_diag[j], NumericFormat::Fp64);
        out.delta_bar[j] = delta_bar;
        out.a[j] = a;
        out.bcoef[j] = bc;
    }
    Ok(out)
}

/// One channel of the discretisation, inputs assumed already on `fmt`'s
/// grid; both outputs are rounded to `fmt`.
///
/// `expm1` keeps `(a - 1)` accurate as `Δ̄ → 0`.
#[inline]
pub(crate) fn zoh(delta_bar: f64, a_cont: f64, b: f64, fmt: NumericFormat) -> (f64, f64) {
    let z = delta_bar * a_cont;
    let a = fmt.quantize(z.exp());
    let bcoef = fmt.quantize(z.exp_m1() / a_cont * b);
    (a, bcoef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{BufferMode, MambaConfig};
    use crate::tensor::Tensor;

    fn params(d: usize, a_log: Vec<f64>, bias: Vec<f64>) -> MambaParams {
        let mut p = MambaParams::zeros(MambaConfig::new(d, 4, BufferMode::TimeIndexed)).unwrap();
        p.a_log = Tensor::from_vec(&[d], a_log);
        p.delta_bias = Tensor::from_vec(&[d], bias);
        p
    }

    #[test]
    fn zero_step_limit() {
        let p = params(2, vec![0.0, 1.5], vec![0.0, 0.0]);
        let b = [3.0, -2.0];
        let out = discretize(&p, &[-40.0, -40.0], &b).unwrap();
        for j in 0..2 {
            assert!((out.a[j] - 1.0).abs() < 1e-15);
            assert!(out.bcoef[j].abs() < 1e-15 * b[j].abs());
        }
    }

    #[test]
    fn hand_evaluated_half_decay() {
        // softplus(x) = ln 2 at x = 0; A = -1.
        let p = params(1, vec![0.0], vec![0.0]);
        let out = discretize(&p, &[0.0], &[1.0]).unwrap();
        assert!((out.delta_bar[0] - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((out.a[0] - 0.5).abs() < 1e-15);
        assert!((out.bcoef[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_step_limit() {
        let a_log = vec![0.3, -0.7];
        let p = params(2, a_log.clone(), vec![0.0, 0.0]);
        let b = [2.0, -1.0];
        let out = discretize(&p, &[800.0, 800.0], &b).unwrap();
        for j in 0..2 {
            assert!(out.a[j] < 1e-150);
            let limit = b[j] * (-a_log[j]).exp();
            assert!((out.bcoef[j] - limit).abs() < 1e-14 * limit.abs());
        }
    }

    #[test]
    fn rejects_wrong_lengths() {
        let p = params(2, vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(discretize(&p, &[0.0], &[0.0, 0.0]).is_err());
    }
}
