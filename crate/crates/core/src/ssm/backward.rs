use super::forward::StateTrace;
use super::{BufferMode, MambaParams, SsmError};
use crate::numerics::{sigmoid, silu, silu_grad};
use crate::tensor::Tensor;

/// Reverse-mode gradients of one block.
#[derive(Debug, Clone)]
pub struct MambaGrads {
    pub a_log: Tensor,
    pub delta_bias: Tensor,
    /// Gradient of the fused buffer weight; `None` when not requested.
    pub fused: Option<Tensor>,
    /// Gradient of the gate weight; `None` when the gate is disabled or not requested.
    pub gate_weight: Option<Tensor>,
    pub x0: Vec<f64>,
    /// Gradient with respect to the raw block input `u`.
    pub input: Tensor,
    /// Gradient with respect to each step's buffer row `[δ_raw | B | C]`, `T × 3d`.
    pub row_grads: Tensor,
}

/// Which weight gradients to materialise. Row and input gradients are
/// always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub fused: bool,
    pub gate: bool,
}

impl Default for GradRequest {
    fn default() -> Self {
        Self {
            fused: true,
            gate: true,
        }
    }
}

pub fn mamba_backward(params: &MambaParams, trace: &StateTrace, dl_dy: &Tensor) -> Result<MambaGrads, SsmError> {
    mamba_backward_with(params, trace, dl_dy, GradRequest::default())
}

/// Backward pass through readout, scan, discretisation, softplus, the
/// log-space decay parameterisation, the fused buffer and the gate.
///
/// The state cotangent runs backwards through
/// `dL/dx_{t-1} = a_t ⊙ dL/dx_t + C_{t-1} ⊙ dL/dy_{t-1}`; every stage
/// output is rounded to the trace's gradient format.
pub fn mamba_backward_with(
    params: &MambaParams,
    trace: &StateTrace,
    dl_dy: &Tensor,
    request: GradRequest,
) -> Result<MambaGrads, SsmError> {
    let d = params.d;
    let t_len = trace.len();
    if trace.dim() != d {
        return Err(SsmError::ShapeMismatch(format!(
            "trace has dimension {}, params have {d}",
            trace.dim()
        )));
    }
    if dl_dy.shape() != [t_len, d] {
        return Err(SsmError::ShapeMismatch(format!(
            "output gradient must be [{t_len}, {d}], got {:?}",
            dl_dy.shape()
        )));
    }
    if trace.gate_pre.is_some() != params.gate_enabled {
        return Err(SsmError::ShapeMismatch(
            "trace gate state does not match params".to_string(),
        ));
    }
    let policy = trace.policy;
    let act = policy.activation_format;
    let g = |x: f64| policy.grad(x);
    let a_cont: Vec<f64> = params.a().into_iter().map(|v| act.quantize(v)).collect();

    let mut g_a_log = vec![0.0; d];
    let mut g_bias = vec![0.0; d];
    let mut g_scan_in = Tensor::zeros2(t_len, d);
    let mut row_grads = Tensor::zeros2(t_len, 3 * d);
    let mut carry = vec![0.0; d];

    for t in (0..t_len).rev() {
        let row = trace.rows.row(t);
        let x = trace.states.row(t);
        let x_prev = trace.prev_state(t).to_vec();
        let v = trace.scan_inputs.row(t);
        let gy = dl_dy.row(t);
        let mut grow = vec![0.0; 3 * d];
        for j in 0..d {
            let c = row[2 * d + j];
            let b_diag = row[d + j];
            let gyj = g(gy[j]);
            let gx = g(gyj * c + carry[j]);
            grow[2 * d + j] = gyj * x[j];

            let a_j = a_cont[j];
            let db = trace.delta_bar.at(t, j);
            let z = db * a_j;
            let ez = z.exp();
            let em1 = z.exp_m1();

            let g_decay = gx * x_prev[j];
            let g_drive = gx;
            let g_bcoef = g_drive * v[j];
            *g_scan_in.at_mut(t, j) = g_drive * trace.bcoef.at(t, j);

            // bcoef = B · expm1(Δ̄A) / A, decay = exp(Δ̄A)
            grow[d + j] = g_bcoef * em1 / a_j;
            let g_delta_bar = g_decay * ez * a_j + g_bcoef * b_diag * ez;
            let g_a = g_decay * ez * db + g_bcoef * b_diag * (db * ez * a_j - em1) / (a_j * a_j);
            let g_pre = g(g_delta_bar * sigmoid(trace.delta_pre.at(t, j)));
            grow[j] = g_pre;
            g_bias[j] += g_pre;
            // A = -exp(a_log) ⇒ dA/da_log = A
            g_a_log[j] += g_a * a_j;
            carry[j] = g(trace.decay.at(t, j) * gx);
        }
        for (dst, src) in row_grads.row_mut(t).iter_mut().zip(&grow) {
            *dst = g(*src);
        }
    }

    let fused = match params.mode() {
        BufferMode::TimeIndexed => request.fused.then(|| {
            let mut gw = Tensor::zeros2(params.fused.rows(), 3 * d);
            gw.data_mut()[..t_len * 3 * d].copy_from_slice(row_grads.data());
            gw
        }),
        BufferMode::InputProjected => {
            let w = params.fused.weight.clone().quantized(act);
            let back = row_grads.matmul_t(&w);
            g_scan_in.add_assign(&back);
            request.fused.then(|| trace.scan_inputs.t_matmul(&row_grads))
        }
    };
    g_scan_in.data_mut().iter_mut().for_each(|v| *v = g(*v));

    let (input, gate_weight) = match &trace.gate_pre {
        Some(z) => {
            let u = &trace.inputs;
            let mut gz = Tensor::zeros2(t_len, d);
            let mut gu = Tensor::zeros2(t_len, d);
            for i in 0..t_len * d {
                let zi = z.data()[i];
                let gv = g_scan_in.data()[i];
                gz.data_mut()[i] = g(gv * u.data()[i] * silu_grad(zi));
                gu.data_mut()[i] = gv * silu(zi);
            }
            let gate = params.gate_weight.clone().quantized(act);
            gu.add_assign(&gz.matmul_t(&gate));
            let gg = request.gate.then(|| u.t_matmul(&gz));
            (gu, gg)
        }
        None => (g_scan_in, None),
    };

    let quantized = |mut t: Tensor| {
        t.data_mut().iter_mut().for_each(|v| *v = g(*v));
        t
    };
    Ok(MambaGrads {
        a_log: quantized(Tensor::from_vec(&[d], g_a_log)),
        delta_bias: quantized(Tensor::from_vec(&[d], g_bias)),
        fused: fused.map(quantized),
        gate_weight: gate_weight.map(quantized),
        x0: carry,
        input: quantized(input),
        row_grads,
    })
}
