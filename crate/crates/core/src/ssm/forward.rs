use super::discretize::zoh;
use super::scan::{scan_parallel_in, ScanElement};
use super::{BufferMode, MambaParams, SsmError};
use crate::numerics::{silu, softplus, PrecisionPolicy};
use crate::tensor::Tensor;

/// Chunk length used by the forward pass when dispatching the scan.
pub const FORWARD_SCAN_CHUNK: usize = 256;

/// Everything a forward pass produced, kept for the backward pass and for
/// the stability probes.
///
/// `states[t] = decay[t] ⊙ states[t-1] + drive[t]` with `states[-1] = x0`.
#[derive(Debug, Clone)]
pub struct StateTrace {
    pub policy: PrecisionPolicy,
    /// Raw block inputs `u`, `T × d`.
    pub inputs: Tensor,
    /// Gate pre-activation `u · G`, present when the gate is enabled.
    pub gate_pre: Option<Tensor>,
    /// Scan input after optional gating, `T × d`.
    pub scan_inputs: Tensor,
    /// Per-step buffer rows `[δ_raw | B | C]`, `T × 3d`.
    pub rows: Tensor,
    /// `δ_raw + delta_bias`, `T × d`.
    pub delta_pre: Tensor,
    /// Δ̄ after softplus, `T × d`.
    pub delta_bar: Tensor,
    pub decay: Tensor,
    pub bcoef: Tensor,
    pub drive: Tensor,
    pub states: Tensor,
    pub outputs: Tensor,
    pub x0: Vec<f64>,
}

impl StateTrace {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Previous state for step `t` (`x0` at `t = 0`).
    pub fn prev_state(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.x0
        } else {
            self.states.row(t - 1)
        }
    }

    pub fn scan_elements(&self) -> Vec<ScanElement> {
        (0..self.len())
            .map(|t| ScanElement::new(self.decay.row(t).to_vec(), self.drive.row(t).to_vec()))
            .collect()
    }
}

/// Parameters cast to the activation format once per call.
struct CastParams {
    a: Vec<f64>,
    delta_bias: Vec<f64>,
    fused: Tensor,
    gate: Option<Tensor>,
}

fn cast(params: &MambaParams, policy: &PrecisionPolicy) -> CastParams {
    let fmt = policy.activation_format;
    CastParams {
        a: params.a().into_iter().map(|v| fmt.quantize(v)).collect(),
        delta_bias: params.delta_bias.data().iter().map(|&v| fmt.quantize(v)).collect(),
        fused: params.fused.weight.clone().quantized(fmt),
        gate: params.gate_enabled.then(|| params.gate_weight.clone().quantized(fmt)),
    }
}

/// Run the selective SSM block over one sequence `u` (`T × d`).
///
/// Per step: fetch `[δ_raw | B | C]` from the fused buffer, discretise,
/// scan, and read out `y_t = C ⊙ x_t`. With the gate enabled the scan
/// input is `silu(u_t · G) ⊙ u_t`. Every stage output is rounded to the
/// policy's activation format.
pub fn mamba_forward(
    params: &MambaParams,
    u: &Tensor,
    x0: &[f64],
    policy: &PrecisionPolicy,
) -> Result<StateTrace, SsmError> {
    let d = params.d;
    if u.shape().len() != 2 || u.cols() != d {
        return Err(SsmError::ShapeMismatch(format!(
            "input must be T × {d}, got {:?}",
            u.shape()
        )));
    }
    if x0.len() != d {
        return Err(SsmError::ShapeMismatch(format!(
            "x0 has length {}, expected {d}",
            x0.len()
        )));
    }
    let t_len = u.rows();
    if t_len == 0 {
        return Err(SsmError::EmptySequence);
    }
    if params.mode() == BufferMode::TimeIndexed && t_len > params.t_max {
        return Err(SsmError::SequenceExceedsBuffer {
            len: t_len,
            t_max: params.t_max,
        });
    }
    let fmt = policy.activation_format;
    let cp = cast(params, policy);
    let inputs = u.clone().quantized(fmt);
    let x0: Vec<f64> = x0.iter().map(|&v| fmt.quantize(v)).collect();

    let (gate_pre, scan_inputs) = match &cp.gate {
        Some(g) => {
            let z = inputs.matmul(g).quantized(fmt);
            let mut v = Tensor::zeros2(t_len, d);
            for ((o, &zi), &ui) in v.data_mut().iter_mut().zip(z.data()).zip(inputs.data()) {
                *o = silu(zi) * ui;
            }
            (Some(z), v.quantized(fmt))
        }
        None => (None, inputs.clone()),
    };

    let rows = match params.mode() {
        BufferMode::TimeIndexed => {
            let w = cp.fused.data();
            Tensor::from_vec(&[t_len, 3 * d], w[..t_len * 3 * d].to_vec()).quantized(fmt)
        }
        BufferMode::InputProjected => scan_inputs.matmul(&cp.fused).quantized(fmt),
    };

    let mut delta_pre = Tensor::zeros2(t_len, d);
    let mut delta_bar = Tensor::zeros2(t_len, d);
    let mut decay = Tensor::zeros2(t_len, d);
    let mut bcoef = Tensor::zeros2(t_len, d);
    let mut drive = Tensor::zeros2(t_len, d);
    for t in 0..t_len {
        let row = rows.row(t);
        for j in 0..d {
            let s = fmt.quantize(row[j] + cp.delta_bias[j]);
            let db = fmt.quantize(softplus(s));
            let (a, bc) = zoh(db, cp.a[j], row[d + j], fmt);
            *delta_pre.at_mut(t, j) = s;
            *delta_bar.at_mut(t, j) = db;
            *decay.at_mut(t, j) = a;
            *bcoef.at_mut(t, j) = bc;
            *drive.at_mut(t, j) = fmt.quantize(bc * scan_inputs.at(t, j));
        }
    }
    for tensor in [&mut delta_pre, &mut delta_bar, &mut decay, &mut bcoef, &mut drive] {
        tensor.assume_format(fmt);
    }

    let elements: Vec<ScanElement> = (0..t_len)
        .map(|t| ScanElement::new(decay.row(t).to_vec(), drive.row(t).to_vec()))
        .collect();
    let mut states = scan_parallel_in(&elements, &x0, FORWARD_SCAN_CHUNK, fmt)?;
    states.assume_format(fmt);
    drop(elements);

    let mut outputs = Tensor::zeros2(t_len, d);
    for t in 0..t_len {
        for j in 0..d {
            *outputs.at_mut(t, j) = fmt.quantize(rows.at(t, 2 * d + j) * states.at(t, j));
        }
    }
    outputs.assume_format(fmt);

    Ok(StateTrace {
        policy: *policy,
        inputs,
        gate_pre,
        scan_inputs,
        rows,
        delta_pre,
        delta_bar,
        decay,
        bcoef,
        drive,
        states,
        outputs,
        x0,
    })
}
