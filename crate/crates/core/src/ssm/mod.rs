//! The selective state-space block: parameters, discretisation, scans,
//! forward and backward passes, and checkpoints.

mod backward;
pub mod checkpoint;
mod discretize;
mod forward;
pub(crate) mod params;
mod scan;

pub use backward::{mamba_backward, mamba_backward_with, GradRequest, MambaGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Container};
pub use discretize::{discretize, Discretized};
pub use forward::{mamba_forward, StateTrace, FORWARD_SCAN_CHUNK};
pub use params::{BufferMode, FusedBuffer, MambaConfig, MambaParams};
pub use scan::{scan_parallel, scan_parallel_in, scan_sequential, scan_sequential_in, with_workers, ScanElement};

#[derive(Debug, thiserror::Error)]
pub enum SsmError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence exceeds buffer: length {len} > t_max {t_max}")]
    SequenceExceedsBuffer { len: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
