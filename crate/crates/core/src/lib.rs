//! Desk-scale laboratory for selective state-space recurrences.
//!
//! * [`numerics`]: reduced-precision emulation and scalar primitives
//! * [`ssm`]: the selective SSM block, its scans and gradients
//! * [`dynamics`]: Lyapunov exponents and perturbation-divergence probes
//! * [`lora`]: low-rank adapters and the fused-buffer tying check
//! * [`train`]: AdamW/cosine fine-tuning harness with throughput and memory metering
//! * [`data`]: synthetic selective-copy task and byte-level corpora

pub mod data;
pub mod dynamics;
pub mod lora;
pub mod numerics;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;

/// Library version, recorded in every run manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
