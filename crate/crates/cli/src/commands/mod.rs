pub mod divergence;
pub mod lora_verify;
pub mod lyapunov;
pub mod report;
pub mod scan_bench;
pub mod train;

use crate::error::{CliError, CliResult};

pub(crate) fn require(ok: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}
