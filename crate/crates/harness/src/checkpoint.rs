//! Checkpoint files.

use std::path::Path;

use moue_core::model::MoueModel;
use moue_core::warmstart::{load_checkpoint, save_checkpoint};

use crate::error::HarnessError;

pub fn write_checkpoint(path: &Path, model: &MoueModel) -> Result<(), HarnessError> {
    std::fs::write(path, save_checkpoint(model)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<MoueModel, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(load_checkpoint(&bytes)?)
}
