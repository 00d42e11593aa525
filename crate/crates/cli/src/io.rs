//! File IO wrappers over the byte-level codecs.

use std::path::{Path, PathBuf};

use ilctc_core::codec::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use ilctc_core::model::Checkpoint;
use ilctc_core::synth::Dataset;

use crate::error::CliError;

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.to_path_buf(), e))?;
    decode_dataset(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, encode_dataset(dataset)).map_err(|e| CliError::io(&path.to_path_buf(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.to_path_buf(), e))?;
    decode_checkpoint(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, encode_checkpoint(checkpoint))
        .map_err(|e| CliError::io(&path.to_path_buf(), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::io(&path.to_path_buf(), e))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(&PathBuf::from(parent), e))?;
        }
    }
    Ok(())
}
