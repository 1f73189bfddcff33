pub mod ablate;
pub mod bench;
pub mod detect;
pub mod eval;
pub mod retrieve;
pub mod synth;
pub mod train;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{CliError, Result};

/// Reads a JSON settings file; missing fields take their defaults.
pub(crate) fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("settings serialize") + "\n"))
}

pub(crate) fn require_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(CliError::usage(format!("--{name} must be positive")));
    }
    Ok(())
}
