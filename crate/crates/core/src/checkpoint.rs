//! Versioned JSON checkpoint files.
//!
//! ```json
//! {"format_version": 1, "architecture": {...}, "step": 200, "params": [0.1, ...]}
//! ```
//!
//! Parameters are written as shortest round-trip decimals and parsed with
//! correct rounding, so a save/load cycle reproduces every finite value bit
//! for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ParamVector, PolicyArchitecture, PolicySnapshot};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    architecture: &'a PolicyArchitecture,
    step: u64,
    params: &'a ParamVector,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format_version: u32,
    architecture: PolicyArchitecture,
    step: u64,
    params: ParamVector,
}

pub fn save_checkpoint(path: &Path, snapshot: &PolicySnapshot) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("json.tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &CheckpointOut {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: &snapshot.arch,
            step: snapshot.step,
            params: &snapshot.params,
        },
    )
    .map_err(|e| Error::json(path, e))?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicySnapshot> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: CheckpointIn =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
    if raw.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            raw.format_version
        )));
    }
    let arch = raw.architecture.validated()?;
    PolicySnapshot::new(arch, raw.params, raw.step)
}
