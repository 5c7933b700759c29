//! `run.json`: the resolved job plus provenance, one per output directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::failure::Failure;
use crate::jobs::Job;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Everything needed to re-run the command, with defaults, config file
    /// and flags already merged.
    pub job: Job,
    pub argv: Vec<String>,
    pub seeds: Vec<u64>,
    pub threads: usize,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Writes via a temporary file and rename so a manifest is never partial.
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let dest = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(&tmp, bytes).map_err(|e| shape_evade::Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &dest).map_err(|e| shape_evade::Error::io(&dest, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, Failure> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| shape_evade::Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
