//! Content hashes and the calibration artifact.

use crate::error::{CliError, CliResult};
use qcomp::allocator::TimingModel;
use qcomp::compensator::ResidualSpectrum;
use qcomp::ids::map_entries;
use qcomp::sensitivity::SensitivityReport;
use qcomp::{MatrixId, WindowKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const ARTIFACT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn expect_hash(what: &str, recorded: Option<&str>, actual: &str) -> CliResult<()> {
    match recorded {
        None => Err(CliError::Provenance(format!("{what} hash is not recorded"))),
        Some(r) if r != actual => Err(CliError::Provenance(format!(
            "{what} hash mismatch: recorded {r}, found {actual}"
        ))),
        Some(_) => Ok(()),
    }
}

/// Everything `calibrate` measures, keyed to the fixture and config it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub fixture_sha256: String,
    pub config_sha256: String,
    pub spectra: Vec<ResidualSpectrum>,
    pub sensitivity: SensitivityReport,
    #[serde(with = "map_entries")]
    pub expert_scores: BTreeMap<MatrixId, f64>,
    pub timing: TimingModel,
    pub r_std: BTreeMap<WindowKind, usize>,
    /// Fields whose values depend on wall-clock measurements.
    pub nondeterministic: Vec<String>,
}

impl CalibrationArtifact {
    pub fn spectra_map(&self) -> BTreeMap<MatrixId, ResidualSpectrum> {
        self.spectra.iter().map(|s| (s.matrix_id, s.clone())).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    /// Parses and checks the version and the config hash.
    pub fn load(path: &Path, config_sha256: &str) -> CliResult<(Self, String)> {
        let bytes = read(path)?;
        let a: Self = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: not a calibration artifact: {e}", path.display())))?;
        if a.version != ARTIFACT_VERSION {
            return Err(CliError::Provenance(format!(
                "artifact version {} (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        expect_hash("config", Some(&a.config_sha256), config_sha256)?;
        Ok((a, sha256_hex(&bytes)))
    }
}
