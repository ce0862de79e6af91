//! Run manifests: every artifact directory gets a `manifest.json` holding
//! the fully resolved command (config inline, flags applied), the seed, the
//! tool version, and SHA-256 checksums of the data files consumed and the
//! artifacts produced. A manifest is sufficient to re-execute the run and
//! check, byte for byte, that the same artifacts come out.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FullConfig;
use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.json";

/// The resolved parameters of one command, sufficient to repeat it. Paths
/// are recorded as given on the command line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum CommandSpec {
    SynthData {
        seed: u64,
        train: usize,
        test: usize,
        classes: usize,
        difficulty: f64,
    },
    Train {
        config: FullConfig,
        data_dir: PathBuf,
    },
    Gradcheck {
        config: FullConfig,
        tolerance: f64,
        batch: usize,
    },
    Smallsample {
        config: FullConfig,
        data_dir: PathBuf,
        sizes: Vec<usize>,
        seeds: Vec<u64>,
    },
    ConvergenceRate {
        dimension: usize,
        lambda1: f64,
        lambda2: f64,
        sigma: f64,
        objective: String,
        schedule: String,
        t_list: Vec<u64>,
        trials: usize,
        seed: u64,
    },
    ConvergenceSpeedup {
        dimension: usize,
        lambda1: f64,
        lambda2_list: Vec<f64>,
        sigma: f64,
        schedule: String,
        t: u64,
        trials: usize,
        seed: u64,
    },
    Lrsearch {
        config: FullConfig,
        data_dir: PathBuf,
        grid: Vec<f64>,
        holdout: f64,
    },
    Gradvar {
        config: FullConfig,
        data_dir: PathBuf,
        window: usize,
    },
    DumpFeatures {
        config: FullConfig,
        checkpoint: PathBuf,
        data_dir: PathBuf,
        layer: usize,
        sample: usize,
        top_fraction: f64,
    },
}

impl CommandSpec {
    /// The seed that governs the run, for the manifest's top-level field.
    pub fn seed(&self) -> u64 {
        match self {
            CommandSpec::SynthData { seed, .. } => *seed,
            CommandSpec::Train { config, .. }
            | CommandSpec::Gradcheck { config, .. }
            | CommandSpec::Smallsample { config, .. }
            | CommandSpec::Lrsearch { config, .. }
            | CommandSpec::Gradvar { config, .. }
            | CommandSpec::DumpFeatures { config, .. } => config.train.seed,
            CommandSpec::ConvergenceRate { seed, .. }
            | CommandSpec::ConvergenceSpeedup { seed, .. } => *seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub command: CommandSpec,
    /// Checksums of the data files the run read, keyed by file name.
    pub data: BTreeMap<String, String>,
    /// Checksums of the artifacts the run wrote, keyed by file name
    /// relative to the output directory. The manifest itself is excluded.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Checksums the canonical data files that exist under `dir`.
pub fn checksum_data_dir(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for name in [
        crate::idx::TRAIN_IMAGES,
        crate::idx::TRAIN_LABELS,
        crate::idx::TEST_IMAGES,
        crate::idx::TEST_LABELS,
    ] {
        let path = dir.join(name);
        if path.is_file() {
            map.insert(name.to_string(), sha256_file(&path)?);
        }
    }
    Ok(map)
}

/// Checksums `names` (relative to `out_dir`) and writes the manifest next
/// to them.
pub fn write(
    out_dir: &Path,
    command: CommandSpec,
    data: BTreeMap<String, String>,
    artifact_names: &[String],
) -> Result<RunManifest, CliError> {
    let mut artifacts = BTreeMap::new();
    for name in artifact_names {
        artifacts.insert(name.clone(), sha256_file(&out_dir.join(name))?);
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: command.seed(),
        command,
        data,
        artifacts,
    };
    let path = out_dir.join(FILE_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

pub fn load(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Compares freshly produced artifacts against a manifest's records.
/// Returns the mismatched file names (empty means bitwise reproduction).
pub fn verify_artifacts(out_dir: &Path, expected: &RunManifest) -> Result<Vec<String>, CliError> {
    let mut bad = Vec::new();
    for (name, want) in &expected.artifacts {
        let path = out_dir.join(name);
        if !path.is_file() {
            bad.push(format!("{name} (missing)"));
            continue;
        }
        if sha256_file(&path)? != *want {
            bad.push(name.clone());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("out.csv");
        std::fs::write(&artifact, "a,b\n1,2\n").unwrap();
        let spec = CommandSpec::SynthData {
            seed: 5,
            train: 10,
            test: 4,
            classes: 10,
            difficulty: 1.0,
        };
        let written = write(
            dir.path(),
            spec,
            BTreeMap::new(),
            &["out.csv".to_string()],
        )
        .unwrap();
        let loaded = load(&dir.path().join(FILE_NAME)).unwrap();
        assert_eq!(loaded, written);
        assert_eq!(loaded.seed, 5);
        assert_eq!(loaded.artifacts.len(), 1);
    }

    #[test]
    fn verification_flags_changed_and_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("out.csv");
        std::fs::write(&artifact, "payload").unwrap();
        let spec = CommandSpec::SynthData {
            seed: 1,
            train: 1,
            test: 1,
            classes: 10,
            difficulty: 0.5,
        };
        let manifest = write(
            dir.path(),
            spec,
            BTreeMap::new(),
            &["out.csv".to_string()],
        )
        .unwrap();
        assert!(verify_artifacts(dir.path(), &manifest).unwrap().is_empty());
        std::fs::write(&artifact, "tampered").unwrap();
        assert_eq!(
            verify_artifacts(dir.path(), &manifest).unwrap(),
            vec!["out.csv".to_string()]
        );
        std::fs::remove_file(&artifact).unwrap();
        let bad = verify_artifacts(dir.path(), &manifest).unwrap();
        assert!(bad[0].contains("missing"));
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        std::fs::write(&path, "abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
