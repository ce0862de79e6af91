//! `rerun`: replays a manifest into a fresh directory and verifies the
//! artifacts come out byte for byte identical.

use std::path::Path;

use crate::commands::run_with_manifest;
use crate::error::CliError;
use crate::manifest::{self, verify_artifacts};

pub fn run(manifest_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let recorded = manifest::load(manifest_path)?;
    println!(
        "replaying {} (version {}, seed {})",
        manifest_path.display(),
        recorded.version,
        recorded.seed
    );
    run_with_manifest(recorded.command.clone(), out_dir)?;
    let mismatched = verify_artifacts(out_dir, &recorded)?;
    if mismatched.is_empty() {
        println!(
            "bitwise reproduction verified: {} artifact(s) match",
            recorded.artifacts.len()
        );
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "artifacts differ from the manifest: {}",
            mismatched.join(", ")
        )))
    }
}
