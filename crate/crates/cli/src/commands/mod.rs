//! Command implementations. Each command takes a fully resolved
//! [`CommandSpec`], works inside one output directory, and reports the
//! artifact names it wrote, so the shared runner can checksum them into the
//! manifest and `rerun` can replay any manifest through the same path.

pub mod convergence;
pub mod dump_features;
pub mod eval;
pub mod gradcheck;
pub mod gradvar;
pub mod lrsearch;
pub mod rerun;
pub mod smallsample;
pub mod synth_data;
pub mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dsn_core::data::Dataset;
use dsn_core::rng::derive_seed;

use crate::config::FullConfig;
use crate::error::CliError;
use crate::idx::{self, Split};
use crate::manifest::{self, CommandSpec, RunManifest};

/// Stream tag for cutting the configured per-class training subset.
const TAG_SUBSET: u64 = 0x6461_7461;
/// Stream tag for the validation holdout split.
const TAG_HOLDOUT: u64 = 0x766c_6964;

/// What a command produced, before the manifest is written.
pub struct ExecOutcome {
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
    /// Checksums of the data files consumed.
    pub data: BTreeMap<String, String>,
}

/// Runs one resolved command inside `out_dir`.
pub fn execute(spec: &CommandSpec, out_dir: &Path) -> Result<ExecOutcome, CliError> {
    match spec {
        CommandSpec::SynthData {
            seed,
            train,
            test,
            classes,
            difficulty,
        } => synth_data::run(*seed, *train, *test, *classes, *difficulty, out_dir),
        CommandSpec::Train { config, data_dir } => train::run(config, data_dir, out_dir),
        CommandSpec::Gradcheck {
            config,
            tolerance,
            batch,
        } => gradcheck::run(config, *tolerance, *batch, out_dir),
        CommandSpec::Smallsample {
            config,
            data_dir,
            sizes,
            seeds,
        } => smallsample::run(config, data_dir, sizes, seeds, out_dir),
        CommandSpec::ConvergenceRate { .. } => convergence::run_rate(spec, out_dir),
        CommandSpec::ConvergenceSpeedup { .. } => convergence::run_speedup(spec, out_dir),
        CommandSpec::Lrsearch {
            config,
            data_dir,
            grid,
            holdout,
        } => lrsearch::run(config, data_dir, grid, *holdout, out_dir),
        CommandSpec::Gradvar {
            config,
            data_dir,
            window,
        } => gradvar::run(config, data_dir, *window, out_dir),
        CommandSpec::DumpFeatures {
            config,
            checkpoint,
            data_dir,
            layer,
            sample,
            top_fraction,
        } => dump_features::run(
            config,
            checkpoint,
            data_dir,
            *layer,
            *sample,
            *top_fraction,
            out_dir,
        ),
    }
}

/// Executes a command and seals its output directory with a manifest.
pub fn run_with_manifest(spec: CommandSpec, out_dir: &Path) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let outcome = execute(&spec, out_dir)?;
    manifest::write(out_dir, spec, outcome.data, &outcome.artifacts)
}

/// Loads the train and test splits, applying the config's per-class subset
/// to the training side. The subset seed derives from the run seed, so the
/// same config and seed always see the same samples.
pub fn load_splits(
    config: &FullConfig,
    data_dir: &Path,
) -> Result<(Dataset, Dataset), CliError> {
    let classes = config.network.classes;
    let train = idx::load_split(data_dir, Split::Train, classes)?;
    let test = idx::load_split(data_dir, Split::Test, classes)?;
    let train = match config.data.train_per_class {
        Some(per_class) => train
            .subsample_per_class(per_class, derive_seed(config.train.seed, &[TAG_SUBSET]))
            .map_err(|e| CliError::Data(e.to_string()))?,
        None => train,
    };
    Ok((train, test))
}

/// Holdout seed for validation splits, derived from the run seed.
pub fn holdout_seed(seed: u64) -> u64 {
    derive_seed(seed, &[TAG_HOLDOUT])
}
