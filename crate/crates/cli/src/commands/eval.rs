//! `eval`: error rate of a checkpoint on one split. Read-only; prints the
//! result and writes nothing.

use std::path::Path;

use dsn_core::optim::evaluate_error;

use crate::checkpoint;
use crate::config::FullConfig;
use crate::error::CliError;
use crate::idx::{self, Split};

pub fn run(
    config: &FullConfig,
    checkpoint_path: &Path,
    data_dir: &Path,
    split: Split,
) -> Result<f64, CliError> {
    let mut net = config.build_network()?;
    let params = checkpoint::load(checkpoint_path)?;
    net.load_params(&params).map_err(|e| {
        CliError::Data(format!(
            "{} does not match the configured architecture: {e}",
            checkpoint_path.display()
        ))
    })?;
    let data = idx::load_split(data_dir, split, config.network.classes)?;
    let err = evaluate_error(&net, &data)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!("split={name} samples={} error={err}", data.len());
    Ok(err)
}
