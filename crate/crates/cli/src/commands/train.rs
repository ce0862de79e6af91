//! `train`: fits the configured network and writes a checkpoint, the
//! per-epoch metrics CSV, and the run manifest.

use std::path::Path;

use dsn_core::optim;

use crate::checkpoint;
use crate::commands::{load_splits, ExecOutcome};
use crate::config::FullConfig;
use crate::error::{training_error, CliError};
use crate::manifest::checksum_data_dir;
use crate::metrics_csv;

pub fn run(config: &FullConfig, data_dir: &Path, out_dir: &Path) -> Result<ExecOutcome, CliError> {
    let mut net = config.build_network()?;
    let (train_set, test_set) = load_splits(config, data_dir)?;
    let tc = config.train.to_train_config();
    let log = optim::train(&mut net, &train_set, Some(&test_set), &tc).map_err(training_error)?;

    checkpoint::save(&out_dir.join(checkpoint::FILE_NAME), &net.dump_params())?;
    metrics_csv::write_metrics(&out_dir.join(metrics_csv::METRICS_FILE), &log)?;

    for e in &log.epochs {
        let test = e
            .test_err
            .map(|t| format!("{t:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  lr {:<10.6} P {:<12.6} Q {:<12.6} gate {:.2}  train_err {:.4}  test_err {test}",
            e.epoch, e.lr, e.p, e.q, e.gate_fraction, e.train_err
        );
    }
    Ok(ExecOutcome {
        artifacts: vec![
            checkpoint::FILE_NAME.to_string(),
            metrics_csv::METRICS_FILE.to_string(),
        ],
        data: checksum_data_dir(data_dir)?,
    })
}
