//! `gradvar`: first-layer gradient-variance comparison between the
//! configured network and its gate-shut twin over a window of real
//! training steps.

use std::path::Path;

use dsn_core::diagnostics::gradient_variance;

use crate::commands::{load_splits, ExecOutcome};
use crate::config::FullConfig;
use crate::error::{training_error, CliError};
use crate::manifest::checksum_data_dir;
use crate::metrics_csv::render_gradient_variance;

pub const RESULT_FILE: &str = "gradvar.csv";

pub fn run(
    config: &FullConfig,
    data_dir: &Path,
    window: usize,
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    let net = config.build_network()?;
    let (train_set, _) = load_splits(config, data_dir)?;
    let tc = config.train.to_train_config();
    let report = gradient_variance(&net, &train_set, &tc, window).map_err(training_error)?;

    println!(
        "first-layer gradient variance over {} steps: supervised {:e}, gate-shut {:e}",
        report.window, report.dsn_first_layer, report.cnn_first_layer
    );
    match report.ratio {
        Some(r) => println!("ratio (supervised / gate-shut): {r}"),
        None => println!("ratio undefined: the gate-shut gradients were constant"),
    }

    let path = out_dir.join(RESULT_FILE);
    std::fs::write(&path, render_gradient_variance(&report))
        .map_err(|e| CliError::io(&path, e))?;
    Ok(ExecOutcome {
        artifacts: vec![RESULT_FILE.to_string()],
        data: checksum_data_dir(data_dir)?,
    })
}
