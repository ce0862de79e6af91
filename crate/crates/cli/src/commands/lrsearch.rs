//! `lrsearch`: grid search over the initial learning rate, scored on a
//! stratified validation holdout. A diverged cell records error 1.0 and
//! the search continues; ties select the smaller rate.

use std::path::Path;

use dsn_core::optim;

use crate::commands::{holdout_seed, load_splits, ExecOutcome};
use crate::config::FullConfig;
use crate::error::CliError;
use crate::manifest::checksum_data_dir;
use crate::metrics_csv::{render_lr_search, LrSearchRow};

pub const RESULT_FILE: &str = "lrsearch.csv";

/// Scores one learning rate; `None` means the run diverged.
fn score(
    base: &FullConfig,
    lr: f64,
    retained: &dsn_core::data::Dataset,
    holdout: &dsn_core::data::Dataset,
) -> Result<Option<f64>, CliError> {
    let mut cfg = base.clone();
    cfg.train.learning_rate = lr;
    let mut net = cfg.build_network()?;
    let tc = cfg.train.to_train_config();
    match optim::train(&mut net, retained, None, &tc) {
        Ok(_) => {
            let err = optim::evaluate_error(&net, holdout)
                .map_err(|e| CliError::Data(e.to_string()))?;
            Ok(Some(err))
        }
        Err(dsn_core::Error::Divergence { .. }) | Err(dsn_core::Error::DomainError { .. }) => {
            Ok(None)
        }
        Err(other) => Err(other.into()),
    }
}

pub struct SearchResult {
    pub rows: Vec<LrSearchRow>,
    pub chosen: f64,
}

pub fn search(
    config: &FullConfig,
    data_dir: &Path,
    grid: &[f64],
    holdout_fraction: f64,
) -> Result<SearchResult, CliError> {
    if grid.is_empty() {
        return Err(CliError::Config("the learning-rate grid is empty".into()));
    }
    for &lr in grid {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(CliError::Config(format!(
                "grid learning rates must be finite and non-negative, got {lr}"
            )));
        }
    }
    let (train, _test) = load_splits(config, data_dir)?;
    let (retained, holdout) = train
        .holdout_split(holdout_fraction, holdout_seed(config.train.seed))
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut rows = Vec::with_capacity(grid.len());
    for &lr in grid {
        let outcome = score(config, lr, &retained, &holdout)?;
        let (err, diverged) = match outcome {
            Some(e) => (e, false),
            None => (1.0, true),
        };
        println!(
            "lr {lr:<10}: validation_err {err:.4}{}",
            if diverged { " (diverged)" } else { "" }
        );
        rows.push(LrSearchRow {
            lr,
            validation_err: err,
            diverged,
        });
    }

    let mut chosen = rows[0].lr;
    let mut best = rows[0].validation_err;
    for r in &rows[1..] {
        if r.validation_err < best || (r.validation_err == best && r.lr < chosen) {
            best = r.validation_err;
            chosen = r.lr;
        }
    }
    println!("selected lr {chosen} (validation_err {best:.4})");
    Ok(SearchResult { rows, chosen })
}

pub fn run(
    config: &FullConfig,
    data_dir: &Path,
    grid: &[f64],
    holdout_fraction: f64,
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    let result = search(config, data_dir, grid, holdout_fraction)?;
    let path = out_dir.join(RESULT_FILE);
    std::fs::write(&path, render_lr_search(&result.rows, result.chosen))
        .map_err(|e| CliError::io(&path, e))?;
    Ok(ExecOutcome {
        artifacts: vec![RESULT_FILE.to_string()],
        data: checksum_data_dir(data_dir)?,
    })
}
