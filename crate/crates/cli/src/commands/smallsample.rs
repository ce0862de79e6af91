//! `smallsample`: the four-method comparison grid over training-set sizes
//! and seeds. Every method at a fixed (size, seed) trains on the identical
//! subset, so differences come from the objective, not the draw.

use std::path::Path;

use dsn_core::data::Dataset;
use dsn_core::optim;
use dsn_core::rng::derive_seed;

use crate::commands::ExecOutcome;
use crate::config::{FullConfig, HeadKindConfig};
use crate::error::{training_error, CliError};
use crate::idx::{self, Split};
use crate::manifest::checksum_data_dir;
use crate::metrics_csv::{render_sweep_runs, render_sweep_summary, SweepRow, SweepSummaryRow};

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

const TAG_CELL: u64 = 0x6365_6c6c;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    CnnSoftmax,
    CnnSvm,
    DsnSoftmax,
    DsnSvm,
}

pub const METHODS: [Method; 4] = [
    Method::CnnSoftmax,
    Method::CnnSvm,
    Method::DsnSoftmax,
    Method::DsnSvm,
];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CnnSoftmax => "CNN-Softmax",
            Method::CnnSvm => "CNN-SVM",
            Method::DsnSoftmax => "DSN-Softmax",
            Method::DsnSvm => "DSN-SVM",
        }
    }

    /// Derives this method's config from the base one: CNN variants drop
    /// the companions, and every head takes the method's loss kind.
    pub fn config(self, base: &FullConfig) -> FullConfig {
        let mut cfg = base.clone();
        let kind = match self {
            Method::CnnSoftmax | Method::DsnSoftmax => HeadKindConfig::Softmax,
            Method::CnnSvm | Method::DsnSvm => HeadKindConfig::Svm,
        };
        cfg.network.output = kind;
        match self {
            Method::CnnSoftmax | Method::CnnSvm => cfg.network.companions.clear(),
            Method::DsnSoftmax | Method::DsnSvm => {
                for c in &mut cfg.network.companions {
                    c.kind = kind;
                }
            }
        }
        cfg
    }
}

/// One completed grid cell.
pub struct CellResult {
    pub method: &'static str,
    pub size: usize,
    pub seed: u64,
    pub train_err: f64,
    pub test_err: f64,
}

/// Trains the full grid. Public for the acceptance tests, which inspect
/// the numbers rather than the CSV.
pub fn run_grid(
    base: &FullConfig,
    data_dir: &Path,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<CellResult>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("the seed list must not be empty".into()));
    }
    if sizes.is_empty() {
        return Err(CliError::Config("the size list must not be empty".into()));
    }
    let classes = base.network.classes;
    for &s in sizes {
        if s == 0 || s % classes != 0 {
            return Err(CliError::Config(format!(
                "size {s} is not divisible by the class count {classes}"
            )));
        }
    }

    let full_train = idx::load_split(data_dir, Split::Train, classes)?;
    let test = idx::load_split(data_dir, Split::Test, classes)?;

    let mut cells = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            let subset = cell_subset(&full_train, size, seed)?;
            for method in METHODS {
                let mut cfg = method.config(base);
                cfg.train.seed = seed;
                // The subset is drawn here, once per (size, seed).
                cfg.data.train_per_class = None;
                let mut net = cfg.build_network()?;
                let tc = cfg.train.to_train_config();
                let log = optim::train(&mut net, &subset, None, &tc).map_err(training_error)?;
                let train_err = log.epochs.last().map(|e| e.train_err).unwrap_or(1.0);
                let test_err = optim::evaluate_error(&net, &test)?;
                println!(
                    "{:<12} size {size:>6} seed {seed:>3}: train_err {train_err:.4} test_err {test_err:.4}",
                    method.name()
                );
                cells.push(CellResult {
                    method: method.name(),
                    size,
                    seed,
                    train_err,
                    test_err,
                });
            }
        }
    }
    Ok(cells)
}

/// The class-balanced subset a grid cell trains on. Every method in the
/// cell shares it, so method comparisons see identical data.
pub fn cell_subset(full_train: &Dataset, size: usize, seed: u64) -> Result<Dataset, CliError> {
    let per_class = size / full_train.classes();
    full_train
        .subsample_per_class(per_class, derive_seed(seed, &[TAG_CELL, size as u64]))
        .map_err(|e| CliError::Data(e.to_string()))
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(cells: &[CellResult], sizes: &[usize], seeds: usize) -> Vec<SweepSummaryRow> {
    let mut rows = Vec::new();
    for &size in sizes {
        for method in METHODS {
            let errs: Vec<f64> = cells
                .iter()
                .filter(|c| c.size == size && c.method == method.name())
                .map(|c| c.test_err)
                .collect();
            let (mean, std) = mean_std(&errs);
            rows.push(SweepSummaryRow {
                method: method.name(),
                size,
                seeds,
                mean_test_err: mean,
                std_test_err: std,
            });
        }
    }
    rows
}

pub fn run(
    base: &FullConfig,
    data_dir: &Path,
    sizes: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    let cells = run_grid(base, data_dir, sizes, seeds)?;
    let rows: Vec<SweepRow> = cells
        .iter()
        .map(|c| SweepRow {
            method: c.method,
            size: c.size,
            seed: c.seed,
            train_err: c.train_err,
            test_err: c.test_err,
        })
        .collect();
    let summary = summarize(&cells, sizes, seeds.len());

    let runs_path = out_dir.join(RUNS_FILE);
    std::fs::write(&runs_path, render_sweep_runs(&rows))
        .map_err(|e| CliError::io(&runs_path, e))?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, render_sweep_summary(&summary))
        .map_err(|e| CliError::io(&summary_path, e))?;

    println!("\nmean test error over {} seed(s):", seeds.len());
    for row in &summary {
        println!(
            "{:<12} size {:>6}: {:.4} +- {:.4}",
            row.method, row.size, row.mean_test_err, row.std_test_err
        );
    }
    Ok(ExecOutcome {
        artifacts: vec![RUNS_FILE.to_string(), SUMMARY_FILE.to_string()],
        data: checksum_data_dir(data_dir)?,
    })
}
