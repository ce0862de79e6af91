//! CSV writers for training logs, convergence trials, and sweep summaries.
//!
//! Floats print with Rust's shortest round-trip formatting, so rewriting
//! the same values byte-identically is guaranteed. Alpha values share one
//! field, joined with `;`, since the companion count varies per run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dsn_core::convergence::{Objective, SpeedupReport, StepSchedule, TrialStats};
use dsn_core::diagnostics::GradientVarianceReport;
use dsn_core::optim::MetricsLog;

use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";

pub fn schedule_name(s: StepSchedule) -> &'static str {
    match s {
        StepSchedule::ExactModulus => "1/(lambda*t)",
        StepSchedule::OneOverT => "1/t",
    }
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::POnly => "P",
        Objective::Full => "P+Q",
    }
}

pub fn render_metrics(log: &MetricsLog) -> String {
    let mut out = String::from("epoch,lr,alphas,p,q,gate_fraction,train_err,test_err\n");
    for e in &log.epochs {
        let alphas = e
            .alphas
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let test = e.test_err.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.lr, alphas, e.p, e.q, e.gate_fraction, e.train_err, test
        )
        .expect("string write");
    }
    out
}

pub fn write_metrics(path: &Path, log: &MetricsLog) -> Result<(), CliError> {
    fs::write(path, render_metrics(log)).map_err(|e| CliError::io(path, e))
}

pub fn render_trial_stats(rows: &[TrialStats]) -> String {
    let mut out =
        String::from("T,schedule,lambda1,lambda2,G,empirical_mean,bound,trials,standard_error\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            schedule_name(r.schedule),
            r.lambda1,
            r.lambda2,
            r.g,
            r.empirical_mean,
            r.bound,
            r.trials,
            r.std_error
        )
        .expect("string write");
    }
    out
}

pub fn write_trial_stats(path: &Path, rows: &[TrialStats]) -> Result<(), CliError> {
    fs::write(path, render_trial_stats(rows)).map_err(|e| CliError::io(path, e))
}

pub fn render_speedup(rows: &[(f64, f64, SpeedupReport)]) -> String {
    let mut out = String::from(
        "lambda1,lambda2,T,schedule,trials,p_mean,f_mean,mean_ratio,median_ratio,\
         theta_exact_schedule,theta_one_over_t\n",
    );
    for (l1, l2, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            l1,
            l2,
            r.t,
            schedule_name(r.schedule),
            r.trials,
            r.p_mean,
            r.f_mean,
            r.mean_ratio,
            r.median_ratio,
            r.theta_exact_schedule,
            r.theta_one_over_t
        )
        .expect("string write");
    }
    out
}

pub fn write_speedup(path: &Path, rows: &[(f64, f64, SpeedupReport)]) -> Result<(), CliError> {
    fs::write(path, render_speedup(rows)).map_err(|e| CliError::io(path, e))
}

/// One grid cell of a small-sample sweep.
pub struct SweepRow {
    pub method: &'static str,
    pub size: usize,
    pub seed: u64,
    pub train_err: f64,
    pub test_err: f64,
}

pub fn render_sweep_runs(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,size,seed,train_err,test_err\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.size, r.seed, r.train_err, r.test_err
        )
        .expect("string write");
    }
    out
}

/// Mean/stddev summary per method and size.
pub struct SweepSummaryRow {
    pub method: &'static str,
    pub size: usize,
    pub seeds: usize,
    pub mean_test_err: f64,
    pub std_test_err: f64,
}

pub fn render_sweep_summary(rows: &[SweepSummaryRow]) -> String {
    let mut out = String::from("method,size,seeds,mean_test_err,std_test_err\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.size, r.seeds, r.mean_test_err, r.std_test_err
        )
        .expect("string write");
    }
    out
}

pub fn render_gradient_variance(report: &GradientVarianceReport) -> String {
    let mut out = String::from("layer,dsn_variance,cnn_variance\n");
    for (i, (d, c)) in report
        .dsn_layer_variances
        .iter()
        .zip(&report.cnn_layer_variances)
        .enumerate()
    {
        let d = d.map(|v| v.to_string()).unwrap_or_default();
        let c = c.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{i},{d},{c}").expect("string write");
    }
    let ratio = report.ratio.map(|r| r.to_string()).unwrap_or_default();
    writeln!(
        out,
        "first_layer,{},{}\nratio,{ratio},",
        report.dsn_first_layer, report.cnn_first_layer
    )
    .expect("string write");
    out
}

/// Learning-rate search results; a diverged cell records error 1.0.
pub struct LrSearchRow {
    pub lr: f64,
    pub validation_err: f64,
    pub diverged: bool,
}

pub fn render_lr_search(rows: &[LrSearchRow], chosen: f64) -> String {
    let mut out = String::from("lr,validation_err,diverged,chosen\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.lr,
            r.validation_err,
            r.diverged,
            if r.lr == chosen { "yes" } else { "" }
        )
        .expect("string write");
    }
    out
}
