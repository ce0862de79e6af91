//! `convergence`: the synthetic strongly-convex testbed. `rate` runs
//! projected SGD against the closed-form distance bounds over a list of
//! time stamps; `speedup` sweeps the companion modulus and reports the
//! paired-trial improvement ratio with the predicted asymptotic forms.

use std::path::Path;

use dsn_core::convergence::{make_quadratic_pair, run_sgd, speedup_ratio, Objective, StepSchedule};
use dsn_core::rng::derive_seed;

use crate::commands::ExecOutcome;
use crate::error::CliError;
use crate::manifest::CommandSpec;
use crate::metrics_csv::{objective_name, schedule_name, write_speedup, write_trial_stats};

pub const RATE_FILE: &str = "convergence.csv";
pub const SPEEDUP_FILE: &str = "speedup.csv";

const TAG_CELL: u64 = 0x7261_7465;

pub fn parse_objective(text: &str) -> Result<Objective, CliError> {
    match text {
        "p" | "p-only" => Ok(Objective::POnly),
        "f" | "full" => Ok(Objective::Full),
        other => Err(CliError::Config(format!(
            "objective must be p|p-only|f|full, got {other:?}"
        ))),
    }
}

pub fn parse_schedule(text: &str) -> Result<StepSchedule, CliError> {
    match text {
        "exact" => Ok(StepSchedule::ExactModulus),
        "one-over-t" => Ok(StepSchedule::OneOverT),
        other => Err(CliError::Config(format!(
            "schedule must be exact|one-over-t, got {other:?}"
        ))),
    }
}

pub fn run_rate(spec: &CommandSpec, out_dir: &Path) -> Result<ExecOutcome, CliError> {
    let CommandSpec::ConvergenceRate {
        dimension,
        lambda1,
        lambda2,
        sigma,
        objective,
        schedule,
        t_list,
        trials,
        seed,
    } = spec
    else {
        unreachable!("rate runner called with a non-rate spec");
    };
    let objective = parse_objective(objective)?;
    let schedule = parse_schedule(schedule)?;
    if t_list.is_empty() {
        return Err(CliError::Config("the T list must not be empty".into()));
    }
    let pair = make_quadratic_pair(*dimension, *lambda1, *lambda2, *sigma, *seed)?;
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let stats = run_sgd(
            &pair,
            objective,
            schedule,
            t,
            *trials,
            derive_seed(*seed, &[TAG_CELL, t]),
        )?;
        println!(
            "objective {} schedule {} T {:>6}: empirical {:.6e} bound {:.6e} (SE {:.2e}, {} trials)",
            objective_name(stats.objective),
            schedule_name(stats.schedule),
            stats.t,
            stats.empirical_mean,
            stats.bound,
            stats.std_error,
            stats.trials
        );
        rows.push(stats);
    }
    write_trial_stats(&out_dir.join(RATE_FILE), &rows)?;
    Ok(ExecOutcome {
        artifacts: vec![RATE_FILE.to_string()],
        data: Default::default(),
    })
}

pub fn run_speedup(spec: &CommandSpec, out_dir: &Path) -> Result<ExecOutcome, CliError> {
    let CommandSpec::ConvergenceSpeedup {
        dimension,
        lambda1,
        lambda2_list,
        sigma,
        schedule,
        t,
        trials,
        seed,
    } = spec
    else {
        unreachable!("speedup runner called with a non-speedup spec");
    };
    let schedule = parse_schedule(schedule)?;
    if lambda2_list.is_empty() {
        return Err(CliError::Config("the lambda2 list must not be empty".into()));
    }
    let mut rows = Vec::with_capacity(lambda2_list.len());
    for &lambda2 in lambda2_list {
        // One seed across the sweep: the paired common-random-number
        // streams then also line up between lambda2 values.
        let pair = make_quadratic_pair(*dimension, *lambda1, lambda2, *sigma, *seed)?;
        let report = speedup_ratio(&pair, schedule, *t, *trials, *seed)?;
        println!(
            "lambda2 {lambda2:>8}: median ratio {:.4} mean ratio {:.4} \
             (predicted orders: exact {:.2}, 1/t {:.3e})",
            report.median_ratio, report.mean_ratio, report.theta_exact_schedule,
            report.theta_one_over_t
        );
        rows.push((*lambda1, lambda2, report));
    }
    write_speedup(&out_dir.join(SPEEDUP_FILE), &rows)?;
    Ok(ExecOutcome {
        artifacts: vec![SPEEDUP_FILE.to_string()],
        data: Default::default(),
    })
}
