//! `gradcheck`: sweeps every parameter of the configured network against
//! centered finite differences on a small random batch and reports the
//! worst relative error. Exit 0 on pass, 1 on fail; the offending parameter
//! path is printed and recorded.

use std::fmt::Write as _;
use std::path::Path;

use dsn_core::gradcheck::finite_difference_check;
use dsn_core::layers::ForwardCtx;
use dsn_core::rng::derive_stream;
use dsn_core::Tensor;
use rand::Rng;

use crate::commands::ExecOutcome;
use crate::config::FullConfig;
use crate::error::CliError;

const EPSILON: f64 = 1e-5;
const TAG_PROBE: u64 = 0x6763_6b00;

pub const REPORT_FILE: &str = "gradcheck.csv";

pub fn run(
    config: &FullConfig,
    tolerance: f64,
    batch: usize,
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    if batch == 0 {
        return Err(CliError::Config("batch must be at least 1".into()));
    }
    let mut net = config.build_network()?;
    let [c, h, w] = net.input_shape();
    let mut rng = derive_stream(config.train.seed, &[TAG_PROBE]);
    let values: Vec<f64> = (0..batch * c * h * w).map(|_| rng.gen::<f64>()).collect();
    let x = Tensor::from_values(&[batch, c, h, w], values)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let labels: Vec<usize> = (0..batch).map(|i| i % net.classes()).collect();

    // Train mode so the dropout path (mask fixed by the step counter) is
    // part of what gets verified.
    let ctx = ForwardCtx::train(1);
    let report = finite_difference_check(&mut net, &x, &labels, &ctx, EPSILON, tolerance)?;

    println!(
        "checked {} parameter entries, max relative error {:e}",
        report.checked, report.max_rel_err
    );
    if let Some(worst) = &report.worst {
        println!(
            "worst: {} element {} (analytic {:e}, numeric {:e})",
            worst.path, worst.element, worst.analytic, worst.numeric
        );
    }

    let mut csv = String::from("path,element,analytic,numeric,rel_err\n");
    for f in &report.failures {
        writeln!(
            csv,
            "{},{},{},{},{}",
            f.path, f.element, f.analytic, f.numeric, f.rel_err
        )
        .expect("string write");
    }
    let report_path = out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, csv).map_err(|e| CliError::io(&report_path, e))?;

    if report.passed() {
        println!("gradcheck: PASS (tolerance {tolerance:e})");
        Ok(ExecOutcome {
            artifacts: vec![REPORT_FILE.to_string()],
            data: Default::default(),
        })
    } else {
        for f in report.failures.iter().take(5) {
            println!(
                "FAIL {} element {}: analytic {:e} vs numeric {:e} (rel err {:e})",
                f.path, f.element, f.analytic, f.numeric, f.rel_err
            );
        }
        Err(CliError::CheckFailed(format!(
            "{} of {} entries over tolerance {tolerance:e}; worst at {}",
            report.failures.len(),
            report.checked,
            report
                .worst
                .map(|w| w.path)
                .unwrap_or_else(|| "unknown".into())
        )))
    }
}
