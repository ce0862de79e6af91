//! `dsn`: train and evaluate deeply-supervised networks, verify their
//! gradients, run the strongly-convex SGD testbed, and replay any run from
//! its manifest.
//!
//! Exit codes: 0 success, 1 failed check, 2 config error, 3 data error,
//! 4 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dsn_cli::commands::{self, run_with_manifest};
use dsn_cli::config::{parse_gamma_flag, FullConfig, Overrides};
use dsn_cli::error::CliError;
use dsn_cli::idx::Split;
use dsn_cli::manifest::CommandSpec;

#[derive(Parser)]
#[command(
    name = "dsn",
    version,
    about = "Deeply-supervised network trainer, convergence lab, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a config file.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override every companion's gamma (a number, or "inf" for a gate
    /// that never opens)
    #[arg(long, value_name = "FLOAT|inf", value_parser = parse_gamma_flag)]
    gamma: Option<f64>,

    /// Override every companion's alpha
    #[arg(long, value_name = "FLOAT")]
    alpha: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<FullConfig, CliError> {
        let mut cfg = FullConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            gamma: self.gamma,
            alpha: self.alpha,
            seed: self.seed,
        });
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic digit corpus into a data directory
    SynthData {
        /// Output data directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training samples
        #[arg(long, default_value_t = 60_000)]
        train: usize,
        /// Test samples
        #[arg(long, default_value_t = 10_000)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Distortion strength; 0 renders clean glyphs
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
    },

    /// Train a network; writes checkpoint.dsn1, metrics.csv, manifest.json
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with the IDX data files
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Error rate of a checkpoint on one split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },

    /// Verify analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Largest allowed relative error
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Probe batch size
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Four-method comparison grid over training-set sizes and seeds
    Smallsample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Training-set sizes, comma separated, each divisible by the
        /// class count
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Seeds, comma separated; one run per (method, size, seed)
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Projected-SGD testbed on synthetic strongly-convex objectives
    Convergence {
        #[command(subcommand)]
        mode: ConvergenceMode,
    },

    /// Grid search over the initial learning rate on a validation holdout
    Lrsearch {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Learning rates, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Fraction of the training set held out for validation
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// First-layer gradient variance: configured network vs gate-shut twin
    Gradvar {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Steps in the measurement window
        #[arg(long, default_value_t = 64)]
        window: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Render a checkpoint's feature maps for one test sample as PGM files
    DumpFeatures {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Backbone stage: maps are taken after this layer index
        #[arg(long)]
        layer: usize,
        /// Test-sample index
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Fraction of activations kept per channel
        #[arg(long, default_value_t = 0.3)]
        top_fraction: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Replay a manifest and verify the artifacts reproduce bitwise
    Rerun {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConvergenceMode {
    /// Empirical E||W_T - W*||^2 against the closed-form bound over a list
    /// of time stamps
    Rate {
        #[arg(long, default_value_t = 10)]
        dimension: usize,
        #[arg(long)]
        lambda1: f64,
        #[arg(long)]
        lambda2: f64,
        /// Per-coordinate gradient-noise standard deviation
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// p|p-only for the output objective alone, f|full for P+Q
        #[arg(long, default_value = "full")]
        objective: String,
        /// exact for 1/(lambda t), one-over-t for 1/t
        #[arg(long, default_value = "exact")]
        schedule: String,
        /// Time stamps, comma separated
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        t_list: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Paired-trial improvement ratio of P+Q over P alone, swept over the
    /// companion modulus
    Speedup {
        #[arg(long, default_value_t = 10)]
        dimension: usize,
        #[arg(long)]
        lambda1: f64,
        /// Companion moduli, comma separated (0 allowed)
        #[arg(long, value_delimiter = ',', required = true)]
        lambda2_list: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value = "exact")]
        schedule: String,
        #[arg(long, default_value_t = 100)]
        t: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::SynthData {
            out,
            seed,
            train,
            test,
            classes,
            difficulty,
        } => {
            run_with_manifest(
                CommandSpec::SynthData {
                    seed,
                    train,
                    test,
                    classes,
                    difficulty,
                },
                &out,
            )?;
            Ok(())
        }
        Command::Train {
            config,
            data_dir,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(CommandSpec::Train { config, data_dir }, &out)?;
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data_dir,
            split,
        } => {
            let config = config.load()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            commands::eval::run(&config, &checkpoint, &data_dir, split)?;
            Ok(())
        }
        Command::Gradcheck {
            config,
            tolerance,
            batch,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(
                CommandSpec::Gradcheck {
                    config,
                    tolerance,
                    batch,
                },
                &out,
            )?;
            Ok(())
        }
        Command::Smallsample {
            config,
            data_dir,
            sizes,
            seeds,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(
                CommandSpec::Smallsample {
                    config,
                    data_dir,
                    sizes,
                    seeds,
                },
                &out,
            )?;
            Ok(())
        }
        Command::Convergence { mode } => {
            let (spec, out) = match mode {
                ConvergenceMode::Rate {
                    dimension,
                    lambda1,
                    lambda2,
                    sigma,
                    objective,
                    schedule,
                    t_list,
                    trials,
                    seed,
                    out,
                } => (
                    CommandSpec::ConvergenceRate {
                        dimension,
                        lambda1,
                        lambda2,
                        sigma,
                        objective,
                        schedule,
                        t_list,
                        trials,
                        seed,
                    },
                    out,
                ),
                ConvergenceMode::Speedup {
                    dimension,
                    lambda1,
                    lambda2_list,
                    sigma,
                    schedule,
                    t,
                    trials,
                    seed,
                    out,
                } => (
                    CommandSpec::ConvergenceSpeedup {
                        dimension,
                        lambda1,
                        lambda2_list,
                        sigma,
                        schedule,
                        t,
                        trials,
                        seed,
                    },
                    out,
                ),
            };
            run_with_manifest(spec, &out)?;
            Ok(())
        }
        Command::Lrsearch {
            config,
            data_dir,
            grid,
            holdout,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(
                CommandSpec::Lrsearch {
                    config,
                    data_dir,
                    grid,
                    holdout,
                },
                &out,
            )?;
            Ok(())
        }
        Command::Gradvar {
            config,
            data_dir,
            window,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(
                CommandSpec::Gradvar {
                    config,
                    data_dir,
                    window,
                },
                &out,
            )?;
            Ok(())
        }
        Command::DumpFeatures {
            config,
            checkpoint,
            data_dir,
            layer,
            sample,
            top_fraction,
            out,
        } => {
            let config = config.load()?;
            run_with_manifest(
                CommandSpec::DumpFeatures {
                    config,
                    checkpoint,
                    data_dir,
                    layer,
                    sample,
                    top_fraction,
                },
                &out,
            )?;
            Ok(())
        }
        Command::Rerun { manifest, out } => commands::rerun::run(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
