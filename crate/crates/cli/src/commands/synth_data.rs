//! `synth-data`: renders the synthetic digit corpus into a data directory.

use std::path::Path;

use crate::commands::ExecOutcome;
use crate::error::CliError;
use crate::idx;
use crate::synth::{self, CorpusSpec};

pub fn run(
    seed: u64,
    train: usize,
    test: usize,
    classes: usize,
    difficulty: f64,
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    let spec = CorpusSpec {
        train,
        test,
        classes,
        difficulty,
        seed,
    };
    synth::write_corpus(out_dir, &spec)?;
    println!(
        "wrote {train} training and {test} test samples ({classes} classes, \
         difficulty {difficulty}) to {}",
        out_dir.display()
    );
    Ok(ExecOutcome {
        artifacts: vec![
            idx::TRAIN_IMAGES.to_string(),
            idx::TRAIN_LABELS.to_string(),
            idx::TEST_IMAGES.to_string(),
            idx::TEST_LABELS.to_string(),
        ],
        data: Default::default(),
    })
}
