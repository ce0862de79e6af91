//! `dump-features`: renders a checkpointed network's feature maps at one
//! stage for one test sample as PGM images, keeping only the strongest
//! fraction of activations per channel.

use std::path::Path;

use dsn_core::diagnostics::{dump_feature_maps, GrayImage};

use crate::checkpoint;
use crate::commands::ExecOutcome;
use crate::config::FullConfig;
use crate::error::CliError;
use crate::idx::{self, Split};
use crate::manifest::checksum_data_dir;
use crate::pgm::write_pgm;

#[allow(clippy::too_many_arguments)]
pub fn run(
    config: &FullConfig,
    checkpoint_path: &Path,
    data_dir: &Path,
    layer: usize,
    sample: usize,
    top_fraction: f64,
    out_dir: &Path,
) -> Result<ExecOutcome, CliError> {
    let mut net = config.build_network()?;
    let params = checkpoint::load(checkpoint_path)?;
    net.load_params(&params).map_err(|e| {
        CliError::Data(format!(
            "{} does not match the configured architecture: {e}",
            checkpoint_path.display()
        ))
    })?;

    let test = idx::load_split(data_dir, Split::Test, config.network.classes)?;
    if sample >= test.len() {
        return Err(CliError::Data(format!(
            "sample index {sample} out of range for the {}-sample test split",
            test.len()
        )));
    }
    let image = test.image(sample).map_err(|e| CliError::Data(e.to_string()))?;

    let maps = dump_feature_maps(&net, &image, layer, top_fraction)?;
    let mut artifacts = Vec::with_capacity(maps.len() + 1);

    // The raw input alongside, for orientation.
    let [_, h, w] = test.sample_shape();
    let input = GrayImage {
        width: w,
        height: h,
        pixels: image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    let input_name = "input.pgm".to_string();
    write_pgm(&out_dir.join(&input_name), &input)?;
    artifacts.push(input_name);

    for (k, map) in maps.iter().enumerate() {
        let name = format!("layer{layer}-channel{k}.pgm");
        write_pgm(&out_dir.join(&name), map)?;
        artifacts.push(name);
    }
    println!(
        "wrote {} channel map(s) for test sample {sample} (label {}) after layer {layer}",
        maps.len(),
        test.labels()[sample]
    );
    Ok(ExecOutcome {
        artifacts,
        data: checksum_data_dir(data_dir)?,
    })
}
