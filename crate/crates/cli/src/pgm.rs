//! Binary PGM (P5) output for rendered feature maps.

use std::fs;
use std::path::Path;

use dsn_core::diagnostics::GrayImage;

use crate::error::CliError;

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), CliError> {
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&image.pixels);
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
