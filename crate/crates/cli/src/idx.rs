//! IDX container reading and writing.
//!
//! The layout is the classic one: a big-endian 32-bit magic (0x00000803
//! for rank-3 byte images, 0x00000801 for rank-1 byte labels), one
//! big-endian 32-bit extent per dimension, then the raw bytes in row-major
//! order. Pixels load as `f64` in `[0, 1]` (byte / 255); labels load as
//! class indices.

use std::fs;
use std::path::{Path, PathBuf};

use dsn_core::data::Dataset;
use dsn_core::Tensor;

use crate::error::CliError;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Canonical file names within a data directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn image_file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_IMAGES,
            Split::Test => TEST_IMAGES,
        }
    }

    pub fn label_file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_LABELS,
            Split::Test => TEST_LABELS,
        }
    }
}

fn take_u32(bytes: &[u8], at: &mut usize, path: &Path) -> Result<u32, CliError> {
    let end = *at + 4;
    if end > bytes.len() {
        return Err(CliError::Data(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let v = u32::from_be_bytes(bytes[*at..end].try_into().expect("4-byte slice"));
    *at = end;
    Ok(v)
}

fn read_payload(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut at = 0usize;
    let found = take_u32(&bytes, &mut at, path)?;
    if found != magic {
        return Err(CliError::Data(format!(
            "{}: magic 0x{found:08x}, expected 0x{magic:08x}",
            path.display()
        )));
    }
    let mut extents = Vec::with_capacity(dims);
    let mut total = 1usize;
    for _ in 0..dims {
        let e = take_u32(&bytes, &mut at, path)? as usize;
        total = total.checked_mul(e).ok_or_else(|| {
            CliError::Data(format!("{}: extent product overflows", path.display()))
        })?;
        extents.push(e);
    }
    let body = &bytes[at..];
    if body.len() != total {
        return Err(CliError::Data(format!(
            "{}: payload is {} bytes, extents demand {total}",
            path.display(),
            body.len()
        )));
    }
    Ok((extents, body.to_vec()))
}

/// Reads an image file into a `[N, 1, rows, cols]` tensor scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Tensor, CliError> {
    let (extents, body) = read_payload(path, IMAGE_MAGIC, 3)?;
    let [n, rows, cols] = [extents[0], extents[1], extents[2]];
    if n == 0 || rows == 0 || cols == 0 {
        return Err(CliError::Data(format!(
            "{}: degenerate extents {extents:?}",
            path.display()
        )));
    }
    let values = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_values(&[n, 1, rows, cols], values).map_err(|e| CliError::Data(e.to_string()))
}

/// Reads a label file into class indices.
pub fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    let (_, body) = read_payload(path, LABEL_MAGIC, 1)?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Writes an image file; `pixels` is `n * rows * cols` raw bytes.
pub fn write_images(
    path: &Path,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<(), CliError> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count mismatch");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for e in [n, rows, cols] {
        out.extend_from_slice(&(e as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), CliError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// Loads one split from a data directory laid out with the canonical file
/// names. `classes` bounds the legal label range.
pub fn load_split(dir: &Path, split: Split, classes: usize) -> Result<Dataset, CliError> {
    let image_path: PathBuf = dir.join(split.image_file());
    let label_path: PathBuf = dir.join(split.label_file());
    let images = read_images(&image_path)?;
    let labels = read_labels(&label_path)?;
    Dataset::new(images, labels, classes).map_err(|e| CliError::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("temp dir")
    }

    #[test]
    fn images_round_trip_through_disk() {
        let dir = tmp();
        let path = dir.path().join("imgs");
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11 % 256) as u8).collect();
        write_images(&path, &pixels, 2, 3, 4).unwrap();
        let t = read_images(&path).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 4][..]);
        assert_eq!(t.data()[5], f64::from(pixels[5]) / 255.0);
    }

    #[test]
    fn byte_255_loads_as_one() {
        let dir = tmp();
        let path = dir.path().join("imgs");
        write_images(&path, &[255, 0, 128, 64], 1, 2, 2).unwrap();
        let t = read_images(&path).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
    }

    #[test]
    fn label_magic_on_an_images_call_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("labels");
        write_labels(&path, &[1, 2, 3]).unwrap();
        let err = read_images(&path).unwrap_err();
        assert!(matches!(err, CliError::Data(_)), "got {err:?}");
        assert!(err.to_string().contains("0x00000801"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("short");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for e in [2u32, 3, 4] {
            bytes.extend_from_slice(&e.to_be_bytes());
        }
        bytes.extend_from_slice(&[0u8; 10]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_images(&path).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }

    #[test]
    fn extent_overflow_is_rejected_not_wrapped() {
        let dir = tmp();
        let path = dir.path().join("huge");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for e in [u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&e.to_be_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let err = read_images(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("overflow") || msg.contains("payload"),
            "got {msg}"
        );
    }

    #[test]
    fn labels_round_trip_and_load_as_indices() {
        let dir = tmp();
        let path = dir.path().join("labels");
        write_labels(&path, &[0, 9, 3]).unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec![0, 9, 3]);
    }
}
