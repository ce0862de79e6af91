//! Deterministic synthetic digit corpus in the canonical IDX layout.
//!
//! Each sample renders a seven-segment glyph for its class, pushed through
//! a per-sample affine jitter (shift, rotation, anisotropic scale, shear),
//! a sinusoidal wobble, random stroke brightness and thickness, occasional
//! broken strokes, and additive pixel noise. The `difficulty` knob scales
//! every distortion at once; 0 renders clean canonical glyphs.
//!
//! Sample `i` of a split depends only on `(seed, split tag, i)`, never on
//! the corpus size, so prefixes of a large corpus match a small one.

use std::path::Path;

use dsn_core::rng::derive_stream;
use rand::Rng;

use crate::error::CliError;
use crate::idx;

const TAG_TRAIN: u64 = 0x7472_6169;
const TAG_TEST: u64 = 0x7465_7374;

pub const SIDE: usize = 28;

/// Segment endpoints in glyph space (origin at glyph center, y down):
/// the classic seven (top bar, upper right, lower right, bottom bar, lower
/// left, upper left, middle bar) plus a centered vertical stroke for 1 and
/// a slanted leg for 7, which would otherwise be near-copies of each other.
const SEGMENTS: [[f64; 4]; 9] = [
    [-5.0, -8.0, 5.0, -8.0],
    [5.0, -8.0, 5.0, 0.0],
    [5.0, 0.0, 5.0, 8.0],
    [-5.0, 8.0, 5.0, 8.0],
    [-5.0, 0.0, -5.0, 8.0],
    [-5.0, -8.0, -5.0, 0.0],
    [-5.0, 0.0, 5.0, 0.0],
    [0.0, -8.0, 0.0, 8.0],
    [5.0, -8.0, -2.0, 8.0],
];

/// Which segments light up per digit, indexed as in [`SEGMENTS`].
const DIGIT_SEGMENTS: [[bool; 9]; 10] = [
    [true, true, true, true, true, true, false, false, false],
    [false, false, false, false, false, false, false, true, false],
    [true, true, false, true, true, false, true, false, false],
    [true, true, true, true, false, false, true, false, false],
    [false, true, true, false, false, true, true, false, false],
    [true, false, true, true, false, true, true, false, false],
    [true, false, true, true, true, true, true, false, false],
    [true, false, false, false, false, false, false, false, true],
    [true, true, true, true, true, true, true, false, false],
    [true, true, true, true, false, true, true, false, false],
];

#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            train: 60_000,
            test: 10_000,
            classes: 10,
            difficulty: 1.0,
            seed: 7,
        }
    }
}

pub struct RawSplit {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub count: usize,
}

/// Distance from a point to a segment, with an optional broken stretch of
/// the segment's parameter range treated as absent.
fn segment_distance(px: f64, py: f64, seg: &[f64; 4], gap: Option<(f64, f64)>) -> f64 {
    let (ax, ay, bx, by) = (seg[0], seg[1], seg[2], seg[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let dist_at = |t: f64| {
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
    };
    match gap {
        None => dist_at(t),
        Some((g0, g1)) => {
            if t < g0 {
                dist_at(t)
            } else if t > g1 {
                dist_at(t)
            } else {
                // Nearest surviving piece ends at the gap's edges.
                dist_at(g0).min(dist_at(g1))
            }
        }
    }
}

/// Renders sample `index` of a split into a `SIDE * SIDE` byte buffer and
/// returns its label.
fn render_sample(
    seed: u64,
    split_tag: u64,
    index: u64,
    classes: usize,
    difficulty: f64,
    out: &mut [u8],
) -> u8 {
    let j = difficulty;
    let mut rng = derive_stream(seed, &[split_tag, index]);
    let label = rng.gen_range(0..classes as u8);

    // One fixed draw order keeps every sample reproducible regardless of
    // which effects end up active.
    let tx: f64 = rng.gen_range(-2.2..=2.2) * j;
    let ty: f64 = rng.gen_range(-2.2..=2.2) * j;
    let theta: f64 = rng.gen_range(-0.22..=0.22) * j;
    let sx: f64 = 1.0 + rng.gen_range(-0.18..=0.18) * j;
    let sy: f64 = 1.0 + rng.gen_range(-0.18..=0.18) * j;
    let shear: f64 = rng.gen_range(-0.18..=0.18) * j;
    let brightness: f64 = rng.gen_range(0.75..=1.0);
    let thickness: f64 = rng.gen_range(1.0..=1.4) + 0.2 * j;
    let wobble_amp: f64 = rng.gen_range(0.0..=0.8) * j;
    let wobble_freq: f64 = rng.gen_range(0.25..=0.6);
    let wobble_phase: f64 = rng.gen_range(0.0..=core::f64::consts::TAU);

    let mut gaps = [None; 9];
    for gap in &mut gaps {
        let broken = rng.gen_bool((0.12 * j).clamp(0.0, 1.0));
        let g0: f64 = rng.gen_range(0.2..=0.6);
        let glen: f64 = rng.gen_range(0.15..=0.35);
        if broken {
            *gap = Some((g0, (g0 + glen).min(1.0)));
        }
    }

    let active = &DIGIT_SEGMENTS[label as usize % 10];
    let (sin_t, cos_t) = theta.sin_cos();
    let center = (SIDE as f64 - 1.0) / 2.0;
    let noise_sigma = 0.10 * j;
    let aa_band = 0.8;

    for py in 0..SIDE {
        for px in 0..SIDE {
            // Invert the forward map p_out = R(theta) * [[sx, shear], [0, sy]] * p + t.
            let ox = px as f64 - center - tx;
            let oy = py as f64 - center - ty;
            let rx = ox * cos_t + oy * sin_t;
            let ry = -ox * sin_t + oy * cos_t;
            let gy = ry / sy;
            let gx = (rx - shear * gy) / sx;
            let wx = gx + wobble_amp * (wobble_freq * gy + wobble_phase).sin();
            let wy = gy + wobble_amp * (wobble_freq * gx - wobble_phase).cos();

            let mut dist = f64::INFINITY;
            for (s, seg) in SEGMENTS.iter().enumerate() {
                if active[s] {
                    dist = dist.min(segment_distance(wx, wy, seg, gaps[s]));
                }
            }
            let ink = ((thickness - dist) / aa_band).clamp(0.0, 1.0);
            let mut value = brightness * ink;
            if noise_sigma > 0.0 {
                // Box-Muller from two uniform draws; drawn per pixel so the
                // stream stays aligned whatever the noise level.
                let u1: f64 = rng.gen_range(f64::EPSILON..=1.0);
                let u2: f64 = rng.gen_range(0.0..=1.0);
                let normal = (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos();
                value += noise_sigma * normal;
            }
            out[py * SIDE + px] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    label
}

fn render_split_tagged(
    spec: &CorpusSpec,
    count: usize,
    split_tag: u64,
) -> Result<RawSplit, CliError> {
    if spec.classes == 0 || spec.classes > 10 {
        return Err(CliError::Config(format!(
            "synthetic corpus supports 1..=10 classes, got {}",
            spec.classes
        )));
    }
    if !(spec.difficulty >= 0.0 && spec.difficulty.is_finite()) {
        return Err(CliError::Config(format!(
            "difficulty must be finite and non-negative, got {}",
            spec.difficulty
        )));
    }
    let mut images = vec![0u8; count * SIDE * SIDE];
    let mut labels = vec![0u8; count];
    for i in 0..count {
        let pixels = &mut images[i * SIDE * SIDE..(i + 1) * SIDE * SIDE];
        labels[i] = render_sample(
            spec.seed,
            split_tag,
            i as u64,
            spec.classes,
            spec.difficulty,
            pixels,
        );
    }
    Ok(RawSplit {
        images,
        labels,
        count,
    })
}

pub fn render_train(spec: &CorpusSpec) -> Result<RawSplit, CliError> {
    render_split_tagged(spec, spec.train, TAG_TRAIN)
}

pub fn render_test(spec: &CorpusSpec) -> Result<RawSplit, CliError> {
    render_split_tagged(spec, spec.test, TAG_TEST)
}

/// Renders both splits and writes the four canonical IDX files into `dir`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let train = render_train(spec)?;
    let test = render_test(spec)?;
    idx::write_images(
        &dir.join(idx::TRAIN_IMAGES),
        &train.images,
        train.count,
        SIDE,
        SIDE,
    )?;
    idx::write_labels(&dir.join(idx::TRAIN_LABELS), &train.labels)?;
    idx::write_images(
        &dir.join(idx::TEST_IMAGES),
        &test.images,
        test.count,
        SIDE,
        SIDE,
    )?;
    idx::write_labels(&dir.join(idx::TEST_LABELS), &test.labels)?;
    Ok(())
}
