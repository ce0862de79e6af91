//! Empirical side-measurements: the gradient-variance comparison between
//! companion-supervised and plain training, feature-map snapshots with
//! top-fraction thresholding, and epoch-aligned error-curve tables.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math;
use crate::network::DsnNetwork;
use crate::optim::{train_observed, MetricsLog, TrainConfig};
use crate::tensor::Tensor;

/// Sample variances of backbone weight-gradient entries over a window of
/// training steps, for the supervised network and for its gate-shut twin.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVarianceReport {
    /// Number of steps in the window.
    pub window: usize,
    /// Per-layer mean elementwise variance for the companion-supervised
    /// run; `None` for layers without weights.
    pub dsn_layer_variances: Vec<Option<f64>>,
    /// Same, for the run with every gate forced shut.
    pub cnn_layer_variances: Vec<Option<f64>>,
    /// First convolution layer's variance, supervised run.
    pub dsn_first_layer: f64,
    /// First convolution layer's variance, gate-shut run.
    pub cnn_first_layer: f64,
    /// `dsn_first_layer / cnn_first_layer`; `None` when the gate-shut
    /// variance is zero (constant-gradient degenerate case).
    pub ratio: Option<f64>,
}

/// Elementwise sample variance over `snapshots` (n - 1 denominator), then
/// mean over elements.
fn mean_elementwise_variance(snapshots: &[Tensor]) -> f64 {
    let n = snapshots.len();
    let len = snapshots[0].len();
    let mut total = 0.0;
    for e in 0..len {
        let mean = snapshots.iter().map(|t| t.data()[e]).sum::<f64>() / n as f64;
        let var = snapshots
            .iter()
            .map(|t| {
                let d = t.data()[e] - mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1) as f64;
        total += var;
    }
    total / len as f64
}

/// Runs two paired trainings from the given network's current weights: one
/// as configured, one with every companion gate forced shut (the plain-CNN
/// objective), both with the same seed, data order, and dropout masks. For
/// each, the first `window` steps' backbone weight gradients are recorded
/// and their elementwise sample variances compared.
///
/// The network is a template; both runs train clones, so the caller's
/// instance is untouched. `config.epochs` is ignored: the run lasts exactly
/// as many epochs as the window needs.
pub fn gradient_variance(
    net: &DsnNetwork,
    data: &Dataset,
    config: &TrainConfig,
    window: usize,
) -> Result<GradientVarianceReport> {
    if window < 2 {
        return Err(Error::DomainError {
            detail: "gradient variance needs a window of at least 2 steps".into(),
        });
    }
    let first_conv = net
        .layers()
        .iter()
        .position(|l| l.weights().is_some())
        .ok_or(Error::InvalidConfig {
            detail: "gradient variance needs at least one weighted layer".into(),
        })?;
    config.validate()?;
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let epochs = window.div_ceil(steps_per_epoch);
    let run_config = TrainConfig {
        epochs,
        ..config.clone()
    };

    let collect = |gate_shut: bool| -> Result<Vec<Vec<Tensor>>> {
        let mut subject = net.clone();
        if gate_shut {
            subject.set_gamma_all(f64::INFINITY)?;
        }
        // One snapshot list per layer; only weighted layers fill theirs.
        let mut per_layer: Vec<Vec<Tensor>> = net.layers().iter().map(|_| Vec::new()).collect();
        let mut seen = 0usize;
        train_observed(&mut subject, data, None, &run_config, |event| {
            if seen >= window {
                return;
            }
            for (layer, slot) in event.grads.layer_grads.iter().zip(per_layer.iter_mut()) {
                if let Some(g) = layer {
                    slot.push(g.clone());
                }
            }
            seen += 1;
        })?;
        Ok(per_layer)
    };

    let dsn_snapshots = collect(false)?;
    let cnn_snapshots = collect(true)?;
    let summarize = |snaps: &[Vec<Tensor>]| -> Vec<Option<f64>> {
        snaps
            .iter()
            .map(|s| {
                if s.is_empty() {
                    None
                } else {
                    Some(mean_elementwise_variance(s))
                }
            })
            .collect()
    };
    let dsn_layer_variances = summarize(&dsn_snapshots);
    let cnn_layer_variances = summarize(&cnn_snapshots);
    let dsn_first = dsn_layer_variances[first_conv].expect("first weighted layer has snapshots");
    let cnn_first = cnn_layer_variances[first_conv].expect("first weighted layer has snapshots");
    Ok(GradientVarianceReport {
        window,
        dsn_layer_variances,
        cnn_layer_variances,
        dsn_first_layer: dsn_first,
        cnn_first_layer: cnn_first,
        ratio: if cnn_first > 0.0 {
            Some(dsn_first / cnn_first)
        } else {
            None
        },
    })
}

/// One grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Renders one channel of a feature map to 8-bit grayscale, keeping only
/// the strongest activations.
///
/// With `top_fraction = 1.0` the raw map is min-max scaled to `0..=255`
/// (a constant map renders mid-gray). Below 1.0, exactly
/// `round(top_fraction * len)` entries stay nonzero: the largest values,
/// ties broken by scan order, rescaled to `1..=255` over the kept range so
/// that a kept entry can never collide with the zeroed background.
fn render_channel(values: &[f64], width: usize, height: usize, top_fraction: f64) -> GrayImage {
    let n = values.len();
    let mut pixels = vec![0u8; n];
    if top_fraction >= 1.0 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (p, &v) in pixels.iter_mut().zip(values) {
            *p = if hi > lo {
                math::round((v - lo) / (hi - lo) * 255.0) as u8
            } else {
                128
            };
        }
        return GrayImage {
            width,
            height,
            pixels,
        };
    }
    let keep = math::round(top_fraction * n as f64) as usize;
    if keep == 0 {
        return GrayImage {
            width,
            height,
            pixels,
        };
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by value; scan order (ascending index) breaks ties.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let kept = &order[..keep];
    let lo = kept.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
    let hi = kept
        .iter()
        .map(|&i| values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    for &i in kept {
        pixels[i] = if hi > lo {
            let scaled = math::round((values[i] - lo) / (hi - lo) * 255.0) as u8;
            scaled.max(1)
        } else {
            255
        };
    }
    GrayImage {
        width,
        height,
        pixels,
    }
}

/// Feature maps of one input sample after backbone stage `after_layer`,
/// rendered per channel. The stage must still be spatial (`[C, H, W]` per
/// sample); flattened stages have no image to draw. The network itself is
/// never modified.
pub fn dump_feature_maps(
    net: &DsnNetwork,
    sample: &Tensor,
    after_layer: usize,
    top_fraction: f64,
) -> Result<Vec<GrayImage>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::DomainError {
            detail: alloc::format!("top fraction must lie in (0, 1], got {top_fraction}"),
        });
    }
    let shape = sample.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "feature map sample",
            detail: alloc::format!("expected one [C, H, W] sample, got {shape:?}"),
        });
    }
    let batch = sample.clone().reshaped(&[1, shape[0], shape[1], shape[2]])?;
    let features = net.feature_map(&batch, after_layer)?;
    let fshape = features.shape().to_vec();
    if fshape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "feature map stage",
            detail: alloc::format!(
                "stage {after_layer} is flattened (shape {fshape:?}); nothing to render"
            ),
        });
    }
    let (channels, h, w) = (fshape[1], fshape[2], fshape[3]);
    let plane = h * w;
    let mut images = Vec::with_capacity(channels);
    for c in 0..channels {
        let slice = &features.data()[c * plane..(c + 1) * plane];
        images.push(render_channel(slice, w, h, top_fraction));
    }
    Ok(images)
}

/// Epoch-aligned error table across several training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurves {
    /// Method names, in column order.
    pub methods: Vec<String>,
    /// One row per epoch, shortest-to-longest log padded with `None`.
    pub rows: Vec<ErrorCurveRow>,
}

/// One epoch's errors: `(train, test)` per method, `None` where a log has
/// no such epoch or recorded no test error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurveRow {
    pub epoch: usize,
    pub entries: Vec<(Option<f64>, Option<f64>)>,
}

/// Joins training logs on the epoch axis. Logs of different lengths are
/// padded with explicit gaps rather than rejected, so partial runs remain
/// comparable.
pub fn error_curves(logs: &[(&str, &MetricsLog)]) -> ErrorCurves {
    let methods = logs.iter().map(|(name, _)| String::from(*name)).collect();
    let max_epochs = logs.iter().map(|(_, l)| l.epochs.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(max_epochs);
    for i in 0..max_epochs {
        let entries = logs
            .iter()
            .map(|(_, log)| match log.epochs.get(i) {
                Some(em) => (Some(em.train_err), em.test_err),
                None => (None, None),
            })
            .collect();
        rows.push(ErrorCurveRow {
            epoch: i + 1,
            entries,
        });
    }
    ErrorCurves { methods, rows }
}
