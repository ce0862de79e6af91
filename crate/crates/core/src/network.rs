//! The deeply-supervised network: a backbone, hidden-layer companion heads,
//! and an output head, evaluated under the composite objective
//!
//! ```text
//! F = P + Q
//! P = ||w_out||^2 + C * mean_n L_n                      output head
//! Q = sum_m alpha_m * [ ||w_m||^2 + loss_m - gamma_m ]+  companions
//! ```
//!
//! A companion attaches to the output of a backbone layer, reduces that
//! feature map to a vector (global average per channel, or a flat copy), and
//! scores it with its own head. Once a companion's bracket falls to zero the
//! gate closes: the term contributes exactly zero value and zero gradient,
//! and the backward pass skips it entirely, so a fully gated network computes
//! bit-for-bit the same updates as the plain backbone-plus-output network.
//!
//! Gating comes in two granularities: `Batch` applies one bracket to the
//! batch-mean loss (the default), `PerSample` gates each sample's bracket
//! individually and averages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Layer, LayerCache};
use crate::loss::{companion_term, Head, HeadKind};
use crate::rng::{derive_seed, derive_stream};
use crate::tensor::Tensor;

/// How a companion turns a rank-4 feature map into head inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureReduce {
    /// Mean over the spatial extent, one feature per channel.
    GlobalAverage,
    /// Row-major copy of the whole map, `c*h*w` features.
    Flatten,
}

/// Gate granularity for the companion bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateGranularity {
    /// One bracket on the batch-mean loss; the whole batch gates together.
    Batch,
    /// A bracket per sample, averaged; samples gate independently.
    PerSample,
}

/// Configuration for one companion head.
#[derive(Debug, Clone)]
pub struct CompanionSpec {
    /// The companion reads the output of `layers[after_layer]`.
    pub after_layer: usize,
    pub kind: HeadKind,
    pub alpha: f64,
    pub gamma: f64,
    pub reduce: FeatureReduce,
}

/// A companion head bound to its attachment point.
#[derive(Debug, Clone)]
pub struct Companion {
    after_layer: usize,
    head: Head,
    alpha_base: f64,
    alpha: f64,
    gamma: f64,
    reduce: FeatureReduce,
}

impl Companion {
    pub fn after_layer(&self) -> usize {
        self.after_layer
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// The configured weight, before any decay schedule.
    pub fn alpha_base(&self) -> f64 {
        self.alpha_base
    }

    /// The weight currently in force.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reduce(&self) -> FeatureReduce {
        self.reduce
    }
}

/// Objective value decomposition for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    /// Output term: margin plus scaled mean data loss.
    pub p: f64,
    /// Sum of companion terms.
    pub q: f64,
    /// Total objective; always computed as `p + q`.
    pub f: f64,
    /// `||w_out||^2`.
    pub output_margin: f64,
    /// `C * mean_n L_n` for the output head.
    pub output_data_loss: f64,
    pub companions: Vec<CompanionReport>,
}

impl ObjectiveBreakdown {
    /// Fraction of companion gates currently open, weighting each companion
    /// by its per-sample open fraction. 1.0 when there are no companions.
    pub fn gate_open_fraction(&self) -> f64 {
        if self.companions.is_empty() {
            return 1.0;
        }
        self.companions
            .iter()
            .map(|c| c.gate_open_fraction)
            .sum::<f64>()
            / self.companions.len() as f64
    }
}

/// Per-companion slice of the breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionReport {
    pub after_layer: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub weight_norm2: f64,
    /// `C * mean_n loss_n` over the full batch, before gating.
    pub mean_data_loss: f64,
    /// The companion's contribution to `Q` (zero when gated).
    pub value: f64,
    /// Fraction of samples with an open gate (0 or 1 in batch mode).
    pub gate_open_fraction: f64,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardPass {
    zs: Vec<Tensor>,
    caches: Vec<LayerCache>,
    labels: Vec<usize>,
    companion_state: Vec<CompanionState>,
}

struct CompanionState {
    features: Tensor,
    active: Vec<bool>,
    any_active: bool,
    active_fraction: f64,
}

/// Gradients of `F` with respect to every parameter tensor, in the network's
/// canonical parameter order: convolution weights by layer index, companion
/// head weights by attachment order, output head weights last.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layer_grads: Vec<Option<Tensor>>,
    pub companion_head_grads: Vec<Tensor>,
    pub output_head_grad: Tensor,
}

impl GradientSet {
    /// Parameter-order iteration matching
    /// [`DsnNetwork::param_tensors_mut`].
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layer_grads
            .iter()
            .filter_map(|g| g.as_ref())
            .chain(self.companion_head_grads.iter())
            .chain(core::iter::once(&self.output_head_grad))
    }

    /// Euclidean norm of each backbone layer's weight gradient, by layer
    /// index; layers without weights report 0.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layer_grads
            .iter()
            .map(|g| {
                g.as_ref()
                    .map(|t| crate::math::sqrt(t.squared_norm()))
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Elementwise sum, used to compose per-head partial backward passes.
    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.layer_grads.len() != other.layer_grads.len()
            || self.companion_head_grads.len() != other.companion_head_grads.len()
        {
            return Err(Error::ShapeMismatch {
                context: "gradient set addition",
                detail: "gradient sets come from different networks".into(),
            });
        }
        for (a, b) in self.layer_grads.iter_mut().zip(&other.layer_grads) {
            match (a, b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, None) => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        context: "gradient set addition",
                        detail: "layer gradient presence differs".into(),
                    })
                }
            }
        }
        for (a, b) in self
            .companion_head_grads
            .iter_mut()
            .zip(&other.companion_head_grads)
        {
            a.add_assign(b)?;
        }
        self.output_head_grad.add_assign(&other.output_head_grad)
    }
}

/// Split of the canonical parameter order into segments, so optimizers can
/// apply different weight decay to backbone and head parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    /// Number of backbone weight tensors (convolutions).
    pub backbone: usize,
    /// Number of head weight tensors (companions plus output).
    pub heads: usize,
}

/// The full model.
#[derive(Debug, Clone)]
pub struct DsnNetwork {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    companions: Vec<Companion>,
    output_head: Head,
    classes: usize,
    balance_c: f64,
    gate: GateGranularity,
}

impl DsnNetwork {
    /// Builds a network and validates every shape along the way. Heads start
    /// at zero; call [`init_weights`](Self::init_weights) before training.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        companion_specs: &[CompanionSpec],
        output_kind: HeadKind,
        classes: usize,
        balance_c: f64,
        gate: GateGranularity,
    ) -> Result<DsnNetwork> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig {
                detail: "a network needs at least one layer".into(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("need at least 2 classes, got {classes}"),
            });
        }
        if !(balance_c > 0.0) || !balance_c.is_finite() {
            return Err(Error::InvalidConfig {
                detail: format!("balance constant must be positive and finite, got {balance_c}"),
            });
        }
        let [c, h, w] = input_shape;
        // Shape propagation with a placeholder batch of 1.
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(vec![1, c, h, w]);
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let final_shape = shapes.last().unwrap();
        let out_features = match final_shape.as_slice() {
            [_, f] => *f,
            other => {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "backbone must end with a rank-2 feature map for the output \
                         head; got {other:?} (add a flatten layer)"
                    ),
                })
            }
        };
        let mut companions = Vec::with_capacity(companion_specs.len());
        let mut prev_attach: Option<usize> = None;
        for spec in companion_specs {
            if spec.after_layer + 1 >= layers.len() {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "companion after layer {} would coincide with or follow the \
                         output head (backbone has {} layers)",
                        spec.after_layer,
                        layers.len()
                    ),
                });
            }
            if let Some(prev) = prev_attach {
                if spec.after_layer <= prev {
                    return Err(Error::InvalidConfig {
                        detail: "companion attachment indices must be strictly increasing"
                            .into(),
                    });
                }
            }
            prev_attach = Some(spec.after_layer);
            if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
                return Err(Error::InvalidConfig {
                    detail: format!("companion alpha must be positive, got {}", spec.alpha),
                });
            }
            if spec.gamma.is_nan() || spec.gamma < 0.0 {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "companion gamma must be non-negative (or infinite), got {}",
                        spec.gamma
                    ),
                });
            }
            let map_shape = &shapes[spec.after_layer + 1];
            let features = reduced_feature_count(map_shape, spec.reduce)?;
            companions.push(Companion {
                after_layer: spec.after_layer,
                head: Head::zeros(spec.kind, classes, features)?,
                alpha_base: spec.alpha,
                alpha: spec.alpha,
                gamma: spec.gamma,
                reduce: spec.reduce,
            });
        }
        Ok(DsnNetwork {
            input_shape,
            layers,
            companions,
            output_head: Head::zeros(output_kind, classes, out_features)?,
            classes,
            balance_c,
            gate,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn companions(&self) -> &[Companion] {
        &self.companions
    }

    pub fn output_head(&self) -> &Head {
        &self.output_head
    }

    pub fn output_head_mut(&mut self) -> &mut Head {
        &mut self.output_head
    }

    pub fn companion_head_mut(&mut self, index: usize) -> Result<&mut Head> {
        let len = self.companions.len();
        self.companions
            .get_mut(index)
            .map(|c| &mut c.head)
            .ok_or(Error::InvalidConfig {
                detail: format!("companion index {index} out of range ({len} companions)"),
            })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn balance_c(&self) -> f64 {
        self.balance_c
    }

    pub fn gate_granularity(&self) -> GateGranularity {
        self.gate
    }

    /// Draws fresh backbone weights (He-initialized convolutions) and keys
    /// every dropout layer's mask stream. Head weights stay at zero. Each
    /// layer draws from its own stream, so the presence or absence of
    /// companions never shifts another layer's draws.
    pub fn init_weights(&mut self, seed: u64) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    let mut rng = derive_stream(seed, &[0x696e_6974, idx as u64]);
                    conv.init_gaussian(&mut rng);
                }
                Layer::Dropout(drop) => {
                    drop.reseed(derive_seed(seed, &[0x6d61_736b, idx as u64]));
                }
                _ => {}
            }
        }
    }

    /// Replaces every companion's effective alpha (decay schedules drive
    /// this between epochs).
    pub fn set_alphas(&mut self, alphas: &[f64]) -> Result<()> {
        if alphas.len() != self.companions.len() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "{} alphas for {} companions",
                    alphas.len(),
                    self.companions.len()
                ),
            });
        }
        for (c, &a) in self.companions.iter_mut().zip(alphas) {
            if a < 0.0 || !a.is_finite() {
                return Err(Error::InvalidConfig {
                    detail: format!("effective alpha must be finite and non-negative, got {a}"),
                });
            }
            c.alpha = a;
        }
        Ok(())
    }

    /// Overrides every companion's gamma with one threshold.
    pub fn set_gamma_all(&mut self, gamma: f64) -> Result<()> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("gamma must be non-negative (or infinite), got {gamma}"),
            });
        }
        for c in &mut self.companions {
            c.gamma = gamma;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        let n = match x.shape() {
            [n, xc, xh, xw] if *xc == c && *xh == h && *xw == w => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    context: "network input",
                    detail: format!(
                        "expected [n, {c}, {h}, {w}], got {other:?}"
                    ),
                })
            }
        };
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "network input",
                    detail: format!("{n} samples but {} labels", labels.len()),
                });
            }
        }
        Ok(n)
    }

    /// Runs the backbone, keeping every intermediate feature map.
    fn run_layers(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<(Vec<Tensor>, Vec<LayerCache>)> {
        let mut zs = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        zs.push(x.clone());
        for layer in &self.layers {
            let (out, cache) = layer.forward(zs.last().unwrap(), ctx)?;
            zs.push(out);
            caches.push(cache);
        }
        Ok((zs, caches))
    }

    /// Full forward pass: objective decomposition plus the state backward
    /// needs. The network itself is untouched (`&self`); identical inputs
    /// with identical context produce identical results.
    pub fn forward_all(
        &self,
        x: &Tensor,
        labels: &[usize],
        ctx: &ForwardCtx,
    ) -> Result<(ObjectiveBreakdown, ForwardPass)> {
        let n = self.check_input(x, Some(labels))?;
        let (zs, caches) = self.run_layers(x, ctx)?;
        let output_features = zs.last().unwrap();
        let out_losses = self
            .output_head
            .per_sample_losses(output_features, labels, self.balance_c)?;
        let output_data_loss = out_losses.iter().sum::<f64>() / n as f64;
        let output_margin = self.output_head.weights().squared_norm();
        let p = output_margin + output_data_loss;

        let mut q = 0.0;
        let mut companion_state = Vec::with_capacity(self.companions.len());
        let mut reports = Vec::with_capacity(self.companions.len());
        for comp in &self.companions {
            let features = reduce_features(&zs[comp.after_layer + 1], comp.reduce)?;
            let losses = comp
                .head
                .per_sample_losses(&features, labels, self.balance_c)?;
            let mean_loss = losses.iter().sum::<f64>() / n as f64;
            let weight_norm2 = comp.head.weights().squared_norm();
            let (value, active) = match self.gate {
                GateGranularity::Batch => {
                    let (value, gated) =
                        companion_term(comp.alpha, weight_norm2, mean_loss, comp.gamma);
                    (value, vec![!gated; n])
                }
                GateGranularity::PerSample => {
                    let mut total = 0.0;
                    let active: Vec<bool> = losses
                        .iter()
                        .map(|&l| {
                            let (v, gated) =
                                companion_term(comp.alpha, weight_norm2, l, comp.gamma);
                            total += v;
                            !gated
                        })
                        .collect();
                    (total / n as f64, active)
                }
            };
            let open = active.iter().filter(|&&a| a).count();
            let active_fraction = open as f64 / n as f64;
            q += value;
            reports.push(CompanionReport {
                after_layer: comp.after_layer,
                alpha: comp.alpha,
                gamma: comp.gamma,
                weight_norm2,
                mean_data_loss: mean_loss,
                value,
                gate_open_fraction: active_fraction,
            });
            companion_state.push(CompanionState {
                features,
                any_active: open > 0,
                active,
                active_fraction,
            });
        }
        let breakdown = ObjectiveBreakdown {
            p,
            q,
            f: p + q,
            output_margin,
            output_data_loss,
            companions: reports,
        };
        let pass = ForwardPass {
            zs,
            caches,
            labels: labels.to_vec(),
            companion_state,
        };
        Ok((breakdown, pass))
    }

    /// Gradients of the full objective `F`.
    pub fn backward_all(&self, pass: &ForwardPass) -> Result<GradientSet> {
        self.backward_selected(pass, true, None)
    }

    /// Gradients of a sub-objective: the output term if `include_output`,
    /// plus the companions whose flag in `companion_filter` is set (all when
    /// `None`). Used to attribute gradient contributions head by head; the
    /// full backward pass is the sum of the partial ones.
    pub fn backward_selected(
        &self,
        pass: &ForwardPass,
        include_output: bool,
        companion_filter: Option<&[bool]>,
    ) -> Result<GradientSet> {
        if pass.caches.len() != self.layers.len()
            || pass.companion_state.len() != self.companions.len()
        {
            return Err(Error::CacheMismatch {
                detail: "forward pass does not belong to this network".into(),
            });
        }
        if let Some(filter) = companion_filter {
            if filter.len() != self.companions.len() {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "companion filter has {} flags for {} companions",
                        filter.len(),
                        self.companions.len()
                    ),
                });
            }
        }
        let n = pass.labels.len();
        let output_features = pass.zs.last().unwrap();

        let mut output_head_grad = Tensor::zeros(self.output_head.weights().shape())?;
        let mut d_current = Tensor::zeros(output_features.shape())?;
        if include_output {
            let grads = self.output_head.gradients(
                output_features,
                &pass.labels,
                self.balance_c,
                &vec![true; n],
            )?;
            // dP/dw = 2 w + data-loss gradient.
            output_head_grad = self.output_head.weights().scaled(2.0);
            output_head_grad.add_assign(&grads.d_weights)?;
            d_current = grads.d_features;
        }
        // Reshape head-space gradient into the final feature map's shape.
        d_current = d_current.reshaped(output_features.shape())?;

        let mut layer_grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut companion_head_grads: Vec<Tensor> = self
            .companions
            .iter()
            .map(|c| Tensor::zeros(c.head.weights().shape()))
            .collect::<Result<_>>()?;

        for i in (0..self.layers.len()).rev() {
            // Companions read zs[i + 1]; fold their gradients in before
            // stepping back through layer i.
            for (cidx, comp) in self.companions.iter().enumerate() {
                if comp.after_layer != i {
                    continue;
                }
                let selected = companion_filter.map(|f| f[cidx]).unwrap_or(true);
                let state = &pass.companion_state[cidx];
                if !selected || !state.any_active {
                    continue;
                }
                let grads = comp.head.gradients(
                    &state.features,
                    &pass.labels,
                    self.balance_c,
                    &state.active,
                )?;
                // d(bracket)/dw = 2w * open_fraction + data-loss gradient,
                // all scaled by alpha. In batch mode the fraction is 1 when
                // the gate is open.
                let margin_scale = match self.gate {
                    GateGranularity::Batch => 1.0,
                    GateGranularity::PerSample => state.active_fraction,
                };
                let mut head_grad = comp.head.weights().scaled(2.0 * margin_scale);
                head_grad.add_assign(&grads.d_weights)?;
                head_grad.scale(comp.alpha);
                companion_head_grads[cidx] = head_grad;

                let d_features = grads.d_features.scaled(comp.alpha);
                add_unreduced(&mut d_current, &d_features, comp.reduce)?;
            }
            let (d_prev, d_w) =
                self.layers[i].backward(&pass.zs[i], &pass.caches[i], &d_current)?;
            layer_grads[i] = d_w;
            d_current = d_prev;
        }
        // Layers without weights keep None; convolutions that somehow
        // skipped backward would too, but backward always visits every layer.
        Ok(GradientSet {
            layer_grads,
            companion_head_grads,
            output_head_grad,
        })
    }

    /// Output-head predictions in evaluation mode.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x, None)?;
        let (zs, _) = self.run_layers(x, &ForwardCtx::eval())?;
        self.output_head.predict(zs.last().unwrap())
    }

    /// Predictions of the companion attached after backbone layer
    /// `after_layer`.
    pub fn companion_predict(&self, x: &Tensor, after_layer: usize) -> Result<Vec<usize>> {
        self.check_input(x, None)?;
        let comp = self
            .companions
            .iter()
            .find(|c| c.after_layer == after_layer)
            .ok_or(Error::InvalidConfig {
                detail: format!("no companion attached after layer {after_layer}"),
            })?;
        let (zs, _) = self.run_layers(x, &ForwardCtx::eval())?;
        let features = reduce_features(&zs[after_layer + 1], comp.reduce)?;
        comp.head.predict(&features)
    }

    /// Classification error of the output head on a labeled batch.
    pub fn error_rate(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let predictions = self.predict(x)?;
        if predictions.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "error rate",
                detail: format!(
                    "{} predictions vs {} labels",
                    predictions.len(),
                    labels.len()
                ),
            });
        }
        let wrong = predictions
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count();
        Ok(wrong as f64 / labels.len() as f64)
    }

    /// The feature map a companion at `after_layer` would see, in eval mode.
    pub fn feature_map(&self, x: &Tensor, after_layer: usize) -> Result<Tensor> {
        self.check_input(x, None)?;
        if after_layer >= self.layers.len() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "layer index {after_layer} out of range for {} layers",
                    self.layers.len()
                ),
            });
        }
        let (zs, _) = self.run_layers(x, &ForwardCtx::eval())?;
        Ok(zs.into_iter().nth(after_layer + 1).unwrap())
    }

    /// Mutable references to every parameter tensor in canonical order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .filter_map(|l| l.weights_mut())
            .collect();
        params.extend(
            self.companions
                .iter_mut()
                .map(|c| c.head.weights_mut()),
        );
        params.push(self.output_head.weights_mut());
        params
    }

    /// Read-only view of every parameter tensor in canonical order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut params: Vec<&Tensor> = self
            .layers
            .iter()
            .filter_map(|l| l.weights())
            .collect();
        params.extend(self.companions.iter().map(|c| c.head.weights()));
        params.push(self.output_head.weights());
        params
    }

    /// How the canonical order splits into backbone and head segments.
    pub fn param_layout(&self) -> ParamLayout {
        ParamLayout {
            backbone: self.layers.iter().filter(|l| l.weights().is_some()).count(),
            heads: self.companions.len() + 1,
        }
    }

    /// Copies of every parameter tensor, canonical order; the checkpoint
    /// payload.
    pub fn dump_params(&self) -> Vec<Tensor> {
        self.param_tensors().into_iter().cloned().collect()
    }

    /// Loads parameters dumped by [`dump_params`](Self::dump_params),
    /// validating count and shapes.
    pub fn load_params(&mut self, params: &[Tensor]) -> Result<()> {
        let targets = self.param_tensors_mut();
        if params.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "parameter load",
                detail: format!(
                    "checkpoint has {} tensors, network has {}",
                    params.len(),
                    targets.len()
                ),
            });
        }
        for (target, source) in targets.into_iter().zip(params) {
            if target.shape() != source.shape() {
                return Err(Error::ShapeMismatch {
                    context: "parameter load",
                    detail: format!(
                        "checkpoint tensor shape {:?} does not match parameter shape {:?}",
                        source.shape(),
                        target.shape()
                    ),
                });
            }
            *target = source.clone();
        }
        Ok(())
    }

    /// Drops every companion, leaving the plain backbone-plus-output
    /// network. Backbone and output parameters are untouched.
    pub fn without_companions(&self) -> DsnNetwork {
        let mut plain = self.clone();
        plain.companions.clear();
        plain
    }
}

fn reduced_feature_count(map_shape: &[usize], reduce: FeatureReduce) -> Result<usize> {
    match (map_shape, reduce) {
        ([_, c, _, _], FeatureReduce::GlobalAverage) => Ok(*c),
        ([_, c, h, w], FeatureReduce::Flatten) => Ok(c * h * w),
        ([_, f], _) => Ok(*f),
        (other, _) => Err(Error::ShapeMismatch {
            context: "companion attachment",
            detail: format!("cannot reduce feature map of shape {other:?}"),
        }),
    }
}

/// Reduces a feature map to rank-2 head inputs.
fn reduce_features(map: &Tensor, reduce: FeatureReduce) -> Result<Tensor> {
    match map.shape() {
        [_, _] => Ok(map.clone()),
        [n, c, h, w] => {
            let (n, c, h, w) = (*n, *c, *h, *w);
            match reduce {
                FeatureReduce::Flatten => map.clone().reshaped(&[n, c * h * w]),
                FeatureReduce::GlobalAverage => {
                    let mut out = Tensor::zeros(&[n, c])?;
                    let hw = (h * w) as f64;
                    for i in 0..n {
                        for cc in 0..c {
                            let plane = &map.data()[(i * c + cc) * h * w..][..h * w];
                            out.data_mut()[i * c + cc] =
                                plane.iter().sum::<f64>() / hw;
                        }
                    }
                    Ok(out)
                }
            }
        }
        other => Err(Error::ShapeMismatch {
            context: "companion attachment",
            detail: format!("cannot reduce feature map of shape {other:?}"),
        }),
    }
}

/// Adjoint of [`reduce_features`]: folds a rank-2 feature gradient back into
/// the map-space gradient accumulator.
fn add_unreduced(d_map: &mut Tensor, d_features: &Tensor, reduce: FeatureReduce) -> Result<()> {
    match d_map.shape() {
        [_, _] => d_map.add_assign(d_features),
        [n, c, h, w] => {
            let (n, c, h, w) = (*n, *c, *h, *w);
            match reduce {
                FeatureReduce::Flatten => {
                    if d_features.len() != d_map.len() {
                        return Err(Error::ShapeMismatch {
                            context: "companion gradient",
                            detail: "flattened gradient length mismatch".into(),
                        });
                    }
                    for (acc, &g) in d_map.data_mut().iter_mut().zip(d_features.data()) {
                        *acc += g;
                    }
                    Ok(())
                }
                FeatureReduce::GlobalAverage => {
                    if d_features.shape() != [n, c] {
                        return Err(Error::ShapeMismatch {
                            context: "companion gradient",
                            detail: format!(
                                "expected [{n}, {c}] gradient, got {:?}",
                                d_features.shape()
                            ),
                        });
                    }
                    let hw = (h * w) as f64;
                    for i in 0..n {
                        for cc in 0..c {
                            let g = d_features.data()[i * c + cc] / hw;
                            for v in
                                &mut d_map.data_mut()[(i * c + cc) * h * w..][..h * w]
                            {
                                *v += g;
                            }
                        }
                    }
                    Ok(())
                }
            }
        }
        other => Err(Error::ShapeMismatch {
            context: "companion gradient",
            detail: format!("cannot scatter into map of shape {other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{
        insert_identity_layer, Activation, ActivationPoolLayer, ConvLayer, DropoutLayer,
        FlattenLayer, Pooling,
    };
    use rand::Rng;

    fn relu() -> Layer {
        Layer::ActPool(ActivationPoolLayer::new(Activation::Relu, Pooling::None).unwrap())
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_stream(seed, &[0xabc]);
        let mut t = Tensor::zeros(shape).unwrap();
        for v in t.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        t
    }

    /// Two conv blocks with a companion after the first ReLU; 82 parameters.
    fn tiny_dsn(gamma: f64, gate: GateGranularity) -> DsnNetwork {
        let layers = vec![
            Layer::Conv(ConvLayer::new(1, 2, 3, 1, 0).unwrap()),
            relu(),
            Layer::Conv(ConvLayer::new(2, 3, 2, 2, 0).unwrap()),
            relu(),
            Layer::Flatten(FlattenLayer),
        ];
        let companions = [CompanionSpec {
            after_layer: 1,
            kind: HeadKind::Svm,
            alpha: 0.4,
            gamma,
            reduce: FeatureReduce::GlobalAverage,
        }];
        DsnNetwork::new(
            [1, 6, 6],
            layers,
            &companions,
            HeadKind::Svm,
            2,
            1.0,
            gate,
        )
        .unwrap()
    }

    fn randomize_all(net: &mut DsnNetwork, seed: u64) {
        net.init_weights(seed);
        let mut rng = derive_stream(seed, &[0x6865_6164]);
        for i in 0..net.companions().len() {
            net.companion_head_mut(i).unwrap().randomize(&mut rng, 0.6);
        }
        net.output_head_mut().randomize(&mut rng, 0.6);
    }

    #[test]
    fn objective_matches_hand_computed_value() {
        // Identity conv then flatten; one companion on the conv output.
        // Input (0.5, -1.0), label 0, all weights set by hand.
        let layers = vec![
            Layer::Conv(ConvLayer::identity(1, 1).unwrap()),
            Layer::Flatten(FlattenLayer),
        ];
        let companions = [CompanionSpec {
            after_layer: 0,
            kind: HeadKind::Svm,
            alpha: 0.5,
            gamma: 0.2,
            reduce: FeatureReduce::Flatten,
        }];
        let mut net = DsnNetwork::new(
            [1, 1, 2],
            layers,
            &companions,
            HeadKind::Svm,
            2,
            1.0,
            GateGranularity::Batch,
        )
        .unwrap();
        net.output_head_mut()
            .set_weights(Tensor::from_values(&[2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap())
            .unwrap();
        net.companion_head_mut(0)
            .unwrap()
            .set_weights(Tensor::from_values(&[2, 2], vec![0.2, 0.1, -0.5, 0.3]).unwrap())
            .unwrap();
        let x = Tensor::from_values(&[1, 1, 1, 2], vec![0.5, -1.0]).unwrap();
        let (breakdown, _) = net.forward_all(&x, &[0], &ForwardCtx::eval()).unwrap();
        // Output: scores 0.35 / -0.35, margin hinge (1 - 0.7)^2 = 0.09,
        // ||w_out||^2 = 0.30, so P = 0.39.
        assert!((breakdown.p - 0.39).abs() < 1e-12, "P = {}", breakdown.p);
        // Companion: scores 0.0 / -0.55, hinge (1 - 0.55)^2 = 0.2025,
        // ||w||^2 = 0.39, bracket 0.39 + 0.2025 - 0.2 = 0.3925, times 0.5.
        assert!(
            (breakdown.q - 0.19625).abs() < 1e-12,
            "Q = {}",
            breakdown.q
        );
        assert!((breakdown.f - 0.58625).abs() < 1e-12);
        assert_eq!(breakdown.f, breakdown.p + breakdown.q);
    }

    #[test]
    fn no_companions_means_f_equals_p() {
        let net = tiny_dsn(1.0, GateGranularity::Batch).without_companions();
        let mut net = net;
        randomize_all(&mut net, 3);
        let x = random_input(&[4, 1, 6, 6], 5);
        let (b, _) = net
            .forward_all(&x, &[0, 1, 0, 1], &ForwardCtx::eval())
            .unwrap();
        assert_eq!(b.q, 0.0);
        assert_eq!(b.f, b.p);
        assert_eq!(b.gate_open_fraction(), 1.0);
    }

    #[test]
    fn infinite_gamma_gates_all_companions() {
        let mut net = tiny_dsn(f64::INFINITY, GateGranularity::Batch);
        randomize_all(&mut net, 7);
        let x = random_input(&[3, 1, 6, 6], 9);
        let (b, pass) = net
            .forward_all(&x, &[1, 0, 1], &ForwardCtx::eval())
            .unwrap();
        assert_eq!(b.q, 0.0);
        assert_eq!(b.f, b.p);
        assert_eq!(b.companions[0].gate_open_fraction, 0.0);
        // Gated companions contribute exactly zero gradient.
        let grads = net.backward_all(&pass).unwrap();
        assert!(grads.companion_head_grads[0]
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn gate_open_gradients_are_nonzero_and_closed_are_zero() {
        // Same network, same data; only gamma differs.
        let x = random_input(&[4, 1, 6, 6], 11);
        let labels = [0usize, 1, 1, 0];
        let mut open = tiny_dsn(0.0, GateGranularity::Batch);
        randomize_all(&mut open, 13);
        let (b_open, pass_open) = open.forward_all(&x, &labels, &ForwardCtx::eval()).unwrap();
        assert!(b_open.q > 0.0);
        let g_open = open.backward_all(&pass_open).unwrap();
        assert!(g_open.companion_head_grads[0].squared_norm() > 0.0);

        let mut closed = tiny_dsn(f64::INFINITY, GateGranularity::Batch);
        randomize_all(&mut closed, 13);
        let (b_closed, pass_closed) =
            closed.forward_all(&x, &labels, &ForwardCtx::eval()).unwrap();
        assert_eq!(b_closed.q, 0.0);
        let g_closed = closed.backward_all(&pass_closed).unwrap();
        assert_eq!(g_closed.companion_head_grads[0].squared_norm(), 0.0);
    }

    #[test]
    fn backward_is_additive_over_heads() {
        let mut net = tiny_dsn(0.0, GateGranularity::Batch);
        randomize_all(&mut net, 17);
        let x = random_input(&[4, 1, 6, 6], 19);
        let labels = [0usize, 1, 0, 1];
        let (_, pass) = net.forward_all(&x, &labels, &ForwardCtx::eval()).unwrap();
        let full = net.backward_all(&pass).unwrap();
        let mut sum = net.backward_selected(&pass, true, Some(&[false])).unwrap();
        let comp_only = net.backward_selected(&pass, false, Some(&[true])).unwrap();
        sum.add_assign(&comp_only).unwrap();
        for (a, b) in full.tensors().zip(sum.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(
                    (x - y).abs() <= 1e-10 * x.abs().max(1.0),
                    "gradient injection is not additive: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // Both gate granularities, dropout in the stack, ~82 parameters.
        for gate in [GateGranularity::Batch, GateGranularity::PerSample] {
            let layers = vec![
                Layer::Conv(ConvLayer::new(1, 2, 3, 1, 0).unwrap()),
                relu(),
                Layer::Dropout(DropoutLayer::new(0.25, 0).unwrap()),
                Layer::Conv(ConvLayer::new(2, 3, 2, 2, 0).unwrap()),
                relu(),
                Layer::Flatten(FlattenLayer),
            ];
            let companions = [CompanionSpec {
                after_layer: 1,
                kind: HeadKind::Svm,
                alpha: 0.4,
                gamma: 0.25,
                reduce: FeatureReduce::GlobalAverage,
            }];
            let mut net = DsnNetwork::new(
                [1, 6, 6],
                layers,
                &companions,
                HeadKind::Svm,
                2,
                1.0,
                gate,
            )
            .unwrap();
            randomize_all(&mut net, 23);
            let x = random_input(&[3, 1, 6, 6], 29);
            let labels = [0usize, 1, 1];
            // Fixed step: the dropout mask is a function of (seed, step), so
            // finite-difference probes see the identical network.
            let ctx = ForwardCtx::train(5);
            let (_, pass) = net.forward_all(&x, &labels, &ctx).unwrap();
            let grads = net.backward_all(&pass).unwrap();

            let h = 1e-5;
            let param_count = net.param_tensors().len();
            for p_idx in 0..param_count {
                let len = net.param_tensors()[p_idx].len();
                for e_idx in 0..len {
                    let probe = |delta: f64| -> f64 {
                        let mut n2 = net.clone();
                        n2.param_tensors_mut()[p_idx].data_mut()[e_idx] += delta;
                        let (b, _) = n2.forward_all(&x, &labels, &ctx).unwrap();
                        b.f
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let an: f64 = {
                        let all: Vec<&Tensor> = grads.tensors().collect();
                        all[p_idx].data()[e_idx]
                    };
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (an - fd).abs() / denom <= 1e-5,
                        "{gate:?} param {p_idx}[{e_idx}]: analytic {an} vs FD {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn per_sample_gate_lets_active_samples_through_only() {
        // Identity backbone on scalar inputs; companion head scores +3x for
        // class 0 and -3x for class 1, so ||w||^2 = 18. Two samples at
        // x = 1.0: the sample labeled 0 has margin 6, hinge loss 0, and
        // bracket 18 - 18.5 < 0 (gated); the sample labeled 1 has hinge
        // (1 + 6)^2 = 49 and bracket 48.5 (open).
        let layers = vec![
            Layer::Conv(ConvLayer::identity(1, 1).unwrap()),
            Layer::Flatten(FlattenLayer),
        ];
        let companions = [CompanionSpec {
            after_layer: 0,
            kind: HeadKind::Svm,
            alpha: 1.0,
            gamma: 18.5,
            reduce: FeatureReduce::Flatten,
        }];
        let mut net = DsnNetwork::new(
            [1, 1, 1],
            layers,
            &companions,
            HeadKind::Svm,
            2,
            1.0,
            GateGranularity::PerSample,
        )
        .unwrap();
        net.companion_head_mut(0)
            .unwrap()
            .set_weights(Tensor::from_values(&[2, 1], vec![3.0, -3.0]).unwrap())
            .unwrap();
        let x = Tensor::from_values(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let (b, pass) = net
            .forward_all(&x, &[0, 1], &ForwardCtx::eval())
            .unwrap();
        assert_eq!(b.companions[0].gate_open_fraction, 0.5);
        // Q = mean of per-sample brackets: (0 + 48.5) / 2.
        assert!((b.q - 24.25).abs() < 1e-12, "Q = {}", b.q);
        let grads = net.backward_all(&pass).unwrap();
        // Head gradient = 2w * open_fraction + (1/N) * active data grads.
        // Margin part: [3, -3]. Data part (sample 1 only, m = 7, z = 1):
        // wrong-class row +2*7/2 = +7, true-class row -7. Total [10, -10].
        let g = grads.companion_head_grads[0].data();
        assert!((g[0] - 10.0).abs() < 1e-12, "class-0 grad {}", g[0]);
        assert!((g[1] + 10.0).abs() < 1e-12, "class-1 grad {}", g[1]);
    }

    #[test]
    fn predictions_pick_argmax_and_are_scale_invariant() {
        let mut net = tiny_dsn(1.0, GateGranularity::Batch);
        randomize_all(&mut net, 31);
        let x = random_input(&[5, 1, 6, 6], 37);
        let base = net.predict(&x).unwrap();
        assert_eq!(base.len(), 5);
        assert!(base.iter().all(|&p| p < 2));
        // Scaling the output head by a positive constant preserves argmax.
        let mut scaled = net.clone();
        scaled.output_head_mut().weights_mut().scale(3.5);
        assert_eq!(scaled.predict(&x).unwrap(), base);
    }

    #[test]
    fn companion_predict_requires_an_attachment() {
        let mut net = tiny_dsn(1.0, GateGranularity::Batch);
        randomize_all(&mut net, 41);
        let x = random_input(&[2, 1, 6, 6], 43);
        assert!(net.companion_predict(&x, 1).is_ok());
        assert!(net.companion_predict(&x, 2).is_err());
    }

    #[test]
    fn identity_insertion_preserves_companion_loss() {
        // A companion at layer m in the original network and at m + 1 in the
        // extended one (shifted past the inserted identity) sees byte-equal
        // features, so its loss is unchanged.
        let mut net = tiny_dsn(0.0, GateGranularity::Batch);
        randomize_all(&mut net, 47);
        let x = random_input(&[4, 1, 6, 6], 53);
        let labels = [0usize, 1, 0, 1];
        let (b_before, _) = net.forward_all(&x, &labels, &ForwardCtx::eval()).unwrap();

        let extended_layers =
            insert_identity_layer(net.layers(), &[4, 1, 6, 6], 2).unwrap();
        let companions = [CompanionSpec {
            after_layer: 1,
            kind: HeadKind::Svm,
            alpha: 0.4,
            gamma: 0.0,
            reduce: FeatureReduce::GlobalAverage,
        }];
        let mut extended = DsnNetwork::new(
            [1, 6, 6],
            extended_layers,
            &companions,
            HeadKind::Svm,
            2,
            1.0,
            GateGranularity::Batch,
        )
        .unwrap();
        // Copy every parameter across: conv 0 unchanged, identity conv is
        // new, conv 1 shifts by one position; heads copy verbatim.
        let src = net.dump_params();
        extended
            .companion_head_mut(0)
            .unwrap()
            .set_weights(src[2].clone())
            .unwrap();
        extended
            .output_head_mut()
            .set_weights(src[3].clone())
            .unwrap();
        {
            let mut params = extended.param_tensors_mut();
            *params[0] = src[0].clone();
            *params[2] = src[1].clone();
        }
        let (b_after, _) = extended
            .forward_all(&x, &labels, &ForwardCtx::eval())
            .unwrap();
        assert!(
            (b_before.companions[0].mean_data_loss - b_after.companions[0].mean_data_loss)
                .abs()
                <= 1e-12,
            "companion loss moved: {} -> {}",
            b_before.companions[0].mean_data_loss,
            b_after.companions[0].mean_data_loss
        );
        assert!((b_before.f - b_after.f).abs() <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut net = tiny_dsn(0.5, GateGranularity::Batch);
        randomize_all(&mut net, 59);
        let params = net.dump_params();
        let mut other = tiny_dsn(0.5, GateGranularity::Batch);
        other.load_params(&params).unwrap();
        assert_eq!(other.dump_params(), params);
        let x = random_input(&[2, 1, 6, 6], 61);
        assert_eq!(net.predict(&x).unwrap(), other.predict(&x).unwrap());
    }

    #[test]
    fn load_params_rejects_wrong_shapes() {
        let mut net = tiny_dsn(0.5, GateGranularity::Batch);
        let mut params = net.dump_params();
        params[0] = Tensor::zeros(&[1, 2, 3]).unwrap();
        assert!(net.load_params(&params).is_err());
    }

    #[test]
    fn companion_attachment_must_precede_the_final_layer() {
        let layers = vec![
            Layer::Conv(ConvLayer::new(1, 2, 3, 1, 0).unwrap()),
            Layer::Flatten(FlattenLayer),
        ];
        let companions = [CompanionSpec {
            after_layer: 1,
            kind: HeadKind::Svm,
            alpha: 0.5,
            gamma: 0.5,
            reduce: FeatureReduce::Flatten,
        }];
        assert!(DsnNetwork::new(
            [1, 6, 6],
            layers,
            &companions,
            HeadKind::Svm,
            2,
            1.0,
            GateGranularity::Batch,
        )
        .is_err());
    }

    #[test]
    fn companion_attachments_must_strictly_increase() {
        let layers = vec![
            Layer::Conv(ConvLayer::new(1, 2, 3, 1, 0).unwrap()),
            relu(),
            Layer::Conv(ConvLayer::new(2, 2, 2, 2, 0).unwrap()),
            Layer::Flatten(FlattenLayer),
        ];
        let make = |orders: [usize; 2]| {
            let specs: Vec<CompanionSpec> = orders
                .iter()
                .map(|&at| CompanionSpec {
                    after_layer: at,
                    kind: HeadKind::Svm,
                    alpha: 0.5,
                    gamma: 0.5,
                    reduce: FeatureReduce::GlobalAverage,
                })
                .collect();
            DsnNetwork::new(
                [1, 6, 6],
                layers.clone(),
                &specs,
                HeadKind::Svm,
                2,
                1.0,
                GateGranularity::Batch,
            )
        };
        assert!(make([0, 1]).is_ok());
        assert!(make([1, 1]).is_err());
        assert!(make([1, 0]).is_err());
    }

    #[test]
    fn backbone_must_end_flattened() {
        let layers = vec![Layer::Conv(ConvLayer::new(1, 2, 3, 1, 0).unwrap())];
        assert!(DsnNetwork::new(
            [1, 6, 6],
            layers,
            &[],
            HeadKind::Svm,
            2,
            1.0,
            GateGranularity::Batch,
        )
        .is_err());
    }

    #[test]
    fn forward_is_deterministic_under_a_fixed_context() {
        let mut net = tiny_dsn(0.5, GateGranularity::Batch);
        randomize_all(&mut net, 67);
        let x = random_input(&[3, 1, 6, 6], 71);
        let labels = [1usize, 0, 1];
        let ctx = ForwardCtx::train(12);
        let (a, _) = net.forward_all(&x, &labels, &ctx).unwrap();
        let (b, _) = net.forward_all(&x, &labels, &ctx).unwrap();
        assert_eq!(a, b);
    }
}
