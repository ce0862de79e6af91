//! Mini-batch SGD with momentum, per-segment weight decay, learning-rate
//! annealing, and the companion-weight decay schedule.
//!
//! The update rule is the classical momentum form
//!
//! ```text
//! v <- momentum * v - lr * (grad + weight_decay * param)
//! param <- param + v
//! ```
//!
//! applied tensor by tensor in the network's canonical parameter order.
//! Backbone tensors and head tensors can carry different weight-decay
//! factors; the heads' own margin terms already regularize them, so head
//! decay defaults to 0 to avoid double-counting.
//!
//! Everything here is deterministic given `(seed, config, data)`: epoch
//! shuffles come from per-epoch derived streams, batches are visited in
//! permutation order, and all reductions are sequential sums in index order.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::{DsnNetwork, GradientSet, ObjectiveBreakdown};
use crate::rng::derive_stream;
use crate::tensor::Tensor;

const TAG_SHUFFLE: u64 = 0x7368_7566;

/// Chunk size for full-set error evaluation, bounding scratch memory.
const EVAL_CHUNK: usize = 256;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight decay on backbone (convolution) tensors.
    pub weight_decay: f64,
    /// Weight decay on head tensors. Defaults to 0: each head's objective
    /// already contains its own `||w||^2` margin term.
    pub head_weight_decay: f64,
    /// Epochs at which the learning rate divides by `anneal_factor`. Each
    /// listed epoch triggers once; an epoch listed twice divides twice.
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f64,
    /// When set, companion weights follow `alpha0 * 0.1 * (1 - t/N)` with
    /// `t` the number of completed epochs.
    pub alpha_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            head_weight_decay: 0.0,
            anneal_epochs: Vec::new(),
            anneal_factor: 20.0,
            alpha_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the numeric ranges. A learning rate of exactly 0 is accepted
    /// as a degenerate probe (the loop runs, parameters stay fixed); that
    /// keeps the zero-step-size fixed point testable end to end.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig {
                detail: "epochs must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                detail: "batch size must be at least 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "learning rate must be finite and non-negative, got {}",
                    self.learning_rate
                ),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig {
                detail: format!("momentum must lie in [0, 1), got {}", self.momentum),
            });
        }
        if self.weight_decay < 0.0 || self.head_weight_decay < 0.0 {
            return Err(Error::InvalidConfig {
                detail: "weight decay factors must be non-negative".into(),
            });
        }
        if !(self.anneal_factor > 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "annealing factor must exceed 1, got {}",
                    self.anneal_factor
                ),
            });
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor in canonical order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocities: Vec<Tensor>,
}

impl OptimizerState {
    /// Zeroed velocities shaped like the network's parameters.
    pub fn for_network(net: &DsnNetwork) -> OptimizerState {
        let velocities = net
            .param_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()).expect("parameter shapes are valid"))
            .collect();
        OptimizerState { velocities }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }
}

/// One momentum-SGD update over every parameter tensor. Backbone tensors
/// use `config.weight_decay`, head tensors `config.head_weight_decay`, as
/// split by the network's parameter layout. Fails without touching later
/// tensors if an update goes non-finite.
pub fn sgd_step(
    net: &mut DsnNetwork,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let layout = net.param_layout();
    let mut params = net.param_tensors_mut();
    let grad_tensors: Vec<&Tensor> = grads.tensors().collect();
    if params.len() != grad_tensors.len() || params.len() != state.velocities.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd step",
            detail: format!(
                "{} parameter tensors, {} gradient tensors, {} velocity buffers",
                params.len(),
                grad_tensors.len(),
                state.velocities.len()
            ),
        });
    }
    for (i, ((param, grad), velocity)) in params
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.velocities.iter_mut())
        .enumerate()
    {
        if param.shape() != grad.shape() || param.shape() != velocity.shape() {
            return Err(Error::ShapeMismatch {
                context: "sgd step",
                detail: format!(
                    "tensor {i}: param {:?}, grad {:?}, velocity {:?}",
                    param.shape(),
                    grad.shape(),
                    velocity.shape()
                ),
            });
        }
        let decay = if i < layout.backbone {
            config.weight_decay
        } else {
            config.head_weight_decay
        };
        for ((p, g), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut())
        {
            *v = config.momentum * *v - lr * (g + decay * *p);
            *p += *v;
        }
        if !param.is_finite() {
            return Err(Error::DomainError {
                detail: format!("parameter tensor {i} went non-finite during the update"),
            });
        }
    }
    Ok(())
}

/// The companion-weight decay schedule: `alpha0 * 0.1 * (1 - t/N)`.
/// `t` counts completed epochs, so it runs from 0 (start of training, value
/// `0.1 * alpha0`) to `N` (fully decayed, value 0).
pub fn alpha_decay(alpha0: f64, t: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::DomainError {
            detail: "total epochs must be at least 1".into(),
        });
    }
    if t > total_epochs {
        return Err(Error::DomainError {
            detail: format!("epoch {t} exceeds the {total_epochs}-epoch schedule"),
        });
    }
    Ok(alpha0 * 0.1 * (1.0 - t as f64 / total_epochs as f64))
}

/// Learning rate after annealing: one division by `factor` for every
/// scheduled epoch at or before `epoch`. Divisions compose, so a schedule
/// of `[10, 20]` at epoch 20 has divided twice.
pub fn anneal(lr: f64, epoch: usize, schedule: &[usize], factor: f64) -> f64 {
    let mut out = lr;
    for &boundary in schedule {
        if boundary <= epoch {
            out /= factor;
        }
    }
    out
}

/// Everything a step observer gets to see, immediately before the update
/// is applied.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub breakdown: &'a ObjectiveBreakdown,
    pub grads: &'a GradientSet,
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate in force during this epoch.
    pub lr: f64,
    /// Effective companion weights during this epoch.
    pub alphas: Vec<f64>,
    /// Mean output-objective value over the epoch's steps.
    pub p: f64,
    /// Mean companion-objective value over the epoch's steps.
    pub q: f64,
    /// Mean open-gate fraction over the epoch's steps.
    pub gate_fraction: f64,
    /// Error rate on the full training set after the epoch.
    pub train_err: f64,
    /// Error rate on the test set after the epoch, if one was supplied.
    pub test_err: Option<f64>,
}

/// Per-epoch training log. Two runs with identical seed, config, and data
/// compare equal bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

/// Error rate of the network's output head over a whole dataset, evaluated
/// in bounded chunks.
pub fn evaluate_error(net: &DsnNetwork, data: &Dataset) -> Result<f64> {
    let n = data.len();
    let mut wrong = 0usize;
    let mut at = 0usize;
    while at < n {
        let end = (at + EVAL_CHUNK).min(n);
        let indices: Vec<usize> = (at..end).collect();
        let chunk = data.gather(&indices)?;
        let predicted = net.predict(chunk.images())?;
        wrong += predicted
            .iter()
            .zip(chunk.labels())
            .filter(|(p, l)| p != l)
            .count();
        at = end;
    }
    Ok(wrong as f64 / n as f64)
}

/// Full permutation of `0..n` for one epoch, derived from the run seed so
/// reruns shuffle identically.
fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive_stream(seed, &[TAG_SHUFFLE, epoch as u64]);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

/// Runs the training protocol: per epoch, a fresh full permutation of the
/// training set, mini-batches of `batch_size` (the final short batch is
/// kept, which matters at the few-hundred-sample scale), one SGD update per
/// batch, then full train and test error evaluations.
///
/// The network trains in place from whatever weights it currently holds;
/// call [`DsnNetwork::init_weights`] first for a fresh run. A non-finite
/// objective aborts immediately with the epoch and step that produced it.
pub fn train(
    net: &mut DsnNetwork,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<MetricsLog> {
    train_observed(net, train_set, test_set, config, |_| {})
}

/// [`train`] with a per-step observer, invoked after the backward pass and
/// before the parameter update. The observer sees every step in order; it
/// cannot mutate the run, so its presence never changes the trajectory.
pub fn train_observed<F: FnMut(&StepEvent)>(
    net: &mut DsnNetwork,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut observer: F,
) -> Result<MetricsLog> {
    config.validate()?;
    if train_set.classes() != net.classes() {
        return Err(Error::InvalidConfig {
            detail: format!(
                "training set has {} classes, network expects {}",
                train_set.classes(),
                net.classes()
            ),
        });
    }
    if let Some(test) = test_set {
        if test.classes() != net.classes() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "test set has {} classes, network expects {}",
                    test.classes(),
                    net.classes()
                ),
            });
        }
    }
    let alpha0: Vec<f64> = net.companions().iter().map(|c| c.alpha_base()).collect();
    let mut state = OptimizerState::for_network(net);
    let mut global_step: u64 = 0;
    let mut epochs_log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = anneal(
            config.learning_rate,
            epoch,
            &config.anneal_epochs,
            config.anneal_factor,
        );
        let alphas: Vec<f64> = if config.alpha_decay {
            alpha0
                .iter()
                .map(|&a| alpha_decay(a, epoch - 1, config.epochs))
                .collect::<Result<_>>()?
        } else {
            alpha0.clone()
        };
        net.set_alphas(&alphas)?;
        let order = permutation(train_set.len(), config.seed, epoch);
        let mut p_sum = 0.0;
        let mut q_sum = 0.0;
        let mut gate_sum = 0.0;
        let mut steps = 0usize;
        for batch_indices in order.chunks(config.batch_size) {
            let batch = train_set.gather(batch_indices)?;
            global_step += 1;
            let ctx = ForwardCtx::train(global_step);
            let (breakdown, pass) = net.forward_all(batch.images(), batch.labels(), &ctx)?;
            if !breakdown.f.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: global_step,
                    value: breakdown.f,
                });
            }
            let grads = net.backward_all(&pass)?;
            observer(&StepEvent {
                epoch,
                global_step,
                lr,
                breakdown: &breakdown,
                grads: &grads,
            });
            sgd_step(net, &grads, &mut state, lr, config)?;
            p_sum += breakdown.p;
            q_sum += breakdown.q;
            gate_sum += breakdown.gate_open_fraction();
            steps += 1;
        }
        let train_err = evaluate_error(net, train_set)?;
        let test_err = match test_set {
            Some(test) => Some(evaluate_error(net, test)?),
            None => None,
        };
        epochs_log.push(EpochMetrics {
            epoch,
            lr,
            alphas: alphas.clone(),
            p: p_sum / steps as f64,
            q: q_sum / steps as f64,
            gate_fraction: gate_sum / steps as f64,
            train_err,
            test_err,
        });
    }
    Ok(MetricsLog { epochs: epochs_log })
}
