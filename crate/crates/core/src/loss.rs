//! Classifier heads and the gated companion objective.
//!
//! Two head types share one interface: a squared-hinge multiclass SVM and a
//! softmax cross-entropy head. A head is a weight matrix `[K, F]` scoring
//! `K` classes from `F` features; there is no separate bias (callers that
//! want one append a constant feature).
//!
//! The squared-hinge loss for a sample with label `y` is
//!
//! ```text
//! l = sum_{k != y} max(0, 1 - (s_y - s_k))^2,    s_j = w_j . z
//! ```
//!
//! Its gradient is exact: with `m_k = max(0, 1 - (s_y - s_k))`,
//!
//! ```text
//! dl/dw_y = -2 (sum_k m_k) z      dl/dw_k = 2 m_k z
//! dl/dz   = -2 sum_k m_k (w_y - w_k)
//! ```
//!
//! A companion head attached at a hidden layer contributes
//! `alpha * max(0, ||w||^2 + l - gamma)` to the total objective; once the
//! bracket is non-positive the companion is gated off and contributes exactly
//! zero value and zero gradient. [`companion_term`] implements that bracket.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Which loss a head optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One-vs-rest squared-hinge margins (L2-SVM).
    Svm,
    /// Softmax cross-entropy.
    Softmax,
}

/// Linear classifier head: a `[classes, features]` weight matrix plus the
/// loss it is trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    kind: HeadKind,
    weights: Tensor,
}

/// Gradients of the scaled data loss `(c / N) * sum_{n in active} l_n`.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    /// Gradient with respect to the head weights, shape `[K, F]`. The margin
    /// term `||w||^2` is not included; callers add `2w` where the objective
    /// has one.
    pub d_weights: Tensor,
    /// Gradient with respect to the input features, shape `[N, F]`. Rows for
    /// inactive samples are exactly zero.
    pub d_features: Tensor,
}

impl Head {
    /// Zero-initialized head, the default for training.
    pub fn zeros(kind: HeadKind, classes: usize, features: usize) -> Result<Head> {
        if classes < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("a classifier head needs at least 2 classes, got {classes}"),
            });
        }
        Ok(Head {
            kind,
            weights: Tensor::zeros(&[classes, features])?,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// Replaces the weights, keeping the shape contract.
    pub fn set_weights(&mut self, weights: Tensor) -> Result<()> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::ShapeMismatch {
                context: "head weight load",
                detail: format!(
                    "expected {:?}, got {:?}",
                    self.weights.shape(),
                    weights.shape()
                ),
            });
        }
        self.weights = weights;
        Ok(())
    }

    /// Overwrites the weights with i.i.d. Gaussians of the given standard
    /// deviation. Used by the gradient checker, which needs the loss surface
    /// probed away from the all-zeros saddle.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, std: f64) {
        for w in self.weights.data_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = g * std;
        }
    }

    /// Class scores for a batch, shape `[N, K]`.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let (n, f) = batch_dims(features)?;
        let k = self.classes();
        if f != self.features() {
            return Err(Error::ShapeMismatch {
                context: "head scoring",
                detail: format!("head expects {} features, got {f}", self.features()),
            });
        }
        let mut out = Tensor::zeros(&[n, k])?;
        let w = self.weights.data();
        let z = features.data();
        let s = out.data_mut();
        for i in 0..n {
            let zi = &z[i * f..(i + 1) * f];
            for j in 0..k {
                let wj = &w[j * f..(j + 1) * f];
                let mut acc = 0.0;
                for (a, b) in wj.iter().zip(zi) {
                    acc += a * b;
                }
                s[i * k + j] = acc;
            }
        }
        Ok(out)
    }

    /// Predicted class per sample: argmax score, ties to the lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let scores = self.scores(features)?;
        let k = self.classes();
        Ok(scores
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Per-sample data losses scaled by the tradeoff constant `c`.
    pub fn per_sample_losses(
        &self,
        features: &Tensor,
        labels: &[usize],
        c: f64,
    ) -> Result<Vec<f64>> {
        let scores = self.scores(features)?;
        self.check_labels(labels, features)?;
        let k = self.classes();
        let mut out = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            let row = &scores.data()[i * k..(i + 1) * k];
            out.push(c * self.sample_loss(row, y));
        }
        Ok(out)
    }

    fn sample_loss(&self, scores: &[f64], y: usize) -> f64 {
        match self.kind {
            HeadKind::Svm => {
                let sy = scores[y];
                let mut acc = 0.0;
                for (k, &sk) in scores.iter().enumerate() {
                    if k == y {
                        continue;
                    }
                    let m = (1.0 - (sy - sk)).max(0.0);
                    acc += m * m;
                }
                acc
            }
            HeadKind::Softmax => {
                let shift = scores.iter().cloned().fold(f64::NEG_INFINITY, math::max);
                let sum: f64 = scores.iter().map(|&s| math::exp(s - shift)).sum();
                math::ln(sum) - (scores[y] - shift)
            }
        }
    }

    /// Gradients of `(c / N) * sum_{n: active} l_n` with `N = labels.len()`.
    ///
    /// The denominator is always the full batch size: gating a sample off
    /// removes its term from the sum without re-weighting the others.
    pub fn gradients(
        &self,
        features: &Tensor,
        labels: &[usize],
        c: f64,
        active: &[bool],
    ) -> Result<HeadGradients> {
        let (n, f) = batch_dims(features)?;
        self.check_labels(labels, features)?;
        if active.len() != n {
            return Err(Error::ShapeMismatch {
                context: "head gradients",
                detail: format!("{n} samples but {} active flags", active.len()),
            });
        }
        let k = self.classes();
        let scores = self.scores(features)?;
        let mut d_weights = Tensor::zeros(&[k, f])?;
        let mut d_features = Tensor::zeros(&[n, f])?;
        let scale = c / n as f64;
        let w = self.weights.data();
        let z = features.data();
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let y = labels[i];
            let row = &scores.data()[i * k..(i + 1) * k];
            let zi = &z[i * f..(i + 1) * f];
            let dz = &mut d_features.data_mut()[i * f..(i + 1) * f];
            match self.kind {
                HeadKind::Svm => {
                    let sy = row[y];
                    let mut sum_m = 0.0;
                    for (kk, &sk) in row.iter().enumerate() {
                        if kk == y {
                            continue;
                        }
                        let m = (1.0 - (sy - sk)).max(0.0);
                        if m == 0.0 {
                            continue;
                        }
                        sum_m += m;
                        let coeff = 2.0 * scale * m;
                        let dwk = &mut d_weights.data_mut()[kk * f..(kk + 1) * f];
                        for (d, &zv) in dwk.iter_mut().zip(zi) {
                            *d += coeff * zv;
                        }
                        let wk = &w[kk * f..(kk + 1) * f];
                        for (d, &wv) in dz.iter_mut().zip(wk) {
                            *d += coeff * wv;
                        }
                    }
                    if sum_m != 0.0 {
                        let coeff = 2.0 * scale * sum_m;
                        let dwy = &mut d_weights.data_mut()[y * f..(y + 1) * f];
                        for (d, &zv) in dwy.iter_mut().zip(zi) {
                            *d -= coeff * zv;
                        }
                        let wy = &w[y * f..(y + 1) * f];
                        for (d, &wv) in dz.iter_mut().zip(wy) {
                            *d -= coeff * wv;
                        }
                    }
                }
                HeadKind::Softmax => {
                    let shift = row.iter().cloned().fold(f64::NEG_INFINITY, math::max);
                    let mut exps = vec![0.0; k];
                    let mut sum = 0.0;
                    for (kk, &s) in row.iter().enumerate() {
                        let e = math::exp(s - shift);
                        exps[kk] = e;
                        sum += e;
                    }
                    for kk in 0..k {
                        let p = exps[kk] / sum;
                        let diff = if kk == y { p - 1.0 } else { p };
                        let coeff = scale * diff;
                        let dwk = &mut d_weights.data_mut()[kk * f..(kk + 1) * f];
                        for (d, &zv) in dwk.iter_mut().zip(zi) {
                            *d += coeff * zv;
                        }
                        let wk = &w[kk * f..(kk + 1) * f];
                        for (d, &wv) in dz.iter_mut().zip(wk) {
                            *d += coeff * wv;
                        }
                    }
                }
            }
        }
        Ok(HeadGradients {
            d_weights,
            d_features,
        })
    }

    fn check_labels(&self, labels: &[usize], features: &Tensor) -> Result<()> {
        let n = features.shape()[0];
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "head loss",
                detail: format!("{n} feature rows but {} labels", labels.len()),
            });
        }
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::DomainError {
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        Ok(())
    }
}

fn batch_dims(features: &Tensor) -> Result<(usize, usize)> {
    match features.shape() {
        [n, f] => Ok((*n, *f)),
        other => Err(Error::ShapeMismatch {
            context: "head input",
            detail: format!("expected rank-2 [batch, features], got {other:?}"),
        }),
    }
}

/// The gated companion bracket `alpha * max(0, weight_norm2 + loss - gamma)`.
///
/// Returns the term's value and whether the gate is closed. The gate closes
/// exactly when `weight_norm2 + loss <= gamma`; a closed gate contributes
/// zero value and, by the callers' contract, zero gradient.
pub fn companion_term(alpha: f64, weight_norm2: f64, loss: f64, gamma: f64) -> (f64, bool) {
    let pre_gate = weight_norm2 + loss - gamma;
    if pre_gate <= 0.0 {
        (0.0, true)
    } else {
        (alpha * pre_gate, false)
    }
}
