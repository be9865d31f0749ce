//! Multinomial logistic probe for reading a categorical label out of a
//! fixed feature block. Deterministic: zero initialization, full-batch
//! updates, no randomness anywhere.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    adam_step, backward, forward, AdamConfig, AdamState, DenseLayer, EncoderArch, EncoderGrads,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Optimization settings for the probe fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Penalty `0.5 * l2_reg * ||W||^2` on the weights; the bias is free.
    pub l2_reg: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_reg: 1e-4,
            steps: 2000,
            lr: 0.05,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.l2_reg.is_finite() || self.l2_reg < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "probe l2_reg must be finite and non-negative, got {}",
                self.l2_reg
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "probe lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Fitted linear classifier `softmax(W f + b)`.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    /// One row of weights per class.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    /// Training loss after every step, initial loss first (steps + 1 values).
    pub loss_trace: Vec<f64>,
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..logits.cols() {
            out.set(i, j, out.get(i, j) / denom);
        }
    }
    out
}

/// Mean cross-entropy of `softmax(W f + b)` against `labels` plus the L2
/// penalty on the weights, with gradients in encoder-layer shape. The probe
/// is a single dense layer, so the encoder's forward and backward passes do
/// all the work.
pub fn probe_objective(
    params: &EncoderParams,
    features: &Matrix,
    labels: &[u32],
    l2_reg: f64,
) -> Result<(f64, EncoderGrads)> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "probe_objective",
            detail: format!("{} feature rows vs {} labels", features.rows(), labels.len()),
        });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyInput {
            op: "probe_objective",
        });
    }
    let n_classes = params.arch.output_dim();
    for &l in labels {
        if l as usize >= n_classes {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                l, n_classes
            )));
        }
    }
    let (logits, tape) = forward(params, features)?;
    let probs = softmax_rows(&logits);
    let batch = features.rows() as f64;
    let mut loss = 0.0;
    let mut grad_logits = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.get(i, l as usize);
        // Clamp keeps a collapsed probability from producing -inf.
        loss -= p.max(1e-300).ln();
        grad_logits.set(i, l as usize, grad_logits.get(i, l as usize) - 1.0);
    }
    loss /= batch;
    grad_logits = grad_logits.scale(1.0 / batch);
    let mut grads = backward(params, &tape, &grad_logits)?;
    let weights = &params.layers[0].weights;
    let mut penalty = 0.0;
    for i in 0..weights.rows() {
        for j in 0..weights.cols() {
            let w = weights.get(i, j);
            penalty += w * w;
            let g = grads[0].weights.get(i, j) + l2_reg * w;
            grads[0].weights.set(i, j, g);
        }
    }
    loss += 0.5 * l2_reg * penalty;
    Ok((loss, grads))
}

/// Fits the probe with full-batch Adam from zero initialization. The
/// objective is convex, so the run is deterministic and the recorded loss
/// trace decreases (up to optimizer-scale wiggle well inside any 100-step
/// window).
pub fn fit_logistic_regression(
    features: &Matrix,
    labels: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<LogisticProbe> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "probe needs at least 2 classes, got {}",
            n_classes
        )));
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "fit_logistic_regression",
            detail: format!("{} feature rows vs {} labels", features.rows(), labels.len()),
        });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyInput {
            op: "fit_logistic_regression",
        });
    }
    if !features.is_finite() {
        return Err(Error::NonFinite {
            op: "fit_logistic_regression",
        });
    }
    let arch = EncoderArch::linear(features.cols(), n_classes, 0);
    let mut params = EncoderParams {
        arch,
        layers: vec![DenseLayer {
            weights: Matrix::zeros(n_classes, features.cols()),
            bias: vec![0.0; n_classes],
        }],
    };
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, &params);
    let mut loss_trace = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (loss, grads) = probe_objective(&params, features, labels, config.l2_reg)?;
        loss_trace.push(loss);
        adam_step(&mut state, &mut params, &grads)?;
    }
    let (final_loss, _) = probe_objective(&params, features, labels, config.l2_reg)?;
    loss_trace.push(final_loss);
    let layer = params.layers.into_iter().next().expect("one layer");
    Ok(LogisticProbe {
        weights: layer.weights,
        bias: layer.bias,
        n_classes,
        loss_trace,
    })
}

impl LogisticProbe {
    /// Class probabilities, one row per feature row.
    pub fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.weights.cols() {
            return Err(Error::DimensionMismatch {
                op: "predict_proba",
                detail: format!(
                    "{} feature columns vs {} probe inputs",
                    features.cols(),
                    self.weights.cols()
                ),
            });
        }
        let mut logits = features.matmul_nt(&self.weights);
        for i in 0..logits.rows() {
            for (j, &b) in self.bias.iter().enumerate() {
                logits.set(i, j, logits.get(i, j) + b);
            }
        }
        Ok(softmax_rows(&logits))
    }

    /// Fraction of rows whose true label ranks inside the top `k` classes.
    /// Ties are broken pessimistically: a class with equal probability and a
    /// different index counts as ranked ahead of the label, so a collapsed
    /// probe scores at the bottom rather than the top.
    pub fn top_k_accuracy(&self, features: &Matrix, labels: &[u32], k: usize) -> Result<f64> {
        if k == 0 || k > self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "top-k with k={} outside 1..={}",
                k, self.n_classes
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "top_k_accuracy",
                detail: format!("{} feature rows vs {} labels", features.rows(), labels.len()),
            });
        }
        if features.rows() == 0 {
            return Err(Error::EmptyInput {
                op: "top_k_accuracy",
            });
        }
        let probs = self.predict_proba(features)?;
        let mut hits = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            let target = probs.get(i, l as usize);
            let mut rank = 0usize;
            for j in 0..self.n_classes {
                if j == l as usize {
                    continue;
                }
                if probs.get(i, j) >= target {
                    rank += 1;
                }
            }
            if rank < k {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len() as f64)
    }
}
