//! The contrastive objective with transported queries.
//!
//! For every positive pair (y, y′) the step embeds a context of further
//! pairs from the same action block, fits the block's linear map between the
//! style coordinates of the two context sides, transports the query
//! embedding with that map, and scores it against the positive and a shared
//! pool of negatives with a softmax over negated squared distances. The
//! baseline variant keeps the identity transport, which reduces the step to
//! standard pairwise contrastive learning.

use serde::{Deserialize, Serialize};

use crate::encoder::{adam_step, backward, forward, forward_no_tape, AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::groups::{structured_representation, StructuredRep};
use crate::numkit::Matrix;
use crate::synthdata::{NegativesMode, Side, SyntheticDataset, TrainingBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    None,
    Infonce,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub n_style: usize,
    pub m_content: usize,
    pub symmetric: bool,
    pub negatives_mode: NegativesMode,
    pub baseline: Baseline,
    pub stop_gradient_context: bool,
}

impl LossConfig {
    /// Defaults follow the strongest general-group ablation row: symmetric
    /// loss over a pooled two-sided negative set.
    pub fn new(n_style: usize, m_content: usize) -> Self {
        LossConfig {
            n_style,
            m_content,
            symmetric: true,
            negatives_mode: NegativesMode::Both,
            baseline: Baseline::None,
            stop_gradient_context: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.n_style + self.m_content
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_style == 0 {
            return Err(Error::InvalidConfig("n_style must be positive".into()));
        }
        if !self.stop_gradient_context {
            // Differentiating through the least-squares fit is out of scope;
            // the flag exists so configs can state the choice explicitly.
            return Err(Error::InvalidConfig(
                "gradients through the context least-squares fit are not supported".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value and exact gradients for one scored batch.
#[derive(Debug)]
pub struct BatchLossOutput {
    pub loss: f64,
    pub grad_u: Matrix,
    pub grad_positives: Matrix,
    pub grad_negatives: Matrix,
    pub mean_positive_distance: f64,
    pub mean_negative_distance: f64,
}

/// Fits the style-block map from context embeddings and transports the
/// query: style coordinates through the fitted map, content coordinates
/// untouched.
pub fn predict_transformed(
    phi_ctx: &Matrix,
    phi_ctx_p: &Matrix,
    phi_query: &[f64],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let rep = structured_representation(phi_ctx, phi_ctx_p, cfg.n_style)?;
    if phi_query.len() != cfg.embed_dim() {
        return Err(Error::DimensionMismatch {
            op: "predict_transformed",
            detail: format!(
                "query has {} coordinates, config says {}",
                phi_query.len(),
                cfg.embed_dim()
            ),
        });
    }
    Ok(rep.apply_vec(phi_query))
}

fn squared_row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v * v).sum())
        .collect()
}

/// Softmax cross-entropy over negated squared distances. Candidates for row
/// i are its own positive plus every negative; negatives are shared across
/// rows. Logits are max-subtracted before exponentiation.
pub fn contrastive_loss(
    u: &Matrix,
    positives: &Matrix,
    negatives: &Matrix,
) -> Result<BatchLossOutput> {
    let p = u.rows();
    let n = negatives.rows();
    let dim = u.cols();
    if p == 0 || n == 0 {
        return Err(Error::EmptyInput {
            op: "contrastive_loss",
        });
    }
    if positives.rows() != p || positives.cols() != dim || negatives.cols() != dim {
        return Err(Error::DimensionMismatch {
            op: "contrastive_loss",
            detail: format!(
                "u {}x{}, positives {}x{}, negatives {}x{}",
                p,
                dim,
                positives.rows(),
                positives.cols(),
                n,
                negatives.cols()
            ),
        });
    }
    // Squared distances: ||u||^2 + ||c||^2 - 2 u·c, negatives via one GEMM.
    let d_pos: Vec<f64> = (0..p)
        .map(|i| {
            u.row(i)
                .iter()
                .zip(positives.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    let u_norms = squared_row_norms(u);
    let neg_norms = squared_row_norms(negatives);
    let cross = u.matmul_nt(negatives);
    let mut d_neg = Matrix::zeros(p, n);
    for i in 0..p {
        let row = d_neg.row_mut(i);
        for j in 0..n {
            row[j] = (u_norms[i] + neg_norms[j] - 2.0 * cross.get(i, j)).max(0.0);
        }
    }
    if d_pos.iter().any(|v| !v.is_finite()) || !d_neg.is_finite() {
        return Err(Error::NonFinite {
            op: "contrastive_loss",
        });
    }

    let mut loss = 0.0;
    let mut weights = Matrix::zeros(p, n);
    let mut w_pos = vec![0.0; p];
    for i in 0..p {
        let logit_pos = -d_pos[i];
        let mut m = logit_pos;
        for j in 0..n {
            m = m.max(-d_neg.get(i, j));
        }
        let e_pos = (logit_pos - m).exp();
        let mut denom = e_pos;
        for j in 0..n {
            denom += (-d_neg.get(i, j) - m).exp();
        }
        loss += -(logit_pos - m - denom.ln());
        let inv = 1.0 / (denom * p as f64);
        w_pos[i] = (e_pos - denom) * inv;
        let wrow = weights.row_mut(i);
        for j in 0..n {
            wrow[j] = (-d_neg.get(i, j) - m).exp() * inv;
        }
    }
    loss /= p as f64;

    // d loss / d logit = weight; d(-||u-c||^2)/du = -2(u-c).
    let mut grad_u = Matrix::zeros(p, dim);
    let mut grad_positives = Matrix::zeros(p, dim);
    let row_sums: Vec<f64> = (0..p).map(|i| weights.row(i).iter().sum()).collect();
    let w_neg_dot = weights.matmul(negatives);
    for i in 0..p {
        for k in 0..dim {
            let diff_pos = u.get(i, k) - positives.get(i, k);
            let gu = w_pos[i] * diff_pos + row_sums[i] * u.get(i, k) - w_neg_dot.get(i, k);
            grad_u.set(i, k, -2.0 * gu);
            grad_positives.set(i, k, 2.0 * w_pos[i] * diff_pos);
        }
    }
    let col_sums: Vec<f64> = {
        let mut c = vec![0.0; n];
        for i in 0..p {
            for (j, w) in weights.row(i).iter().enumerate() {
                c[j] += w;
            }
        }
        c
    };
    let wt_u = weights.matmul_tn(u);
    let mut grad_negatives = Matrix::zeros(n, dim);
    for j in 0..n {
        for k in 0..dim {
            grad_negatives.set(j, k, 2.0 * (wt_u.get(j, k) - col_sums[j] * negatives.get(j, k)));
        }
    }

    let mean_positive_distance = d_pos.iter().map(|v| v.sqrt()).sum::<f64>() / p as f64;
    let mean_negative_distance =
        d_neg.data().iter().map(|v| v.sqrt()).sum::<f64>() / (p * n) as f64;
    Ok(BatchLossOutput {
        loss,
        grad_u,
        grad_positives,
        grad_negatives,
        mean_positive_distance,
        mean_negative_distance,
    })
}

/// Per-step numbers the training loop logs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub mean_positive_distance: f64,
    pub mean_negative_distance: f64,
    /// Positives dropped because a context fit was rank-deficient.
    pub skipped_positives: usize,
    /// Context rows pushed through the encoder; the identity-transport
    /// baseline must keep this at zero.
    pub context_rows_embedded: usize,
}

struct DirectionOutcome {
    u: Matrix,
    targets: Matrix,
    survivors: Vec<usize>,
    reps: Vec<Option<StructuredRep>>,
}

/// Loss, diagnostics, and exact parameter gradients for one batch.
#[derive(Debug)]
pub struct LossEval {
    pub diagnostics: StepDiagnostics,
    pub grads: crate::encoder::EncoderGrads,
}

/// Observation rows backing the context sets, in the layout the loss
/// expects: for each positive, its context pairs' reference rows, then the
/// same pairs' transformed rows.
pub fn context_observation_rows(ds: &SyntheticDataset, batch: &TrainingBatch) -> Result<Matrix> {
    let ctx_size = batch.positives.first().map_or(0, |b| b.context.len());
    if batch
        .positives
        .iter()
        .any(|pos| pos.context.len() != ctx_size)
    {
        return Err(Error::InvalidConfig(
            "positives carry unequal context sizes".into(),
        ));
    }
    let p = batch.positives.len();
    let mut ctx_rows = Matrix::zeros(2 * p * ctx_size, ds.config.obs_dim);
    for (i, pos) in batch.positives.iter().enumerate() {
        for (k, r) in pos.context.iter().enumerate() {
            ctx_rows
                .row_mut((2 * i) * ctx_size + k)
                .copy_from_slice(ds.observation(*r, Side::Reference));
            ctx_rows
                .row_mut((2 * i + 1) * ctx_size + k)
                .copy_from_slice(ds.observation(*r, Side::Transformed));
        }
    }
    Ok(ctx_rows)
}

/// Loss and gradients with the context embeddings supplied by the caller
/// and held constant. This is exactly the objective the training step
/// differentiates: no gradient flows through the least-squares fit, so a
/// finite-difference check must perturb parameters under frozen context.
pub fn ebc_loss_with_frozen_context(
    ds: &SyntheticDataset,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    params: &EncoderParams,
    ctx_emb: &Matrix,
) -> Result<LossEval> {
    cfg.validate()?;
    let p = batch.positives.len();
    let n_neg = batch.negatives.len();
    if p == 0 || n_neg == 0 {
        return Err(Error::EmptyInput {
            op: "ebc_training_step",
        });
    }
    let embed_dim = params.arch.output_dim();
    if embed_dim != cfg.embed_dim() {
        return Err(Error::DimensionMismatch {
            op: "ebc_training_step",
            detail: format!(
                "encoder emits {} coordinates, loss expects {}+{}",
                embed_dim, cfg.n_style, cfg.m_content
            ),
        });
    }
    let obs_dim = ds.config.obs_dim;

    // Rows that carry gradients: queries (reference side), positives
    // (transformed side), then the negative pool.
    let mut grad_rows = Matrix::zeros(2 * p + n_neg, obs_dim);
    for (i, pos) in batch.positives.iter().enumerate() {
        grad_rows
            .row_mut(i)
            .copy_from_slice(ds.observation(pos.query, Side::Reference));
        grad_rows
            .row_mut(p + i)
            .copy_from_slice(ds.observation(pos.query, Side::Transformed));
    }
    for (j, (r, side)) in batch.negatives.iter().enumerate() {
        grad_rows
            .row_mut(2 * p + j)
            .copy_from_slice(ds.observation(*r, *side));
    }
    let (emb, tape) = forward(params, &grad_rows)?;

    let ctx_size = batch.positives.first().map_or(0, |b| b.context.len());
    let context_rows_embedded = ctx_emb.rows();
    if cfg.baseline != Baseline::Infonce {
        if ctx_size < cfg.n_style {
            return Err(Error::InvalidConfig(format!(
                "context size {} cannot identify a {}-dimensional map",
                ctx_size, cfg.n_style
            )));
        }
        if ctx_emb.rows() != 2 * p * ctx_size || ctx_emb.cols() != embed_dim {
            return Err(Error::DimensionMismatch {
                op: "ebc_loss_with_frozen_context",
                detail: format!(
                    "context embeddings are {}x{}, batch needs {}x{}",
                    ctx_emb.rows(),
                    ctx_emb.cols(),
                    2 * p * ctx_size,
                    embed_dim
                ),
            });
        }
    }

    let negatives_emb = emb.select_rows(&(2 * p..2 * p + n_neg).collect::<Vec<_>>());
    let directions: &[bool] = if cfg.symmetric {
        &[false, true]
    } else {
        &[false]
    };
    let scale = 1.0 / directions.len() as f64;

    let mut total_loss = 0.0;
    let mut mean_pos_dist = 0.0;
    let mut mean_neg_dist = 0.0;
    let mut skipped_positives = 0usize;
    let mut grad_emb = Matrix::zeros(emb.rows(), embed_dim);

    for &reversed in directions {
        let mut outcome = DirectionOutcome {
            u: Matrix::zeros(0, embed_dim),
            targets: Matrix::zeros(0, embed_dim),
            survivors: Vec::with_capacity(p),
            reps: vec![None; p],
        };
        let mut u_rows: Vec<f64> = Vec::new();
        let mut target_rows: Vec<usize> = Vec::new();
        for i in 0..p {
            let (query_row, target_row) = if reversed { (p + i, i) } else { (i, p + i) };
            let query_emb = emb.row(query_row);
            let u_i = if cfg.baseline == Baseline::Infonce {
                query_emb.to_vec()
            } else {
                let ref_rows: Vec<usize> = ((2 * i) * ctx_size..(2 * i + 1) * ctx_size).collect();
                let trans_rows: Vec<usize> =
                    ((2 * i + 1) * ctx_size..(2 * i + 2) * ctx_size).collect();
                let ctx_a = ctx_emb.select_rows(if reversed { &trans_rows } else { &ref_rows });
                let ctx_b = ctx_emb.select_rows(if reversed { &ref_rows } else { &trans_rows });
                match structured_representation(&ctx_a, &ctx_b, cfg.n_style) {
                    Ok(rep) => {
                        let u = rep.apply_vec(query_emb);
                        outcome.reps[i] = Some(rep);
                        u
                    }
                    Err(Error::RankDeficient { .. }) => {
                        skipped_positives += 1;
                        continue;
                    }
                    Err(other) => return Err(other),
                }
            };
            outcome.survivors.push(i);
            u_rows.extend_from_slice(&u_i);
            target_rows.push(target_row);
        }
        if outcome.survivors.is_empty() {
            return Err(Error::AllPositivesSkipped);
        }
        outcome.u = Matrix::from_vec(outcome.survivors.len(), embed_dim, u_rows);
        outcome.targets = emb.select_rows(&target_rows);

        let out = contrastive_loss(&outcome.u, &outcome.targets, &negatives_emb)?;
        total_loss += scale * out.loss;
        mean_pos_dist += scale * out.mean_positive_distance;
        mean_neg_dist += scale * out.mean_negative_distance;

        for (s, &i) in outcome.survivors.iter().enumerate() {
            let (query_row, target_row) = if reversed { (p + i, i) } else { (i, p + i) };
            let gu = out.grad_u.row(s);
            let query_grad = match &outcome.reps[i] {
                Some(rep) => rep.apply_transpose_vec(gu),
                None => gu.to_vec(),
            };
            for (k, g) in query_grad.iter().enumerate() {
                grad_emb.row_mut(query_row)[k] += scale * g;
            }
            let pos_grad = out.grad_positives.row(s).to_vec();
            for (k, g) in pos_grad.iter().enumerate() {
                grad_emb.row_mut(target_row)[k] += scale * g;
            }
        }
        for j in 0..n_neg {
            let neg_grad = out.grad_negatives.row(j);
            let row = grad_emb.row_mut(2 * p + j);
            for (k, g) in neg_grad.iter().enumerate() {
                row[k] += scale * g;
            }
        }
    }

    let grads = backward(params, &tape, &grad_emb)?;
    Ok(LossEval {
        diagnostics: StepDiagnostics {
            loss: total_loss,
            mean_positive_distance: mean_pos_dist,
            mean_negative_distance: mean_neg_dist,
            skipped_positives,
            context_rows_embedded,
        },
        grads,
    })
}

/// Embeds the context with the current parameters (tapeless, so the fit is
/// a constant of the step), then scores the batch and backpropagates.
/// Pure in (dataset, batch, cfg, params).
pub fn ebc_loss_and_grads(
    ds: &SyntheticDataset,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    params: &EncoderParams,
) -> Result<LossEval> {
    cfg.validate()?;
    let ctx_emb = if cfg.baseline == Baseline::Infonce {
        Matrix::zeros(0, params.arch.output_dim())
    } else {
        forward_no_tape(params, &context_observation_rows(ds, batch)?)?
    };
    ebc_loss_with_frozen_context(ds, batch, cfg, params, &ctx_emb)
}

/// One optimization step: [`ebc_loss_and_grads`] followed by an Adam update.
pub fn ebc_training_step(
    ds: &SyntheticDataset,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    params: &mut EncoderParams,
    adam: &mut AdamState,
) -> Result<StepDiagnostics> {
    let eval = ebc_loss_and_grads(ds, batch, cfg, params)?;
    adam_step(adam, params, &eval.grads)?;
    Ok(eval.diagnostics)
}
