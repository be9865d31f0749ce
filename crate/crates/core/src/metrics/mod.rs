//! Identifiability metrics: latent recovery, transport recovery, pair
//! retrieval, and content readout.
//!
//! Every metric is strictly out of sample. The evaluation split is halved by
//! a seeded shuffle into a fit half (estimates alignment maps and probes) and
//! a report half (scores them); retrieval keeps its transport-estimation
//! context disjoint from the gallery instead. Transport maps are re-estimated
//! from embeddings at evaluation time with the same context budget the
//! training batches used, so a context size too small to pin down the group
//! action shows up here as degraded transport recovery rather than being
//! papered over by an oversized evaluation fit.

mod probe;

pub use probe::{fit_logistic_regression, probe_objective, LogisticProbe, ProbeConfig};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ebc_loss::{Baseline, LossConfig};
use crate::encoder::{forward_no_tape, EncoderParams};
use crate::error::{Error, Result};
use crate::groups::structured_representation;
use crate::numkit::{fit_linear_map, r_squared, singular_value_bounds, Matrix, RngStream, RANK_TOL};
use crate::synthdata::{PairRef, Side, SplitId, SyntheticDataset};

/// Substream of the metrics seed driving the fit/report shuffle.
const EVAL_SHUFFLE_STREAM: u64 = 0;
/// Substream of the metrics seed driving gallery sampling.
const GALLERY_STREAM: u64 = 1;

/// Maps dataset pairs to embedding rows. Implementations decide what the
/// embedding is; the metrics only assume a `[style | content]` layout.
pub trait Embedder {
    /// Width of the style block (the transported coordinates).
    fn n_style(&self) -> usize;
    /// Width of the content block (carried through transport unchanged).
    fn m_content(&self) -> usize;
    /// True when transport is fixed to the identity instead of being
    /// estimated from context, as in non-equivariant baselines.
    fn identity_transport(&self) -> bool {
        false
    }
    /// True when the style/content partition carries no meaning and probes
    /// should read the full embedding vector.
    fn probe_full_embedding(&self) -> bool {
        false
    }
    /// Embeds the chosen side of each listed pair, one row per pair.
    fn embed(&self, ds: &SyntheticDataset, pairs: &[PairRef], side: Side) -> Result<Matrix>;

    fn embed_dim(&self) -> usize {
        self.n_style() + self.m_content()
    }
}

/// Embedder backed by a trained encoder network.
pub struct NetworkEmbedder<'a> {
    params: &'a EncoderParams,
    n_style: usize,
    m_content: usize,
    identity_transport: bool,
}

impl<'a> NetworkEmbedder<'a> {
    /// The loss configuration decides the style/content partition and
    /// whether transport is estimated or fixed to the identity.
    pub fn new(params: &'a EncoderParams, loss: &LossConfig) -> Result<Self> {
        if params.arch.output_dim() != loss.embed_dim() {
            return Err(Error::DimensionMismatch {
                op: "NetworkEmbedder::new",
                detail: format!(
                    "encoder outputs {} dims, loss expects {}",
                    params.arch.output_dim(),
                    loss.embed_dim()
                ),
            });
        }
        Ok(NetworkEmbedder {
            params,
            n_style: loss.n_style,
            m_content: loss.m_content,
            identity_transport: loss.baseline == Baseline::Infonce,
        })
    }
}

impl Embedder for NetworkEmbedder<'_> {
    fn n_style(&self) -> usize {
        self.n_style
    }

    fn m_content(&self) -> usize {
        self.m_content
    }

    fn identity_transport(&self) -> bool {
        self.identity_transport
    }

    fn probe_full_embedding(&self) -> bool {
        // Without an estimated transport there is no induced partition.
        self.identity_transport
    }

    fn embed(&self, ds: &SyntheticDataset, pairs: &[PairRef], side: Side) -> Result<Matrix> {
        let input = gather_observations(ds, pairs, side);
        forward_no_tape(self.params, &input)
    }
}

/// Ground-truth embedder: the style block is the true latent (or its exact
/// group-transformed image on the transformed side) and the content block is
/// the codebook vector. Observation noise is not replayed, so this reflects
/// the noiseless generative path; it exists to pin down what each metric
/// reports on a perfect encoder.
pub struct OracleEmbedder {
    n_style: usize,
    d_content: usize,
}

impl OracleEmbedder {
    pub fn for_dataset(ds: &SyntheticDataset) -> Self {
        OracleEmbedder {
            n_style: ds.config.n_style,
            d_content: ds.config.d_content,
        }
    }
}

impl Embedder for OracleEmbedder {
    fn n_style(&self) -> usize {
        self.n_style
    }

    fn m_content(&self) -> usize {
        self.d_content
    }

    fn embed(&self, ds: &SyntheticDataset, pairs: &[PairRef], side: Side) -> Result<Matrix> {
        let dim = self.n_style + self.d_content;
        let mut out = Matrix::zeros(pairs.len(), dim);
        for (i, &r) in pairs.iter().enumerate() {
            let x = ds.latent(r);
            let row = out.row_mut(i);
            match side {
                Side::Reference => row[..self.n_style].copy_from_slice(x),
                Side::Transformed => {
                    let g = &ds.block(r.block).element.matrix;
                    for a in 0..self.n_style {
                        let mut s = 0.0;
                        for b in 0..self.n_style {
                            s += g.get(a, b) * x[b];
                        }
                        row[a] = s;
                    }
                }
            }
            if self.d_content > 0 {
                let c = ds.codebook.vector(ds.content_id(r) as usize);
                row[self.n_style..].copy_from_slice(c);
            }
        }
        Ok(out)
    }
}

/// Stacks the chosen observation side of each pair into a row matrix.
pub fn gather_observations(ds: &SyntheticDataset, pairs: &[PairRef], side: Side) -> Matrix {
    let mut out = Matrix::zeros(pairs.len(), ds.config.obs_dim);
    for (i, &r) in pairs.iter().enumerate() {
        out.row_mut(i).copy_from_slice(ds.observation(r, side));
    }
    out
}

/// Settings shared by all metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Seed for the fit/report shuffle and gallery sampling; independent of
    /// the dataset and training seeds.
    pub seed: u64,
    /// Pairs used to estimate each action's transport at evaluation time.
    /// Should match the training context size: the point of re-estimating
    /// transport here is to measure the encoder under the same budget it was
    /// trained with.
    pub context_size: usize,
    /// Number of candidate pairs in the retrieval gallery.
    pub gallery_size: usize,
    /// Top-K levels reported for retrieval and content readout.
    pub ks: Vec<usize>,
    pub probe: ProbeConfig,
    /// Probe the transformed-side embeddings instead of the reference side.
    pub probe_transformed_side: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            seed: 0,
            context_size: 12,
            gallery_size: 2000,
            ks: vec![1, 5],
            probe: ProbeConfig::default(),
            probe_transformed_side: false,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_size == 0 {
            return Err(Error::InvalidConfig("context_size must be positive".into()));
        }
        if self.gallery_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "gallery_size must be at least 2, got {}",
                self.gallery_size
            )));
        }
        if self.ks.is_empty() {
            return Err(Error::InvalidConfig("ks must not be empty".into()));
        }
        for &k in &self.ks {
            if k == 0 || k > self.gallery_size {
                return Err(Error::InvalidConfig(format!(
                    "top-k level {} outside 1..=gallery_size {}",
                    k, self.gallery_size
                )));
            }
        }
        self.probe.validate()
    }
}

/// Disjoint halves of an evaluation split, decided by a seeded shuffle.
#[derive(Debug, Clone)]
pub struct EvalHalves {
    pub fit: Vec<PairRef>,
    pub report: Vec<PairRef>,
}

/// Shuffles the split's pairs and halves them: the first half fits auxiliary
/// maps, the second is scored. Deterministic in (dataset, split, seed).
pub fn split_fit_report(ds: &SyntheticDataset, split: SplitId, seed: u64) -> Result<EvalHalves> {
    let mut pairs = ds.split_pairs(split);
    if pairs.len() < 2 {
        return Err(Error::EmptyInput {
            op: "split_fit_report",
        });
    }
    let mut rng = RngStream::new(seed, EVAL_SHUFFLE_STREAM);
    pairs.shuffle(&mut rng);
    let report = pairs.split_off(pairs.len() / 2);
    Ok(EvalHalves { fit: pairs, report })
}

/// Linear map from style coordinates to true latents, fitted without an
/// intercept. The tolerated indeterminacy of the style block is exactly one
/// invertible matrix, so the fit must not be allowed an offset. The map is
/// rectangular when the embedder's style width differs from the latent
/// dimension (a misspecified encoder), and the recovery scores then say how
/// much that costs.
#[derive(Debug, Clone)]
pub struct AlignmentMap {
    /// latent_dim x style_width, applied as `latent ~ map * style`.
    pub map: Matrix,
    pub fit_rows: usize,
    /// Root-mean-square residual on the fit half.
    pub residual: f64,
    /// sigma_min / sigma_max of the fitted map; near zero means the style
    /// block collapsed some latent direction and the map is not invertible.
    pub min_singular_ratio: f64,
}

impl AlignmentMap {
    pub fn apply(&self, style_rows: &Matrix) -> Matrix {
        style_rows.matmul_nt(&self.map)
    }

    pub fn is_invertible(&self) -> bool {
        self.min_singular_ratio > RANK_TOL
    }
}

/// Fits the alignment map on (style coordinates, latent) rows.
pub fn fit_alignment(style: &Matrix, latents: &Matrix) -> Result<AlignmentMap> {
    let (map, _) = fit_linear_map(style, latents, false)?;
    let pred = style.matmul_nt(&map);
    let mut ss = 0.0;
    for i in 0..pred.rows() {
        for j in 0..pred.cols() {
            let d = pred.get(i, j) - latents.get(i, j);
            ss += d * d;
        }
    }
    let residual = (ss / (pred.rows().max(1) * pred.cols().max(1)) as f64).sqrt();
    let (lo, hi) = singular_value_bounds(&map);
    let min_singular_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    Ok(AlignmentMap {
        map,
        fit_rows: style.rows(),
        residual,
        min_singular_ratio,
    })
}

fn style_block(emb: &Matrix, n_style: usize) -> Matrix {
    emb.columns(0, n_style)
}

fn latent_rows(ds: &SyntheticDataset, pairs: &[PairRef]) -> Matrix {
    let mut out = Matrix::zeros(pairs.len(), ds.config.n_style);
    for (i, &r) in pairs.iter().enumerate() {
        out.row_mut(i).copy_from_slice(ds.latent(r));
    }
    out
}

/// Latent recovery: how much latent variance the style block explains
/// through the best linear alignment. Fits the alignment on the fit half,
/// reports pooled R^2 on the report half. Errors if the style coordinates
/// are rank-deficient on the fit half, which is what embedding collapse
/// looks like to this metric. A style width different from the latent
/// dimension is allowed: the alignment is then rectangular and the score
/// reflects the misspecification.
pub fn metric_r2_x(
    embedder: &dyn Embedder,
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &MetricsConfig,
) -> Result<f64> {
    let halves = split_fit_report(ds, split, cfg.seed)?;
    let n = embedder.n_style();
    let fit_emb = embedder.embed(ds, &halves.fit, Side::Reference)?;
    let alignment = fit_alignment(&style_block(&fit_emb, n), &latent_rows(ds, &halves.fit))?;
    let report_emb = embedder.embed(ds, &halves.report, Side::Reference)?;
    let pred = alignment.apply(&style_block(&report_emb, n));
    r_squared(&pred, &latent_rows(ds, &halves.report))
}

/// Transport recovery outcome. Actions whose context could not produce a
/// transport estimate contribute nothing to the pooled score and are counted
/// instead.
#[derive(Debug, Clone)]
pub struct R2GOutcome {
    pub r2: f64,
    pub scored_actions: usize,
    pub skipped_actions: usize,
}

/// Transport recovery: per action, estimate the transport from at most
/// `context_size` fit-half embedding pairs, push report-half reference
/// embeddings through transport and alignment, and score them against the
/// true transformed latents `g x`, pooled across actions. Alignment comes
/// from the same fit half as in latent recovery.
pub fn metric_r2_g(
    embedder: &dyn Embedder,
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &MetricsConfig,
) -> Result<R2GOutcome> {
    cfg.validate()?;
    let halves = split_fit_report(ds, split, cfg.seed)?;
    let n = embedder.n_style();
    let fit_emb = embedder.embed(ds, &halves.fit, Side::Reference)?;
    let alignment = fit_alignment(&style_block(&fit_emb, n), &latent_rows(ds, &halves.fit))?;

    let mut fit_by_block: BTreeMap<usize, Vec<PairRef>> = BTreeMap::new();
    for &r in &halves.fit {
        fit_by_block.entry(r.block).or_default().push(r);
    }
    let mut report_by_block: BTreeMap<usize, Vec<PairRef>> = BTreeMap::new();
    for &r in &halves.report {
        report_by_block.entry(r.block).or_default().push(r);
    }

    let mut preds: Vec<Matrix> = Vec::new();
    let mut targets: Vec<Matrix> = Vec::new();
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (&block, report_pairs) in &report_by_block {
        let ctx_all = match fit_by_block.get(&block) {
            Some(v) => v.as_slice(),
            None => {
                skipped += 1;
                continue;
            }
        };
        if ctx_all.len() < n {
            skipped += 1;
            continue;
        }
        let ctx = &ctx_all[..ctx_all.len().min(cfg.context_size)];
        let ctx_ref = embedder.embed(ds, ctx, Side::Reference)?;
        let ctx_trans = embedder.embed(ds, ctx, Side::Transformed)?;
        let rep = if embedder.identity_transport() {
            crate::groups::StructuredRep::identity(n, embedder.m_content())
        } else {
            match structured_representation(&ctx_ref, &ctx_trans, n) {
                Ok(r) => r,
                Err(Error::RankDeficient { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
        };
        let report_emb = embedder.embed(ds, report_pairs, Side::Reference)?;
        let transported = style_block(&report_emb, n).matmul_nt(&rep.style_block);
        preds.push(alignment.apply(&transported));
        let g = &ds.block(block).element.matrix;
        targets.push(latent_rows(ds, report_pairs).matmul_nt(g));
        scored += 1;
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput { op: "metric_r2_g" });
    }
    let mut pred = preds.remove(0);
    for p in preds {
        pred = pred.vstack(&p);
    }
    let mut target = targets.remove(0);
    for t in targets {
        target = target.vstack(&t);
    }
    let r2 = r_squared(&pred, &target)?;
    Ok(R2GOutcome {
        r2,
        scored_actions: scored,
        skipped_actions: skipped,
    })
}

/// Retrieval outcome at each requested K, with the matching chance rates.
#[derive(Debug, Clone)]
pub struct AccGOutcome {
    pub accuracy: BTreeMap<u32, f64>,
    /// K / gallery_size, the rate a uniformly guessing ranker would score.
    pub chance: BTreeMap<u32, f64>,
    pub gallery_size: usize,
    /// Actions whose transport could not be estimated; their queries count
    /// as misses rather than shrinking the denominator.
    pub skipped_actions: usize,
}

/// Pair retrieval: sample a gallery of pairs, embed every transformed side
/// as candidates, and for each gallery pair transport its reference
/// embedding with that action's estimated transport and rank candidates by
/// squared distance. A query scores at K if strictly fewer than K candidates
/// sit at least as close as its own partner (ties count against the query,
/// so a collapsed embedding scores zero instead of perfect). Transport
/// context comes from the action's non-gallery pairs, keeping the candidate
/// set and the estimation set disjoint.
pub fn metric_acc_g(
    embedder: &dyn Embedder,
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &MetricsConfig,
) -> Result<AccGOutcome> {
    cfg.validate()?;
    let pairs = ds.split_pairs(split);
    if pairs.len() < cfg.gallery_size {
        return Err(Error::InvalidConfig(format!(
            "gallery_size {} exceeds the split's {} pairs",
            cfg.gallery_size,
            pairs.len()
        )));
    }
    let n = embedder.n_style();

    // Partial Fisher-Yates: the first gallery_size slots become the gallery.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = RngStream::new(cfg.seed, GALLERY_STREAM);
    for i in 0..cfg.gallery_size {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let gallery: Vec<PairRef> = order[..cfg.gallery_size].iter().map(|&i| pairs[i]).collect();
    let mut in_gallery = vec![false; pairs.len()];
    for &i in &order[..cfg.gallery_size] {
        in_gallery[i] = true;
    }

    // Non-gallery context candidates per block, in split order.
    let mut context_by_block: BTreeMap<usize, Vec<PairRef>> = BTreeMap::new();
    for (i, &r) in pairs.iter().enumerate() {
        if !in_gallery[i] {
            context_by_block.entry(r.block).or_default().push(r);
        }
    }
    let mut queries_by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, r) in gallery.iter().enumerate() {
        queries_by_block.entry(r.block).or_default().push(gi);
    }

    let gallery_emb = embedder.embed(ds, &gallery, Side::Transformed)?;
    let gallery_sq: Vec<f64> = (0..gallery_emb.rows())
        .map(|i| gallery_emb.row(i).iter().map(|v| v * v).sum())
        .collect();

    let mut ranks: Vec<usize> = vec![usize::MAX; cfg.gallery_size];
    let mut skipped = 0usize;
    for (&block, query_indices) in &queries_by_block {
        let rep = if embedder.identity_transport() {
            Some(crate::groups::StructuredRep::identity(n, embedder.m_content()))
        } else {
            let ctx_all = context_by_block.get(&block).map(|v| v.as_slice()).unwrap_or(&[]);
            if ctx_all.len() < n {
                None
            } else {
                let ctx = &ctx_all[..ctx_all.len().min(cfg.context_size)];
                let ctx_ref = embedder.embed(ds, ctx, Side::Reference)?;
                let ctx_trans = embedder.embed(ds, ctx, Side::Transformed)?;
                match structured_representation(&ctx_ref, &ctx_trans, n) {
                    Ok(r) => Some(r),
                    Err(Error::RankDeficient { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        let rep = match rep {
            Some(r) => r,
            None => {
                // Queries of a skipped action stay at rank usize::MAX: misses.
                skipped += 1;
                continue;
            }
        };
        let query_pairs: Vec<PairRef> = query_indices.iter().map(|&gi| gallery[gi]).collect();
        let query_emb = embedder.embed(ds, &query_pairs, Side::Reference)?;
        let transported = rep.apply_rows(&query_emb);
        // Squared distances via ||u||^2 + ||c||^2 - 2 u.c; the constant
        // ||u||^2 term cancels in rank comparisons and is dropped.
        let cross = transported.matmul_nt(&gallery_emb);
        for (qi, &gi) in query_indices.iter().enumerate() {
            let own = gallery_sq[gi] - 2.0 * cross.get(qi, gi);
            let mut rank = 0usize;
            for j in 0..cfg.gallery_size {
                if j == gi {
                    continue;
                }
                let d = gallery_sq[j] - 2.0 * cross.get(qi, j);
                if d <= own {
                    rank += 1;
                }
            }
            ranks[gi] = rank;
        }
    }

    let mut accuracy = BTreeMap::new();
    let mut chance = BTreeMap::new();
    for &k in &cfg.ks {
        let hits = ranks.iter().filter(|&&r| r < k).count();
        accuracy.insert(k as u32, hits as f64 / cfg.gallery_size as f64);
        chance.insert(k as u32, k as f64 / cfg.gallery_size as f64);
    }
    Ok(AccGOutcome {
        accuracy,
        chance,
        gallery_size: cfg.gallery_size,
        skipped_actions: skipped,
    })
}

/// Content readout accuracy at each requested K.
#[derive(Debug, Clone)]
pub struct AccCOutcome {
    pub accuracy: BTreeMap<u32, f64>,
    /// Probe training loss after the last step.
    pub probe_final_loss: f64,
}

/// Content readout: fit a logistic probe on the content block of the fit
/// half (the full embedding when the embedder has no meaningful partition)
/// and report top-K accuracy on the report half. The probed side is the
/// reference observation unless configured otherwise.
pub fn metric_acc_c(
    embedder: &dyn Embedder,
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &MetricsConfig,
) -> Result<AccCOutcome> {
    cfg.validate()?;
    let n_classes = ds.config.codebook_size;
    if n_classes == 1 {
        // A single content class makes readout trivially perfect; there is
        // nothing to probe.
        let accuracy = cfg.ks.iter().map(|&k| (k as u32, 1.0)).collect();
        return Ok(AccCOutcome {
            accuracy,
            probe_final_loss: 0.0,
        });
    }
    if embedder.m_content() == 0 && !embedder.probe_full_embedding() {
        return Err(Error::InvalidConfig(
            "embedder has no content coordinates to probe".into(),
        ));
    }
    let halves = split_fit_report(ds, split, cfg.seed)?;
    let side = if cfg.probe_transformed_side {
        Side::Transformed
    } else {
        Side::Reference
    };
    let features_of = |pairs: &[PairRef]| -> Result<Matrix> {
        let emb = embedder.embed(ds, pairs, side)?;
        if embedder.probe_full_embedding() {
            Ok(emb)
        } else {
            Ok(emb.columns(embedder.n_style(), emb.cols()))
        }
    };
    let labels_of = |pairs: &[PairRef]| -> Vec<u32> {
        pairs.iter().map(|&r| ds.content_id(r)).collect()
    };
    let fit_labels = labels_of(&halves.fit);
    let mut seen = vec![false; n_classes];
    for &l in &fit_labels {
        seen[l as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::MissingClass {
            class: missing as u32,
        });
    }
    let probe = fit_logistic_regression(
        &features_of(&halves.fit)?,
        &fit_labels,
        n_classes,
        &cfg.probe,
    )?;
    let report_features = features_of(&halves.report)?;
    let report_labels = labels_of(&halves.report);
    let mut accuracy = BTreeMap::new();
    for &k in &cfg.ks {
        let k_eff = k.min(n_classes);
        accuracy.insert(
            k as u32,
            probe.top_k_accuracy(&report_features, &report_labels, k_eff)?,
        );
    }
    Ok(AccCOutcome {
        accuracy,
        probe_final_loss: *probe.loss_trace.last().expect("nonempty trace"),
    })
}

/// Full metrics bundle for one evaluation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r2_x: f64,
    pub r2_g: f64,
    pub acc_g: BTreeMap<u32, f64>,
    pub acc_c: BTreeMap<u32, f64>,
    pub gallery_size: usize,
    /// Transport estimates that failed across transport recovery and
    /// retrieval combined.
    pub skipped_actions: usize,
    pub split: String,
    pub config_hash: String,
    pub acc_g_chance: BTreeMap<u32, f64>,
    /// Sizes of the fit/report sub-splits backing the alignment metrics.
    pub fit_pairs: usize,
    pub report_pairs: usize,
}

/// Computes all four metrics on one split. `config_hash` identifies the
/// producing experiment configuration and is carried through verbatim.
pub fn compute_metrics(
    embedder: &dyn Embedder,
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &MetricsConfig,
    config_hash: &str,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let halves = split_fit_report(ds, split, cfg.seed)?;
    let r2_x = metric_r2_x(embedder, ds, split, cfg)?;
    let r2g = metric_r2_g(embedder, ds, split, cfg)?;
    let acc_g = metric_acc_g(embedder, ds, split, cfg)?;
    let acc_c = metric_acc_c(embedder, ds, split, cfg)?;
    Ok(MetricsReport {
        r2_x,
        r2_g: r2g.r2,
        acc_g: acc_g.accuracy,
        acc_c: acc_c.accuracy,
        gallery_size: acc_g.gallery_size,
        skipped_actions: r2g.skipped_actions + acc_g.skipped_actions,
        split: split.to_string(),
        config_hash: config_hash.to_string(),
        acc_g_chance: acc_g.chance,
        fit_pairs: halves.fit.len(),
        report_pairs: halves.report.len(),
    })
}
