//! Synthetic datasets of group actions observed through a nonlinear mixing.
//!
//! Each action block fixes one group element g and holds paired samples: a
//! unit latent x with content c observed as mix(x, c), and its transformed
//! partner observed as mix(g·x, c) plus optional latent-side noise. All
//! randomness flows through numbered substreams of one dataset seed, so a
//! config regenerates bit-identically and each block is independent of how
//! many others exist.

mod mixing;
mod persist;

pub use mixing::{
    build_mixing_network, check_injectivity, probe_separation_ratio, InjectivityRecord,
    MixingNetwork, MIXING_REJECTION_CAP, MIXING_SLOPE, PROBE_PAIRS, PROBE_SEPARATION_FLOOR,
    SV_FLOOR,
};
pub use persist::{load_dataset, save_dataset};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{sample_group_element, GroupElement, GroupFamily, GroupKind};
use crate::numkit::{sample_gaussian_matrix, unit_sphere_sample, Matrix, RngStream};

/// Substream ids carved out of the dataset seed. Block b draws from stream
/// id b, so generation order per block is independent of how many blocks
/// exist; the fixed streams live far above any plausible action count.
const STREAM_MIXING: u64 = 1 << 40;
const STREAM_CODEBOOK: u64 = (1 << 40) + 1;
const STREAM_SPLITS: u64 = (1 << 40) + 2;

/// Fraction of actions reserved for the validation and test splits.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub family: GroupFamily,
    pub n_style: usize,
    pub d_content: usize,
    pub codebook_size: usize,
    pub obs_dim: usize,
    pub mixing_hidden_layers: usize,
    pub actions: usize,
    pub pairs_per_action: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            family: GroupFamily::SpecialOrthogonal,
            n_style: 3,
            d_content: 3,
            codebook_size: 100,
            obs_dim: 50,
            mixing_hidden_layers: 3,
            actions: 100,
            pairs_per_action: 500,
            noise_sigma: 0.0,
            seed: 1000,
        }
    }
}

impl DatasetConfig {
    pub fn group_kind(&self) -> GroupKind {
        GroupKind {
            family: self.family,
            n: self.n_style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_style == 0 {
            return Err(Error::InvalidConfig("n_style must be positive".into()));
        }
        if self.codebook_size == 0 {
            return Err(Error::InvalidConfig(
                "codebook needs at least one entry".into(),
            ));
        }
        if self.d_content == 0 && self.codebook_size > 1 {
            return Err(Error::InvalidConfig(
                "multiple content classes need d_content > 0".into(),
            ));
        }
        if self.pairs_per_action <= self.n_style {
            return Err(Error::InvalidConfig(format!(
                "pairs_per_action {} must exceed n_style {} so per-action maps are estimable",
                self.pairs_per_action, self.n_style
            )));
        }
        if self.actions < 10 {
            return Err(Error::InvalidConfig(format!(
                "need at least 10 actions for an 80/10/10 split, got {}",
                self.actions
            )));
        }
        if self.obs_dim < self.n_style + self.d_content {
            return Err(Error::InvalidConfig(format!(
                "obs_dim {} below joint latent dim {}",
                self.obs_dim,
                self.n_style + self.d_content
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Unit content vectors, one per class id.
#[derive(Debug, Clone)]
pub struct ContentCodebook {
    vectors: Matrix,
}

impl ContentCodebook {
    pub fn new(vectors: Matrix) -> Self {
        ContentCodebook { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }
}

fn sample_codebook(size: usize, dim: usize, rng: &mut RngStream) -> Result<ContentCodebook> {
    let mut vectors = Matrix::zeros(size, dim);
    for i in 0..size {
        // Exact duplicates have probability zero; resampling keeps the
        // pairwise-distinct invariant unconditional anyway.
        'draw: for attempt in 0.. {
            if attempt >= 100 {
                return Err(Error::RejectionCapExceeded {
                    op: "sample_codebook",
                    cap: 100,
                });
            }
            let v = unit_sphere_sample(rng, dim);
            for j in 0..i {
                if vectors.row(j) == &v[..] {
                    continue 'draw;
                }
            }
            vectors.row_mut(i).copy_from_slice(&v);
            break;
        }
    }
    Ok(ContentCodebook { vectors })
}

/// All pairs sharing one group element.
#[derive(Debug, Clone)]
pub struct ActionBlock {
    pub element: GroupElement,
    /// Unit latents, one row per pair.
    pub latents: Matrix,
    /// Content class per pair.
    pub content_ids: Vec<u32>,
    /// mix(x, c) per pair.
    pub observations: Matrix,
    /// mix(g x (+ noise), c) per pair.
    pub observations_transformed: Matrix,
    pub noise_sigma: f64,
}

impl ActionBlock {
    pub fn pairs(&self) -> usize {
        self.latents.rows()
    }
}

/// Which observation of a pair to reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Reference,
    Transformed,
}

/// Index of one pair inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairRef {
    pub block: usize,
    pub pair: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitId {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for SplitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitId::Train => "train",
            SplitId::Valid => "valid",
            SplitId::Test => "test",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "valid" => Ok(SplitId::Valid),
            "test" => Ok(SplitId::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split '{}', expected train/valid/test",
                other
            ))),
        }
    }
}

/// Disjoint action-index lists covering the whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn actions(&self, id: SplitId) -> &[usize] {
        match id {
            SplitId::Train => &self.train,
            SplitId::Valid => &self.valid,
            SplitId::Test => &self.test,
        }
    }
}

/// Partitions action indices by shuffling and slicing. Counts for valid and
/// test are floored; the remainder goes to train, so 10 actions split as
/// (8, 1, 1) and 1000 as (800, 100, 100).
pub fn split_by_action(
    action_count: usize,
    ratios: (f64, f64, f64),
    rng: &mut RngStream,
) -> Result<Splits> {
    let (r_train, r_valid, r_test) = ratios;
    if !(r_train > 0.0 && r_valid > 0.0 && r_test > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be positive, got {:?}",
            ratios
        )));
    }
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must sum to 1, got {:?}",
            ratios
        )));
    }
    let n_valid = (r_valid * action_count as f64).floor() as usize;
    let n_test = (r_test * action_count as f64).floor() as usize;
    if n_valid == 0 || n_test == 0 || n_valid + n_test >= action_count {
        return Err(Error::EmptySplit(format!(
            "{} actions at ratios {:?} leave an empty split",
            action_count, ratios
        )));
    }
    let mut order: Vec<usize> = (0..action_count).collect();
    order.shuffle(rng);
    let n_train = action_count - n_valid - n_test;
    let mut train = order[..n_train].to_vec();
    let mut valid = order[n_train..n_train + n_valid].to_vec();
    let mut test = order[n_train + n_valid..].to_vec();
    // Membership is what the shuffle decides; the stored order is normalized.
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, valid, test })
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub mixing: MixingNetwork,
    pub injectivity: InjectivityRecord,
    pub codebook: ContentCodebook,
    pub blocks: Vec<ActionBlock>,
    pub splits: Splits,
}

impl SyntheticDataset {
    pub fn block(&self, index: usize) -> &ActionBlock {
        &self.blocks[index]
    }

    pub fn observation(&self, r: PairRef, side: Side) -> &[f64] {
        let block = &self.blocks[r.block];
        match side {
            Side::Reference => block.observations.row(r.pair),
            Side::Transformed => block.observations_transformed.row(r.pair),
        }
    }

    pub fn latent(&self, r: PairRef) -> &[f64] {
        self.blocks[r.block].latents.row(r.pair)
    }

    pub fn content_id(&self, r: PairRef) -> u32 {
        self.blocks[r.block].content_ids[r.pair]
    }

    pub fn split_actions(&self, id: SplitId) -> &[usize] {
        self.splits.actions(id)
    }

    /// Every pair of a split, in (ascending block, ascending pair) order.
    pub fn split_pairs(&self, id: SplitId) -> Vec<PairRef> {
        let mut out = Vec::new();
        for &b in self.splits.actions(id) {
            for p in 0..self.blocks[b].pairs() {
                out.push(PairRef { block: b, pair: p });
            }
        }
        out
    }

    pub fn total_pairs(&self) -> usize {
        self.blocks.iter().map(|b| b.pairs()).sum()
    }
}

fn assemble_inputs(latents: &Matrix, content_ids: &[u32], codebook: &ContentCodebook) -> Matrix {
    let rows = latents.rows();
    let dim = latents.cols() + codebook.dim();
    let mut joint = Matrix::zeros(rows, dim);
    for i in 0..rows {
        let row = joint.row_mut(i);
        row[..latents.cols()].copy_from_slice(latents.row(i));
        row[latents.cols()..].copy_from_slice(codebook.vector(content_ids[i] as usize));
    }
    joint
}

/// Latent-side draws of one block, before mixing.
struct BlockParts {
    element: GroupElement,
    latents: Matrix,
    content_ids: Vec<u32>,
    transformed: Matrix,
}

fn draw_block_parts(cfg: &DatasetConfig, rng: &mut RngStream) -> Result<BlockParts> {
    let m = cfg.pairs_per_action;
    let n = cfg.n_style;
    // Draw order is part of the regeneration contract: group element, then
    // all latents, then all content ids, then noise (only when sigma > 0,
    // so noiseless and noisy datasets share elements and latents).
    let element = sample_group_element(cfg.group_kind(), rng)?;
    let mut latents = Matrix::zeros(m, n);
    for i in 0..m {
        let x = unit_sphere_sample(rng, n);
        latents.row_mut(i).copy_from_slice(&x);
    }
    let content_ids: Vec<u32> = (0..m)
        .map(|_| rng.random_range(0..cfg.codebook_size) as u32)
        .collect();
    let mut transformed = latents.matmul_nt(&element.matrix);
    if cfg.noise_sigma > 0.0 {
        let noise = sample_gaussian_matrix(rng, m, n);
        transformed = transformed.add(&noise.scale(cfg.noise_sigma));
    }
    Ok(BlockParts {
        element,
        latents,
        content_ids,
        transformed,
    })
}

fn block_stream(cfg: &DatasetConfig, block: usize) -> RngStream {
    RngStream::new(cfg.seed, block as u64)
}

/// Replays one block's latent-side stream and returns the transformed
/// latents (action applied, noise included). Blocks keep only observations,
/// so diagnostics that need the noisy latent targets re-derive them here;
/// determinism of the stream makes the replay exact.
pub fn replay_transformed_latents(cfg: &DatasetConfig, block: usize) -> Result<Matrix> {
    cfg.validate()?;
    if block >= cfg.actions {
        return Err(Error::InvalidConfig(format!(
            "block {} out of range for {} actions",
            block, cfg.actions
        )));
    }
    let parts = draw_block_parts(cfg, &mut block_stream(cfg, block))?;
    Ok(parts.transformed)
}

fn generate_block(
    cfg: &DatasetConfig,
    mixing: &MixingNetwork,
    codebook: &ContentCodebook,
    rng: &mut RngStream,
) -> Result<ActionBlock> {
    let parts = draw_block_parts(cfg, rng)?;
    let observations =
        mixing.mix_batch(&assemble_inputs(&parts.latents, &parts.content_ids, codebook));
    let observations_transformed = mixing.mix_batch(&assemble_inputs(
        &parts.transformed,
        &parts.content_ids,
        codebook,
    ));
    Ok(ActionBlock {
        element: parts.element,
        latents: parts.latents,
        content_ids: parts.content_ids,
        observations,
        observations_transformed,
        noise_sigma: cfg.noise_sigma,
    })
}

/// Builds the full dataset a config describes. Same config, same bytes.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut mixing_rng = RngStream::new(cfg.seed, STREAM_MIXING);
    let (mixing, injectivity) = build_mixing_network(
        cfg.n_style,
        cfg.d_content,
        cfg.mixing_hidden_layers,
        cfg.obs_dim,
        &mut mixing_rng,
    )?;
    let mut codebook_rng = RngStream::new(cfg.seed, STREAM_CODEBOOK);
    let codebook = sample_codebook(cfg.codebook_size, cfg.d_content, &mut codebook_rng)?;
    let mut blocks = Vec::with_capacity(cfg.actions);
    for a in 0..cfg.actions {
        blocks.push(generate_block(
            cfg,
            &mixing,
            &codebook,
            &mut block_stream(cfg, a),
        )?);
    }
    let mut split_rng = RngStream::new(cfg.seed, STREAM_SPLITS);
    let splits = split_by_action(cfg.actions, SPLIT_RATIOS, &mut split_rng)?;
    Ok(SyntheticDataset {
        config: cfg.clone(),
        mixing,
        injectivity,
        codebook,
        blocks,
        splits,
    })
}

/// Where batch negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativesMode {
    Reference,
    Transformed,
    Both,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub positives: usize,
    pub negatives: usize,
    pub context_size: usize,
    pub negatives_mode: NegativesMode,
}

/// One query pair plus the disjoint same-block context that identifies its
/// action.
#[derive(Debug, Clone)]
pub struct PositiveSample {
    pub query: PairRef,
    pub context: Vec<PairRef>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub positives: Vec<PositiveSample>,
    pub negatives: Vec<(PairRef, Side)>,
}

/// Samples a training batch from one split: queries uniform over the split's
/// pairs, context drawn without replacement from the query's block excluding
/// the query itself, negatives uniform over the split (both sides when the
/// mode says so).
pub fn sample_training_batch(
    ds: &SyntheticDataset,
    split: SplitId,
    cfg: &BatchConfig,
    rng: &mut RngStream,
) -> Result<TrainingBatch> {
    let actions = ds.split_actions(split);
    if actions.is_empty() {
        return Err(Error::EmptySplit(format!("split {} has no actions", split)));
    }
    for &b in actions {
        let available = ds.blocks[b].pairs() - 1;
        if cfg.context_size > available {
            return Err(Error::ContextExhausted {
                requested: cfg.context_size,
                available,
            });
        }
    }
    // Uniform over pairs, not over blocks, so unequal block sizes stay fair.
    let mut cumulative = Vec::with_capacity(actions.len());
    let mut total = 0usize;
    for &b in actions {
        total += ds.blocks[b].pairs();
        cumulative.push(total);
    }
    let locate = |mut idx: usize| -> PairRef {
        let mut lo = 0usize;
        while cumulative[lo] <= idx {
            lo += 1;
        }
        if lo > 0 {
            idx -= cumulative[lo - 1];
        }
        PairRef {
            block: actions[lo],
            pair: idx,
        }
    };
    let mut positives = Vec::with_capacity(cfg.positives);
    for _ in 0..cfg.positives {
        let query = locate(rng.random_range(0..total));
        let block_pairs = ds.blocks[query.block].pairs();
        // Partial Fisher-Yates over the block's other pairs: exact sampling
        // without replacement, no retry loops.
        let mut others: Vec<usize> = (0..block_pairs).filter(|&p| p != query.pair).collect();
        let mut context = Vec::with_capacity(cfg.context_size);
        for i in 0..cfg.context_size {
            let j = rng.random_range(i..others.len());
            others.swap(i, j);
            context.push(PairRef {
                block: query.block,
                pair: others[i],
            });
        }
        positives.push(PositiveSample { query, context });
    }
    let mut negatives = Vec::with_capacity(cfg.negatives);
    for _ in 0..cfg.negatives {
        let r = locate(rng.random_range(0..total));
        let side = match cfg.negatives_mode {
            NegativesMode::Reference => Side::Reference,
            NegativesMode::Transformed => Side::Transformed,
            NegativesMode::Both => {
                if rng.random_range(0..2u32) == 0 {
                    Side::Reference
                } else {
                    Side::Transformed
                }
            }
        };
        negatives.push((r, side));
    }
    Ok(TrainingBatch {
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            actions: 10,
            pairs_per_action: 20,
            codebook_size: 5,
            obs_dim: 10,
            seed: 77,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn splits_partition_the_actions() {
        let mut rng = RngStream::new(5, 0);
        let s = split_by_action(10, SPLIT_RATIOS, &mut rng).unwrap();
        assert_eq!(
            (s.train.len(), s.valid.len(), s.test.len()),
            (8, 1, 1),
            "10 actions must split 8/1/1"
        );
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>(), "splits must partition");

        let mut rng = RngStream::new(5, 1);
        let s = split_by_action(1000, SPLIT_RATIOS, &mut rng).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (800, 100, 100));
    }

    #[test]
    fn too_few_actions_for_a_split_is_an_error() {
        let mut rng = RngStream::new(5, 2);
        let err = split_by_action(9, SPLIT_RATIOS, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptySplit(_)), "got {:?}", err);
    }

    #[test]
    fn codebook_rows_are_unit_and_distinct() {
        let mut rng = RngStream::new(6, 0);
        let cb = sample_codebook(50, 3, &mut rng).unwrap();
        for i in 0..cb.len() {
            let norm: f64 = cb.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12, "row {} norm {}", i, norm);
            for j in 0..i {
                assert_ne!(cb.vector(i), cb.vector(j), "rows {} and {} collide", i, j);
            }
        }
    }

    #[test]
    fn batch_indices_stay_inside_the_split() {
        let ds = generate_dataset(&tiny_config()).unwrap();
        let cfg = BatchConfig {
            positives: 16,
            negatives: 32,
            context_size: 4,
            negatives_mode: NegativesMode::Both,
        };
        let mut rng = RngStream::new(9, 0);
        for _ in 0..50 {
            let batch = sample_training_batch(&ds, SplitId::Train, &cfg, &mut rng).unwrap();
            assert_eq!(batch.positives.len(), 16);
            assert_eq!(batch.negatives.len(), 32);
            for pos in &batch.positives {
                assert!(ds.splits.train.contains(&pos.query.block));
                assert_eq!(pos.context.len(), 4);
                let mut seen = vec![pos.query.pair];
                for c in &pos.context {
                    assert_eq!(c.block, pos.query.block, "context left the block");
                    assert!(!seen.contains(&c.pair), "context reused a pair");
                    seen.push(c.pair);
                }
            }
            for (r, _) in &batch.negatives {
                assert!(ds.splits.train.contains(&r.block));
            }
        }
    }

    #[test]
    fn context_request_beyond_block_size_errors() {
        let ds = generate_dataset(&tiny_config()).unwrap();
        let cfg = BatchConfig {
            positives: 1,
            negatives: 1,
            context_size: 20,
            negatives_mode: NegativesMode::Reference,
        };
        let mut rng = RngStream::new(9, 1);
        let err = sample_training_batch(&ds, SplitId::Train, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ContextExhausted { .. }), "got {:?}", err);
    }

    #[test]
    fn both_mode_mixes_sides_evenly() {
        let ds = generate_dataset(&tiny_config()).unwrap();
        let cfg = BatchConfig {
            positives: 1,
            negatives: 64,
            context_size: 2,
            negatives_mode: NegativesMode::Both,
        };
        let mut rng = RngStream::new(9, 2);
        let mut reference = 0usize;
        let mut total = 0usize;
        for _ in 0..200 {
            let batch = sample_training_batch(&ds, SplitId::Train, &cfg, &mut rng).unwrap();
            for (_, side) in &batch.negatives {
                total += 1;
                if *side == Side::Reference {
                    reference += 1;
                }
            }
        }
        let frac = reference as f64 / total as f64;
        assert!(
            (frac - 0.5).abs() < 0.02,
            "side fraction {} drifted from 1/2",
            frac
        );
    }

    #[test]
    fn single_side_modes_honour_the_request() {
        let ds = generate_dataset(&tiny_config()).unwrap();
        let mut rng = RngStream::new(9, 3);
        for (mode, side) in [
            (NegativesMode::Reference, Side::Reference),
            (NegativesMode::Transformed, Side::Transformed),
        ] {
            let cfg = BatchConfig {
                positives: 2,
                negatives: 16,
                context_size: 2,
                negatives_mode: mode,
            };
            let batch = sample_training_batch(&ds, SplitId::Train, &cfg, &mut rng).unwrap();
            assert!(batch.negatives.iter().all(|(_, s)| *s == side));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.pairs_per_action = 3;
        assert!(cfg.validate().is_err(), "pairs <= n_style must fail");
        let mut cfg = tiny_config();
        cfg.actions = 9;
        assert!(cfg.validate().is_err(), "under 10 actions must fail");
        let mut cfg = tiny_config();
        cfg.obs_dim = 5;
        assert!(cfg.validate().is_err(), "obs_dim below joint dim must fail");
        let mut cfg = tiny_config();
        cfg.noise_sigma = -0.1;
        assert!(cfg.validate().is_err(), "negative noise must fail");
    }
}
