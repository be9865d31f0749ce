//! End-to-end gradient checks for the contrastive objective, plus the
//! behavioural contracts of the training step.

use ebc_core::ebc_loss::{
    context_observation_rows, contrastive_loss, ebc_loss_and_grads, ebc_loss_with_frozen_context,
    ebc_training_step, Baseline, LossConfig,
};
use ebc_core::encoder::{init_encoder, AdamConfig, AdamState, EncoderArch, EncoderParams};
use ebc_core::groups::GroupFamily;
use ebc_core::numkit::sample_gaussian_matrix;
use ebc_core::synthdata::{
    generate_dataset, sample_training_batch, BatchConfig, DatasetConfig, NegativesMode, SplitId,
    TrainingBatch,
};
use ebc_core::{Matrix, RngStream};

fn assert_close_rel(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-7 {
        assert!(
            (analytic - numeric).abs() <= 1e-9,
            "{}: near-zero values apart ({} vs {})",
            what,
            analytic,
            numeric
        );
    } else {
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < 1e-4,
            "{}: relative error {} ({} vs {})",
            what,
            rel,
            analytic,
            numeric
        );
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = RngStream::new(61, 0);
    let u0 = sample_gaussian_matrix(&mut rng, 4, 3);
    let pos0 = sample_gaussian_matrix(&mut rng, 4, 3);
    let neg0 = sample_gaussian_matrix(&mut rng, 6, 3);
    let out = contrastive_loss(&u0, &pos0, &neg0).unwrap();
    let h = 1e-6;
    let check = |which: usize, r: usize, c: usize, analytic: f64| {
        let perturb = |delta: f64| {
            let mut u = u0.clone();
            let mut pos = pos0.clone();
            let mut neg = neg0.clone();
            match which {
                0 => u.set(r, c, u.get(r, c) + delta),
                1 => pos.set(r, c, pos.get(r, c) + delta),
                _ => neg.set(r, c, neg.get(r, c) + delta),
            }
            contrastive_loss(&u, &pos, &neg).unwrap().loss
        };
        let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
        assert_close_rel(analytic, numeric, &format!("input {} [{},{}]", which, r, c));
    };
    for r in 0..4 {
        for c in 0..3 {
            check(0, r, c, out.grad_u.get(r, c));
            check(1, r, c, out.grad_positives.get(r, c));
        }
    }
    for r in 0..6 {
        for c in 0..3 {
            check(2, r, c, out.grad_negatives.get(r, c));
        }
    }
}

fn tiny_dataset(seed: u64) -> ebc_core::synthdata::SyntheticDataset {
    let cfg = DatasetConfig {
        family: GroupFamily::SpecialOrthogonal,
        n_style: 2,
        d_content: 2,
        codebook_size: 4,
        obs_dim: 8,
        mixing_hidden_layers: 1,
        actions: 10,
        pairs_per_action: 12,
        noise_sigma: 0.0,
        seed,
    };
    generate_dataset(&cfg).unwrap()
}

fn tiny_batch(
    ds: &ebc_core::synthdata::SyntheticDataset,
    positives: usize,
    negatives: usize,
    seed: u64,
) -> TrainingBatch {
    let bc = BatchConfig {
        positives,
        negatives,
        context_size: 5,
        negatives_mode: NegativesMode::Both,
    };
    let mut rng = RngStream::new(seed, 0);
    sample_training_batch(ds, SplitId::Train, &bc, &mut rng).unwrap()
}

/// Central finite differences of the step's objective over every encoder
/// parameter. The step treats the context fit as a constant, so the
/// differentiable objective holds the context embeddings at their base
/// values while parameters move.
fn check_step_gradients(cfg: &LossConfig, seed: u64) {
    let ds = tiny_dataset(seed);
    let batch = tiny_batch(&ds, 3, 5, seed + 1);
    let arch = EncoderArch::mlp(8, vec![7], cfg.n_style, cfg.m_content);
    let params = init_encoder(&arch, &mut RngStream::new(seed + 2, 0)).unwrap();
    let ctx_emb = if cfg.baseline == Baseline::Infonce {
        Matrix::zeros(0, arch.output_dim())
    } else {
        let rows = context_observation_rows(&ds, &batch).unwrap();
        ebc_core::encoder::forward_no_tape(&params, &rows).unwrap()
    };
    let eval = ebc_loss_with_frozen_context(&ds, &batch, cfg, &params, &ctx_emb).unwrap();
    assert_eq!(
        eval.diagnostics.skipped_positives, 0,
        "gradient check needs every positive alive"
    );
    let mut grad_flat = Vec::new();
    for layer in &eval.grads {
        grad_flat.extend_from_slice(layer.weights.data());
        grad_flat.extend_from_slice(&layer.bias);
    }
    let flat = params.flatten();
    let h = 1e-5;
    for k in 0..flat.len() {
        let loss_at = |delta: f64| {
            let mut shifted = flat.clone();
            shifted[k] += delta;
            let p = EncoderParams::unflatten(&arch, &shifted).unwrap();
            ebc_loss_with_frozen_context(&ds, &batch, cfg, &p, &ctx_emb)
                .unwrap()
                .diagnostics
                .loss
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        assert_close_rel(grad_flat[k], numeric, &format!("parameter {}", k));
    }
}

#[test]
fn step_gradients_match_finite_differences_asymmetric() {
    let mut cfg = LossConfig::new(2, 2);
    cfg.symmetric = false;
    check_step_gradients(&cfg, 71);
}

#[test]
fn step_gradients_match_finite_differences_symmetric() {
    check_step_gradients(&LossConfig::new(2, 2), 72);
}

#[test]
fn step_gradients_match_finite_differences_infonce() {
    let mut cfg = LossConfig::new(2, 2);
    cfg.baseline = Baseline::Infonce;
    check_step_gradients(&cfg, 73);
}

#[test]
fn training_is_deterministic_over_a_hundred_steps() {
    let ds = tiny_dataset(74);
    let cfg = LossConfig::new(2, 2);
    let arch = EncoderArch::mlp(8, vec![10], 2, 2);
    let run = || {
        let mut params = init_encoder(&arch, &mut RngStream::new(75, 0)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let mut batch_rng = RngStream::new(76, 0);
        let bc = BatchConfig {
            positives: 8,
            negatives: 16,
            context_size: 5,
            negatives_mode: NegativesMode::Both,
        };
        for _ in 0..100 {
            let batch = sample_training_batch(&ds, SplitId::Train, &bc, &mut batch_rng).unwrap();
            ebc_training_step(&ds, &batch, &cfg, &mut params, &mut adam).unwrap();
        }
        params
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "identical seeds must give identical parameters");
}

#[test]
fn infonce_never_embeds_context_rows() {
    let ds = tiny_dataset(77);
    let batch = tiny_batch(&ds, 4, 8, 78);
    let arch = EncoderArch::mlp(8, vec![6], 2, 2);
    let mut params = init_encoder(&arch, &mut RngStream::new(79, 0)).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &params);

    let mut cfg = LossConfig::new(2, 2);
    cfg.baseline = Baseline::Infonce;
    let diag = ebc_training_step(&ds, &batch, &cfg, &mut params, &mut adam).unwrap();
    assert_eq!(
        diag.context_rows_embedded, 0,
        "identity-transport baseline must not read context"
    );

    let cfg = LossConfig::new(2, 2);
    let diag = ebc_training_step(&ds, &batch, &cfg, &mut params, &mut adam).unwrap();
    assert_eq!(
        diag.context_rows_embedded,
        2 * 4 * 5,
        "full method embeds both sides of every context pair"
    );
}

#[test]
fn collapsed_embeddings_skip_every_positive() {
    let ds = tiny_dataset(80);
    let batch = tiny_batch(&ds, 4, 8, 81);
    let arch = EncoderArch::mlp(8, vec![6], 2, 2);
    let mut params = init_encoder(&arch, &mut RngStream::new(82, 0)).unwrap();
    for layer in &mut params.layers {
        let zero = Matrix::zeros(layer.weights.rows(), layer.weights.cols());
        layer.weights = zero;
    }
    let cfg = LossConfig::new(2, 2);
    let err = ebc_loss_and_grads(&ds, &batch, &cfg, &params).unwrap_err();
    assert!(
        matches!(err, ebc_core::Error::AllPositivesSkipped),
        "constant embeddings must fail loudly, got {:?}",
        err
    );
}

#[test]
fn ground_truth_embeddings_put_the_positive_at_zero_distance() {
    // Hand-built embeddings equal to [latent; content]: the fitted style map
    // is the group matrix itself, so the transported query lands exactly on
    // its positive and the logit 0 is strictly maximal.
    let ds = tiny_dataset(83);
    let block = &ds.blocks[0];
    let g = &block.element.matrix;
    let n = 2;
    let ctx_rows = 6usize;
    let embed = |latent: &[f64], content: &[f64]| -> Vec<f64> {
        latent.iter().chain(content).copied().collect()
    };
    let content_of = |pair: usize| ds.codebook.vector(block.content_ids[pair] as usize);
    let mut ctx = Matrix::zeros(ctx_rows, 4);
    let mut ctx_p = Matrix::zeros(ctx_rows, 4);
    for k in 0..ctx_rows {
        let pair = k + 1;
        let x = block.latents.row(pair);
        let gx: Vec<f64> = (0..n)
            .map(|r| (0..n).map(|c| g.get(r, c) * x[c]).sum())
            .collect();
        ctx.row_mut(k).copy_from_slice(&embed(x, content_of(pair)));
        ctx_p
            .row_mut(k)
            .copy_from_slice(&embed(&gx, content_of(pair)));
    }
    let cfg = LossConfig::new(2, 2);
    let query_latent = block.latents.row(0);
    let query = embed(query_latent, content_of(0));
    let u = ebc_core::ebc_loss::predict_transformed(&ctx, &ctx_p, &query, &cfg).unwrap();
    let gx: Vec<f64> = (0..n)
        .map(|r| (0..n).map(|c| g.get(r, c) * query_latent[c]).sum())
        .collect();
    let positive = embed(&gx, content_of(0));
    let d_pos: f64 = u
        .iter()
        .zip(&positive)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    assert!(
        d_pos <= 1e-16,
        "transported query should coincide with its positive, distance {}",
        d_pos
    );
    // Any other pair of the block sits strictly farther away.
    for pair in 7..block.pairs() {
        let x = block.latents.row(pair);
        let other = embed(x, content_of(pair));
        let d: f64 = u.iter().zip(&other).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(
            d > d_pos + 1e-6,
            "pair {} ties the positive at distance {}",
            pair,
            d
        );
    }
}

#[test]
fn symmetric_loss_averages_both_directions() {
    let ds = tiny_dataset(84);
    let batch = tiny_batch(&ds, 4, 8, 85);
    let arch = EncoderArch::mlp(8, vec![6], 2, 2);
    let params = init_encoder(&arch, &mut RngStream::new(86, 0)).unwrap();
    let mut asym = LossConfig::new(2, 2);
    asym.symmetric = false;
    let fwd = ebc_loss_and_grads(&ds, &batch, &asym, &params).unwrap();
    assert_eq!(fwd.diagnostics.skipped_positives, 0);

    // The reverse direction equals the forward direction on a dataset view
    // with the two observation sides exchanged, negatives flipped to keep
    // the same pool.
    let mut swapped = ds.clone();
    for block in &mut swapped.blocks {
        std::mem::swap(&mut block.observations, &mut block.observations_transformed);
    }
    let mut rev_batch = batch.clone();
    for (_, side) in &mut rev_batch.negatives {
        *side = match side {
            ebc_core::synthdata::Side::Reference => ebc_core::synthdata::Side::Transformed,
            ebc_core::synthdata::Side::Transformed => ebc_core::synthdata::Side::Reference,
        };
    }
    let rev = ebc_loss_and_grads(&swapped, &rev_batch, &asym, &params).unwrap();
    assert_eq!(rev.diagnostics.skipped_positives, 0);

    let sym = ebc_loss_and_grads(&ds, &batch, &LossConfig::new(2, 2), &params).unwrap();
    let expected = 0.5 * (fwd.diagnostics.loss + rev.diagnostics.loss);
    assert!(
        (sym.diagnostics.loss - expected).abs() <= 1e-12,
        "symmetric loss {} is not the direction average {}",
        sym.diagnostics.loss,
        expected
    );
    assert!(
        (fwd.diagnostics.loss - rev.diagnostics.loss).abs() > 1e-12,
        "directions coincide, the averaging check is vacuous"
    );
}
