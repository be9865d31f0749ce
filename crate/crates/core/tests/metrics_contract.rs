//! Contract tests for the identifiability metrics: perfect scores on the
//! ground-truth embedder, invariance to the indeterminacies the metrics are
//! supposed to quotient out, chance-level behaviour where nothing can be
//! learned, and strict fit/report bookkeeping.

use ebc_core::ebc_loss::{Baseline, LossConfig};
use ebc_core::encoder::{init_encoder, EncoderArch, EncoderParams};
use ebc_core::error::Error;
use ebc_core::metrics::{
    compute_metrics, fit_logistic_regression, metric_acc_c, metric_acc_g, metric_r2_g,
    metric_r2_x, probe_objective, Embedder, MetricsConfig, NetworkEmbedder, OracleEmbedder,
    ProbeConfig,
};
use ebc_core::numkit::{haar_orthogonal, sample_gaussian_matrix};
use ebc_core::synthdata::{generate_dataset, DatasetConfig, PairRef, Side, SplitId, SyntheticDataset};
use ebc_core::{Matrix, Result, RngStream};

fn eval_dataset() -> SyntheticDataset {
    let cfg = DatasetConfig {
        actions: 20,
        pairs_per_action: 40,
        codebook_size: 5,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg).expect("dataset generation")
}

fn eval_config() -> MetricsConfig {
    MetricsConfig {
        seed: 3,
        context_size: 8,
        gallery_size: 60,
        ks: vec![1, 5],
        ..MetricsConfig::default()
    }
}

fn untrained_network(seed: u64) -> EncoderParams {
    let arch = EncoderArch::mlp(50, vec![32, 32], 3, 3);
    let mut rng = RngStream::new(seed, 0);
    init_encoder(&arch, &mut rng).expect("encoder init")
}

/// Applies a fixed linear map to every embedding of an inner embedder.
struct MappedEmbedder<'a> {
    inner: &'a dyn Embedder,
    map: Matrix,
}

impl Embedder for MappedEmbedder<'_> {
    fn n_style(&self) -> usize {
        self.inner.n_style()
    }

    fn m_content(&self) -> usize {
        self.inner.m_content()
    }

    fn identity_transport(&self) -> bool {
        self.inner.identity_transport()
    }

    fn probe_full_embedding(&self) -> bool {
        self.inner.probe_full_embedding()
    }

    fn embed(&self, ds: &SyntheticDataset, pairs: &[PairRef], side: Side) -> Result<Matrix> {
        Ok(self.inner.embed(ds, pairs, side)?.matmul_nt(&self.map))
    }
}

/// Block-diagonal map acting separately on style and content coordinates.
fn block_map(style: &Matrix, content: &Matrix) -> Matrix {
    let n = style.rows();
    let d = n + content.rows();
    Matrix::from_fn(d, d, |i, j| {
        if i < n && j < n {
            style.get(i, j)
        } else if i >= n && j >= n {
            content.get(i - n, j - n)
        } else {
            0.0
        }
    })
}

#[test]
fn oracle_embedder_scores_perfectly_on_noiseless_data() {
    let ds = eval_dataset();
    let emb = OracleEmbedder::for_dataset(&ds);
    let cfg = eval_config();

    let r2x = metric_r2_x(&emb, &ds, SplitId::Test, &cfg).expect("latent recovery");
    assert!(r2x > 1.0 - 1e-10, "oracle latent recovery should be exact, got {r2x}");

    let r2g = metric_r2_g(&emb, &ds, SplitId::Test, &cfg).expect("transport recovery");
    assert!(r2g.r2 > 1.0 - 1e-10, "oracle transport recovery should be exact, got {}", r2g.r2);
    assert_eq!(r2g.skipped_actions, 0, "no action should fail transport estimation");
    assert_eq!(r2g.scored_actions, 2, "test split holds two actions");

    let accg = metric_acc_g(&emb, &ds, SplitId::Test, &cfg).expect("retrieval");
    assert_eq!(accg.accuracy[&1], 1.0, "oracle top-1 retrieval must be perfect");
    assert_eq!(accg.accuracy[&5], 1.0, "oracle top-5 retrieval must be perfect");
    assert_eq!(accg.skipped_actions, 0);
    assert!((accg.chance[&1] - 1.0 / 60.0).abs() < 1e-15, "chance rate is K over gallery");

    let accc = metric_acc_c(&emb, &ds, SplitId::Test, &cfg).expect("content readout");
    assert_eq!(accc.accuracy[&1], 1.0, "distinct codebook vectors separate perfectly");
}

#[test]
fn r2_metrics_are_invariant_under_invertible_style_maps() {
    let ds = eval_dataset();
    let params = untrained_network(41);
    let loss = LossConfig::new(3, 3);
    let base = NetworkEmbedder::new(&params, &loss).expect("embedder");
    let cfg = eval_config();

    let mut rng = RngStream::new(77, 0);
    let jitter = sample_gaussian_matrix(&mut rng, 3, 3).scale(0.3);
    let style_map = Matrix::identity(3).add(&jitter);
    let mapped = MappedEmbedder {
        inner: &base,
        map: block_map(&style_map, &Matrix::identity(3)),
    };

    let r2x_base = metric_r2_x(&base, &ds, SplitId::Test, &cfg).expect("base r2x");
    let r2x_mapped = metric_r2_x(&mapped, &ds, SplitId::Test, &cfg).expect("mapped r2x");
    assert!(
        (r2x_base - r2x_mapped).abs() < 1e-6,
        "latent recovery must absorb invertible style maps: {r2x_base} vs {r2x_mapped}"
    );
    assert!(r2x_base < 0.999, "untrained encoder should not already be aligned");

    let r2g_base = metric_r2_g(&base, &ds, SplitId::Test, &cfg).expect("base r2g");
    let r2g_mapped = metric_r2_g(&mapped, &ds, SplitId::Test, &cfg).expect("mapped r2g");
    assert!(
        (r2g_base.r2 - r2g_mapped.r2).abs() < 1e-6,
        "transport recovery must absorb invertible style maps: {} vs {}",
        r2g_base.r2,
        r2g_mapped.r2
    );
}

#[test]
fn r2_x_is_invariant_under_full_maps_without_content() {
    let cfg = DatasetConfig {
        actions: 20,
        pairs_per_action: 40,
        d_content: 0,
        codebook_size: 1,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg).expect("dataset generation");
    let arch = EncoderArch::mlp(50, vec![24], 3, 0);
    let mut rng = RngStream::new(5, 0);
    let params = init_encoder(&arch, &mut rng).expect("encoder init");
    let loss = LossConfig::new(3, 0);
    let base = NetworkEmbedder::new(&params, &loss).expect("embedder");
    let mcfg = eval_config();

    let mut map_rng = RngStream::new(9, 0);
    let jitter = sample_gaussian_matrix(&mut map_rng, 3, 3).scale(0.25);
    let mapped = MappedEmbedder {
        inner: &base,
        map: Matrix::identity(3).add(&jitter),
    };
    let a = metric_r2_x(&base, &ds, SplitId::Test, &mcfg).expect("base");
    let b = metric_r2_x(&mapped, &ds, SplitId::Test, &mcfg).expect("mapped");
    assert!((a - b).abs() < 1e-6, "full-map invariance without content: {a} vs {b}");

    let degenerate = metric_acc_c(&base, &ds, SplitId::Test, &mcfg).expect("degenerate readout");
    assert_eq!(
        degenerate.accuracy[&1], 1.0,
        "a single content class is read out perfectly by definition"
    );
}

#[test]
fn retrieval_is_invariant_under_block_orthogonal_maps() {
    let ds = eval_dataset();
    let params = untrained_network(42);
    let loss = LossConfig::new(3, 3);
    let base = NetworkEmbedder::new(&params, &loss).expect("embedder");
    let cfg = eval_config();

    let mut rng = RngStream::new(123, 0);
    let q_style = haar_orthogonal(&mut rng, 3);
    let q_content = haar_orthogonal(&mut rng, 3);
    let mapped = MappedEmbedder {
        inner: &base,
        map: block_map(&q_style, &q_content),
    };

    let a = metric_acc_g(&base, &ds, SplitId::Test, &cfg).expect("base retrieval");
    let b = metric_acc_g(&mapped, &ds, SplitId::Test, &cfg).expect("mapped retrieval");
    assert_eq!(
        a.accuracy, b.accuracy,
        "block-orthogonal maps preserve every distance, so ranks cannot move"
    );
    assert_eq!(a.skipped_actions, b.skipped_actions);
}

#[test]
fn retrieval_accuracy_is_monotone_in_k_and_untrained_sits_near_chance() {
    let ds = eval_dataset();
    let params = untrained_network(43);
    let loss = LossConfig::new(3, 3);
    let emb = NetworkEmbedder::new(&params, &loss).expect("embedder");
    let cfg = MetricsConfig {
        ks: vec![1, 2, 5, 10, 20],
        ..eval_config()
    };
    let out = metric_acc_g(&emb, &ds, SplitId::Test, &cfg).expect("retrieval");
    let mut prev = 0.0;
    for &k in &[1u32, 2, 5, 10, 20] {
        let acc = out.accuracy[&k];
        assert!(
            acc >= prev,
            "top-{k} accuracy {acc} fell below the smaller-k accuracy {prev}"
        );
        prev = acc;
    }
    assert!(
        out.accuracy[&1] <= 0.25,
        "untrained encoder top-1 retrieval {} should sit near chance",
        out.accuracy[&1]
    );
}

#[test]
fn probe_gradient_matches_finite_differences() {
    let arch = EncoderArch::linear(4, 3, 0);
    let mut rng = RngStream::new(17, 0);
    let params = init_encoder(&arch, &mut rng).expect("probe params");
    let features = sample_gaussian_matrix(&mut rng, 12, 4);
    let labels: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
    let reg = 1e-3;

    let (_, grads) = probe_objective(&params, &features, &labels, reg).expect("objective");
    let mut grad_flat = Vec::new();
    for layer in &grads {
        grad_flat.extend_from_slice(layer.weights.data());
        grad_flat.extend_from_slice(&layer.bias);
    }

    let flat = params.flatten();
    let h = 1e-6;
    for (i, &analytic) in grad_flat.iter().enumerate() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = probe_objective(
            &EncoderParams::unflatten(&arch, &plus).expect("plus params"),
            &features,
            &labels,
            reg,
        )
        .expect("plus objective")
        .0;
        let lm = probe_objective(
            &EncoderParams::unflatten(&arch, &minus).expect("minus params"),
            &features,
            &labels,
            reg,
        )
        .expect("minus objective")
        .0;
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-7 {
            assert!(
                (analytic - numeric).abs() < 1e-9,
                "tiny gradient mismatch at {i}: {analytic} vs {numeric}"
            );
        } else {
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "gradient mismatch at coordinate {i}: {analytic} vs {numeric} (rel {rel})"
            );
        }
    }
}

#[test]
fn probe_scores_at_chance_when_labels_carry_no_signal() {
    let mut rng = RngStream::new(29, 0);
    let features = sample_gaussian_matrix(&mut rng, 400, 3);
    // Labels depend only on the row index, never on the features.
    let labels: Vec<u32> = (0..400).map(|i| ((i * 7 + 3) % 4) as u32).collect();
    let fit_features = features.select_rows(&(0..200).collect::<Vec<_>>());
    let report_features = features.select_rows(&(200..400).collect::<Vec<_>>());
    let probe = fit_logistic_regression(&fit_features, &labels[..200], 4, &ProbeConfig::default())
        .expect("probe fit");
    let acc = probe
        .top_k_accuracy(&report_features, &labels[200..], 1)
        .expect("held-out accuracy");
    assert!(
        (0.13..=0.37).contains(&acc),
        "chance-level problem scored {acc}, expected about 0.25"
    );
}

#[test]
fn content_probe_errors_when_a_class_is_missing_from_the_fit_half() {
    let cfg = DatasetConfig {
        actions: 12,
        pairs_per_action: 4,
        codebook_size: 12,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg).expect("dataset generation");
    let emb = OracleEmbedder::for_dataset(&ds);
    // The test split holds one action of four pairs: a two-row fit half
    // cannot contain twelve classes.
    let err = metric_acc_c(&emb, &ds, SplitId::Test, &eval_config());
    assert!(
        matches!(err, Err(Error::MissingClass { .. })),
        "expected a missing-class error, got {err:?}"
    );
}

#[test]
fn report_serializes_with_fixed_field_names() {
    let ds = eval_dataset();
    let emb = OracleEmbedder::for_dataset(&ds);
    let report = compute_metrics(&emb, &ds, SplitId::Test, &eval_config(), "deadbeef")
        .expect("full metrics");
    assert_eq!(report.split, "test");
    assert_eq!(report.config_hash, "deadbeef");
    assert_eq!(
        report.fit_pairs + report.report_pairs,
        ds.split_pairs(SplitId::Test).len(),
        "fit and report halves partition the split"
    );

    let value = serde_json::to_value(&report).expect("serialization");
    let obj = value.as_object().expect("object");
    for key in [
        "r2_x",
        "r2_g",
        "acc_g",
        "acc_c",
        "gallery_size",
        "skipped_actions",
        "split",
        "config_hash",
    ] {
        assert!(obj.contains_key(key), "report is missing the '{key}' field");
    }
    let accg = obj["acc_g"].as_object().expect("acc_g object");
    assert!(accg.contains_key("1") && accg.contains_key("5"), "acc_g keyed by K as strings");
    assert!(obj["r2_x"].as_f64().expect("r2_x number") > 0.999);
}

#[test]
fn misspecified_style_width_evaluates_with_a_rectangular_alignment() {
    let ds = eval_dataset();
    // Encoder claims 2 style dimensions against a true latent dimension of 3.
    let arch = EncoderArch::mlp(50, vec![32, 32], 2, 3);
    let mut rng = RngStream::new(51, 0);
    let params = init_encoder(&arch, &mut rng).expect("encoder init");
    let loss = LossConfig::new(2, 3);
    let emb = NetworkEmbedder::new(&params, &loss).expect("embedder");
    let cfg = eval_config();

    let r2x = metric_r2_x(&emb, &ds, SplitId::Test, &cfg).expect("latent recovery");
    assert!(
        r2x < 0.9,
        "two style coordinates cannot explain three latent dimensions, got {r2x}"
    );
    let r2g = metric_r2_g(&emb, &ds, SplitId::Test, &cfg).expect("transport recovery");
    assert!(r2g.r2.is_finite(), "pooled transport score must stay finite");
    let accg = metric_acc_g(&emb, &ds, SplitId::Test, &cfg).expect("retrieval");
    for (&k, &acc) in &accg.accuracy {
        assert!((0.0..=1.0).contains(&acc), "top-{k} accuracy {acc} out of range");
    }
}

#[test]
fn network_embedder_rejects_mismatched_dimensions() {
    let arch = EncoderArch::mlp(50, vec![16], 3, 2);
    let mut rng = RngStream::new(3, 0);
    let params = init_encoder(&arch, &mut rng).expect("encoder init");
    let loss = LossConfig::new(3, 3);
    assert!(
        NetworkEmbedder::new(&params, &loss).is_err(),
        "output width 5 against an expected 6 must be rejected"
    );
}

#[test]
fn identity_transport_baseline_skips_estimation_and_probes_everything() {
    let ds = eval_dataset();
    let params = untrained_network(44);
    let mut loss = LossConfig::new(3, 3);
    loss.baseline = Baseline::Infonce;
    let emb = NetworkEmbedder::new(&params, &loss).expect("embedder");
    assert!(emb.identity_transport() && emb.probe_full_embedding());

    let cfg = eval_config();
    let accg = metric_acc_g(&emb, &ds, SplitId::Test, &cfg).expect("retrieval");
    assert_eq!(accg.skipped_actions, 0, "identity transport never fails estimation");
    let accc = metric_acc_c(&emb, &ds, SplitId::Test, &cfg).expect("content readout");
    for (&k, &acc) in &accc.accuracy {
        assert!((0.0..=1.0).contains(&acc), "top-{k} accuracy {acc} out of range");
    }
}
