//! Scratch diagnostic: overfit one fixed desk-scale batch with the real
//! training step; a healthy pipeline should drive this loss toward zero.

use ebc_core::ebc_loss::{ebc_training_step, LossConfig};
use ebc_core::encoder::{init_encoder, AdamConfig, AdamState, EncoderArch};
use ebc_core::numkit::{Matrix, RngStream};
use ebc_core::synthdata::{load_dataset, sample_training_batch, BatchConfig, NegativesMode, SplitId};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let slope: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3000);

    let ds = load_dataset(std::path::Path::new("/root/pilot/data")).expect("dataset");
    let mut cfg = LossConfig::new(3, 3);
    if args.get(4).map(|s| s.as_str()) == Some("infonce") {
        cfg.baseline = ebc_core::ebc_loss::Baseline::Infonce;
    }
    let bcfg = BatchConfig {
        positives: 256,
        negatives: 2048,
        context_size: 12,
        negatives_mode: NegativesMode::Both,
    };
    let mut rng = RngStream::new(77, 1);
    let batch = sample_training_batch(&ds, SplitId::Train, &bcfg, &mut rng).expect("batch");

    let mut arch = EncoderArch::mlp(50, vec![128; hidden], 3, 3);
    arch.activation_slope = slope;
    let mut params = init_encoder(&arch, &mut RngStream::new(2000, 0)).expect("init");
    if args.get(4).map(|s| s.as_str()) == Some("dump") {
        use ebc_core::metrics::{gather_observations, Embedder, OracleEmbedder};
        use ebc_core::synthdata::Side;
        let oracle = OracleEmbedder::for_dataset(&ds);
        let queries: Vec<_> = batch.positives.iter().map(|p| p.query).collect();
        let to_rows = |m: &Matrix| -> Vec<Vec<f64>> {
            (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
        };
        let queries_ref = gather_observations(&ds, &queries, Side::Reference);
        let queries_tr = gather_observations(&ds, &queries, Side::Transformed);
        let oracle_ref = oracle.embed(&ds, &queries, Side::Reference).expect("oracle");
        let mut ctx_ref: Vec<Vec<f64>> = Vec::new();
        let mut ctx_tr: Vec<Vec<f64>> = Vec::new();
        for p in &batch.positives {
            for &c in &p.context {
                ctx_ref.push(ds.observation(c, Side::Reference).to_vec());
                ctx_tr.push(ds.observation(c, Side::Transformed).to_vec());
            }
        }
        let negs: Vec<Vec<f64>> = batch
            .negatives
            .iter()
            .map(|&(r, s)| ds.observation(r, s).to_vec())
            .collect();
        let layers: Vec<serde_json::Value> = params
            .layers
            .iter()
            .map(|l| {
                serde_json::json!({
                    "weights": to_rows(&l.weights),
                    "bias": l.bias.clone(),
                })
            })
            .collect();
        let blob = serde_json::json!({
            "queries_ref": to_rows(&queries_ref),
            "queries_tr": to_rows(&queries_tr),
            "oracle_ref": to_rows(&oracle_ref),
            "ctx_ref": ctx_ref,
            "ctx_tr": ctx_tr,
            "negs": negs,
            "layers": layers,
            "slope": slope,
        });
        std::fs::write("/root/pilot/batch_dump.json", serde_json::to_string(&blob).unwrap())
            .expect("write");
        println!("dumped to /root/pilot/batch_dump.json");
        return;
    }
    if args.get(4).map(|s| s.as_str()) == Some("regress") {
        use ebc_core::ebc_loss::Baseline;
        use ebc_core::encoder::{backward, forward};
        use ebc_core::metrics::{gather_observations, Embedder, OracleEmbedder};
        use ebc_core::synthdata::Side;
        let _ = Baseline::Infonce;
        let oracle = OracleEmbedder::for_dataset(&ds);
        let queries: Vec<_> = batch.positives.iter().map(|p| p.query).collect();
        let inputs = gather_observations(&ds, &queries, Side::Reference);
        let targets = oracle.embed(&ds, &queries, Side::Reference).expect("targets");
        let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
        let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &params);
        let rows = inputs.rows() as f64;
        for step in 1..=steps {
            let (out, tape) = forward(&params, &inputs).expect("forward");
            let mut grad = Matrix::zeros(out.rows(), out.cols());
            let mut loss = 0.0;
            for i in 0..out.rows() {
                for j in 0..out.cols() {
                    let d = out.get(i, j) - targets.get(i, j);
                    loss += d * d / rows;
                    grad.set(i, j, 2.0 * d / rows);
                }
            }
            let grads = backward(&params, &tape, &grad).expect("backward");
            ebc_core::encoder::adam_step(&mut adam, &mut params, &grads).expect("adam");
            if step % 200 == 0 || step == 1 {
                println!("step {:5}  mse {:10.6}", step, loss);
            }
        }
        return;
    }
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &params);
    for step in 1..=steps {
        let diag = ebc_training_step(&ds, &batch, &cfg, &mut params, &mut adam).expect("step");
        if step % 200 == 0 || step == 1 {
            println!(
                "step {:5}  loss {:8.4}  pos^2 {:8.4}  neg^2 {:8.4}",
                step, diag.loss, diag.mean_positive_distance, diag.mean_negative_distance
            );
        }
    }
}
