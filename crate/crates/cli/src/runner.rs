//! Single-run execution: dataset generation, the training loop with loss
//! logging and divergence handling, and evaluation into a metrics report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use ebc_core::ebc_loss::ebc_training_step;
use ebc_core::encoder::{
    init_encoder, load_checkpoint, save_checkpoint, AdamConfig, AdamState, EncoderParams,
};
use ebc_core::metrics::{compute_metrics, MetricsReport, NetworkEmbedder, OracleEmbedder};
use ebc_core::synthdata::{generate_dataset, load_dataset, sample_training_batch, save_dataset,
    SplitId, SyntheticDataset};
use ebc_core::{Error, Result, RngStream};

use crate::config::{config_hash, ExperimentConfig};

/// Substream of the model seed used for encoder initialization.
const INIT_STREAM: u64 = 0;
/// Substream of the model seed used for batch sampling.
const BATCH_STREAM: u64 = 1;

/// Loss rows are appended every this many steps (and at the final step).
pub const LOG_CADENCE: usize = 10;
pub const LOSS_CSV_HEADER: &str = "step,loss,mean_pos_dist,mean_neg_dist,skipped";

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT: &str = "encoder.ckpt";
pub const METRICS_JSON: &str = "metrics.json";
pub const RUN_RECORD_JSON: &str = "run_record.json";

/// Artifact summary of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub wall_clock_seconds: f64,
    /// Loss at the last completed step; absent when steps = 0.
    pub final_loss: Option<f64>,
    /// Positives dropped across the whole run due to rank-deficient context.
    pub skipped_positives_total: usize,
    /// Present when the run got as far as evaluation.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// Generates the configured dataset into `out_dir` and returns a one-line
/// summary (actions, pairs, split sizes in actions).
pub fn run_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    config.dataset.validate()?;
    let ds = generate_dataset(&config.dataset)?;
    save_dataset(&ds, out_dir)?;
    Ok(format!(
        "actions={} pairs={} splits(actions) train={} valid={} test={}",
        config.dataset.actions,
        ds.total_pairs(),
        ds.split_actions(SplitId::Train).len(),
        ds.split_actions(SplitId::Valid).len(),
        ds.split_actions(SplitId::Test).len(),
    ))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains per the config against the dataset in `data_dir`, writing loss.csv,
/// encoder.ckpt, metrics.json, and run_record.json into `out_dir`. On
/// divergence the artifacts reflect the last good step and the error is
/// returned after they are written.
pub fn run_train(config: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    let ds = load_dataset(data_dir)?;
    if ds.config != config.dataset {
        return Err(Error::InvalidConfig(format!(
            "dataset at {} was generated from a different config",
            data_dir.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let hash = config_hash(config);
    let start = Instant::now();

    let mut init_rng = RngStream::new(config.training.seed, INIT_STREAM);
    let mut params = init_encoder(&config.encoder, &mut init_rng)?;
    let adam = AdamConfig {
        lr: config.training.lr,
        ..AdamConfig::default()
    };
    let mut adam_state = AdamState::new(adam, &params);
    let mut batch_rng = RngStream::new(config.training.seed, BATCH_STREAM);
    let batch_config = config.batch_config();

    let mut loss_csv = fs::File::create(out_dir.join(LOSS_CSV))?;
    writeln!(loss_csv, "{LOSS_CSV_HEADER}")?;

    let mut last_good = params.clone();
    let mut steps_completed = 0usize;
    let mut final_loss = None;
    let mut skipped_total = 0usize;
    let mut failure: Option<Error> = None;

    for step in 1..=config.training.steps {
        let batch = sample_training_batch(&ds, SplitId::Train, &batch_config, &mut batch_rng)?;
        match ebc_training_step(&ds, &batch, &config.loss, &mut params, &mut adam_state) {
            Ok(diag) if diag.loss.is_finite() => {
                skipped_total += diag.skipped_positives;
                final_loss = Some(diag.loss);
                steps_completed = step;
                last_good = params.clone();
                if step % LOG_CADENCE == 0 || step == config.training.steps {
                    writeln!(
                        loss_csv,
                        "{},{},{},{},{}",
                        step,
                        diag.loss,
                        diag.mean_positive_distance,
                        diag.mean_negative_distance,
                        diag.skipped_positives
                    )?;
                }
            }
            Ok(diag) => {
                failure = Some(Error::Diverged {
                    step,
                    detail: format!("loss became {}", diag.loss),
                });
                break;
            }
            Err(e @ (Error::NonFinite { .. } | Error::Diverged { .. })) => {
                failure = Some(match e {
                    Error::Diverged { .. } => e,
                    other => Error::Diverged {
                        step,
                        detail: other.to_string(),
                    },
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    loss_csv.flush()?;
    drop(loss_csv);

    // The checkpoint always reflects the last good parameters.
    save_checkpoint(
        &out_dir.join(CHECKPOINT),
        &last_good,
        steps_completed as u64,
        config.training.seed,
    )?;

    let status = if failure.is_none() {
        RunStatus::Completed
    } else {
        RunStatus::Diverged
    };
    let metrics = if failure.is_none() {
        let embedder = NetworkEmbedder::new(&last_good, &config.loss)?;
        let report = compute_metrics(
            &embedder,
            &ds,
            config.eval.split,
            &config.metrics_config(),
            &hash,
        )?;
        write_json_pretty(&out_dir.join(METRICS_JSON), &report)?;
        Some(report)
    } else {
        None
    };

    let record = RunRecord {
        config_hash: hash,
        status,
        steps_completed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        final_loss,
        skipped_positives_total: skipped_total,
        metrics,
    };
    write_json_pretty(&out_dir.join(RUN_RECORD_JSON), &record)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(record),
    }
}

/// Evaluation source: a trained checkpoint or the ground-truth oracle.
pub enum EvalSource {
    Checkpoint(PathBuf),
    /// Debug embedder returning true latents and codebook vectors; wires the
    /// metric stack without a trained model.
    Oracle,
}

/// Evaluates a checkpoint (or the oracle) on one split of the dataset and
/// writes metrics.json into `out_dir`.
pub fn run_eval(
    config: &ExperimentConfig,
    source: &EvalSource,
    data_dir: &Path,
    split_override: Option<SplitId>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let ds = load_dataset(data_dir)?;
    if ds.config != config.dataset {
        return Err(Error::InvalidConfig(format!(
            "dataset at {} was generated from a different config",
            data_dir.display()
        )));
    }
    let split = split_override.unwrap_or(config.eval.split);
    let hash = config_hash(config);
    let metrics_config = config.metrics_config();
    let report = match source {
        EvalSource::Checkpoint(path) => {
            let (params, _step, _seed) = load_checkpoint(path)?;
            let embedder = NetworkEmbedder::new(&params, &config.loss)?;
            compute_metrics(&embedder, &ds, split, &metrics_config, &hash)?
        }
        EvalSource::Oracle => {
            let embedder = OracleEmbedder::for_dataset(&ds);
            compute_metrics(&embedder, &ds, split, &metrics_config, &hash)?
        }
    };
    fs::create_dir_all(out_dir)?;
    write_json_pretty(&out_dir.join(METRICS_JSON), &report)?;
    Ok(report)
}

/// Convenience used by tests and sweeps: evaluate arbitrary parameters
/// without a checkpoint file.
pub fn eval_params(
    config: &ExperimentConfig,
    params: &EncoderParams,
    ds: &SyntheticDataset,
    split: SplitId,
) -> Result<MetricsReport> {
    let embedder = NetworkEmbedder::new(params, &config.loss)?;
    compute_metrics(&embedder, ds, split, &config.metrics_config(), &config_hash(config))
}

/// Checks that `dir` holds a dataset generated from exactly this config.
pub fn dataset_matches(config: &ExperimentConfig, dir: &Path) -> bool {
    match load_dataset(dir) {
        Ok(ds) => ds.config == config.dataset,
        Err(_) => false,
    }
}

/// Returns an embedder-free summary line for a finished run.
pub fn summarize_record(record: &RunRecord) -> String {
    let metrics = record
        .metrics
        .as_ref()
        .map(|m| {
            format!(
                "r2_x={:.4} r2_g={:.4} acc_g@1={:.4}",
                m.r2_x,
                m.r2_g,
                m.acc_g.get(&1).copied().unwrap_or(f64::NAN)
            )
        })
        .unwrap_or_else(|| "no metrics".into());
    format!(
        "status={:?} steps={} wall={:.1}s loss={} {}",
        record.status,
        record.steps_completed,
        record.wall_clock_seconds,
        record
            .final_loss
            .map(|l| format!("{l:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        metrics
    )
}
