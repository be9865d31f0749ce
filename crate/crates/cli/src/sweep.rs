//! Sweep orchestration: the cross-product of axis values times model seeds,
//! one run per cell, aggregated into a CSV with failures marked, plus a
//! selection line naming the best cell by mean top-1 retrieval.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ebc_core::groups::GroupFamily;
use ebc_core::{Error, Result};
use sha2::Digest;

use crate::config::{config_hash, ExperimentConfig};
use crate::runner::{dataset_matches, run_generate, run_train, RunRecord, RUN_RECORD_JSON};

/// One swept dimension: a config key and the values it takes. `also` lists
/// additional keys set to the same value, for dimensions that must move in
/// lockstep (a misspecified style width changes both the encoder output and
/// the loss partition).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the experiment config, e.g. "dataset.noise_sigma".
    pub key: String,
    #[serde(default)]
    pub also: Vec<String>,
    pub values: Vec<Value>,
}

/// A sweep: base experiment, axes, and the model seeds each cell runs under.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
}

/// Named sweep presets.
pub fn sweep_preset(name: &str) -> Result<SweepConfig> {
    let mut base = ExperimentConfig::default();
    match name {
        "table3-ablation" => Ok(SweepConfig {
            base,
            axes: vec![
                SweepAxis {
                    key: "loss.symmetric".into(),
                    also: vec![],
                    values: vec![Value::Bool(true), Value::Bool(false)],
                },
                SweepAxis {
                    key: "loss.negatives_mode".into(),
                    also: vec![],
                    values: vec!["reference".into(), "transformed".into(), "both".into()],
                },
            ],
            seeds: vec![2000, 2001, 2002],
        }),
        "noise-sweep" => {
            base.dataset.family = GroupFamily::GeneralLinear;
            Ok(SweepConfig {
                base,
                axes: vec![SweepAxis {
                    key: "dataset.noise_sigma".into(),
                    also: vec![],
                    values: vec![0.0.into(), 0.01.into(), 0.1.into()],
                }],
                seeds: vec![2000, 2001, 2002],
            })
        }
        "misspec-sweep" => Ok(SweepConfig {
            base,
            axes: vec![SweepAxis {
                key: "encoder.output_style".into(),
                also: vec!["loss.n_style".into()],
                values: vec![2.into(), 3.into(), 4.into(), 5.into()],
            }],
            seeds: vec![2000, 2001, 2002],
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown sweep preset '{other}'; try table3-ablation, noise-sweep, misspec-sweep"
        ))),
    }
}

fn pointer_of(key: &str) -> String {
    format!("/{}", key.replace('.', "/"))
}

fn set_key(doc: &mut Value, key: &str, value: &Value) -> Result<()> {
    match doc.pointer_mut(&pointer_of(key)) {
        Some(slot) => {
            *slot = value.clone();
            Ok(())
        }
        None => Err(Error::InvalidConfig(format!(
            "sweep axis key '{key}' does not exist in the experiment config"
        ))),
    }
}

/// One fully resolved cell of the sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub combo_index: usize,
    pub assignments: Vec<(String, Value)>,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub hash: String,
}

/// Expands the cross product of axes and seeds into concrete configs.
pub fn expand_runs(sweep: &SweepConfig) -> Result<Vec<SweepRun>> {
    for axis in &sweep.axes {
        if axis.values.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "sweep axis '{}' has no values",
                axis.key
            )));
        }
    }
    if sweep.seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    let base_doc = serde_json::to_value(&sweep.base)?;
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for axis in &sweep.axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for combo in &combos {
            for v in 0..axis.values.len() {
                let mut c = combo.clone();
                c.push(v);
                next.push(c);
            }
        }
        combos = next;
    }
    let mut runs = Vec::with_capacity(combos.len() * sweep.seeds.len());
    for (combo_index, combo) in combos.iter().enumerate() {
        let mut doc = base_doc.clone();
        let mut assignments = Vec::new();
        for (axis, &value_index) in sweep.axes.iter().zip(combo) {
            let value = &axis.values[value_index];
            set_key(&mut doc, &axis.key, value)?;
            for extra in &axis.also {
                set_key(&mut doc, extra, value)?;
            }
            assignments.push((axis.key.clone(), value.clone()));
        }
        for &seed in &sweep.seeds {
            let mut config: ExperimentConfig = serde_json::from_value(doc.clone())?;
            config.training.seed = seed;
            config.validate()?;
            let hash = config_hash(&config);
            runs.push(SweepRun {
                combo_index,
                assignments: assignments.clone(),
                seed,
                config,
                hash,
            });
        }
    }
    Ok(runs)
}

/// Result of one cell: either a finished record or the failure text.
#[derive(Debug, Clone)]
pub struct SweepRowOutcome {
    pub run: SweepRun,
    pub record: std::result::Result<RunRecord, String>,
}

/// Selection over completed rows.
#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub assignments: Vec<(String, Value)>,
    pub mean_acc_g1: f64,
    pub runs_counted: usize,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRowOutcome>,
    pub selection: Option<Selection>,
    pub csv_path: PathBuf,
}

fn csv_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dataset_dir(out_dir: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let canonical = serde_json::to_vec(&config.dataset)?;
    let digest = sha2::Sha256::digest(&canonical);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    Ok(out_dir.join("datasets").join(hex))
}

/// Runs every cell, reusing finished runs (matched by config hash) and
/// shared datasets (matched by dataset config). Failures mark their row and
/// the sweep continues. `jobs` > 1 trains cells in parallel threads; every
/// run is fully seeded, so the aggregate is order-independent.
pub fn run_sweep(sweep: &SweepConfig, out_dir: &Path, jobs: usize) -> Result<SweepOutcome> {
    let runs = expand_runs(sweep)?;
    fs::create_dir_all(out_dir)?;

    // Generate each distinct dataset once, up front, so workers only read.
    let mut dataset_dirs: BTreeMap<PathBuf, &ExperimentConfig> = BTreeMap::new();
    for run in &runs {
        dataset_dirs.entry(dataset_dir(out_dir, &run.config)?).or_insert(&run.config);
    }
    for (dir, config) in &dataset_dirs {
        if !dataset_matches(config, dir) {
            run_generate(config, dir)?;
        }
    }

    let results: Mutex<Vec<Option<SweepRowOutcome>>> = Mutex::new(vec![None; runs.len()]);
    let queue: Mutex<std::collections::VecDeque<usize>> =
        Mutex::new((0..runs.len()).collect());
    let workers = jobs.max(1).min(runs.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| {
                loop {
                    let index = match queue.lock().expect("queue lock").pop_front() {
                        Some(i) => i,
                        None => break,
                    };
                    let run = &runs[index];
                    let outcome = execute_cell(run, out_dir);
                    results.lock().expect("results lock")[index] = Some(SweepRowOutcome {
                        run: run.clone(),
                        record: outcome,
                    });
                }
            }));
        }
        for handle in handles {
            handle.join().map_err(|_| Error::InvalidConfig("sweep worker panicked".into()))?;
        }
        Ok(())
    })?;

    let rows: Vec<SweepRowOutcome> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell executed"))
        .collect();

    let csv_path = out_dir.join("sweep.csv");
    write_sweep_csv(&csv_path, sweep, &rows)?;
    let selection = select_best(&rows);
    if let Some(best) = &selection {
        write_selection(&out_dir.join("selection.json"), best)?;
    }
    Ok(SweepOutcome {
        rows,
        selection,
        csv_path,
    })
}

fn execute_cell(run: &SweepRun, out_dir: &Path) -> std::result::Result<RunRecord, String> {
    let run_dir = out_dir.join("runs").join(&run.hash[..12]);
    // A finished run with the same hash is reused verbatim.
    if let Ok(text) = fs::read_to_string(run_dir.join(RUN_RECORD_JSON)) {
        if let Ok(record) = serde_json::from_str::<RunRecord>(&text) {
            if record.config_hash == run.hash && record.metrics.is_some() {
                return Ok(record);
            }
        }
    }
    let data_dir = dataset_dir(out_dir, &run.config).map_err(|e| e.to_string())?;
    run_train(&run.config, &data_dir, &run_dir).map_err(|e| e.to_string())
}

fn write_sweep_csv(path: &Path, sweep: &SweepConfig, rows: &[SweepRowOutcome]) -> Result<()> {
    let mut text = String::new();
    for axis in &sweep.axes {
        text.push_str(&axis.key);
        text.push(',');
    }
    text.push_str("seed,config_hash,status,r2_x,r2_g,acc_g_1,acc_c_1,skipped_actions,wall_clock_seconds\n");
    for row in rows {
        for (_, value) in &row.run.assignments {
            text.push_str(&csv_value(value));
            text.push(',');
        }
        text.push_str(&row.run.seed.to_string());
        text.push(',');
        text.push_str(&row.run.hash);
        text.push(',');
        match &row.record {
            Ok(record) => {
                let m = record.metrics.as_ref().expect("completed runs carry metrics");
                let get = |map: &BTreeMap<u32, f64>| {
                    map.get(&1).map(|v| v.to_string()).unwrap_or_default()
                };
                text.push_str(&format!(
                    "ok,{},{},{},{},{},{}\n",
                    m.r2_x,
                    m.r2_g,
                    get(&m.acc_g),
                    get(&m.acc_c),
                    m.skipped_actions,
                    record.wall_clock_seconds
                ));
            }
            Err(reason) => {
                let clean = reason.replace([',', '\n'], ";");
                text.push_str(&format!("failed: {clean},,,,,,\n"));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn select_best(rows: &[SweepRowOutcome]) -> Option<Selection> {
    let mut by_combo: BTreeMap<usize, (Vec<(String, Value)>, Vec<f64>)> = BTreeMap::new();
    for row in rows {
        if let Ok(record) = &row.record {
            if let Some(metrics) = &record.metrics {
                if let Some(&acc) = metrics.acc_g.get(&1) {
                    by_combo
                        .entry(row.run.combo_index)
                        .or_insert_with(|| (row.run.assignments.clone(), Vec::new()))
                        .1
                        .push(acc);
                }
            }
        }
    }
    by_combo
        .into_values()
        .map(|(assignments, accs)| Selection {
            mean_acc_g1: accs.iter().sum::<f64>() / accs.len() as f64,
            runs_counted: accs.len(),
            assignments,
        })
        .max_by(|a, b| a.mean_acc_g1.total_cmp(&b.mean_acc_g1))
}

fn write_selection(path: &Path, selection: &Selection) -> Result<()> {
    let mut text = serde_json::to_string_pretty(selection)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Human-readable selection line for stdout.
pub fn selection_line(selection: &Selection) -> String {
    let assigns: Vec<String> = selection
        .assignments
        .iter()
        .map(|(k, v)| format!("{k}={}", csv_value(v)))
        .collect();
    format!(
        "selection: {} mean_acc_g1={:.4} over {} runs",
        if assigns.is_empty() {
            "(base config)".into()
        } else {
            assigns.join(" ")
        },
        selection.mean_acc_g1,
        selection.runs_counted
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_covers_the_cross_product_times_seeds() {
        let sweep = sweep_preset("table3-ablation").expect("preset");
        let runs = expand_runs(&sweep).expect("expansion");
        assert_eq!(runs.len(), 2 * 3 * 3, "2 symmetric x 3 modes x 3 seeds");
        let mut hashes: Vec<&str> = runs.iter().map(|r| r.hash.as_str()).collect();
        hashes.sort_unstable();
        hashes.dedup();
        assert_eq!(hashes.len(), runs.len(), "every cell hashes distinctly");
    }

    #[test]
    fn lockstep_axis_patches_both_keys() {
        let sweep = sweep_preset("misspec-sweep").expect("preset");
        let runs = expand_runs(&sweep).expect("expansion");
        for run in &runs {
            assert_eq!(
                run.config.encoder.output_style, run.config.loss.n_style,
                "misspecification axis must move encoder and loss together"
            );
        }
        let dims: std::collections::BTreeSet<usize> =
            runs.iter().map(|r| r.config.loss.n_style).collect();
        assert_eq!(dims.into_iter().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn unknown_axis_key_is_rejected() {
        let mut sweep = sweep_preset("noise-sweep").expect("preset");
        sweep.axes[0].key = "dataset.no_such_field".into();
        assert!(expand_runs(&sweep).is_err(), "bad key must fail expansion");
    }

    #[test]
    fn degenerate_sweep_is_a_single_run() {
        let sweep = SweepConfig {
            base: ExperimentConfig::default(),
            axes: vec![],
            seeds: vec![2000],
        };
        let runs = expand_runs(&sweep).expect("expansion");
        assert_eq!(runs.len(), 1, "no axes and one seed is exactly one run");
        assert_eq!(runs[0].hash, config_hash(&runs[0].config));
        assert_eq!(
            runs[0].config,
            ExperimentConfig::default(),
            "degenerate sweep runs the base config unchanged"
        );
    }

    #[test]
    fn sweep_presets_expand_and_validate() {
        for name in crate::config::SWEEP_PRESETS {
            let sweep = sweep_preset(name).expect("preset exists");
            let runs = expand_runs(&sweep).expect("expansion validates every cell");
            assert!(!runs.is_empty());
        }
    }
}
