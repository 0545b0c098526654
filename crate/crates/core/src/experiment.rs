//! Seeded train-and-evaluate runs and ablation tables built from them.
//!
//! Each run lives in its own directory holding `config.toml`,
//! `metrics.jsonl`, `checkpoint.safetensors`, `eval.json` and
//! `summary.json`. A directory whose summary matches the requested config
//! hash and data fingerprint is reused instead of retrained.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalResult};
use crate::synth::{make_masked_testset, DatasetManifest};
use crate::trainer::{
    ablation_table, manifest_fingerprint, train, MetricsLog, NamedConfig, TrainConfig, TrainState, CHECKPOINT_FILE,
};

/// Pixel fraction of the masked test set.
pub const MASKED_PIXEL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub map: f64,
    pub top1: f64,
    pub masked_map: f64,
    pub masked_top1: f64,
}

impl RunSummary {
    pub fn drop_map(&self) -> f64 {
        self.map - self.masked_map
    }

    pub fn drop_top1(&self) -> f64 {
        self.top1 - self.masked_top1
    }
}

/// Train and test data shared by every run of an experiment.
pub struct ExperimentData<'a> {
    pub train: &'a DatasetManifest,
    pub test: &'a DatasetManifest,
    pub masked_test: DatasetManifest,
    pub fingerprint: String,
}

impl<'a> ExperimentData<'a> {
    pub fn new(train: &'a DatasetManifest, test: &'a DatasetManifest, eval: &EvalConfig) -> Result<Self> {
        Ok(ExperimentData {
            train,
            test,
            masked_test: make_masked_testset(test, MASKED_PIXEL_FRACTION, eval.seed)?,
            fingerprint: manifest_fingerprint(train),
        })
    }
}

pub fn eval_config_for(config: &TrainConfig, base: &EvalConfig) -> EvalConfig {
    EvalConfig {
        image_size: Some(config.image_size),
        ..base.clone()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cached(dir: &Path, hash: &str, fingerprint: &str) -> Option<RunSummary> {
    let text = fs::read_to_string(dir.join("summary.json")).ok()?;
    let s: RunSummary = serde_json::from_str(&text).ok()?;
    (s.config_hash == hash && s.data_fingerprint == fingerprint).then_some(s)
}

/// Trains `config` to completion in `dir` and evaluates the final model on
/// the original and the masked test set.
pub fn run(
    name: &str,
    config: &TrainConfig,
    data: &ExperimentData<'_>,
    eval: &EvalConfig,
    dir: &Path,
) -> Result<RunSummary> {
    config.validate()?;
    let hash = config.hash();
    if let Some(s) = cached(dir, &hash, &data.fingerprint) {
        log::info!("reusing {name} seed {} from {}", config.seed, dir.display());
        return Ok(s);
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml_string())?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let mut state = TrainState::new(config.clone(), data.train)?;
    let mut log = MetricsLog::to_file(&metrics)?;
    train(&mut state, data.train, &mut log, |_, _| Ok(()))?;
    log.flush()?;
    state.save(&dir.join(CHECKPOINT_FILE))?;
    let ecfg = eval_config_for(config, eval);
    let result: EvalResult = evaluate(&state.model, data.test, &ecfg)?;
    let masked = evaluate(&state.model, &data.masked_test, &ecfg)?;
    write_json(&dir.join("eval.json"), &result)?;
    write_json(&dir.join("eval_masked.json"), &masked)?;
    let summary = RunSummary {
        name: name.to_string(),
        seed: config.seed,
        config_hash: hash,
        data_fingerprint: data.fingerprint.clone(),
        map: result.map,
        top1: result.top1,
        masked_map: masked.map,
        masked_top1: masked.top1,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed{seed}"))
}

/// Runs `named` once per seed under `root/<name>/seed<k>`.
pub fn run_seeds(
    named: &NamedConfig,
    seeds: &[u64],
    data: &ExperimentData<'_>,
    eval: &EvalConfig,
    root: &Path,
) -> Result<Vec<RunSummary>> {
    seeds
        .iter()
        .map(|&seed| {
            let config = TrainConfig {
                seed,
                ..named.config.clone()
            };
            run(&named.name, &config, data, eval, &run_dir(root, &named.name, seed))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub name: String,
    pub runs: Vec<RunSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl TableRow {
    pub fn mean_map(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.map))
    }

    pub fn mean_top1(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.top1))
    }

    pub fn mean_masked_map(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.masked_map))
    }

    pub fn mean_masked_top1(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.masked_top1))
    }

    pub fn mean_drop_map(&self) -> f64 {
        mean(self.runs.iter().map(RunSummary::drop_map))
    }

    pub fn mean_drop_top1(&self) -> f64 {
        mean(self.runs.iter().map(RunSummary::drop_top1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl TableReport {
    pub fn row(&self, name: &str) -> Result<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Usage(format!("table {} has no row {name}", self.table)))
    }

    /// One line per row and seed plus one mean line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,row,config,seed,map,top1,masked_map,masked_top1\n");
        for r in &self.rows {
            for run in &r.runs {
                s.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                    self.table, r.label, r.name, run.seed, run.map, run.top1, run.masked_map, run.masked_top1
                ));
            }
            s.push_str(&format!(
                "{},{},{},mean,{:.6},{:.6},{:.6},{:.6}\n",
                self.table,
                r.label,
                r.name,
                r.mean_map(),
                r.mean_top1(),
                r.mean_masked_map(),
                r.mean_masked_top1()
            ));
        }
        s
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| 100.0 * v;
        writeln!(f, "Table {} (mean over seeds {:?})", self.table, self.seeds)?;
        if self.table == 7 {
            writeln!(f, "{:<12} {:>10} {:>10} {:>12} {:>12}", "", "orig mAP", "orig top1", "masked mAP", "masked top1")?;
            for r in &self.rows {
                writeln!(
                    f,
                    "{:<12} {:>10.1} {:>10.1} {:>12.1} {:>12.1}",
                    r.label,
                    pct(r.mean_map()),
                    pct(r.mean_top1()),
                    pct(r.mean_masked_map()),
                    pct(r.mean_masked_top1())
                )?;
            }
            for r in &self.rows {
                writeln!(
                    f,
                    "{:<12} {:>10.1} {:>10.1}",
                    format!("drop {}", r.label),
                    pct(r.mean_drop_map()),
                    pct(r.mean_drop_top1())
                )?;
            }
        } else {
            writeln!(f, "{:<28} {:>8} {:>8}", "", "mAP", "top-1")?;
            for r in &self.rows {
                writeln!(f, "{:<28} {:>8.1} {:>8.1}", r.label, pct(r.mean_map()), pct(r.mean_top1()))?;
            }
        }
        Ok(())
    }
}

/// Runs every row of an ablation table over `seeds`. Rows that share a
/// configuration with earlier tables reuse their run directories.
pub fn run_table(
    base: &TrainConfig,
    table: u32,
    seeds: &[u64],
    data: &ExperimentData<'_>,
    eval: &EvalConfig,
    root: &Path,
) -> Result<TableReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let rows = ablation_table(base, table)?
        .into_iter()
        .map(|(label, named)| {
            Ok(TableRow {
                label,
                runs: run_seeds(&named, seeds, data, eval, root)?,
                name: named.name,
            })
        })
        .collect::<Result<_>>()?;
    let report = TableReport {
        table,
        seeds: seeds.to_vec(),
        rows,
    };
    fs::create_dir_all(root)?;
    write_json(&root.join(format!("table{table}.json")), &report)?;
    fs::write(root.join(format!("table{table}.csv")), report.to_csv())?;
    fs::write(root.join(format!("table{table}.txt")), report.to_string())?;
    Ok(report)
}
