//! Multi-seed baseline-vs-ci experiments and their on-disk layout.
//!
//! ```text
//! <out>/metrics.csv                 every run's rows, in run order
//! <out>/runs/<run_id>/config.toml   resolved configuration
//! <out>/runs/<run_id>/checkpoints/  last.ckpt while training, final.ckpt after
//! <out>/runs/<run_id>/metrics.csv   this run's rows
//! <out>/runs/<run_id>/log           one line per epoch
//! ```
//!
//! A run whose `metrics.csv` exists is complete and is never redone. An
//! interrupted run resumes from `last.ckpt`, which holds the model, pool and
//! optimizer state; epoch shuffles derive from the seed, so a resumed run
//! ends bit-identical to an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::strong::{load_eval, EvalClip};
use crate::dataset::weak::{load_train, WeakClip};
use crate::dataset::load_info;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Predictor};
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::synthdata::{DatasetInfo, Split};
use crate::trainer::{TrainConfig, Trainer, Variant};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LAST_CHECKPOINT: &str = "last.ckpt";

/// Everything that determines a run, as written to `config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.metrics.validate()
    }

    /// Adopts class count and mel resolution from the dataset.
    pub fn fit_to(&mut self, info: &DatasetInfo) {
        self.model.classes = info.generator.classes;
        self.model.mel_bins = info.generator.mel_bins;
    }

    /// `<variant>-s<seed>-<hash>`; the hash covers the whole config and the
    /// dataset description.
    pub fn run_id(&self, info: &DatasetInfo) -> String {
        let text = format!(
            "{}\n{}",
            toml::to_string(self).expect("config serializes"),
            serde_json::to_string(info).expect("info serializes")
        );
        let digest = Sha256::digest(text.as_bytes());
        let hash: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
        format!("{}-s{}-{}", self.train.variant, self.train.seed, hash)
    }
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Loaded data shared by all runs of an experiment.
pub struct Data {
    pub info: DatasetInfo,
    pub train: Vec<WeakClip>,
    pub eval: Vec<(Split, Vec<EvalClip>)>,
}

impl Data {
    pub fn load(dir: &Path) -> Result<Self> {
        let info = load_info(dir)?;
        let train = load_train(dir)?;
        if train.is_empty() {
            return Err(Error::Config(format!("{} has no training clips", dir.display())));
        }
        let eval = Split::EVAL
            .iter()
            .map(|&s| Ok((s, load_eval(dir, s)?)))
            .collect::<Result<_>>()?;
        Ok(Data { info, train, eval })
    }

    fn frames(&self) -> usize {
        self.train[0].spec.frames()
    }
}

/// Outcome of one (variant, seed) run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    /// False when the run was already complete on disk.
    pub trained: bool,
    pub seconds: f64,
}

/// Trains (or resumes) one run and evaluates it on every eval split.
pub fn run_one(cfg: &RunConfig, data: &Data, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_id = cfg.run_id(&data.info);
    let dir = out.join("runs").join(&run_id);
    let metrics_path = dir.join(METRICS_FILE);
    if metrics_path.exists() {
        return Ok(RunOutcome {
            rows: read_rows(&metrics_path)?,
            run_id,
            dir,
            trained: false,
            seconds: 0.0,
        });
    }
    let start = Instant::now();
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let config_text = toml::to_string(cfg).expect("config serializes");
    fs::write(dir.join("config.toml"), config_text).map_err(|e| Error::io(dir.join("config.toml"), e))?;

    let last = ck_dir.join(LAST_CHECKPOINT);
    let mut trainer = if last.exists() {
        let ck = Checkpoint::load(&last)?;
        let t = Trainer::from_checkpoint(&ck, &cfg.model, cfg.train.clone())?;
        info!("{run_id}: resuming after epoch {}", t.epoch);
        t
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone(), data.frames())?
    };
    let log_path = dir.join("log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    trainer.fit(&data.train, |r, t| {
        t.to_checkpoint().save(&last)?;
        writeln!(
            log,
            "epoch {} loss {:.6} branch1 {:.6} branch2 {:.6} pool_updates {} elapsed {:.1}s",
            r.epoch,
            r.loss,
            r.loss1,
            r.loss2,
            r.pool_updates,
            start.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&log_path, e))?;
        info!("{run_id}: epoch {} loss {:.4}", r.epoch, r.loss);
        Ok(())
    })?;
    trainer.to_checkpoint().save(&ck_dir.join(FINAL_CHECKPOINT))?;
    if last.exists() {
        fs::remove_file(&last).map_err(|e| Error::io(&last, e))?;
    }

    let rows = evaluate_run(&trainer, cfg, data)?;
    // Written last: its presence marks the run complete.
    write_rows(&metrics_path, &rows)?;
    Ok(RunOutcome {
        run_id,
        dir,
        rows,
        trained: true,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn evaluate_run(trainer: &Trainer, cfg: &RunConfig, data: &Data) -> Result<Vec<MetricRow>> {
    let predictor = Predictor::new(&trainer.model, trainer.pool.as_ref(), cfg.train.variant)?;
    let metrics = MetricsConfig {
        threshold: cfg.train.threshold,
        ..cfg.metrics
    };
    let mut rows = Vec::new();
    for (split, clips) in &data.eval {
        let (result, _) = evaluate(&predictor, clips, &metrics)?;
        rows.extend(result.rows().into_iter().map(|(metric, value)| MetricRow {
            model: cfg.train.variant.to_string(),
            split: split.to_string(),
            metric,
            value,
            seed: cfg.train.seed,
        }));
    }
    Ok(rows)
}

/// Runs every (variant, seed) pair, in parallel across runs, and writes the
/// combined `metrics.csv` under `out`.
pub fn run_experiment(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: &Data,
    out: &Path,
) -> Result<Vec<RunOutcome>> {
    let mut base = base.clone();
    base.fit_to(&data.info);
    let configs: Vec<RunConfig> = variants
        .iter()
        .flat_map(|&v| {
            let base = &base;
            seeds.iter().map(move |&s| {
                let mut c = base.clone();
                c.train.variant = v;
                c.train.seed = s;
                c
            })
        })
        .collect();
    let outcomes: Vec<RunOutcome> = configs
        .par_iter()
        .map(|c| run_one(c, data, out))
        .collect::<Result<_>>()?;
    let rows: Vec<MetricRow> = outcomes.iter().flat_map(|o| o.rows.clone()).collect();
    write_rows(&out.join(METRICS_FILE), &rows)?;
    Ok(outcomes)
}

/// Mean and sample standard deviation per (variant, split, metric).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub split: String,
    pub metric: String,
    pub baseline: Option<(f64, f64)>,
    pub ci: Option<(f64, f64)>,
    pub runs: usize,
}

impl Summary {
    /// `ci - baseline` of the means.
    pub fn delta(&self) -> Option<f64> {
        Some(self.ci?.0 - self.baseline?.0)
    }
}

pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.split.clone(), r.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(split, metric)| {
            let stats = |model: &str| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.model == model && r.split == split && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                mean_std(&v)
            };
            let runs = rows
                .iter()
                .filter(|r| r.split == split && r.metric == metric)
                .count();
            Summary {
                baseline: stats("baseline"),
                ci: stats("ci"),
                split,
                metric,
                runs,
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}
