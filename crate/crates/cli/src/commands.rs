use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::Args;
use serde::Serialize;

use cised::autodiff::gradcheck::operator_suite;
use cised::checkpoint::Checkpoint;
use cised::dataset::load_info;
use cised::dataset::strong::load_eval;
use cised::diagnostics::{backdoor_study, end_to_end_gradcheck, random_frozen};
use cised::evaluation::{evaluate, Predictor};
use cised::experiment::{read_rows, run_experiment, summarize, write_rows, Data, MetricRow, RunConfig};
use cised::metrics::MetricsConfig;
use cised::synthdata::{emit_dataset, DatasetInfo, Split};
use cised::trainer::{TrainConfig, Variant};

use crate::config::{print_resolved, FileConfig};
use crate::ConfigArg;

pub const THREADS_ENV: &str = "CI_SED_THREADS";
const GRAD_TOLERANCE: f64 = 1e-6;

/// Sizes the global rayon pool from `CI_SED_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    eval_clips: Option<usize>,
}

#[derive(Serialize)]
struct GenResolved<'a> {
    out: &'a Path,
    generator: &'a cised::synthdata::GeneratorConfig,
    sizes: &'a cised::synthdata::SplitSizes,
}

pub fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = FileConfig::load(a.config.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.generator.seed = s;
    }
    if let Some(n) = a.train_clips {
        cfg.sizes.train = n;
    }
    if let Some(n) = a.eval_clips {
        cfg.sizes.eval_confounded = n;
        cfg.sizes.eval_decorrelated = n;
    }
    print_resolved(
        "gen-data",
        &GenResolved {
            out: &a.out,
            generator: &cfg.generator,
            sizes: &cfg.sizes,
        },
    );
    let start = Instant::now();
    let manifest = emit_dataset(&cfg.generator, cfg.sizes, &a.out)?;
    println!(
        "wrote {} clips to {} in {:.1}s",
        manifest.len(),
        a.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Flags that override `[train]`, `[model]` and `[metrics]` values.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pool update rate.
    #[arg(long)]
    update_rate: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.update_rate {
            t.update_rate = v;
        }
        if let Some(v) = self.threshold {
            t.threshold = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Experiment directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value = "baseline,ci", value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    data: &'a Path,
    out: &'a Path,
    variants: Vec<String>,
    seeds: &'a [u64],
    #[serde(flatten)]
    run: &'a RunConfig,
}

pub fn train(a: Train) -> Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let mut run = file.run_config();
    a.overrides.apply(&mut run.train);
    let data = Data::load(&a.data)?;
    run.fit_to(&data.info);
    let (variants, seeds) = (a.variant, a.seeds);
    print_resolved(
        "train",
        &TrainResolved {
            data: &a.data,
            out: &a.out,
            variants: variants.iter().map(|v| v.to_string()).collect(),
            seeds: &seeds,
            run: &run,
        },
    );
    run.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let start = Instant::now();
    let outcomes = run_experiment(&run, &variants, &seeds, &data, &a.out)?;
    for o in &outcomes {
        let status = if o.trained {
            format!("trained in {:.1}s", o.seconds)
        } else {
            "already complete".to_string()
        };
        println!("{}: {status}", o.run_id);
    }
    println!(
        "{} runs, metrics in {}, {:.1}s",
        outcomes.len(),
        a.out.join(cised::experiment::METRICS_FILE).display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by train (`runs/<id>/checkpoints/final.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate as this variant instead of the one recorded in the checkpoint.
    #[arg(long)]
    variant: Option<Variant>,
    /// Write metric rows here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    data: &'a Path,
    checkpoint: &'a Path,
    variant: String,
    seed: u64,
    metrics: &'a MetricsConfig,
}

pub fn eval(a: Eval) -> Result<()> {
    let Some(ck_path) = a.checkpoint.as_deref() else {
        bail!("eval needs --checkpoint <FILE>; train writes runs/<id>/checkpoints/final.ckpt");
    };
    let file = FileConfig::load(a.config.config.as_deref())?;
    let ck = Checkpoint::load(ck_path)?;
    let model_cfg = ck.model_config()?;
    let model = ck.restore_model(&model_cfg)?;
    let train: TrainConfig = ck
        .meta
        .get("train")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .context("reading training config from checkpoint")?
        .unwrap_or_default();
    let variant = a.variant.unwrap_or(train.variant);
    let pool = ck.restore_pool(train.update_rate)?;
    let predictor = Predictor::new(&model, pool.as_ref(), variant)?;
    let metrics = MetricsConfig {
        threshold: a.threshold.unwrap_or(train.threshold),
        ..file.metrics
    };
    print_resolved(
        "eval",
        &EvalResolved {
            data: &a.data,
            checkpoint: ck_path,
            variant: variant.to_string(),
            seed: train.seed,
            metrics: &metrics,
        },
    );
    metrics.validate()?;
    let info = load_info(&a.data)?;
    ensure!(
        info.generator.classes == model_cfg.classes && info.generator.mel_bins == model_cfg.mel_bins,
        "dataset has {} classes x {} mel bins, checkpoint expects {} x {}",
        info.generator.classes,
        info.generator.mel_bins,
        model_cfg.classes,
        model_cfg.mel_bins
    );
    let mut rows = Vec::new();
    for split in Split::EVAL {
        let clips = load_eval(&a.data, split)?;
        let (result, _) = evaluate(&predictor, &clips, &metrics)?;
        for (metric, value) in result.rows() {
            println!("{:<18} {metric:<16} {value:.4}", split.name());
            rows.push(MetricRow {
                model: variant.to_string(),
                split: split.to_string(),
                metric,
                value,
                seed: train.seed,
            });
        }
    }
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_rows(out, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Compare {
    /// Metrics CSVs (or experiment directories containing metrics.csv).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Only show this split.
    #[arg(long)]
    split: Option<String>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CompareRow {
    split: String,
    metric: String,
    baseline_mean: Option<f64>,
    baseline_std: Option<f64>,
    ci_mean: Option<f64>,
    ci_std: Option<f64>,
    delta: Option<f64>,
    runs: usize,
}

pub fn compare(a: Compare) -> Result<()> {
    print_resolved("compare", &a);
    let mut rows = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() {
            input.join(cised::experiment::METRICS_FILE)
        } else {
            input.clone()
        };
        rows.extend(read_rows(&path)?);
    }
    if let Some(split) = &a.split {
        rows.retain(|r| &r.split == split);
    }
    let fmt = |s: Option<(f64, f64)>| match s {
        Some((m, sd)) => format!("{m:.4} ± {sd:.4}"),
        None => "-".to_string(),
    };
    println!(
        "{:<18} {:<16} {:>17} {:>17} {:>8}",
        "split", "metric", "baseline", "ci", "delta"
    );
    let mut table = Vec::new();
    for s in summarize(&rows) {
        let delta = s.delta();
        println!(
            "{:<18} {:<16} {:>17} {:>17} {:>8}",
            s.split,
            s.metric,
            fmt(s.baseline),
            fmt(s.ci),
            delta.map_or("-".to_string(), |d| format!("{d:+.4}"))
        );
        table.push(CompareRow {
            baseline_mean: s.baseline.map(|b| b.0),
            baseline_std: s.baseline.map(|b| b.1),
            ci_mean: s.ci.map(|c| c.0),
            ci_std: s.ci.map(|c| c.1),
            delta,
            runs: s.runs,
            split: s.split,
            metric: s.metric,
        });
    }
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
        for r in &table {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ValidateOracles {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; without it a frozen random network with an active
    /// projection and pool is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which evaluation split to run on.
    #[arg(long, default_value = "eval-decorrelated")]
    split: String,
    /// Directory for the per-clip deviation CSV.
    #[arg(long, default_value = "oracles")]
    out: PathBuf,
    /// Seed of the random network.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct OraclesResolved<'a> {
    data: &'a Path,
    checkpoint: Option<&'a Path>,
    split: &'a str,
    out: &'a Path,
    seed: u64,
    classes: usize,
}

#[derive(Serialize)]
struct DeviationCsv<'a> {
    clip: usize,
    path: &'a str,
    max_abs_dev: f64,
    mean_abs_dev: f64,
    spearman: f64,
}

pub const DEVIATIONS_FILE: &str = "oracle_deviations.csv";

pub fn validate_oracles(a: ValidateOracles) -> Result<()> {
    let split = Split::EVAL
        .into_iter()
        .find(|s| s.name() == a.split)
        .ok_or_else(|| anyhow!("unknown split {:?} (eval-confounded|eval-decorrelated)", a.split))?;
    let info: DatasetInfo = load_info(&a.data)?;
    let clips = load_eval(&a.data, split)?;
    ensure!(!clips.is_empty(), "split {split} has no clips");
    let (model, pool) = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let cfg = ck.model_config()?;
            let model = ck.restore_model(&cfg)?;
            let pool = ck
                .restore_pool(cised::causal::DEFAULT_UPDATE_RATE)?
                .ok_or_else(|| anyhow!("{} holds no context pool (baseline checkpoint?)", path.display()))?;
            (model, pool)
        }
        None => {
            let cfg = cised::model::ModelConfig {
                classes: info.generator.classes,
                mel_bins: info.generator.mel_bins,
                ..Default::default()
            };
            random_frozen(cfg, clips[0].spec.frames(), a.seed)?
        }
    };
    print_resolved(
        "validate-oracles",
        &OraclesResolved {
            data: &a.data,
            checkpoint: a.checkpoint.as_deref(),
            split: split.name(),
            out: &a.out,
            seed: a.seed,
            classes: model.config.classes,
        },
    );
    let specs: Vec<_> = clips.iter().map(|c| c.spec.clone()).collect();
    let study = backdoor_study(&model, &pool, &specs)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let csv_path = a.out.join(DEVIATIONS_FILE);
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for (row, clip) in study.rows.iter().zip(&clips) {
        w.serialize(DeviationCsv {
            clip: row.clip,
            path: &clip.path,
            max_abs_dev: row.max_abs_dev,
            mean_abs_dev: row.mean_abs_dev,
            spearman: row.spearman,
        })?;
    }
    w.flush()?;

    println!("clips                      {}", study.rows.len());
    println!("classes                    {}", model.config.classes);
    println!("max |exact - single|       {:.3e}", study.max_dev());
    println!("mean |exact - single|      {:.3e}", study.mean_dev());
    println!("mean spearman              {:.4}", study.mean_spearman());
    println!(
        "head runtime ratio         {:.2} (k-pass {:.3}s / single {:.3}s)",
        study.speedup(),
        study.k_pass_secs,
        study.single_pass_secs
    );
    println!(
        "full runtime ratio         {:.2} (k-pass {:.3}s / single {:.3}s)",
        study.full_speedup(),
        study.full_k_secs,
        study.full_single_secs
    );
    println!("deviations written to {}", csv_path.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheck {
    /// Random instances per operator.
    #[arg(long, default_value_t = 3)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn grad_check(a: GradCheck) -> Result<()> {
    print_resolved("grad-check", &a);
    let start = Instant::now();
    let mut failures = Vec::new();
    for r in operator_suite(a.instances, a.seed)? {
        let ok = r.passed(GRAD_TOLERANCE);
        println!("op   {:<22} {:.3e} {}", r.name, r.worst_rel_err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(r.name.to_string());
        }
    }
    for p in end_to_end_gradcheck(a.seed)? {
        let ok = p.rel_err < GRAD_TOLERANCE;
        println!("e2e  {:<22} {:.3e} {}", p.name, p.rel_err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(p.name);
        }
    }
    println!("finished in {:.1}s", start.elapsed().as_secs_f64());
    if !failures.is_empty() {
        bail!("gradient check failed for {}", failures.join(", "));
    }
    Ok(())
}
