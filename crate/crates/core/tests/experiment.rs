use std::fs;

use cised::experiment::{read_rows, run_experiment, run_one, summarize, Data, RunConfig, FINAL_CHECKPOINT, METRICS_FILE};
use cised::model::ModelConfig;
use cised::synthdata::{emit_dataset, GeneratorConfig, SplitSizes};
use cised::trainer::{TrainConfig, Trainer, Variant};

fn setup() -> (tempfile::TempDir, Data, RunConfig) {
    let gen = GeneratorConfig {
        frames: 40,
        mel_bins: 16,
        ..GeneratorConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let sizes = SplitSizes {
        train: 16,
        eval_confounded: 6,
        eval_decorrelated: 6,
    };
    emit_dataset(&gen, sizes, &data_dir).unwrap();
    let data = Data::load(&data_dir).unwrap();
    let mut run = RunConfig {
        model: ModelConfig {
            channels: vec![4, 4, 8],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    run.fit_to(&data.info);
    (tmp, data, run)
}

#[test]
fn rows_per_metric_and_idempotent_rerun() {
    let (tmp, data, run) = setup();
    let out = tmp.path().join("exp");
    let outcomes = run_experiment(&run, &Variant::ALL, &[0, 1, 2], &data, &out).unwrap();
    assert_eq!(outcomes.len(), 6);
    assert!(outcomes.iter().all(|o| o.trained));
    for o in &outcomes {
        assert!(o.dir.join("checkpoints").join(FINAL_CHECKPOINT).is_file());
        assert!(o.dir.join("config.toml").is_file());
        assert_eq!(fs::read_to_string(o.dir.join("log")).unwrap().lines().count(), 2);
    }
    let rows = read_rows(&out.join(METRICS_FILE)).unwrap();
    for metric in ["seg_f1", "event_f1", "at_f1", "at_map", "sed_map"] {
        assert_eq!(rows.iter().filter(|r| r.metric == metric).count(), 2 * 3 * 2, "{metric}");
    }
    let first = fs::read(out.join(METRICS_FILE)).unwrap();

    let again = run_experiment(&run, &Variant::ALL, &[0, 1, 2], &data, &out).unwrap();
    assert!(again.iter().all(|o| !o.trained));
    assert_eq!(fs::read(out.join(METRICS_FILE)).unwrap(), first);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 6);

    let summary = summarize(&rows);
    let s = summary
        .iter()
        .find(|s| s.split == "eval-decorrelated" && s.metric == "event_f1")
        .unwrap();
    assert_eq!(s.runs, 6);
    let (b, c) = (s.baseline.unwrap(), s.ci.unwrap());
    assert_eq!(s.delta().unwrap(), c.0 - b.0);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let (tmp, data, mut run) = setup();
    run.train.variant = Variant::Ci;
    let clean = run_one(&run, &data, &tmp.path().join("clean")).unwrap();

    // Leave behind what a run killed after its first epoch would.
    let out = tmp.path().join("resumed");
    let ck_dir = out.join("runs").join(run.run_id(&data.info)).join("checkpoints");
    fs::create_dir_all(&ck_dir).unwrap();
    let mut t = Trainer::new(run.model.clone(), run.train.clone(), 40).unwrap();
    t.run_epoch(&data.train).unwrap();
    t.to_checkpoint().save(&ck_dir.join("last.ckpt")).unwrap();

    let resumed = run_one(&run, &data, &out).unwrap();
    assert!(resumed.trained);
    assert_eq!(resumed.rows, clean.rows);
    assert!(!ck_dir.join("last.ckpt").exists());
    assert_eq!(
        fs::read(clean.dir.join(METRICS_FILE)).unwrap(),
        fs::read(resumed.dir.join(METRICS_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(clean.dir.join("checkpoints").join(FINAL_CHECKPOINT)).unwrap(),
        fs::read(ck_dir.join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn run_id_tracks_config() {
    let (_tmp, data, run) = setup();
    let id = run.run_id(&data.info);
    assert!(id.starts_with("ci-s0-"));
    assert_eq!(id, run.clone().run_id(&data.info));
    let mut other = run.clone();
    other.train.lr *= 2.0;
    assert_ne!(id, other.run_id(&data.info));
}
