use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[generator]
frames = 40
mel_bins = 16

[sizes]
train = 12
eval_confounded = 4
eval_decorrelated = 4

[model]
channels = [4, 4, 8]

[train]
epochs = 1
batch_size = 4
"#;

fn cised(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cised"))
        .args(args)
        .env("CI_SED_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cised(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_data(tmp: &Path) -> std::path::PathBuf {
    let cfg = tmp.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = tmp.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    data
}

#[test]
fn gen_data_is_deterministic_and_creates_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = tmp.path().join("a/deep");
    let b = tmp.path().join("b");
    let stdout = ok(&["gen-data", "--config", s(&cfg), "--out", s(&a), "--seed", "4"]);
    assert!(stdout.starts_with("# resolved gen-data config"));
    assert!(stdout.contains("seed = 4"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--seed", "4"]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 20 + 2);
    assert_eq!(ta, tree(&b));
}

#[test]
fn exit_codes() {
    let out = cised(&["eval", "--data", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));

    let out = cised(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cised(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(cised(&["--help"]).status.code(), Some(0));

    let bad = Command::new(env!("CARGO_BIN_EXE_cised"))
        .args(["grad-check"])
        .env("CI_SED_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn train_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = tmp.path().join("tiny.toml");
    let exp = tmp.path().join("exp");
    let stdout = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&exp), "--variant", "ci", "--seeds", "0,1,2",
    ]);
    assert!(stdout.contains("# resolved train config"));
    let runs: Vec<_> = fs::read_dir(exp.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 3);
    for r in &runs {
        assert!(r.join("checkpoints/final.ckpt").is_file());
    }

    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&exp), "--variant", "baseline", "--seeds", "0"]);
    let table = tmp.path().join("table.csv");
    let stdout = ok(&["compare", s(&exp), "--split", "eval-decorrelated", "--out", s(&table)]);
    assert!(stdout.lines().any(|l| l.contains("delta")));
    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.lines().next().unwrap().contains("delta"));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("eval-decorrelated,")));

    let ck = runs[0].join("checkpoints/final.ckpt");
    let stdout = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--data", s(&data)]);
    assert!(stdout.contains("eval-confounded"));
    assert!(stdout.contains("eval-decorrelated"));
    assert!(stdout.contains("event_f1"));
}

#[test]
fn validate_oracles_writes_a_row_per_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let out = tmp.path().join("oracles");
    let stdout = ok(&["validate-oracles", "--data", s(&data), "--out", s(&out)]);
    assert!(stdout.contains("mean spearman"));
    let csv = fs::read_to_string(out.join("oracle_deviations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn validate_oracles_single_class_has_no_deviation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("one.toml");
    fs::write(
        &cfg,
        format!(
            "{TINY}\n[generator]\nclasses = 1\ncooccurrence = [[1.0]]\nbackground = []\nmax_events = 1\n"
        )
        .replace("[generator]\nframes = 40\nmel_bins = 16\n", "")
        .replace("[generator]\n", "[generator]\nframes = 40\nmel_bins = 16\n"),
    )
    .unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out = tmp.path().join("oracles");
    ok(&["validate-oracles", "--data", s(&data), "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("oracle_deviations.csv")).unwrap();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let dev: f64 = rec[2].parse().unwrap();
        assert!(dev <= 1e-12, "{dev}");
        n += 1;
    }
    assert_eq!(n, 4);
}
