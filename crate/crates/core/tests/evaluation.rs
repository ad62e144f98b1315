use cised::checkpoint::Checkpoint;
use cised::dataset::strong::{load_eval, EvalClip};
use cised::dataset::weak::{load_train, WeakClip};
use cised::error::Error;
use cised::evaluation::{evaluate, Predictor};
use cised::metrics::MetricsConfig;
use cised::model::ModelConfig;
use cised::synthdata::{emit_dataset, GeneratorConfig, Split, SplitSizes};
use cised::trainer::{TrainConfig, Trainer, Variant};

fn model_cfg() -> ModelConfig {
    ModelConfig {
        mel_bins: 16,
        channels: vec![4, 8, 16],
        ..ModelConfig::default()
    }
}

fn dataset() -> (tempfile::TempDir, Vec<WeakClip>, Vec<EvalClip>) {
    let cfg = GeneratorConfig {
        frames: 48,
        mel_bins: 16,
        ..GeneratorConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let sizes = SplitSizes {
        train: 24,
        eval_confounded: 12,
        eval_decorrelated: 12,
    };
    emit_dataset(&cfg, sizes, tmp.path()).unwrap();
    let train = load_train(tmp.path()).unwrap();
    let eval = load_eval(tmp.path(), Split::EvalDecorrelated).unwrap();
    (tmp, train, eval)
}

fn trained(variant: Variant, train: &[WeakClip]) -> Trainer {
    let cfg = TrainConfig {
        variant,
        epochs: 2,
        batch_size: 6,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model_cfg(), cfg, 48).unwrap();
    t.fit(train, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn evaluation_is_repeatable_and_leaves_pool_alone() {
    let (_tmp, train, eval) = dataset();
    let t = trained(Variant::Ci, &train);
    let pool_before = t.pool.clone().unwrap();
    let p = Predictor::new(&t.model, t.pool.as_ref(), Variant::Ci).unwrap();
    let m = MetricsConfig::default();
    let (a, pa) = evaluate(&p, &eval, &m).unwrap();
    let (b, pb) = evaluate(&p, &eval, &m).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let pool = t.pool.as_ref().unwrap();
    assert_eq!(pool.matrix(), pool_before.matrix());
    assert_eq!(pool.updates(), pool_before.updates());
}

#[test]
fn ci_with_zero_projection_matches_baseline_bit_for_bit() {
    let (tmp, train, eval) = dataset();
    // A trained backbone, reloaded from disk, with its projection zeroed.
    let t = trained(Variant::Ci, &train);
    let path = tmp.path().join("ci.ckpt");
    t.to_checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut model = ck.restore_model(&model_cfg()).unwrap();
    let pool = ck.restore_pool(0.01).unwrap().unwrap();
    assert!(model.projection.weight.data().iter().any(|&w| w != 0.0));
    model.projection.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    model.projection.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);

    let m = MetricsConfig::default();
    let ci = Predictor::new(&model, Some(&pool), Variant::Ci).unwrap();
    let base = Predictor::new(&model, None, Variant::Baseline).unwrap();
    let (rc, pc) = evaluate(&ci, &eval, &m).unwrap();
    let (rb, pb) = evaluate(&base, &eval, &m).unwrap();
    for (x, y) in pc.iter().zip(&pb) {
        assert!(x.clip_scores.iter().zip(&y.clip_scores).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(x
            .frame_scores
            .data()
            .iter()
            .zip(y.frame_scores.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    for ((na, va), (nb, vb)) in rc.rows().into_iter().zip(rb.rows()) {
        assert_eq!(na, nb);
        assert_eq!(va.to_bits(), vb.to_bits(), "{na}");
    }
}

#[test]
fn baseline_branches_coincide() {
    let (_tmp, train, eval) = dataset();
    let t = trained(Variant::Baseline, &train);
    let p = Predictor::new(&t.model, None, Variant::Baseline).unwrap();
    for c in &eval {
        let (a, b) = p.predict_both(&c.spec).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn ci_prediction_needs_a_pool() {
    let (_tmp, train, _) = dataset();
    let t = trained(Variant::Baseline, &train);
    assert!(Predictor::new(&t.model, None, Variant::Ci).is_err());
}

#[test]
fn mismatched_fingerprint_is_rejected() {
    let (tmp, train, _) = dataset();
    let t = trained(Variant::Ci, &train);
    let path = tmp.path().join("ci.ckpt");
    t.to_checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let other = ModelConfig {
        channels: vec![4, 8, 32],
        ..model_cfg()
    };
    assert!(matches!(ck.restore_model(&other), Err(Error::FingerprintMismatch { .. })));
    let cfg = TrainConfig {
        variant: Variant::Ci,
        ..TrainConfig::default()
    };
    assert!(Trainer::from_checkpoint(&ck, &other, cfg).is_err());
}

#[test]
fn single_class_intervention_matches_oracle() {
    let cfg = ModelConfig {
        classes: 1,
        ..model_cfg()
    };
    let (model, pool) = cised::diagnostics::random_frozen(cfg, 48, 9).unwrap();
    assert_eq!(pool.classes(), 1);
    let (_tmp, _, eval) = dataset();
    let p = Predictor::new(&model, Some(&pool), Variant::Ci).unwrap();
    for c in &eval {
        let (exact, approx) = p.backdoor_pair(&c.spec).unwrap();
        assert!((exact[0] - approx[0]).abs() <= 1e-12);
    }
}
