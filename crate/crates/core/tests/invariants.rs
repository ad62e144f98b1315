use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cised::autodiff::Tensor;
use cised::causal::{standardize_row, ContextPool, VARIANCE_FLOOR};
use cised::synthdata::{generate_clip, sample_labels, GeneratorConfig, Palette};

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// `(k, n, initial pool, frame predictions per step, present classes per step, rate)`.
type PoolCase = (usize, usize, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<bool>>, f64);

fn pool_case() -> impl Strategy<Value = PoolCase> {
    (1usize..6, 2usize..30, 1usize..5).prop_flat_map(|(k, n, steps)| {
        (
            Just(k),
            Just(n),
            prop::collection::vec(-2.0f64..2.0, k * n),
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, k * n), steps),
            prop::collection::vec(prop::collection::vec(any::<bool>(), k), steps),
            0.001f64..1.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pool_rows_stay_standardized_or_untouched((k, n, init, preds, present, rate) in pool_case()) {
        let mut q = Tensor::new([k, n], init).unwrap();
        for j in 0..k {
            standardize_row(&mut q.data_mut()[j * n..(j + 1) * n], VARIANCE_FLOOR);
        }
        let mut pool = ContextPool::from_matrix(q, rate).unwrap();
        for (m, mask) in preds.into_iter().zip(present) {
            let before = pool.matrix().clone();
            let classes: Vec<usize> = (0..k).filter(|&j| mask[j]).collect();
            let degenerate = pool.degenerate_updates();
            pool.update(&Tensor::new([k, n], m).unwrap(), &classes).unwrap();
            for j in 0..k {
                let row = pool.matrix().row(j);
                if classes.contains(&j) {
                    let (mean, var) = mean_var(row);
                    if row.iter().any(|&v| v != 0.0) {
                        prop_assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "row {j}: {mean} {var}");
                    } else {
                        prop_assert!(pool.degenerate_updates() > degenerate);
                    }
                } else {
                    prop_assert!(row.iter().zip(before.row(j)).all(|(a, b)| a.to_bits() == b.to_bits()));
                }
            }
        }
    }

    #[test]
    fn standardize_is_idempotent(row in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        let mut once = row.clone();
        if standardize_row(&mut once, VARIANCE_FLOOR) {
            let mut twice = once.clone();
            prop_assert!(standardize_row(&mut twice, VARIANCE_FLOOR));
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        } else {
            prop_assert!(once.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sampled_labels_hold_the_lead_and_respect_the_cap(seed in any::<u64>(), cap in 1usize..7) {
        let cfg = GeneratorConfig { max_events: cap, ..GeneratorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lead, labels) = sample_labels(&cfg, &mut rng);
        prop_assert!(labels.contains(&lead));
        prop_assert!(!labels.is_empty() && labels.len() <= cap);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), labels.len());
    }

    #[test]
    fn generated_events_fit_the_clip(index in 0u64..10_000, frames in 20usize..80) {
        let cfg = GeneratorConfig { frames, mel_bins: 16, ..GeneratorConfig::default() };
        let palette = Palette::new(cfg.classes, cfg.textures, cfg.mel_bins);
        let clip = generate_clip(&cfg, &palette, 1, index).unwrap();
        prop_assert_eq!(clip.spec.frames(), frames);
        prop_assert_eq!(clip.spec.mel_bins(), 16);
        prop_assert!(clip.spec.values().data().iter().all(|v| v.is_finite()));
        let max_len = (cfg.max_event_frac * frames as f64).ceil() as usize;
        for ev in &clip.strong {
            prop_assert!(ev.onset < ev.offset && ev.offset <= frames);
            prop_assert!(ev.offset - ev.onset <= max_len.max(1));
        }
        let mut classes: Vec<usize> = clip.strong.iter().map(|e| e.class).collect();
        classes.sort_unstable();
        classes.dedup();
        prop_assert_eq!(classes, clip.weak.clone());
        prop_assert!(clip.texture < cfg.textures);
    }
}
