use super::gradcheck::{check, operator_suite, FD_STEP};
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::new();
    let eye = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = t.constant(mat(&[&[5.0], &[6.0]]));
    let ia = t.matmul(eye, a).unwrap();
    assert_eq!(t.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ab = t.matmul(a, b).unwrap();
    assert_eq!(t.value(ab).shape(), &[2, 1]);
    assert_eq!(t.value(ab).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand3 = || {
        Tensor::new([3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .param()
    };
    let inputs = vec![rand3(), rand3()];
    let res = check(&inputs, FD_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(res.iter().all(|c| c.rel_err < 1e-6), "{res:?}");
}

#[test]
fn conv1x1_identity_and_hand_case() {
    let mut t = Tape::new();
    let x = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let eye = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let zero = t.constant(Tensor::zeros([2]));
    let y = t.conv1x1(x, eye, zero).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let w = t.constant(mat(&[&[1.0, 1.0]]));
    let b = t.constant(Tensor::zeros([1]));
    let y = t.conv1x1(x, w, b).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2]);
    assert_eq!(t.value(y).data(), &[4.0, 6.0]);
}

#[test]
fn conv1x1_channel_mismatch_rejected() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([3, 4]));
    let w = t.constant(Tensor::zeros([2, 2]));
    let b = t.constant(Tensor::zeros([2]));
    assert!(matches!(
        t.conv1x1(x, w, b),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn sigmoid_symmetry_slope_and_saturation() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, -1000.0, 1000.0, -700.0, 700.0]).param());
    let y = t.sigmoid(x);
    let v = t.value(y).data().to_vec();
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.0 && v[1] <= 1e-300, "{}", v[1]);
    assert_eq!(v[2], 1.0);
    assert!(v[3] > 0.0 && v[3].is_finite());
    assert!(v.iter().all(|p| p.is_finite()));

    let first = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0]));
    let p = t.mul(y, first).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data()[0], 0.25);
}

#[test]
fn bce_reference_values() {
    let k = 4;
    let mut t = Tape::new();
    let target = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
    let perfect = t.constant(target.clone());
    let l = t.bce(perfect, &target).unwrap();
    let v = t.value(l).item();
    assert_eq!(v, 0.0);
    // Fully wrong predictions hit the log floor.
    let wrong = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0, 1.0]));
    let l = t.bce(wrong, &target).unwrap();
    assert!((t.value(l).item() + BCE_EPS.ln()).abs() < 1e-12);

    let half = t.constant(Tensor::full([k], 0.5));
    let l = t.bce(half, &target).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.gen_range(1..9);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        let direct = -p
            .iter()
            .zip(&y)
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64;
        let pv = t.constant(Tensor::vector(p));
        let l = t.bce(pv, &Tensor::vector(y)).unwrap();
        assert!((t.value(l).item() - direct).abs() < 1e-12);
    }
}

#[test]
fn bce_shape_mismatch_rejected() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::full([3], 0.5));
    assert!(t.bce(p, &Tensor::zeros([2])).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros([2, 3]).param());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    assert_eq!(g.get(x).unwrap().shape(), &[2, 3]);
}

#[test]
fn backward_twice_requires_reset() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full([2], 3.0).param());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::BackwardTwice)));
    t.reset();
    assert!(t.backward(s).is_ok());
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros([2]).param());
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn disconnected_parameter_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full([2], 1.0).param());
    let unused = t.leaf(Tensor::full([3], 1.0).param());
    let c = t.constant(Tensor::full([2], 1.0));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    assert!(g.get(c).is_none());
}

#[test]
fn composed_conv_sigmoid_bce_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let (k, c, n) = (3, 4, 5);
        let mut rnd = |s: &[usize]| {
            Tensor::new(
                s.to_vec(),
                (0..s.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
            .param()
        };
        let inputs = vec![rnd(&[k, n]), rnd(&[c, k]), rnd(&[c])];
        let target = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
        let res = check(&inputs, FD_STEP, |t, v| {
            let y = t.conv1x1(v[0], v[1], v[2])?;
            let m = t.sigmoid(y);
            let s = t.mean_axis(m, 1)?;
            t.bce(s, &target)
        })
        .unwrap();
        assert!(res.iter().all(|c| c.rel_err < 1e-6), "{res:?}");
    }
}

#[test]
fn every_operator_passes_gradient_check() {
    let reports = operator_suite(20, 2024).unwrap();
    assert_eq!(reports.len(), 13);
    for r in &reports {
        assert!(r.passed(1e-6), "{} worst rel err {}", r.name, r.worst_rel_err);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new([2, 6, 5], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let w = t.constant(
            Tensor::new([3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let y = t
            .conv2d(
                x,
                w,
                b,
                Conv2dSpec {
                    stride: (2, 1),
                    padding: (1, 1),
                },
            )
            .unwrap();
        let z = t.standardize(y, STANDARDIZE_EPS).unwrap();
        let r = t.relu(z);
        let p = t.pool_pairs(r, 1).unwrap();
        t.value(p).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn conv2d_shapes_and_single_tap_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new([1, 4, 3], (0..12).map(f64::from).collect()).unwrap());
    // Kernel with a single centre tap reproduces the input at stride 1.
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = t.constant(Tensor::new([1, 1, 3, 3], k).unwrap());
    let b = t.constant(Tensor::zeros([1]));
    let y = t.conv2d(x, w, b, Conv2dSpec::default()).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let y = t
        .conv2d(
            x,
            w,
            b,
            Conv2dSpec {
                stride: (2, 1),
                padding: (1, 1),
            },
        )
        .unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 3]);
    assert_eq!(t.value(y).data(), &[0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
}

#[test]
fn standardize_rows_have_zero_mean_unit_variance() {
    let mut t = Tape::new();
    let x = t.constant(mat(&[&[1.0, 2.0, 3.0, 4.0], &[10.0, -10.0, 10.0, -10.0]]));
    let y = t.standardize(x, 0.0).unwrap();
    for r in 0..2 {
        let (m, v) = mean_var(t.value(y).row(r));
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn standardize_frames_normalizes_each_frame() {
    let mut t = Tape::new();
    let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
    let x = t.constant(Tensor::new([2, 3, 4], data).unwrap());
    let y = t.standardize_frames(x, 0.0).unwrap();
    let v = t.value(y).data().to_vec();
    for f in 0..4 {
        let col: Vec<f64> = (0..6).map(|i| v[i * 4 + f]).collect();
        let (m, var) = mean_var(&col);
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
    // Changing one frame leaves the others untouched.
    let mut data2: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
    data2[1] = 100.0;
    let x2 = t.constant(Tensor::new([2, 3, 4], data2).unwrap());
    let y2 = t.standardize_frames(x2, 0.0).unwrap();
    let v2 = t.value(y2).data();
    for j in (0..24).filter(|j| j % 4 != 1) {
        assert_eq!(v[j], v2[j]);
    }
}

#[test]
fn extreme_but_finite_inputs_stay_finite() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![-700.0, 700.0, 0.0, 1e-300]).param());
    let s = t.sigmoid(x);
    let target = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
    let l = t.bce(s, &target).unwrap();
    assert!(t.value(l).item().is_finite());
    let g = t.backward(l).unwrap();
    assert!(g.get(x).unwrap().is_finite());
}
