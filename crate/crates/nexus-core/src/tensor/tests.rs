use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, DiffArray, Tape, TensorError};

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
    }
}

/// Central finite differences of `f` w.r.t. `x`, h = 1e-5.
fn numeric_grad(x: &Array, f: &dyn Fn(&Array) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut g = vec![0.0; x.numel()];
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Analytic gradient matches central finite differences with relative error
/// below 1e-4 (absolute 1e-7 near zero).
fn check_grad(x: &Array, forward: &dyn Fn(&Tape, &DiffArray) -> DiffArray) {
    let tape = Tape::new();
    let xd = tape.leaf(x.clone());
    let loss = forward(&tape, &xd);
    loss.backward().unwrap();
    let analytic = xd.grad().expect("grad populated");
    let numeric = numeric_grad(x, &|xp| {
        let t = Tape::new();
        let xd = t.constant(xp.clone());
        forward(&t, &xd).item()
    });
    for (a, n) in analytic.iter().zip(&numeric) {
        let denom = n.abs().max(1e-3);
        assert!(
            (a - n).abs() / denom < 1e-4 || (a - n).abs() < 1e-7,
            "analytic {a} vs numeric {n}"
        );
    }
}

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    arr(shape, &data)
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = tape.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(arr(&[2, 1], &[3.0, 4.0]));
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_close(c.value().data(), &[3.0, 4.0], 0.0);
}

#[test]
fn matmul_hand_arithmetic() {
    let tape = Tape::new();
    let a = tape.constant(arr(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(arr(&[2, 1], &[3.0, 4.0]));
    assert_close(a.matmul(&b).unwrap().value().data(), &[11.0], 0.0);
}

#[test]
fn matmul_dimension_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Array::zeros(vec![2, 3]));
    let b = tape.constant(Array::zeros(vec![4, 2]));
    match a.matmul(&b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4, 2], &mut rng);
        check_grad(&a, &|t, x| {
            let b = t.constant(b.clone());
            x.matmul(&b).unwrap().mean_all().scale(24.0)
        });
        check_grad(&b, &|t, x| {
            let a = t.constant(a.clone());
            a.matmul(x).unwrap().mean_all().scale(24.0)
        });
    }
}

#[test]
fn batch_matmul_matches_per_batch_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_array(&[2, 3, 4], &mut rng);
    let b = rand_array(&[2, 4, 2], &mut rng);
    let tape = Tape::new();
    let ad = tape.constant(a.clone());
    let bd = tape.constant(b.clone());
    let c = ad.batch_matmul(&bd).unwrap();
    for batch in 0..2 {
        let t2 = Tape::new();
        let ab = t2.constant(arr(&[3, 4], &a.data()[batch * 12..(batch + 1) * 12]));
        let bb = t2.constant(arr(&[4, 2], &b.data()[batch * 8..(batch + 1) * 8]));
        let cb = ab.matmul(&bb).unwrap();
        assert_close(
            &c.value().data()[batch * 6..(batch + 1) * 6],
            cb.value().data(),
            1e-12,
        );
    }
    check_grad(&a, &|t, x| {
        let b = t.constant(b.clone());
        x.batch_matmul(&b).unwrap().mean_all()
    });
    check_grad(&b, &|t, x| {
        let a = t.constant(a.clone());
        a.batch_matmul(x).unwrap().mean_all()
    });
}

#[test]
fn conv1d_identity_tap_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_array(&[2, 5, 3], &mut rng);
    let tape = Tape::new();
    let xd = tape.constant(x.clone());
    let k = tape.constant(arr(&[3, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
    let y = xd.conv1d_depthwise(&k).unwrap();
    assert_close(y.value().data(), x.data(), 0.0);
}

#[test]
fn conv1d_box_kernel_hand_convolution() {
    // x=[1,2,3,4], kernel [1,1,1] zero-padded -> [3,6,9,7]
    let tape = Tape::new();
    let x = tape.constant(arr(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(arr(&[1, 3], &[1.0, 1.0, 1.0]));
    let y = x.conv1d_depthwise(&k).unwrap();
    assert_close(y.value().data(), &[3.0, 6.0, 9.0, 7.0], 0.0);
}

#[test]
fn conv1d_even_kernel_width_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Array::zeros(vec![1, 4, 1]));
    let k = tape.constant(Array::zeros(vec![1, 4]));
    assert!(matches!(
        x.conv1d_depthwise(&k),
        Err(TensorError::Config(_))
    ));
    let kf = tape.constant(Array::zeros(vec![2, 1, 4]));
    assert!(matches!(x.conv1d_full(&kf), Err(TensorError::Config(_))));
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_array(&[2, 6, 3], &mut rng);
        let kd = rand_array(&[3, 3], &mut rng);
        let kf = rand_array(&[2, 3, 3], &mut rng);
        check_grad(&x, &|t, v| {
            let k = t.constant(kd.clone());
            v.conv1d_depthwise(&k).unwrap().mean_all()
        });
        check_grad(&kd, &|t, v| {
            let x = t.constant(x.clone());
            x.conv1d_depthwise(v).unwrap().mean_all()
        });
        check_grad(&x, &|t, v| {
            let k = t.constant(kf.clone());
            v.conv1d_full(&k).unwrap().mean_all()
        });
        check_grad(&kf, &|t, v| {
            let x = t.constant(x.clone());
            x.conv1d_full(v).unwrap().mean_all()
        });
    }
}

#[test]
fn pointwise_conv_identity_and_hand_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_array(&[2, 4, 3], &mut rng);
    let tape = Tape::new();
    let xd = tape.constant(x.clone());
    let eye = tape.constant(arr(
        &[3, 3],
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    assert_close(
        xd.pointwise_conv(&eye).unwrap().value().data(),
        x.data(),
        0.0,
    );

    // C_in=2, x=[1,2], w=[[1],[1]] -> [3]
    let x2 = tape.constant(arr(&[1, 1, 2], &[1.0, 2.0]));
    let w = tape.constant(arr(&[2, 1], &[1.0, 1.0]));
    assert_close(x2.pointwise_conv(&w).unwrap().value().data(), &[3.0], 0.0);
}

#[test]
fn activations_fixed_points() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[0.0, -2.5, 2.5]));
    let s = x.sigmoid();
    assert!((s.value().data()[0] - 0.5).abs() < 1e-15);
    let r = x.relu();
    assert_close(r.value().data(), &[0.0, 0.0, 2.5], 0.0);
}

#[test]
fn softmax_symmetry_and_normalization() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[0.0, 0.0, 0.0]));
    let y = x.softmax(0).unwrap();
    assert_close(y.value().data(), &[1.0 / 3.0; 3], 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = rand_array(&[4, 5], &mut rng);
        let y = tape.constant(x).softmax(1).unwrap().value();
        for row in 0..4 {
            let s: f64 = y.data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(y.data()[row * 5..(row + 1) * 5].iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn softmax_max_subtraction_handles_large_inputs() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[2], &[1000.0, 1000.0]));
    let y = x.softmax(0).unwrap();
    assert_close(y.value().data(), &[0.5, 0.5], 1e-12);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_array(&[2, 4], &mut rng);
        let probe = rand_array(&[2, 4], &mut rng);
        check_grad(&x, &|t, v| {
            let p = t.constant(probe.clone());
            v.softmax(1).unwrap().mul(&p).unwrap().mean_all()
        });
    }
}

#[test]
fn layer_norm_centers_and_scales() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[1.0, 3.0, 5.0]));
    let y = x.layer_norm(0).unwrap().value();
    let mean: f64 = y.iter().sum::<f64>() / 3.0;
    let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-7);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_constant_vector_maps_to_zero() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[5.0, 5.0, 5.0]));
    assert_close(x.layer_norm(0).unwrap().value().data(), &[0.0; 3], 0.0);
}

#[test]
fn layer_norm_degenerate_axis_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Array::zeros(vec![3, 1]));
    assert!(matches!(
        x.layer_norm(1),
        Err(TensorError::Degenerate(_))
    ));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_array(&[2, 5], &mut rng);
        let probe = rand_array(&[2, 5], &mut rng);
        check_grad(&x, &|t, v| {
            let p = t.constant(probe.clone());
            v.layer_norm(1).unwrap().mul(&p).unwrap().mean_all()
        });
    }
}

#[test]
fn unfold_whole_sequence_single_patch() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let p = x.unfold(4, 2).unwrap();
    assert_eq!(p.shape(), &[1, 1, 4]);
    assert_close(p.value().data(), &[1.0, 2.0, 3.0, 4.0], 0.0);
}

#[test]
fn unfold_length_formula() {
    // T' = floor((T - p)/s) + 1 = 83 for T=168, p=4, s=2
    let tape = Tape::new();
    let x = tape.constant(Array::zeros(vec![1, 168, 1]));
    assert_eq!(x.unfold(4, 2).unwrap().shape(), &[1, 83, 4]);
}

#[test]
fn unfold_non_overlapping_tiling() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let p = x.unfold(2, 2).unwrap();
    assert_eq!(p.shape(), &[1, 2, 2]);
    assert_close(p.value().data(), &[1.0, 2.0, 3.0, 4.0], 0.0);
}

#[test]
fn unfold_patch_longer_than_sequence_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Array::zeros(vec![1, 3, 1]));
    assert!(matches!(x.unfold(4, 1), Err(TensorError::Config(_))));
}

#[test]
fn unfold_covers_every_timestep_when_stride_at_most_patch() {
    // No information discarded at patch boundaries: every input index is read
    // by at least one patch whenever s <= p.
    for (t, p, s) in [(10, 3, 2), (12, 4, 4), (9, 5, 1), (168, 4, 2)] {
        let tp = (t - p) / s + 1;
        let mut covered = vec![false; t];
        for i in 0..tp {
            for j in 0..p {
                covered[i * s + j] = true;
            }
        }
        // Trailing timesteps that don't fill a whole patch are the only ones
        // a sliding window can miss; the formula guarantees coverage up to
        // the last patch end.
        let last_end = (tp - 1) * s + p;
        assert!(covered[..last_end].iter().all(|&c| c), "t={t} p={p} s={s}");
        assert!(last_end > t - s, "t={t} p={p} s={s}");
    }
}

#[test]
fn mean_axes_values_and_gradient() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[1.0, 2.0, 3.0]));
    assert!((x.mean_all().item() - 2.0).abs() < 1e-15);

    let c = tape.constant(arr(&[2, 2], &[7.0; 4]));
    assert!((c.mean_all().item() - 7.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&[2, 3, 4], &mut rng);
    check_grad(&x, &|_, v| v.mean_axes(&[0, 1]).unwrap().mean_all());
    check_grad(&x, &|_, v| v.mean_axes(&[1]).unwrap().mean_all());
    // gradient of mean is 1/n broadcast
    let tape = Tape::new();
    let xd = tape.leaf(x.clone());
    xd.mean_all().backward().unwrap();
    assert_close(xd.grad().unwrap().data(), &[1.0 / 24.0; 24], 1e-15);
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&[10], &mut rng);
    let tape = Tape::new();
    let xd = tape.constant(x.clone());
    let y = xd.dropout(0.0, true, &mut rng).unwrap();
    assert_close(y.value().data(), x.data(), 0.0);
    let y = xd.dropout(0.1, false, &mut rng).unwrap();
    assert_close(y.value().data(), x.data(), 0.0);
}

#[test]
fn dropout_zero_fraction_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1_000_000;
    let tape = Tape::new();
    let x = tape.constant(arr(&[n], &vec![1.0; n]));
    let y = x.dropout(0.1, true, &mut rng).unwrap().value();
    let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    assert!((0.099..=0.101).contains(&zeros), "zero fraction {zeros}");
    // survivors are scaled by 1/(1-rate)
    assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
}

#[test]
fn dropout_invalid_rate_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::new();
    let x = tape.constant(Array::zeros(vec![4]));
    assert!(matches!(
        x.dropout(1.0, true, &mut rng),
        Err(TensorError::Config(_))
    ));
    assert!(matches!(
        x.dropout(-0.1, true, &mut rng),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Array::zeros(vec![2, 2]));
    assert!(matches!(x.backward(), Err(TensorError::Contract(_))));
}

#[test]
fn backward_leaves_unreachable_grads_untouched() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
    let y = tape.leaf(arr(&[2], &[3.0, 4.0]));
    let loss = x.mean_all();
    loss.backward().unwrap();
    assert!(x.grad().is_some());
    assert!(y.grad().is_none());
}

#[test]
fn gradient_accumulates_on_diamond_graph() {
    // z = mean(x*x + x), x used on two paths: dz/dx = (2x + 1)/n
    let x = arr(&[3], &[0.5, -1.5, 2.0]);
    check_grad(&x, &|_, v| {
        let sq = v.mul(v).unwrap();
        sq.add(v).unwrap().mean_all()
    });
    let tape = Tape::new();
    let xd = tape.leaf(x.clone());
    let loss = xd.mul(&xd).unwrap().add(&xd).unwrap().mean_all();
    loss.backward().unwrap();
    let want: Vec<f64> = x.iter().map(|v| (2.0 * v + 1.0) / 3.0).collect();
    assert_close(xd.grad().unwrap().data(), &want, 1e-12);
}

#[test]
fn composite_expression_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_array(&[2, 6, 3], &mut rng);
        let w = rand_array(&[3, 4], &mut rng);
        check_grad(&x, &|t, v| {
            let w = t.constant(w.clone());
            let h = v.matmul(&w).unwrap().sigmoid();
            let g = h.relu();
            h.mul(&g).unwrap().mean_all()
        });
    }
}

#[test]
fn scale_by_elem_and_weighted_sum_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_array(&[4, 3], &mut rng);
    let w = rand_array(&[4], &mut rng);
    let s = rand_array(&[3], &mut rng);
    check_grad(&x, &|t, v| {
        let w = t.constant(w.clone());
        v.weighted_sum_rows(&w).unwrap().mean_all()
    });
    check_grad(&w, &|t, v| {
        let x = t.constant(x.clone());
        x.weighted_sum_rows(v).unwrap().mean_all()
    });
    check_grad(&s, &|t, v| {
        let x = t.constant(x.clone());
        x.scale_by_elem(v, 1).unwrap().mean_all()
    });
    check_grad(&x, &|t, v| {
        let s = t.constant(s.clone());
        v.scale_by_elem(&s, 2).unwrap().mean_all()
    });
}

#[test]
fn add_broadcast_suffix_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_array(&[2, 3, 4], &mut rng);
    let b = rand_array(&[4], &mut rng);
    let pos = rand_array(&[3, 4], &mut rng);
    check_grad(&b, &|t, v| {
        let x = t.constant(x.clone());
        x.add_broadcast(v).unwrap().mean_all()
    });
    check_grad(&pos, &|t, v| {
        let x = t.constant(x.clone());
        x.add_broadcast(v).unwrap().mean_all()
    });
    // mismatched suffix rejected
    let tape = Tape::new();
    let xd = tape.constant(x.clone());
    let bad = tape.constant(Array::zeros(vec![5]));
    assert!(xd.add_broadcast(&bad).is_err());
}
