mod common;

use common::{naive_conv2d, naive_matmul, randn, rng};
use hit_core::tensor::{self, Conv2dSpec};
use hit_core::{HitError, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matmul_identity_and_zero() {
    let mut r = rng(1);
    let a = randn(&mut r, &[3, 4]);
    assert_eq!(tensor::matmul(&a, &Tensor::eye(4)).unwrap(), a);
    let z = tensor::matmul(&Tensor::zeros(&[2, 3]), &a).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng(2);
    let a = randn(&mut r, &[3, 4]);
    let b = randn(&mut r, &[4, 2]);
    assert_eq!(tensor::matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 5]);
    match tensor::matmul(&a, &b) {
        Err(HitError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_anchor_values() {
    let z = tensor::softmax(&Tensor::<f64>::zeros(&[5]), 0).unwrap();
    assert!(z.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let one = tensor::softmax(&Tensor::new(vec![3, 1], vec![4.0, -2.0, 9.0]).unwrap(), 1).unwrap();
    assert!(one.data().iter().all(|&v| v == 1.0));
}

#[test]
fn softmax_large_logits_match_closed_form() {
    let x = Tensor::new(vec![2], vec![1000.0, 1000.1]).unwrap();
    let y = tensor::softmax(&x, 0).unwrap();
    // softmax([a, a + d]) = [1 / (1 + e^d), 1 / (1 + e^-d)]
    let d = 0.1f64;
    let expect = [1.0 / (1.0 + d.exp()), 1.0 / (1.0 + (-d).exp())];
    // 1000.1 is not exactly representable; the actual gap in f64 is what the kernel sees.
    let gap = 1000.1f64 - 1000.0;
    let exact = [1.0 / (1.0 + gap.exp()), 1.0 / (1.0 + (-gap).exp())];
    for i in 0..2 {
        assert!((y.data()[i] - exact[i]).abs() < 1e-12);
        assert!((y.data()[i] - expect[i]).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_middle_axis() {
    let mut r = rng(3);
    let x = randn(&mut r, &[2, 4, 3]);
    let y = tensor::softmax(&x, 1).unwrap();
    for a in 0..2 {
        for c in 0..3 {
            let s: f64 = (0..4).map(|b| y.data()[(a * 4 + b) * 3 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_nan_is_numeric_error() {
    let x = Tensor::new(vec![3], vec![0.0, f64::NAN, 1.0]).unwrap();
    assert!(matches!(tensor::softmax(&x, 0), Err(HitError::Numeric(_))));
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(4);
    let x = randn(&mut r, &[5, 6, 3]);
    let w = Tensor::eye(3).reshape(&[1, 1, 3, 3]).unwrap();
    assert_eq!(tensor::conv2d(&x, &w, Conv2dSpec::new(1, 0, 1)).unwrap(), x);
}

#[test]
fn depthwise_ones_on_constant_image() {
    let c = 0.37f64;
    let x = Tensor::full(&[6, 7, 2], c);
    let w = Tensor::ones(&[3, 3, 1, 2]);
    let y = tensor::conv2d(&x, &w, Conv2dSpec::depthwise(3, 2)).unwrap();
    for yy in 1..5 {
        for xx in 1..6 {
            for ch in 0..2 {
                assert!((y.data()[(yy * 7 + xx) * 2 + ch] - 9.0 * c).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(5);
    let x = randn(&mut r, &[5, 5, 2]);
    let w = randn(&mut r, &[3, 3, 2, 3]);
    assert_eq!(
        tensor::conv2d(&x, &w, Conv2dSpec::same(3)).unwrap(),
        naive_conv2d(&x, &w, 1, 1, 1)
    );
}

#[test]
fn conv_matches_oracle_bit_for_bit_on_50_configs() {
    let mut r = rng(6);
    for _ in 0..50 {
        let groups = [1, 2, 3][r.random_range(0..3)];
        let cin = groups * r.random_range(1..4);
        let cout = groups * r.random_range(1..4);
        let k = r.random_range(1..5);
        let stride = r.random_range(1..4);
        let pad = r.random_range(0..3);
        let h = r.random_range(k..k + 8);
        let w = r.random_range(k..k + 8);
        let x = randn(&mut r, &[h, w, cin]);
        let kern = randn(&mut r, &[k, k, cin / groups, cout]);
        let got = tensor::conv2d(&x, &kern, Conv2dSpec::new(stride, pad, groups)).unwrap();
        assert_eq!(got, naive_conv2d(&x, &kern, stride, pad, groups));
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(got.shape(), &[oh, ow, cout]);
    }
}

#[test]
fn conv_kernel_larger_than_input_is_dimension_error() {
    let x = Tensor::<f64>::zeros(&[2, 2, 1]);
    let w = Tensor::<f64>::zeros(&[5, 5, 1, 1]);
    assert!(matches!(
        tensor::conv2d(&x, &w, Conv2dSpec::new(1, 1, 1)),
        Err(HitError::Dimension { .. })
    ));
}

#[test]
fn layer_norm_cases() {
    let ones = Tensor::ones(&[4]);
    let zeros = Tensor::zeros(&[4]);
    let constant = Tensor::full(&[2, 4], 3.5);
    let (y, _) = tensor::layer_norm(&constant, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut r = rng(7);
    let x = randn(&mut r, &[3, 4]);
    let beta = randn(&mut r, &[4]);
    let (y, _) = tensor::layer_norm(&x, &zeros, &beta, 1e-5).unwrap();
    for row in y.data().chunks(4) {
        assert_eq!(row, beta.data());
    }

    // The normalized variance is s2 / (s2 + eps), so it is within 1e-9 of one
    // only when the token variance s2 exceeds about 1e3.
    for scale in [1.0, 100.0] {
        let x = randn(&mut r, &[1, 64]).scale(scale);
        let xm = x.data().iter().sum::<f64>() / 64.0;
        let s2 = x.data().iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 64.0;
        let (y, _) = tensor::layer_norm(&x, &Tensor::ones(&[64]), &Tensor::zeros(&[64]), 1e-6).unwrap();
        let mean = y.data().iter().sum::<f64>() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - s2 / (s2 + 1e-6)).abs() < 1e-12);
        if scale == 100.0 {
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let mut r = rng(8);
    let x0 = randn(&mut r, &[3, 5]);
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let g = tape.backward(&x.sum()).unwrap();
    assert_eq!(g.wrt(&x), Tensor::ones(&[3, 5]));

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = x.square().sum().scale(0.5);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&x), x0);
}

#[test]
fn backward_on_untracked_is_tape_error() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&c), Err(HitError::Tape(_))));
}

#[test]
fn untracked_ops_record_nothing() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(&[2, 2]));
    let y = a.matmul(&a).unwrap().gelu().sum();
    assert!(!y.requires_grad());
    assert!(tape.recorded_ops().is_empty());
}

#[test]
fn gradients_take_primal_shapes() {
    let mut r = rng(9);
    let tape = Tape::new();
    let x = tape.leaf(randn(&mut r, &[4, 4, 2]));
    let w = tape.leaf(randn(&mut r, &[3, 3, 2, 3]));
    let bias = tape.leaf(randn(&mut r, &[3]));
    let y = x
        .conv2d(&w, Conv2dSpec::same(3))
        .unwrap()
        .add_bcast(&bias)
        .unwrap()
        .softmax_last()
        .unwrap();
    let g = tape.backward(&y.square().mean()).unwrap();
    for v in [&x, &w, &bias] {
        assert_eq!(g.wrt(v).shape(), v.shape());
    }
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut r = rng(10);
        let tape = Tape::new();
        let a = tape.leaf(randn(&mut r, &[64, 48]));
        let b = tape.leaf(randn(&mut r, &[48, 80]));
        let loss = a.matmul(&b).unwrap().gelu().square().mean();
        let g = tape.backward(&loss).unwrap();
        (loss.value().item(), g.wrt(&a), g.wrt(&b))
    };
    assert_eq!(run(), run());
}

#[test]
fn shared_subexpression_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
    let g = tape.backward(&y).unwrap().wrt(&x);
    assert_eq!(g.data(), &[4.0, -3.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_equals_oracle(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = randn(&mut r, &[m, k]);
        let b = randn(&mut r, &[k, n]);
        prop_assert_eq!(tensor::matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn softmax_rows_are_probability_vectors(rows in 1usize..5, n in 1usize..12, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[rows, n]).scale(scale);
        let y = tensor::softmax(&x, 1).unwrap();
        for row in y.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, d3 in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[d0, d1, d2, d3]);
        let mut axes = vec![0, 1, 2, 3];
        for i in (1..4).rev() {
            axes.swap(i, r.random_range(0..=i));
        }
        let y = tensor::permute(&x, &axes).unwrap();
        prop_assert_eq!(tensor::permute(&y, &tensor::inverse_axes(&axes)).unwrap(), x);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(h in 1usize..9, w in 1usize..9, ph in 0usize..20, pw in 0usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[h, w, 2]);
        let p = tensor::pad_reflect(&x, ph, pw).unwrap();
        prop_assert_eq!(p.shape(), &[h + ph, w + pw, 2][..]);
        prop_assert!(p.is_finite());
        prop_assert_eq!(tensor::crop(&p, h, w).unwrap(), x);
    }

    #[test]
    fn pool_bins_partition_channels(cin in 1usize..40, cout in 1usize..40) {
        prop_assume!(cout <= cin);
        let mut next = 0;
        for b in 0..cout {
            let (lo, hi) = tensor::pool_bin(b, cin, cout);
            prop_assert_eq!(lo, next);
            prop_assert!(hi > lo);
            next = hi;
        }
        prop_assert_eq!(next, cin);
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[4, 4, 3]).scale(100.0);
        let w = randn(&mut r, &[3, 3, 3, 2]);
        let y = tensor::conv2d(&x, &w, Conv2dSpec::same(3)).unwrap();
        prop_assert!(y.is_finite());
        prop_assert!(tensor::softmax(&y, 2).unwrap().is_finite());
        prop_assert!(y.map(tensor::gelu).is_finite());
    }
}
