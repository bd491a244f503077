// SPDX-License-Identifier: Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences of `f` around `x`.
fn fd_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the tape gradient of `build(x)` (a scalar) against finite differences.
fn check_unary(x: Tensor, tol: f64, build: impl Fn(&Tape, Var) -> Var) {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().data().to_vec();
    let numeric = fd_grad(&x, 1e-5, |p| {
        let t = Tape::new();
        let v = t.leaf(p.clone());
        let l = build(&t, v);
        t.item(l)
    });
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "relative error {err} >= {tol}: {analytic:?} vs {numeric:?}");
}

#[test]
fn matmul_identity_and_zero() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    assert_eq!(tape.value(tape.matmul(i2, m).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.value(tape.matmul(i2, z).unwrap()).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random(&[3, 3], 1);
    let b = random(&[3, 3], 2);
    let bc = b.clone();
    check_unary(a, 1e-6, move |t, v| {
        let bv = t.constant(bc.clone());
        let p = t.matmul(v, bv).unwrap();
        t.sum(p).unwrap()
    });
    let ac = random(&[3, 3], 1);
    check_unary(b, 1e-6, move |t, v| {
        let av = t.constant(ac.clone());
        let p = t.matmul(av, v).unwrap();
        t.sum(p).unwrap()
    });
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 4]));
    let y = tape.value(tape.softmax(x).unwrap());
    for &p in y.data() {
        assert!((p - 0.25).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = tape.value(tape.softmax(x).unwrap());
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1].abs() < 1e-12);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let w = random(&[8], 11);
    check_unary(random(&[8], 10), 1e-6, move |t, v| {
        let s = t.softmax(v).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(s, wv).unwrap();
        t.sum(p).unwrap()
    });
}

#[test]
fn population_std() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![2.0, 0.0]));
    assert_eq!(tape.item(tape.std(x).unwrap()), 1.0);
}

#[test]
fn layer_norm_is_standardized() {
    let tape = Tape::new();
    let x = tape.constant(random(&[5, 7], 3));
    let y = tape.value(tape.layer_norm(x, 0.0).unwrap());
    for i in 0..5 {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    check_unary(random(&[10], 4), 1e-5, |t, v| {
        let g = t.gelu(v).unwrap();
        t.sum(g).unwrap()
    });
}

#[test]
fn log_rejects_non_positive() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient_accumulates_both_uses() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn reuse_across_branches_sums_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.exp(x).unwrap();
    let s = tape.add(a, b).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    let expect: Vec<f64> = [0.5f64, -1.0].iter().map(|v| 3.0 + v.exp()).collect();
    assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn elementwise_and_reduction_gradients() {
    let w = random(&[4, 5], 21);
    let cases: Vec<(&str, Box<dyn Fn(&Tape, Var) -> Var>)> = vec![
        ("log_softmax", Box::new(|t, v| {
            let y = t.log_softmax(v).unwrap();
            let p = t.pick(y, &[(0, 1), (2, 3), (3, 0)]).unwrap();
            t.sum(p).unwrap()
        })),
        ("logsumexp", Box::new(|t, v| {
            let y = t.logsumexp(v).unwrap();
            let s = t.mul(y, y).unwrap();
            t.sum(s).unwrap()
        })),
        ("std", Box::new(|t, v| t.std(v).unwrap())),
        ("mean_axis0", Box::new(|t, v| {
            let m = t.mean_axis0(v).unwrap();
            let e = t.exp(m).unwrap();
            t.sum(e).unwrap()
        })),
        ("sum_axis1", Box::new(|t, v| {
            let m = t.sum_axis1(v).unwrap();
            let e = t.mul(m, m).unwrap();
            t.sum(e).unwrap()
        })),
        ("layer_norm", Box::new(move |t, v| {
            let y = t.layer_norm(v, 1e-6).unwrap();
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv).unwrap();
            t.sum(p).unwrap()
        })),
        ("transpose", Box::new(|t, v| {
            let y = t.transpose(v).unwrap();
            let p = t.pick(y, &[(1, 0), (4, 3)]).unwrap();
            let e = t.exp(p).unwrap();
            t.sum(e).unwrap()
        })),
        ("norm_cdf", Box::new(|t, v| {
            let y = t.norm_cdf(v).unwrap();
            let s = t.mul(y, y).unwrap();
            t.mean(s).unwrap()
        })),
        ("l2_normalize_rows", Box::new(|t, v| {
            let y = t.l2_normalize_rows(v).unwrap();
            let p = t.pick(y, &[(0, 0), (1, 2), (3, 4)]).unwrap();
            t.sum(p).unwrap()
        })),
        ("mean_groups", Box::new(|t, v| {
            let y = t.mean_groups(v, 2).unwrap();
            let e = t.exp(y).unwrap();
            t.sum(e).unwrap()
        })),
        ("gather_scatter", Box::new(|t, v| {
            let y = t.gather_rows(v, &[3, 0, 3]).unwrap();
            let z = t.scatter_add_rows(y, &[1, 1, 0], 2).unwrap();
            let e = t.exp(z).unwrap();
            t.sum(e).unwrap()
        })),
        ("slice_concat", Box::new(|t, v| {
            let a = t.slice_rows(v, 1, 2).unwrap();
            let b = t.slice_rows(v, 0, 1).unwrap();
            let c = t.concat_rows(&[a, b, a]).unwrap();
            let e = t.mul(c, c).unwrap();
            t.sum(e).unwrap()
        })),
        ("div", Box::new(|t, v| {
            let e = t.exp(v).unwrap();
            let one = t.add_scalar(e, 1.0).unwrap();
            let d = t.div(v, one).unwrap();
            t.sum(d).unwrap()
        })),
        ("log_clamped", Box::new(|t, v| {
            let e = t.exp(v).unwrap();
            let l = t.log_clamped(e, 1e-12).unwrap();
            let s = t.mul(l, e).unwrap();
            t.sum(s).unwrap()
        })),
        ("relu", Box::new(|t, v| {
            let r = t.relu(v).unwrap();
            let s = t.mul(r, r).unwrap();
            t.sum(s).unwrap()
        })),
        ("row_broadcasts", Box::new(|t, v| {
            let row = t.slice_rows(v, 0, 1).unwrap();
            let row = t.reshape(row, &[5]).unwrap();
            let col = t.slice_rows(v, 1, 1).unwrap();
            let col = t.reshape(col, &[5]).unwrap();
            let col = t.pick(t.reshape(col, &[5, 1]).unwrap(), &[(0, 0), (1, 0), (2, 0), (3, 0)]).unwrap();
            let a = t.add_row(v, row).unwrap();
            let b = t.mul_row(a, row).unwrap();
            let c = t.scale_rows(b, col).unwrap();
            let e = t.sum(c).unwrap();
            t.mul(e, e).unwrap()
        })),
    ];
    for (name, f) in cases {
        eprintln!("checking {name}");
        check_unary(random(&[4, 5], 20), 1e-6, f);
    }
}

#[test]
fn attention_path_gradient() {
    // Two sequences of length 3, width 4, two heads.
    check_unary(random(&[6, 4], 30), 1e-6, |t, v| {
        let q = t.split_heads(v, 3, 2).unwrap();
        let kt = t.transpose_last2(q).unwrap();
        let s = t.bmm(q, kt).unwrap();
        let p = t.softmax(s).unwrap();
        let ctx = t.bmm(p, q).unwrap();
        let m = t.merge_heads(ctx, 2).unwrap();
        let e = t.mul(m, m).unwrap();
        t.sum(e).unwrap()
    });
}

#[test]
fn split_merge_heads_round_trip() {
    let tape = Tape::new();
    let x = tape.constant(random(&[6, 4], 31));
    let s = tape.split_heads(x, 3, 2).unwrap();
    assert_eq!(tape.shape(s), vec![4, 3, 2]);
    let m = tape.merge_heads(s, 2).unwrap();
    assert_eq!(*tape.value(m), *tape.value(x));
}

#[test]
fn scale_by_scalar_var_gradient() {
    let x = random(&[3], 40);
    let tape = Tape::new();
    let s = tape.leaf(Tensor::scalar(0.7));
    let v = tape.constant(x.clone());
    let y = tape.scale_by(v, s).unwrap();
    let e = tape.exp(y).unwrap();
    let l = tape.sum(e).unwrap();
    let g = tape.backward(l).unwrap();
    let expect: f64 = x.data().iter().map(|xi| xi * (0.7 * xi).exp()).sum();
    assert!((g.get(s).unwrap().item() - expect).abs() < 1e-12);
}
