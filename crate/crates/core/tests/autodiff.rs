mod common;

use common::fd_cases;
use common::*;
use mgdm::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use rand::Rng;

const TRIALS: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

macro_rules! fd_case {
    ($test:ident, $name:literal) => {
        #[test]
        fn $test() {
            let worst = fd_cases::worst_error($name, TRIALS, H);
            assert!(worst < TOL, "{}: worst relative error {worst:e}", $name);
        }
    };
}

fd_case!(grad_exp, "exp");
fd_case!(grad_neg, "neg");
fd_case!(grad_silu, "silu");
fd_case!(grad_softplus, "softplus");
fd_case!(grad_tanh, "tanh");
fd_case!(grad_add, "add");
fd_case!(grad_sub, "sub");
fd_case!(grad_mul, "mul");
fd_case!(grad_scale, "scale");
fd_case!(grad_linear, "linear");
fd_case!(grad_mse, "mse");
fd_case!(grad_masked_mse, "masked_mse");
fd_case!(grad_layer_norm, "layer_norm");
fd_case!(grad_conv1d_causal, "conv1d_causal");
fd_case!(grad_discretize_exact, "discretize_exact");
fd_case!(grad_discretize_simplified, "discretize_simplified");
fd_case!(grad_scan_naive, "scan_naive");
fd_case!(grad_scan_blocked, "scan_blocked");
fd_case!(grad_interleave_select_gather, "interleave_select_gather");

#[test]
fn every_primitive_has_a_case() {
    assert_eq!(fd_cases::CASES.len(), 19);
}

// Worked examples

fn scalar_op(x: f64, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(Tensor::scalar(x));
    let y = f(&mut t, v);
    t.value(y).item()
}

#[test]
fn silu_examples() {
    assert_eq!(scalar_op(0.0, |t, v| t.silu(v)), 0.0);
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((scalar_op(1.0, |t, v| t.silu(v)) - oracle).abs() < 1e-15);
    assert!((oracle - 0.73106).abs() < 1e-5);
    let h = 1e-5;
    let fd = (silu(h) - silu(-h)) / (2.0 * h);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(0.0));
    let mut t = Tape::new();
    let pv = t.params(&store);
    let y = t.silu(pv[x]);
    t.backward(y, &mut store).unwrap();
    assert!((store.grad(x).item() - 0.5).abs() < 1e-12);
    assert!((fd - 0.5).abs() < 1e-9);
}

#[test]
fn softplus_examples() {
    assert!((scalar_op(0.0, |t, v| t.softplus(v)) - 2f64.ln()).abs() < 1e-15);
    assert!((scalar_op(50.0, |t, v| t.softplus(v)) - 50.0).abs() < 1e-12);
    let tiny = scalar_op(-50.0, |t, v| t.softplus(v));
    assert!(((tiny - (-50f64).exp()) / (-50f64).exp()).abs() < 1e-6);
}

fn ln_row(row: &[f64], gain: f64, bias: f64) -> Vec<f64> {
    let c = row.len();
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, c], row.to_vec()).unwrap());
    let g = t.constant(Tensor::full(&[c], gain));
    let b = t.constant(Tensor::full(&[c], bias));
    let y = t.layer_norm(x, g, b).unwrap();
    t.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(ln_row(&[3.0; 5], 1.0, 0.0).iter().all(|v| *v == 0.0));
    let y = ln_row(&[1.0, -1.0], 1.0, 0.0);
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] - k).abs() < 1e-15 && (y[1] + k).abs() < 1e-15);
    assert!((y[0] - 0.999995).abs() < 1e-6);
    assert!(ln_row(&[0.3, -2.0, 7.0], 0.0, 1.25).iter().all(|v| *v == 1.25));
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
    let g = t.constant(Tensor::zeros(&[0]));
    assert_eq!(t.layer_norm(x, g, g), Err(AutodiffError::EmptyChannel("layer_norm")));
}

fn conv(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(vec![1, x.len(), 1], x.to_vec()).unwrap());
    let k = t.constant(Tensor::new(vec![1, kernel.len()], kernel.to_vec()).unwrap());
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv1d_causal(xv, k, b).unwrap();
    t.value(y).data().to_vec()
}

#[test]
fn conv_examples() {
    assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0]), vec![1.0, 2.0, 3.0]);
    assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 1.0]), vec![1.0, 3.0, 5.0]);
    // W > L is fine
    assert_eq!(conv(&[1.0, 2.0], &[1.0, 1.0, 1.0, 1.0]), vec![1.0, 3.0]);
    let mut r = rng(3);
    for _ in 0..50 {
        let l = r.random_range(2..10);
        let w = r.random_range(1..5);
        let x = rand_tensor(&[l], -2.0, 2.0, &mut r).into_data();
        let k = rand_tensor(&[w], -2.0, 2.0, &mut r).into_data();
        let base = conv(&x, &k);
        assert_eq!(base, ref_conv(&x, &k, &[0.0], 1, l, 1, w));
        let t0 = r.random_range(0..l);
        let mut x2 = x.clone();
        for v in &mut x2[t0 + 1..] {
            *v += 1.0;
        }
        let pert = conv(&x2, &k);
        assert_eq!(base[..=t0], pert[..=t0]);
    }
}

#[test]
fn mse_matmul_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let z = t.constant(Tensor::zeros(&[2]));
    let m = t.mse(a, z).unwrap();
    assert_eq!(t.value(m).item(), 2.5);
    let m0 = t.mse(a, a).unwrap();
    assert_eq!(t.value(m0).item(), 0.0);
    let mut r = rng(1);
    let av = rand_tensor(&[3, 4], -2.0, 2.0, &mut r);
    let i = t.constant(Tensor::eye(3));
    let am = t.constant(av.clone());
    let y = t.matmul(i, am).unwrap();
    assert_eq!(t.value(y), &av);
    let bad = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.mse(a, bad), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(matches!(t.matmul(a, am), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::from_vec(vec![0.5, -1.0, 2.0]));
    let mut t = Tape::new();
    let pv = t.params(&store);
    let s = t.sum(pv[x]);
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(x).data(), &[1.0, 1.0, 1.0]);

    // mse(w·x, y) against finite differences
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[3, 2], -2.0, 2.0, &mut r));
    let xin = rand_tensor(&[4, 3], -2.0, 2.0, &mut r);
    let yin = rand_tensor(&[4, 2], -2.0, 2.0, &mut r);
    let err = grad_check(&mut store, H, |t, pv| {
        let xv = t.constant(xin.clone());
        let yv = t.constant(yin.clone());
        let p = t.matmul(xv, pv[w]).unwrap();
        t.mse(p, yv).unwrap()
    });
    assert!(err < 1e-6, "{err}");

    // two backward passes without zeroing double the gradient
    store.zero_grad();
    let mut t = Tape::new();
    let pv = t.params(&store);
    let xv = t.constant(xin.clone());
    let yv = t.constant(yin.clone());
    let p = t.matmul(xv, pv[w]).unwrap();
    let loss = t.mse(p, yv).unwrap();
    t.backward(loss, &mut store).unwrap();
    let once = store.grad(w).clone();
    t.backward(loss, &mut store).unwrap();
    let twice = store.grad(w);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }

    let v = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.gradients(v), Err(AutodiffError::NonScalarLoss(_))));
    let mut ng = Tape::no_grad();
    let c = ng.constant(Tensor::scalar(1.0));
    assert_eq!(ng.gradients(c).err(), Some(AutodiffError::NotRecording));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut r = rng(5);
    let x = rand_tensor(&[2, 40, 8], -2.0, 2.0, &mut r);
    let w = rand_tensor(&[8, 8], -2.0, 2.0, &mut r);
    let run = || {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.matmul(xv, wv).unwrap();
        let z = t.silu(y);
        let s = t.sum(z);
        t.value(s).item().to_bits()
    };
    assert_eq!(run(), run());
}
