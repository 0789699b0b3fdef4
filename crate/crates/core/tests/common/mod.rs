#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

pub mod fd_cases;

use mgdm::autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Contracts `y` against fixed pseudo-random weights so every output element
/// carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut r = rng(0xC0FFEE + shape.iter().product::<usize>() as u64);
    let w = rand_tensor(&shape, -1.0, 1.0, &mut r);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Tape, &ParamVars) -> Var,
{
    let mut tape = Tape::no_grad();
    let pv = tape.params(store);
    let loss = f(&mut tape, &pv);
    tape.value(loss).item()
}

/// Per-parameter `(name, relative error, gradient norm)` between the tape
/// gradient and central finite differences with step `h`.
pub fn grad_report<F>(store: &mut ParamStore, h: f64, f: F) -> Vec<(String, f64, f64)>
where
    F: Fn(&mut Tape, &ParamVars) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let pv = tape.params(store);
    let loss = f(&mut tape, &pv);
    tape.backward(loss, store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let analytic = store.grad(id).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store, &f);
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store, &f);
            store.value_mut(id).data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        out.push((
            store.get(id).name.clone(),
            rel_err(&analytic, &numeric),
            norm(&analytic),
        ));
    }
    out
}

/// Worst entry of [`grad_report`].
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamVars) -> Var,
{
    grad_report(store, h, f).into_iter().map(|r| r.1).fold(0.0, f64::max)
}

/// Fails with the offending parameter names when any error reaches `tol`.
pub fn assert_grads(report: &[(String, f64, f64)], tol: f64) {
    let bad: Vec<_> = report.iter().filter(|r| !(r.1 < tol)).collect();
    assert!(bad.is_empty(), "gradient mismatch above {tol:e}: {bad:?}");
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Plain-loop LayerNorm over rows of width `c`.
pub fn ref_layer_norm(x: &[f64], gain: &[f64], bias: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * r * gain[j] + bias[j]));
    }
    out
}

/// Plain-loop causal depthwise conv, `x: [B, L, D]`, `k: [D, W]`.
pub fn ref_conv(x: &[f64], k: &[f64], bias: &[f64], b: usize, l: usize, d: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        for t in 0..l {
            for c in 0..d {
                let mut acc = bias[c];
                for j in 0..w {
                    // tap w-1 is the current token
                    let src = t as isize - (w - 1 - j) as isize;
                    if src >= 0 {
                        acc += k[c * w + j] * x[(bi * l + src as usize) * d + c];
                    }
                }
                out[(bi * l + t) * d + c] = acc;
            }
        }
    }
    out
}

pub fn ref_matmul(x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    let m = x.len() / k;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| x[i * k + p] * w[p * n + j]).sum();
        }
    }
    out
}

/// Reference selective SSM on plain slices. Weights follow the library layout.
pub struct RefSsm<'a> {
    pub a_log: &'a [f64],
    pub w_b: &'a [f64],
    pub w_c: &'a [f64],
    pub w_dt_down: &'a [f64],
    pub w_dt_up: &'a [f64],
    pub dt_bias: &'a [f64],
    pub d_skip: Option<&'a [f64]>,
    pub n: usize,
    pub r: usize,
    pub exact: bool,
}

impl RefSsm<'_> {
    pub fn forward(&self, h: &[f64], b: usize, l: usize, d: usize) -> Vec<f64> {
        let n = self.n;
        let low = ref_matmul(h, self.w_dt_down, d, self.r);
        let up = ref_matmul(&low, self.w_dt_up, self.r, d);
        let bm = ref_matmul(h, self.w_b, d, n);
        let cm = ref_matmul(h, self.w_c, d, n);
        let mut y = vec![0.0; b * l * d];
        for bi in 0..b {
            let mut state = vec![0.0; d * n];
            for t in 0..l {
                let row = bi * l + t;
                for c in 0..d {
                    let delta = softplus(up[row * d + c] + self.dt_bias[c]);
                    let x = h[row * d + c];
                    let mut acc = 0.0;
                    for k in 0..n {
                        let a = -self.a_log[c * n + k].exp();
                        let u = delta * a;
                        let bbar = if self.exact {
                            let f = if u.abs() < 1e-4 {
                                1.0 + u / 2.0 + u * u / 6.0
                            } else {
                                u.exp_m1() / u
                            };
                            delta * bm[row * n + k] * f
                        } else {
                            delta * bm[row * n + k]
                        };
                        let s = &mut state[c * n + k];
                        *s = u.exp() * *s + bbar * x;
                        acc += cm[row * n + k] * *s;
                    }
                    if let Some(ds) = self.d_skip {
                        acc += ds[c] * x;
                    }
                    y[row * d + c] = acc;
                }
            }
        }
        y
    }
}

use mgdm::data::ModelInput;
use mgdm::policy::{ModelConfig, Policy};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        state_dim: 3,
        action_dim: 2,
        embed_dim: 8,
        n_layers: 2,
        ssm_state: 4,
        context_len: 2,
        max_timestep: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Random model input with the first `pad` steps of row 0 padded.
pub fn random_input(cfg: &ModelConfig, batch: usize, pad: usize, seed: u64) -> ModelInput {
    let mut r = rng(seed);
    let l = cfg.context_len;
    let n = batch * l;
    let mut input = ModelInput {
        batch,
        len: l,
        state_dim: cfg.state_dim,
        action_dim: cfg.action_dim,
        states: rand_tensor(&[n * cfg.state_dim], -2.0, 2.0, &mut r).into_data(),
        actions: rand_tensor(&[n * cfg.action_dim], -1.0, 1.0, &mut r).into_data(),
        rtgs: rand_tensor(&[n], -3.0, 0.0, &mut r).into_data(),
        timesteps: (0..n).map(|i| (i % l) + 3).collect(),
        pad: (0..n).map(|i| i < pad).collect(),
    };
    for i in 0..pad {
        input.timesteps[i] = 0;
    }
    input
}

/// Policy whose heads and SSM projections are redrawn to O(1) so every
/// parameter carries a resolvable gradient.
pub fn conditioned_policy(cfg: ModelConfig, seed: u64) -> (Policy, ParamStore) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let policy = Policy::new(cfg, &mut store, &mut r).unwrap();
    let p = &policy.params;
    let mut ids = vec![p.head_action.weight, p.head_rtg.weight, p.head_state.weight];
    for blk in &p.blocks {
        for s in [&blk.cg.ssm, &blk.fg.ssm] {
            ids.extend([s.w_b, s.w_c, s.w_dt_down, s.w_dt_up, s.dt_bias]);
        }
    }
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = rand_tensor(&shape, -1.0, 1.0, &mut r);
    }
    (policy, store)
}

use mgdm::config::RunConfig;
use mgdm::data::{anchors, gen_dataset, Behavior, Dataset, DatasetStats, EnvKind, ToyEnv};

/// Small point-mass medium dataset with its stats.
pub fn point_mass_data(episodes: usize, seed: u64) -> (Dataset, DatasetStats) {
    let env = ToyEnv::new(EnvKind::PointMass2d);
    let ds = gen_dataset(&env, Behavior::Medium, episodes, seed, env.default_medium_sigma()).unwrap();
    let an = anchors(&env, 20, seed).unwrap();
    let stats = DatasetStats::compute(&ds, 10.0, an.expert_score, an.random_score);
    (ds, stats)
}

/// A run small enough to train in well under a second.
pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.embed_dim = 8;
    cfg.model.n_layers = 1;
    cfg.model.ssm_state = 4;
    cfg.model.context_len = 4;
    cfg.model.max_timestep = 64;
    cfg.model.dropout = 0.1;
    cfg.train.steps = 12;
    cfg.train.batch_size = 4;
    cfg.train.checkpoint_every = 5;
    cfg.pser.refresh_every = 3;
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup_steps = 4;
    cfg
}

/// Worst forward and gradient gaps between the naive and blocked scans over
/// `instances` random problems with `L ≤ 256`.
pub fn scan_equivalence(instances: usize, seed: u64) -> (f64, f64) {
    use mgdm::ssm::ScanKind;
    let mut r = rng(seed);
    let (mut worst_fwd, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let b = r.random_range(1..3);
        let l = r.random_range(1..257);
        let d = r.random_range(1..4);
        let n = r.random_range(1..5);
        let chunk = r.random_range(1..65);
        let inputs = [
            rand_tensor(&[b, l, d, n], 0.0, 1.0, &mut r),
            rand_tensor(&[b, l, d, n], -1.0, 1.0, &mut r),
            rand_tensor(&[b, l, n], -1.0, 1.0, &mut r),
            rand_tensor(&[b, l, d], -2.0, 2.0, &mut r),
        ];
        let run = |kind| {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = t.selective_scan(v[0], v[1], v[2], v[3], kind).unwrap();
            let s = t.sum(y);
            let g = t.gradients(s).unwrap();
            let grads: Vec<Vec<f64>> = v.iter().map(|x| g.get(*x).unwrap().to_vec()).collect();
            (t.value(y).clone(), grads)
        };
        let (y0, g0) = run(ScanKind::Naive);
        let (y1, g1) = run(ScanKind::Blocked { chunk });
        worst_fwd = worst_fwd.max(y0.max_abs_diff(&y1));
        for (a, c) in g0.iter().zip(&g1) {
            for (p, q) in a.iter().zip(c) {
                worst_grad = worst_grad.max((p - q).abs());
            }
        }
    }
    (worst_fwd, worst_grad)
}
