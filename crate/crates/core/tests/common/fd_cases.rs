use mgdm::autodiff::{ParamId, ParamStore, ParamVars, Tape, Var};
use mgdm::ssm::{BbarRule, ScanKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, rand_tensor, rng, weighted_sum};

pub type Loss = Box<dyn Fn(&mut Tape, &ParamVars) -> Var>;
pub type Build = fn(&mut ParamStore, &mut ChaCha8Rng) -> Loss;

fn p(store: &mut ParamStore, name: &str, shape: &[usize], r: &mut impl Rng) -> ParamId {
    store.add(name, rand_tensor(shape, -2.0, 2.0, r))
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..3), r.random_range(1..6), r.random_range(1..5))
}

macro_rules! unary {
    ($method:ident) => {
        |s, r| {
            let (b, l, d) = dims(r);
            let x = p(s, "x", &[b, l, d], r);
            Box::new(move |t, pv| {
                let y = t.$method(pv[x]);
                weighted_sum(t, y)
            })
        }
    };
}

macro_rules! binary {
    ($method:ident) => {
        |s, r| {
            let (b, l, d) = dims(r);
            let a = p(s, "a", &[b, l, d], r);
            // rhs is either full-shape or broadcast over the leading axes
            let rhs_shape: Vec<usize> = match r.random_range(0..3) {
                0 => vec![b, l, d],
                1 => vec![l, d],
                _ => vec![d],
            };
            let c = p(s, "b", &rhs_shape, r);
            Box::new(move |t, pv| {
                let y = t.$method(pv[a], pv[c]).unwrap();
                weighted_sum(t, y)
            })
        }
    };
}

fn scale(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, d) = dims(r);
    let x = p(s, "x", &[b, l, d], r);
    let c = r.random_range(-2.0..2.0);
    Box::new(move |t, pv| {
        let y = t.scale(pv[x], c);
        weighted_sum(t, y)
    })
}

fn linear(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, k) = dims(r);
    let n = r.random_range(1..5);
    let x = p(s, "x", &[b, l, k], r);
    let w = p(s, "w", &[k, n], r);
    let bias = p(s, "bias", &[n], r);
    Box::new(move |t, pv| {
        let y = t.linear(pv[x], pv[w], Some(pv[bias])).unwrap();
        weighted_sum(t, y)
    })
}

fn mse(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, d) = dims(r);
    let x = p(s, "x", &[b, l, d], r);
    let y = p(s, "y", &[b, l, d], r);
    Box::new(move |t, pv| {
        let m = t.mse(pv[x], pv[y]).unwrap();
        let q = t.sum(pv[x]);
        let q = t.scale(q, 0.3);
        t.add(m, q).unwrap()
    })
}

fn masked_mse(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, d) = dims(r);
    let x = p(s, "x", &[b, l, d], r);
    let y = p(s, "y", &[b, l, d], r);
    let mask: Vec<f64> = (0..b * l * d)
        .map(|i| if i == 0 || r.random_bool(0.6) { 1.0 } else { 0.0 })
        .collect();
    Box::new(move |t, pv| t.masked_mse(pv[x], pv[y], &mask).unwrap())
}

fn layer_norm(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, _) = dims(r);
    // with two channels the input gradient is O(eps) and the central
    // difference is roundoff-dominated, so start at three
    let c = r.random_range(3..7);
    let x = p(s, "x", &[b, l, c], r);
    let g = p(s, "g", &[c], r);
    let bias = p(s, "bias", &[c], r);
    Box::new(move |t, pv| {
        let y = t.layer_norm(pv[x], pv[g], pv[bias]).unwrap();
        weighted_sum(t, y)
    })
}

fn conv1d(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, d) = dims(r);
    let w = r.random_range(1..5);
    let x = p(s, "x", &[b, l, d], r);
    let k = p(s, "k", &[d, w], r);
    let bias = p(s, "bias", &[d], r);
    Box::new(move |t, pv| {
        let y = t.conv1d_causal(pv[x], pv[k], pv[bias]).unwrap();
        weighted_sum(t, y)
    })
}

fn discretize(s: &mut ParamStore, r: &mut ChaCha8Rng, rule: BbarRule) -> Loss {
    let (b, l, d) = dims(r);
    let n = r.random_range(1..5);
    let delta = s.add("delta", rand_tensor(&[b, l, d], 0.05, 2.0, r));
    let a = s.add("a", rand_tensor(&[d, n], -2.0, -0.05, r));
    let bm = p(s, "b", &[b, l, n], r);
    Box::new(move |t, pv| {
        let abar = t.discretize_a(pv[delta], pv[a]).unwrap();
        let bbar = t.discretize_b(pv[delta], pv[a], pv[bm], rule).unwrap();
        let s1 = weighted_sum(t, abar);
        let s2 = weighted_sum(t, bbar);
        let s2 = t.scale(s2, 0.7);
        t.add(s1, s2).unwrap()
    })
}

fn scan(s: &mut ParamStore, r: &mut ChaCha8Rng, blocked: bool) -> Loss {
    let (b, l, d) = dims(r);
    let n = r.random_range(1..5);
    let kind = if blocked {
        ScanKind::Blocked {
            chunk: r.random_range(1..4),
        }
    } else {
        ScanKind::Naive
    };
    let abar = s.add("abar", rand_tensor(&[b, l, d, n], 0.05, 0.95, r));
    let bbar = p(s, "bbar", &[b, l, d, n], r);
    let c = p(s, "c", &[b, l, n], r);
    let x = p(s, "x", &[b, l, d], r);
    Box::new(move |t, pv| {
        let y = t.selective_scan(pv[abar], pv[bbar], pv[c], pv[x], kind).unwrap();
        weighted_sum(t, y)
    })
}

fn token_plumbing(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Loss {
    let (b, l, d) = dims(r);
    let parts: Vec<_> = (0..3).map(|i| p(s, &format!("p{i}"), &[b, l, d], r)).collect();
    let table = p(s, "table", &[7, d], r);
    let rows: Vec<usize> = (0..b * l).map(|_| r.random_range(0..7)).collect();
    let offset = r.random_range(0..3);
    Box::new(move |t, pv| {
        let vars: Vec<Var> = parts.iter().map(|id| pv[*id]).collect();
        let tokens = t.interleave(&vars).unwrap();
        let g = t.gather(pv[table], &rows, &[b, l]).unwrap();
        let picked = t.select_tokens(tokens, offset, 3).unwrap();
        let y = t.mul(picked, g).unwrap();
        weighted_sum(t, y)
    })
}

/// Every differentiable primitive with a random-instance generator.
pub const CASES: &[(&str, Build)] = &[
    ("exp", unary!(exp)),
    ("neg", unary!(neg)),
    ("silu", unary!(silu)),
    ("softplus", unary!(softplus)),
    ("tanh", unary!(tanh)),
    ("add", binary!(add)),
    ("sub", binary!(sub)),
    ("mul", binary!(mul)),
    ("scale", scale),
    ("linear", linear),
    ("mse", mse),
    ("masked_mse", masked_mse),
    ("layer_norm", layer_norm),
    ("conv1d_causal", conv1d),
    ("discretize_exact", |s, r| discretize(s, r, BbarRule::Exact)),
    ("discretize_simplified", |s, r| discretize(s, r, BbarRule::Simplified)),
    ("scan_naive", |s, r| scan(s, r, false)),
    ("scan_blocked", |s, r| scan(s, r, true)),
    ("interleave_select_gather", token_plumbing),
];

/// Worst relative error of `name` over `trials` random instances.
pub fn worst_error(name: &str, trials: u64, h: f64) -> f64 {
    let build = CASES.iter().find(|c| c.0 == name).expect("known case").1;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut r = rng(trial * 7919 + name.len() as u64);
        let mut store = ParamStore::new();
        let f = build(&mut store, &mut r);
        worst = worst.max(grad_check(&mut store, h, |t, pv| f(t, pv)));
    }
    worst
}
