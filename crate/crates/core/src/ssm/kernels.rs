//! Flat-slice kernels for discretisation and the selective scan.
//!
//! State tensors are laid out `[B, L, D, N]`; `Δ` and `x` are `[B, L, D]`;
//! the input-dependent `B` and `C` are `[B, L, N]`; `A` is `[D, N]`.

use super::{BbarRule, SsmDims};
use crate::par::Exec;

/// Below this |ΔA| the exact ZOH factor `(e^u - 1)/u` switches to its Taylor expansion.
pub const ZOH_TAYLOR_THRESHOLD: f64 = 1e-4;

/// `(e^u - 1) / u`, the ZOH input factor.
#[inline]
pub fn zoh_factor(u: f64) -> f64 {
    if u.abs() < ZOH_TAYLOR_THRESHOLD {
        1.0 + u / 2.0 + u * u / 6.0
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`zoh_factor`].
#[inline]
pub fn zoh_factor_deriv(u: f64) -> f64 {
    zoh_pair(u).1
}

/// `(φ(u), φ'(u))` for the ZOH factor, sharing one `expm1` evaluation.
#[inline]
pub fn zoh_pair(u: f64) -> (f64, f64) {
    if u.abs() < ZOH_TAYLOR_THRESHOLD {
        (1.0 + u / 2.0 + u * u / 6.0, 0.5 + u / 3.0)
    } else if u.abs() < 0.1 {
        // (e^u - φ)/u cancels badly here, so φ' comes from sum_{k>=1} k u^{k-1} / (k+1)!
        let mut term_fact = 2.0;
        let mut pow = 1.0;
        let mut acc = 0.0;
        for k in 1..=12 {
            acc += k as f64 * pow / term_fact;
            pow *= u;
            term_fact *= (k + 2) as f64;
        }
        (u.exp_m1() / u, acc)
    } else {
        let em1 = u.exp_m1();
        let phi = em1 / u;
        (phi, (em1 + 1.0 - phi) / u)
    }
}

pub fn discretize_a(exec: Exec, delta: &[f64], a: &[f64], dims: SsmDims) -> Vec<f64> {
    let SsmDims { l, d, n, .. } = dims;
    let mut out = vec![0.0; dims.state_len()];
    exec.chunks_mut(&mut out, l * d * n, dims.state_len() * 8, |bi, o| {
        for t in 0..l {
            for c in 0..d {
                let dt = delta[(bi * l + t) * d + c];
                let row = &mut o[(t * d + c) * n..(t * d + c + 1) * n];
                for (s, v) in row.iter_mut().enumerate() {
                    *v = (dt * a[c * n + s]).exp();
                }
            }
        }
    });
    out
}

/// Returns `(gΔ, gA)`.
pub fn discretize_a_backward(
    exec: Exec,
    g: &[f64],
    abar: &[f64],
    delta: &[f64],
    a: &[f64],
    dims: SsmDims,
) -> (Vec<f64>, Vec<f64>) {
    let SsmDims { b, l, d, n } = dims;
    // one (gΔ, partial gA) pair per batch row, partials summed in row order
    let parts = exec.map(b, |bi| {
        let mut gd = vec![0.0; l * d];
        let mut ga = vec![0.0; d * n];
        for t in 0..l {
            let row = bi * l + t;
            for c in 0..d {
                let dt = delta[row * d + c];
                let base = (row * d + c) * n;
                let mut acc = 0.0;
                for s in 0..n {
                    let ge = g[base + s] * abar[base + s];
                    acc += ge * a[c * n + s];
                    ga[c * n + s] += ge * dt;
                }
                gd[t * d + c] = acc;
            }
        }
        (gd, ga)
    });
    merge_parts(parts, d * n)
}

fn merge_parts(parts: Vec<(Vec<f64>, Vec<f64>)>, shared_len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = Vec::with_capacity(parts.iter().map(|p| p.0.len()).sum());
    let mut shared = vec![0.0; shared_len];
    for (r, s) in parts {
        rows.extend_from_slice(&r);
        for (acc, v) in shared.iter_mut().zip(&s) {
            *acc += v;
        }
    }
    (rows, shared)
}

pub fn discretize_b(exec: Exec, delta: &[f64], a: &[f64], bmat: &[f64], dims: SsmDims, rule: BbarRule) -> Vec<f64> {
    let SsmDims { l, d, n, .. } = dims;
    let mut out = vec![0.0; dims.state_len()];
    exec.chunks_mut(&mut out, l * d * n, dims.state_len() * 8, |bi, o| {
        for t in 0..l {
            let brow = &bmat[(bi * l + t) * n..(bi * l + t + 1) * n];
            for c in 0..d {
                let dt = delta[(bi * l + t) * d + c];
                let row = &mut o[(t * d + c) * n..(t * d + c + 1) * n];
                for s in 0..n {
                    row[s] = match rule {
                        BbarRule::Exact => dt * brow[s] * zoh_factor(dt * a[c * n + s]),
                        BbarRule::Simplified => dt * brow[s],
                    };
                }
            }
        }
    });
    out
}

/// Returns `(gΔ, gA, gB)`.
pub fn discretize_b_backward(
    exec: Exec,
    g: &[f64],
    delta: &[f64],
    a: &[f64],
    bmat: &[f64],
    dims: SsmDims,
    rule: BbarRule,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let SsmDims { b, l, d, n } = dims;
    let parts = exec.map(b, |bi| {
        let mut gd = vec![0.0; l * d];
        let mut gb = vec![0.0; l * n];
        let mut ga = vec![0.0; d * n];
        for t in 0..l {
            let row = bi * l + t;
            let brow = &bmat[row * n..(row + 1) * n];
            let gbrow = &mut gb[t * n..(t + 1) * n];
            for c in 0..d {
                let dt = delta[row * d + c];
                let base = (row * d + c) * n;
                let mut acc = 0.0;
                for s in 0..n {
                    let gs = g[base + s];
                    match rule {
                        BbarRule::Exact => {
                            let u = dt * a[c * n + s];
                            let (phi, dphi) = zoh_pair(u);
                            acc += gs * brow[s] * (phi + u * dphi);
                            gbrow[s] += gs * dt * phi;
                            ga[c * n + s] += gs * brow[s] * dt * dt * dphi;
                        }
                        BbarRule::Simplified => {
                            acc += gs * brow[s];
                            gbrow[s] += gs * dt;
                        }
                    }
                }
                gd[t * d + c] = acc;
            }
        }
        (gd, gb, ga)
    });
    let mut gd = Vec::with_capacity(b * l * d);
    let mut gb = Vec::with_capacity(b * l * n);
    let mut ga = vec![0.0; d * n];
    for (pd, pb, pa) in parts {
        gd.extend_from_slice(&pd);
        gb.extend_from_slice(&pb);
        for (acc, v) in ga.iter_mut().zip(&pa) {
            *acc += v;
        }
    }
    (gd, ga, gb)
}

/// Hidden states of the recurrence evaluated strictly in token order.
pub fn scan_states_naive(exec: Exec, abar: &[f64], bbar: &[f64], x: &[f64], dims: SsmDims) -> Vec<f64> {
    let SsmDims { l, d, n, .. } = dims;
    let mut states = vec![0.0; dims.state_len()];
    let slab = l * d * n;
    exec.chunks_mut(&mut states, slab, dims.state_len() * 2, |bi, h| {
        let off = bi * slab;
        for t in 0..l {
            for c in 0..d {
                let xv = x[(bi * l + t) * d + c];
                let cur = (t * d + c) * n;
                for s in 0..n {
                    let prev = if t == 0 { 0.0 } else { h[cur - d * n + s] };
                    h[cur + s] = abar[off + cur + s] * prev + bbar[off + cur + s] * xv;
                }
            }
        }
    });
    states
}

fn chunk_bounds(l: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..l.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(l)))
        .collect()
}

/// Splits a `[B, L, inner]` buffer into one mutable slab per `(batch, chunk)`.
fn split_slabs<'a>(buf: &'a mut [f64], bounds: &[(usize, usize)], l: usize, inner: usize) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for batch in buf.chunks_mut(l * inner) {
        let mut rest = batch;
        for (t0, t1) in bounds {
            let (head, tail) = rest.split_at_mut((t1 - t0) * inner);
            out.push(head);
            rest = tail;
        }
    }
    out
}

/// Same recurrence as [`scan_states_naive`], computed by chunked associative
/// composition: each chunk scans from a zero state and records the product
/// of its transition factors; chunk carries are then composed in order and
/// folded back in.
pub fn scan_states_blocked(exec: Exec, abar: &[f64], bbar: &[f64], x: &[f64], dims: SsmDims, chunk: usize) -> Vec<f64> {
    let SsmDims { b, l, d, n } = dims;
    let dn = d * n;
    let bounds = chunk_bounds(l, chunk);
    let nc = bounds.len();
    let mut states = vec![0.0; dims.state_len()];
    let mut prods = vec![0.0; b * nc * dn];

    // Phase 1: independent local scans.
    {
        let mut slabs: Vec<(&mut [f64], &mut [f64])> = split_slabs(&mut states, &bounds, l, dn)
            .into_iter()
            .zip(prods.chunks_mut(dn))
            .collect();
        exec.for_each_mut(&mut slabs, dims.state_len() * 3, |i, (h, p)| {
            let (bi, ci) = (i / nc, i % nc);
            let (t0, t1) = bounds[ci];
            p.iter_mut().for_each(|v| *v = 1.0);
            for t in t0..t1 {
                let lt = t - t0;
                for c in 0..d {
                    let xv = x[(bi * l + t) * d + c];
                    let g = ((bi * l + t) * d + c) * n;
                    let cur = (lt * d + c) * n;
                    for s in 0..n {
                        let prev = if lt == 0 { 0.0 } else { h[cur - dn + s] };
                        h[cur + s] = abar[g + s] * prev + bbar[g + s] * xv;
                        p[c * n + s] *= abar[g + s];
                    }
                }
            }
        });
    }

    // Phase 2: compose chunk carries in order.
    let mut carries = vec![0.0; b * nc * dn];
    for bi in 0..b {
        for ci in 1..nc {
            let (_, prev_end) = bounds[ci - 1];
            let end_state = ((bi * l + prev_end - 1) * d) * n;
            for k in 0..dn {
                let prev_carry = carries[(bi * nc + ci - 1) * dn + k];
                carries[(bi * nc + ci) * dn + k] =
                    prods[(bi * nc + ci - 1) * dn + k] * prev_carry + states[end_state + k];
            }
        }
    }

    // Phase 3: fold carries into every position.
    {
        let mut slabs = split_slabs(&mut states, &bounds, l, dn);
        exec.for_each_mut(&mut slabs, dims.state_len() * 2, |i, h| {
            let (bi, ci) = (i / nc, i % nc);
            if ci == 0 {
                return;
            }
            let (t0, t1) = bounds[ci];
            let carry = &carries[(bi * nc + ci) * dn..(bi * nc + ci + 1) * dn];
            let mut run = vec![1.0; dn];
            for t in t0..t1 {
                let g = (bi * l + t) * dn;
                let cur = (t - t0) * dn;
                for k in 0..dn {
                    run[k] *= abar[g + k];
                    h[cur + k] += run[k] * carry[k];
                }
            }
        });
    }
    states
}

/// `y[b, t, d] = Σ_n C[b, t, n] · h[b, t, d, n]`.
pub fn scan_output(exec: Exec, states: &[f64], c: &[f64], dims: SsmDims) -> Vec<f64> {
    let SsmDims { b, l, d, n } = dims;
    let mut y = vec![0.0; b * l * d];
    exec.chunks_mut(&mut y, d, dims.state_len(), |row, o| {
        let crow = &c[row * n..(row + 1) * n];
        for ch in 0..d {
            let h = &states[(row * d + ch) * n..(row * d + ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                acc += crow[s] * h[s];
            }
            o[ch] = acc;
        }
    });
    y
}

/// `gC[b, t, n] = Σ_d gy[b, t, d] · h[b, t, d, n]`.
pub fn scan_output_grad_c(exec: Exec, gy: &[f64], states: &[f64], dims: SsmDims) -> Vec<f64> {
    let SsmDims { b, l, d, n } = dims;
    let mut gc = vec![0.0; b * l * n];
    exec.chunks_mut(&mut gc, n, dims.state_len(), |row, o| {
        for ch in 0..d {
            let gv = gy[row * d + ch];
            let h = &states[(row * d + ch) * n..(row * d + ch + 1) * n];
            for s in 0..n {
                o[s] += gv * h[s];
            }
        }
    });
    gc
}

/// Adjoint states `λ_t = C_t gy_t + Ā_{t+1} λ_{t+1}`, evaluated in reverse token order.
pub fn adjoint_naive(exec: Exec, gy: &[f64], abar: &[f64], c: &[f64], dims: SsmDims) -> Vec<f64> {
    let SsmDims { l, d, n, .. } = dims;
    let slab = l * d * n;
    let mut lam = vec![0.0; dims.state_len()];
    exec.chunks_mut(&mut lam, slab, dims.state_len() * 2, |bi, o| {
        let off = bi * slab;
        for t in (0..l).rev() {
            let crow = &c[(bi * l + t) * n..(bi * l + t + 1) * n];
            for ch in 0..d {
                let gv = gy[(bi * l + t) * d + ch];
                let cur = (t * d + ch) * n;
                for s in 0..n {
                    let next = if t + 1 == l {
                        0.0
                    } else {
                        abar[off + cur + d * n + s] * o[cur + d * n + s]
                    };
                    o[cur + s] = crow[s] * gv + next;
                }
            }
        }
    });
    lam
}

/// Blocked counterpart of [`adjoint_naive`] using the same chunked composition
/// as [`scan_states_blocked`], run right to left.
pub fn adjoint_blocked(exec: Exec, gy: &[f64], abar: &[f64], c: &[f64], dims: SsmDims, chunk: usize) -> Vec<f64> {
    let SsmDims { b, l, d, n } = dims;
    let dn = d * n;
    let bounds = chunk_bounds(l, chunk);
    let nc = bounds.len();
    let mut lam = vec![0.0; dims.state_len()];
    // Π of Ā over (t0, t1) exclusive of the chunk's first position.
    let mut head_prods = vec![0.0; b * nc * dn];

    {
        let mut slabs: Vec<(&mut [f64], &mut [f64])> = split_slabs(&mut lam, &bounds, l, dn)
            .into_iter()
            .zip(head_prods.chunks_mut(dn))
            .collect();
        exec.for_each_mut(&mut slabs, dims.state_len() * 3, |i, (mu, q)| {
            let (bi, ci) = (i / nc, i % nc);
            let (t0, t1) = bounds[ci];
            q.iter_mut().for_each(|v| *v = 1.0);
            for t in (t0..t1).rev() {
                let lt = t - t0;
                let crow = &c[(bi * l + t) * n..(bi * l + t + 1) * n];
                for ch in 0..d {
                    let gv = gy[(bi * l + t) * d + ch];
                    let cur = (lt * d + ch) * n;
                    let gnext = ((bi * l + t + 1) * d + ch) * n;
                    for s in 0..n {
                        let next = if t + 1 == t1 {
                            0.0
                        } else {
                            abar[gnext + s] * mu[cur + dn + s]
                        };
                        mu[cur + s] = crow[s] * gv + next;
                        if t > t0 {
                            q[ch * n + s] *= abar[((bi * l + t) * d + ch) * n + s];
                        }
                    }
                }
            }
        });
    }

    // Incoming carry κ for each chunk, composed right to left.
    let mut carries = vec![0.0; b * nc * dn];
    for bi in 0..b {
        for ci in (1..nc).rev() {
            let (t0, _) = bounds[ci];
            let start = ((bi * l + t0) * d) * n;
            for k in 0..dn {
                let kappa = carries[(bi * nc + ci) * dn + k];
                let lam_start = lam[start + k] + head_prods[(bi * nc + ci) * dn + k] * kappa;
                carries[(bi * nc + ci - 1) * dn + k] = abar[start + k] * lam_start;
            }
        }
    }

    {
        let mut slabs = split_slabs(&mut lam, &bounds, l, dn);
        exec.for_each_mut(&mut slabs, dims.state_len() * 2, |i, mu| {
            let (bi, ci) = (i / nc, i % nc);
            if ci + 1 == nc {
                return;
            }
            let (t0, t1) = bounds[ci];
            let kappa = &carries[(bi * nc + ci) * dn..(bi * nc + ci + 1) * dn];
            let mut run = vec![1.0; dn];
            for t in (t0..t1).rev() {
                let cur = (t - t0) * dn;
                let g = (bi * l + t) * dn;
                for k in 0..dn {
                    mu[cur + k] += run[k] * kappa[k];
                    run[k] *= abar[g + k];
                }
            }
        });
    }
    lam
}

/// From adjoint states, returns `(gĀ, gB̄, gx)`.
pub fn scan_param_grads(
    exec: Exec,
    lam: &[f64],
    states: &[f64],
    bbar: &[f64],
    x: &[f64],
    dims: SsmDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let SsmDims { b, l, d, n } = dims;
    let dn = d * n;
    let mut ga = vec![0.0; dims.state_len()];
    let mut gb = vec![0.0; dims.state_len()];
    exec.chunks2_mut(&mut ga, dn, &mut gb, dn, dims.state_len() * 2, |row, oa, ob| {
        let t = row % l;
        let base = row * dn;
        for ch in 0..d {
            let xv = x[row * d + ch];
            for s in 0..n {
                let k = ch * n + s;
                let lm = lam[base + k];
                oa[k] = if t == 0 { 0.0 } else { lm * states[base - dn + k] };
                ob[k] = lm * xv;
            }
        }
    });
    let mut gx = vec![0.0; b * l * d];
    exec.chunks_mut(&mut gx, d, dims.state_len(), |row, o| {
        for (ch, out) in o.iter_mut().enumerate() {
            let base = (row * d + ch) * n;
            let mut acc = 0.0;
            for s in 0..n {
                acc += lam[base + s] * bbar[base + s];
            }
            *out = acc;
        }
    });
    (ga, gb, gx)
}
