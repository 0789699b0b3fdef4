//! Raw numeric kernels behind the tape operations. Each works on flat
//! row-major slices; shape checking happens in the tape layer.

use crate::par::Exec;

/// Row-block size for the GEMM splits. Fixed so results never depend on
/// the worker count.
const ROW_BLOCK: usize = 64;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m, n] = x[m, k] · w[k, n]`.
pub fn matmul(exec: Exec, x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    exec.chunks_mut(&mut out, ROW_BLOCK * n, m * k * n, |blk, o| {
        let rows = o.len() / n;
        let x0 = blk * ROW_BLOCK * k;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                x[x0..].as_ptr(),
                k as isize,
                1,
                w.as_ptr(),
                n as isize,
                1,
                0.0,
                o.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

/// `gx[m, k] = g[m, n] · wᵀ`.
pub fn matmul_grad_x(exec: Exec, g: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut gx = vec![0.0; m * k];
    if k == 0 {
        return gx;
    }
    exec.chunks_mut(&mut gx, ROW_BLOCK * k, m * k * n, |blk, o| {
        let rows = o.len() / k;
        let g0 = blk * ROW_BLOCK * n;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                n,
                k,
                1.0,
                g[g0..].as_ptr(),
                n as isize,
                1,
                w.as_ptr(),
                1,
                n as isize,
                0.0,
                o.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    });
    gx
}

/// `gw[k, n] = xᵀ · g`, with `x: [m, k]`, `g: [m, n]`.
pub fn matmul_grad_w(exec: Exec, x: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut gw = vec![0.0; k * n];
    if n == 0 {
        return gw;
    }
    exec.chunks_mut(&mut gw, ROW_BLOCK * n, m * k * n, |blk, o| {
        let rows = o.len() / n;
        let k0 = blk * ROW_BLOCK;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                m,
                n,
                1.0,
                x[k0..].as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                n as isize,
                1,
                0.0,
                o.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    gw
}

/// Sums `g` over its leading repeats of a trailing block of length `inner`.
pub fn reduce_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for row in g.chunks(inner) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Layer normalisation over rows of length `c`. Returns `(y, xhat, rstd)`.
pub fn layer_norm(exec: Exec, x: &[f64], gain: &[f64], bias: &[f64], c: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    exec.chunks2_mut(&mut xhat, c, &mut rstd, 1, x.len() * 4, |r, xh, rs| {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rs[0] = s;
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    });
    let mut y = vec![0.0; x.len()];
    for (yr, xr) in y.chunks_mut(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            yr[j] = xr[j] * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(gx, ggain, gbias)`.
pub fn layer_norm_backward(
    exec: Exec,
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; g.len()];
    exec.chunks_mut(&mut gx, c, g.len() * 6, |r, out| {
        let gr = &g[r * c..(r + 1) * c];
        let xr = &xhat[r * c..(r + 1) * c];
        let mut mean_gy = 0.0;
        let mut mean_gyx = 0.0;
        for j in 0..c {
            let gy = gr[j] * gain[j];
            mean_gy += gy;
            mean_gyx += gy * xr[j];
        }
        mean_gy /= c as f64;
        mean_gyx /= c as f64;
        for j in 0..c {
            let gy = gr[j] * gain[j];
            out[j] = rstd[r] * (gy - mean_gy - xr[j] * mean_gyx);
        }
    });
    let mut ggain = vec![0.0; c];
    let mut gbias = vec![0.0; c];
    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            ggain[j] += gr[j] * xr[j];
            gbias[j] += gr[j];
        }
    }
    (gx, ggain, gbias)
}

/// Depthwise causal convolution along the token axis.
/// `x: [b, l, d]`, `kernel: [d, w]`, `bias: [d]`; tap `w-1` is the current token.
pub fn conv1d_causal(
    exec: Exec,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b: usize,
    l: usize,
    d: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * l * d];
    exec.chunks_mut(&mut out, l * d, b * l * d * w, |bi, o| {
        let xb = &x[bi * l * d..(bi + 1) * l * d];
        for t in 0..l {
            let orow = &mut o[t * d..(t + 1) * d];
            orow.copy_from_slice(bias);
            for j in 0..w {
                let src = t as isize - (w - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &xb[src as usize * d..(src as usize + 1) * d];
                for c in 0..d {
                    orow[c] += kernel[c * w + j] * xrow[c];
                }
            }
        }
    });
    out
}

/// Returns `(gx, gkernel, gbias)`.
pub fn conv1d_causal_backward(
    exec: Exec,
    g: &[f64],
    x: &[f64],
    kernel: &[f64],
    b: usize,
    l: usize,
    d: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; b * l * d];
    exec.chunks_mut(&mut gx, l * d, b * l * d * w, |bi, o| {
        let gb = &g[bi * l * d..(bi + 1) * l * d];
        for t in 0..l {
            let grow = &gb[t * d..(t + 1) * d];
            for j in 0..w {
                let src = t as isize - (w - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xo = &mut o[src as usize * d..(src as usize + 1) * d];
                for c in 0..d {
                    xo[c] += kernel[c * w + j] * grow[c];
                }
            }
        }
    });
    let mut gk = vec![0.0; d * w];
    let mut gbias = vec![0.0; d];
    for bi in 0..b {
        let xb = &x[bi * l * d..(bi + 1) * l * d];
        let gb = &g[bi * l * d..(bi + 1) * l * d];
        for t in 0..l {
            let grow = &gb[t * d..(t + 1) * d];
            for c in 0..d {
                gbias[c] += grow[c];
            }
            for j in 0..w {
                let src = t as isize - (w - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &xb[src as usize * d..(src as usize + 1) * d];
                for c in 0..d {
                    gk[c * w + j] += xrow[c] * grow[c];
                }
            }
        }
    }
    (gx, gk, gbias)
}
