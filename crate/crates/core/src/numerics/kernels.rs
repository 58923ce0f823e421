//! Forward and backward kernels shared by the differentiable graph and the
//! incremental decoder.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Strided `c = alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `c (+)= a·b`, `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, beta, c, n, 1);
}

/// `c (+)= aᵀ·b`, `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, 1.0, a, 1, m, b, n, 1, beta, c, n, 1);
}

/// `c (+)= a·bᵀ`, `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, 1.0, a, k, 1, b, 1, k, beta, c, n, 1);
}

/// Numerically stable log-softmax of one vector.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("log_softmax", "non-finite input"));
    }
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalization. Returns per-row `(mean, rstd)`.
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let or = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            or[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f64],
    gain: &[f64],
    means: &[f64],
    rstds: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    d: usize,
) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let (mean, rstd) = (means[r], rstds[r]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat[i];
            dbias[i] += dyr[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Full-sequence causal multi-head attention.
///
/// `q`, `k`, `v`, `out` are `t×d`. Returns the attention probabilities laid out
/// as `heads×t×t` (entries above the diagonal are zero).
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], out: &mut [f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        // scores = scale · Q_h K_hᵀ
        gemm(t, dh, t, scale, &q[h * dh..], d, 1, &k[h * dh..], 1, d, 0.0, p, t, 1);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        // out_h = P V_h
        gemm(t, t, dh, 1.0, p, t, 1, &v[h * dh..], d, 1, 0.0, &mut out[h * dh..], d, 1);
    }
    probs
}

/// Accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dP = dOut_h V_hᵀ
        gemm(t, dh, t, 1.0, &dout[h * dh..], d, 1, &v[h * dh..], 1, d, 0.0, &mut dp, t, 1);
        // dV_h += Pᵀ dOut_h
        gemm(t, t, dh, 1.0, p, 1, t, &dout[h * dh..], d, 1, 1.0, &mut dv[h * dh..], d, 1);
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut dp[i * t..(i + 1) * t];
            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - dot);
            }
            dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        // dQ_h += scale · dS K_h ; dK_h += scale · dSᵀ Q_h
        gemm(t, t, dh, scale, &dp, t, 1, &k[h * dh..], d, 1, 1.0, &mut dq[h * dh..], d, 1);
        gemm(t, t, dh, scale, &dp, 1, t, &q[h * dh..], d, 1, 1.0, &mut dk[h * dh..], d, 1);
    }
}

/// Attention output for a single query row against `len` cached keys/values.
pub fn attention_row(q: &[f64], k_cache: &[f64], v_cache: &[f64], len: usize, d: usize, heads: usize, out: &mut [f64]) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &k_cache[j * d + h * dh..j * d + (h + 1) * dh];
            *s = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|x| *x = 0.0);
        for (j, &p) in scores.iter().enumerate() {
            let vh = &v_cache[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, x) in oh.iter_mut().zip(vh) {
                *o += p * x;
            }
        }
    }
}
