use crate::error::{Result, SemiseError};
use crate::ndcore::{dot, DenseArray};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

fn matrix_dims(a: &DenseArray, op: &'static str, other: &DenseArray) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(SemiseError::dimension(op, a.shape(), other.shape()));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = matrix_dims(a, "matmul", b)?;
    let (k2, n) = matrix_dims(b, "matmul", a)?;
    if k != k2 {
        return Err(SemiseError::dimension("matmul", a.shape(), b.shape()));
    }
    let mut out = DenseArray::zeros(&[m, n]);
    gemm_nn(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Gradients of `sum(grad_out ⊙ (a·b))` w.r.t. `a` and `b`.
pub fn matmul_backward(
    a: &DenseArray,
    b: &DenseArray,
    grad_out: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    let (m, k) = matrix_dims(a, "matmul_backward", b)?;
    let (k2, n) = matrix_dims(b, "matmul_backward", a)?;
    if k != k2 || grad_out.shape() != [m, n] {
        return Err(SemiseError::dimension("matmul_backward", a.shape(), b.shape()));
    }
    let mut ga = DenseArray::zeros(&[m, k]);
    gemm_nt(grad_out.data(), b.data(), ga.data_mut(), m, n, k);
    let mut gb = DenseArray::zeros(&[k, n]);
    gemm_tn(a.data(), grad_out.data(), gb.data_mut(), k, m, n);
    Ok((ga, gb))
}

fn checked_norm_sq(v: &[f64], index: usize) -> Result<f64> {
    let s = dot(v, v);
    if !s.is_finite() {
        return Err(SemiseError::NonFinite("cosine_distance"));
    }
    if s == 0.0 {
        return Err(SemiseError::degenerate("cosine_distance", index));
    }
    Ok(s)
}

/// Cosine similarity; exact 1 for `u == v` and symmetric in its arguments.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SemiseError::dimension("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let nu = checked_norm_sq(u, 0)?;
    let nv = checked_norm_sq(v, 1)?;
    // sqrt(fl(s*s)) == s, so identical inputs give exactly 1.
    Ok((dot(u, v) / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// `1 − cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(u, v)?)
}

/// Gradients of `upstream · cos(u, v)` w.r.t. `u` and `v`.
pub fn cosine_similarity_backward(u: &[f64], v: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(SemiseError::dimension("cosine_similarity_backward", &[u.len()], &[v.len()]));
    }
    let nu2 = checked_norm_sq(u, 0)?;
    let nv2 = checked_norm_sq(v, 1)?;
    let inv = 1.0 / (nu2 * nv2).sqrt();
    let c = dot(u, v) * inv;
    let gu = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| upstream * (vi * inv - c * ui / nu2))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| upstream * (ui * inv - c * vi / nv2))
        .collect();
    Ok((gu, gv))
}

/// Gradients of `upstream · d_cos(u, v)` w.r.t. `u` and `v`.
pub fn cosine_distance_backward(u: &[f64], v: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    cosine_similarity_backward(u, v, -upstream)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(SemiseError::dimension("softmax", &[0], &[1]));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SemiseError::NonFinite("softmax"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Vector-Jacobian product of softmax: `s ⊙ (g − s·g)`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let sg = dot(probs, upstream);
    probs.iter().zip(upstream).map(|(s, g)| s * (g - sg)).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}
