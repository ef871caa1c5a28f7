//! Forward kernels shared by the tape and by the value-level API.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `A[m×k] · B[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
    }
    Ok(Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
}

/// `A[m×k] · B[n×k]ᵀ`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_t", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `Aᵀ[k×m] · B[m×n]` without materialising the transpose.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(m, None)
}

/// Row-wise softmax where `key_mask[j] == false` excludes column `j`
/// (it receives exactly zero weight, as if its logit were −∞).
pub fn softmax_rows_masked(m: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if let Some(mask) = key_mask {
        if mask.len() != cols {
            return Err(Error::shape("softmax_rows", format!("mask of {} for {cols} columns", mask.len())));
        }
        if !mask.iter().any(|&keep| keep) {
            return Err(Error::AllMasked);
        }
    }
    let keep = |j: usize| key_mask.is_none_or(|mask| mask[j]);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = m.row(i);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(m.shape().to_vec(), out))
}

/// Intermediates saved by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-row `gain ⊙ (x − mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(h: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(h, gain, bias, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_forward(
    h: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, d) = (h.rows(), h.cols());
    if d < 2 {
        return Err(Error::shape("layer_norm", format!("row width {d} < 2")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias of {}/{} for width {d}", gain.len(), bias.len()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("layer_norm"));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![0.0; rows * d];
    let mut normalized = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let row = h.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            normalized[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + b[j];
        }
    }
    Ok((
        Tensor::from_parts(h.shape().to_vec(), out),
        LayerNormCache { normalized, inv_std },
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
