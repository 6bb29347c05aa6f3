//! Forward kernels shared by the autodiff tape and the inference paths.
//!
//! Every kernel reduces in a fixed sequential order, so identical inputs give
//! bit-identical outputs regardless of how callers schedule work.

use super::tensor::{dot, norm, Tensor2};
use crate::error::{CprError, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols() != b.rows() {
        return Err(CprError::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2::zeros(n, m);
    let bd = b.data();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols() != b.cols() {
        return Err(CprError::shape(format!("matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let mut out = Tensor2::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(arow, b.row(j)));
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a: k×n`, `b: k×m`.
pub fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.rows() != b.rows() {
        return Err(CprError::shape(format!("matmul_tn {:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let (n, m) = (a.cols(), b.cols());
    let mut out = Tensor2::zeros(n, m);
    for p in 0..a.rows() {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Softmax of one row of logits scaled by `1/temperature`, written into `out`.
pub fn softmax_slice(row: &[f64], inv_temp: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * inv_temp));
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x * inv_temp - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax_rows(m: &Tensor2, temperature: f64) -> Result<Tensor2> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CprError::config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    Ok(softmax_rows_scaled(m, 1.0 / temperature))
}

pub(crate) fn softmax_rows_scaled(m: &Tensor2, inv_temp: f64) -> Tensor2 {
    let mut out = Tensor2::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_slice(m.row(i), inv_temp, out.row_mut(i));
    }
    out
}

/// Log-sum-exp of `row / temperature`, max-shifted.
pub fn log_sum_exp(row: &[f64], inv_temp: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * inv_temp));
    let s: f64 = row.iter().map(|&x| (x * inv_temp - max).exp()).sum();
    max + s.ln()
}

/// Per-row statistics of a layer norm, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct NormStats {
    pub mean: f64,
    pub inv_std: f64,
}

pub fn layer_norm_slice(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) -> NormStats {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = g * (v - mean) * inv_std + b;
    }
    NormStats { mean, inv_std }
}

/// Layer normalization of a single row with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(CprError::shape(format!(
            "layer_norm: x has length {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(CprError::config(format!("layer_norm eps must be positive, got {eps}")));
    }
    if x.is_empty() {
        return Err(CprError::shape("layer_norm of an empty row"));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_slice(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// Single-head scaled dot-product attention of one query over `keys`/`values`.
pub fn attention(query: &[f64], keys: &Tensor2, values: &Tensor2) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return Err(CprError::EmptyPrototypes("attention over zero keys"));
    }
    if keys.rows() != values.rows() {
        return Err(CprError::shape(format!(
            "attention: {} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if query.len() != keys.cols() {
        return Err(CprError::shape(format!(
            "attention: query length {} vs key width {}",
            query.len(),
            keys.cols()
        )));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter_rows().map(|k| dot(query, k)).collect();
    let mut weights = vec![0.0; scores.len()];
    softmax_slice(&scores, scale, &mut weights);
    let mut out = vec![0.0; values.cols()];
    for (w, v) in weights.iter().zip(values.iter_rows()) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// L2-normalizes every row. Zero rows are reported as degenerate.
pub fn normalize_rows(m: &Tensor2) -> Result<Tensor2> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(CprError::Degenerate(format!("row {i} has norm {n}")));
        }
        for x in out.row_mut(i) {
            *x /= n;
        }
    }
    Ok(out)
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(CprError::Degenerate(format!("vector has norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity of `z` against every row of `protos`.
pub fn cosine_logits(z: &[f64], protos: &Tensor2) -> Result<Vec<f64>> {
    let zn = normalize(z)?;
    let pn = normalize_rows(protos)?;
    Ok(pn.iter_rows().map(|p| dot(&zn, p)).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_row() {
        let m = Tensor2::row_vector(&[1.0, 1.0, 1.0]);
        let s = softmax_rows(&m, 1.0).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_two() {
        let m = Tensor2::row_vector(&[0.0, 2f64.ln()]);
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let m = Tensor2::row_vector(&[0.0, 1.0]);
        assert!(matches!(softmax_rows(&m, 0.0), Err(CprError::Config(_))));
        assert!(matches!(softmax_rows(&m, -1.0), Err(CprError::Config(_))));
    }

    #[test]
    fn softmax_large_logits_stable() {
        let m = Tensor2::row_vector(&[1e4, -1e4, 9999.0]);
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let out = layer_norm(&[5.0; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-300).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(CprError::Shape(_))
        ));
    }

    #[test]
    fn attention_singleton_returns_value() {
        let keys = Tensor2::row_vector(&[0.3, -0.2]);
        let values = Tensor2::row_vector(&[7.0, -1.5]);
        let out = attention(&[1.0, 2.0], &keys, &values).unwrap();
        assert_eq!(out, vec![7.0, -1.5]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let keys = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let values = Tensor2::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let out = attention(&[0.4, 0.9], &keys, &values).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_empty_is_error() {
        let empty = Tensor2::zeros(0, 2);
        assert!(matches!(
            attention(&[1.0, 0.0], &empty, &empty),
            Err(CprError::EmptyPrototypes(_))
        ));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0], vec![0.0, 4.0]]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab, matmul_nt(&a, &b.transpose()).unwrap());
        assert_eq!(ab, matmul_tn(&a.transpose(), &b).unwrap());
        assert_eq!(ab.row(0), &[4.5, 11.0]);
    }
}
