//! Nearest-neighbor rectification of class prototypes with unlabeled features.
//!
//! Each prototype row is mixed with the mean of its `k` most similar unlabeled
//! features: `P'_i = alpha * P_i + (1 - alpha) * mean(neighbors)`, then
//! re-normalized.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{CprError, Result};
use crate::numerics::kernels::normalize;
use crate::numerics::tensor::{dot, norm};
use crate::numerics::Tensor2;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnrConfig {
    pub k: usize,
    pub alpha: f64,
    /// Minimum zero-shot max-probability for a pool row to be a candidate;
    /// 0 keeps every row.
    pub confidence_threshold: f64,
    pub apply_during_training: bool,
}

impl Default for NnrConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            confidence_threshold: 0.0,
            apply_during_training: false,
        }
    }
}

impl NnrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CprError::config("NNR k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CprError::config(format!(
                "NNR alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(CprError::config(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Unit-norm unlabeled features, optionally scored by zero-shot confidence.
#[derive(Debug, Clone)]
pub struct UnlabeledPool {
    features: Tensor2,
    confidences: Option<Vec<f64>>,
}

impl UnlabeledPool {
    pub fn new(features: Tensor2, confidences: Option<Vec<f64>>) -> Result<Self> {
        for (i, r) in features.iter_rows().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-6 {
                return Err(CprError::Degenerate(format!("pool row {i} is not unit norm")));
            }
        }
        if let Some(c) = &confidences {
            if c.len() != features.rows() {
                return Err(CprError::shape(format!(
                    "{} confidences for {} pool rows",
                    c.len(),
                    features.rows()
                )));
            }
            if c.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(CprError::config("pool confidences must lie in [0, 1]"));
            }
        }
        Ok(Self { features, confidences })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Indices of rows passing the confidence filter, ascending.
    pub fn candidates(&self, threshold: f64) -> Vec<usize> {
        match &self.confidences {
            Some(c) if threshold > 0.0 => (0..self.len()).filter(|&i| c[i] >= threshold).collect(),
            _ => (0..self.len()).collect(),
        }
    }
}

fn by_similarity_desc(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact top-`k` candidates by dot product (cosine on unit rows), ordered by
/// descending similarity with ties broken by ascending index.
pub fn knn_among(query: &[f64], pool: &UnlabeledPool, candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(CprError::config("k must be >= 1"));
    }
    if k > candidates.len() {
        return Err(CprError::InsufficientPool {
            needed: k,
            available: candidates.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (dot(query, pool.row(i)), i)).collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_similarity_desc);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_similarity_desc);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

pub fn knn(query: &[f64], pool: &UnlabeledPool, k: usize, confidence_threshold: f64) -> Result<Vec<usize>> {
    let candidates = pool.candidates(confidence_threshold);
    knn_among(query, pool, &candidates, k)
}

/// `alpha * p + (1 - alpha) * mean(neighbors)` without normalization.
pub fn rectify_raw(p: &[f64], neighbors: &[&[f64]], alpha: f64) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(CprError::InsufficientPool {
            needed: 1,
            available: 0,
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CprError::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let k = neighbors.len() as f64;
    let mut mean = vec![0.0; p.len()];
    for n in neighbors {
        if n.len() != p.len() {
            return Err(CprError::shape("neighbor width differs from prototype width"));
        }
        for (m, x) in mean.iter_mut().zip(n.iter()) {
            *m += x;
        }
    }
    Ok(p.iter()
        .zip(&mean)
        .map(|(&pi, &m)| alpha * pi + (1.0 - alpha) * (m / k))
        .collect())
}

/// Rectified prototype, L2-normalized.
pub fn rectify(p: &[f64], neighbors: &[&[f64]], alpha: f64) -> Result<Vec<f64>> {
    let raw = rectify_raw(p, neighbors, alpha)?;
    normalize(&raw).map_err(|_| CprError::Degenerate("rectified prototype has zero norm".into()))
}

/// Neighbor mean for every row of `protos`, each from its own k-NN set.
pub fn neighbor_means(protos: &Tensor2, pool: &UnlabeledPool, cfg: &NnrConfig) -> Result<Tensor2> {
    cfg.validate()?;
    let candidates = pool.candidates(cfg.confidence_threshold);
    let mut out = Tensor2::zeros(protos.rows(), protos.cols());
    for i in 0..protos.rows() {
        let idx = knn_among(protos.row(i), pool, &candidates, cfg.k)?;
        let row = out.row_mut(i);
        for &j in &idx {
            for (o, x) in row.iter_mut().zip(pool.row(j)) {
                *o += x;
            }
        }
        let k = idx.len() as f64;
        for o in row.iter_mut() {
            *o /= k;
        }
    }
    Ok(out)
}

/// Rectifies every prototype row independently and re-normalizes.
pub fn rectify_bank(protos: &Tensor2, pool: &UnlabeledPool, cfg: &NnrConfig) -> Result<Tensor2> {
    cfg.validate()?;
    let candidates = pool.candidates(cfg.confidence_threshold);
    let mut out = Tensor2::zeros(protos.rows(), protos.cols());
    for i in 0..protos.rows() {
        let idx = knn_among(protos.row(i), pool, &candidates, cfg.k)?;
        let neighbors: Vec<&[f64]> = idx.iter().map(|&j| pool.row(j)).collect();
        out.row_mut(i)
            .copy_from_slice(&rectify(protos.row(i), &neighbors, cfg.alpha)?);
    }
    Ok(out)
}
