//! Consistency, classification and combined objectives.

use serde::{Deserialize, Serialize};

use crate::error::{CprError, Result};
use crate::numerics::kernels::{self, normalize_rows};
use crate::numerics::tensor::{dot, norm};
use crate::numerics::{Graph, NodeId, Tensor2};

pub const LAMBDA_FEWSHOT: f64 = 1.0;
pub const LAMBDA_BASE2NEW: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CprError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CprError::config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Enhanced textual representations the fused prototypes are pulled toward.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEmbeddings {
    rows: Tensor2,
}

impl AnchorEmbeddings {
    pub fn new(rows: &Tensor2) -> Result<Self> {
        Ok(Self {
            rows: normalize_rows(rows)?,
        })
    }

    pub fn rows(&self) -> &Tensor2 {
        &self.rows
    }

    pub fn select(&self, classes: &[usize]) -> Result<Self> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.rows.rows()) {
            return Err(CprError::Index(format!("anchor for class {c} of {}", self.rows.rows())));
        }
        Ok(Self {
            rows: self.rows.select_rows(classes),
        })
    }
}

/// `(1/C) * sum_i (1 - cos(P_i, g_i))`.
pub fn consistency_loss(p: &Tensor2, anchors: &AnchorEmbeddings) -> Result<f64> {
    let g = anchors.rows();
    if p.shape() != g.shape() {
        return Err(CprError::shape(format!(
            "prototypes {:?} vs anchors {:?}",
            p.shape(),
            g.shape()
        )));
    }
    let mut total = 0.0;
    for (i, (pr, gr)) in p.iter_rows().zip(g.iter_rows()).enumerate() {
        let n = norm(pr);
        if !(n > 0.0) {
            return Err(CprError::Degenerate(format!("prototype {i} has zero norm")));
        }
        total += 1.0 - dot(pr, gr) / (n * norm(gr));
    }
    Ok(total / p.rows() as f64)
}

/// `-log softmax(cos(z, P'_i) / tau)[y]`.
pub fn cls_loss(z: &[f64], p: &Tensor2, label: usize, tau: f64) -> Result<f64> {
    if label >= p.rows() {
        return Err(CprError::Index(format!("label {label} with {} classes", p.rows())));
    }
    if !(tau > 0.0) {
        return Err(CprError::config(format!("tau must be > 0, got {tau}")));
    }
    let cos = kernels::cosine_logits(z, p)?;
    Ok(kernels::log_sum_exp(&cos, 1.0 / tau) - cos[label] / tau)
}

pub fn total_loss(cls: f64, cons: f64, lambda: f64) -> f64 {
    cls + lambda * cons
}

/// Graph form of the consistency loss for unit-row prototypes `p` (C×d).
pub fn consistency_graph(g: &mut Graph, p: NodeId, anchors: NodeId) -> Result<NodeId> {
    let cos = g.row_dot(p, anchors)?;
    let mean = g.mean(cos)?;
    Ok(g.affine(mean, -1.0, 1.0))
}
