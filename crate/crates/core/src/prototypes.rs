//! Visual and textual prototype banks, the cosine zero-shot classifier, and a
//! residual bottleneck adapter baseline.

use rand::Rng;

use crate::error::{CprError, Result};
use crate::numerics::kernels::{self, cosine_logits, normalize};
use crate::numerics::tensor::norm;
use crate::numerics::Tensor2;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Normalized class means of support features, one row per group.
pub fn visual_prototypes(groups: &[Vec<&[f64]>]) -> Result<Tensor2> {
    let dim = groups
        .iter()
        .flat_map(|g| g.first())
        .map(|r| r.len())
        .next()
        .ok_or_else(|| CprError::InsufficientData("no support features".into()))?;
    let mut out = Tensor2::zeros(groups.len(), dim);
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(CprError::InsufficientData(format!("class {c} has no support features")));
        }
        let row = out.row_mut(c);
        for f in group {
            if f.len() != dim {
                return Err(CprError::shape(format!(
                    "support feature of width {} in a {dim}-dim bank",
                    f.len()
                )));
            }
            for (o, x) in row.iter_mut().zip(f.iter()) {
                *o += x;
            }
        }
        let n = group.len() as f64;
        for o in row.iter_mut() {
            *o /= n;
        }
        let len = norm(row);
        if !(len > 0.0) {
            return Err(CprError::Degenerate(format!(
                "prototype of class {c} has zero norm (support features cancel)"
            )));
        }
        for o in row.iter_mut() {
            *o /= len;
        }
    }
    Ok(out)
}

/// Visual (V) and textual (W) prototypes over the same ordered classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    visual: Tensor2,
    textual: Tensor2,
}

impl PrototypeBank {
    pub fn new(visual: Tensor2, textual: Tensor2) -> Result<Self> {
        if visual.shape() != textual.shape() {
            return Err(CprError::shape(format!(
                "visual bank {:?} vs textual bank {:?}",
                visual.shape(),
                textual.shape()
            )));
        }
        for (name, bank) in [("visual", &visual), ("textual", &textual)] {
            for (i, r) in bank.iter_rows().enumerate() {
                if (norm(r) - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(CprError::Degenerate(format!(
                        "{name} prototype {i} is not unit norm ({})",
                        norm(r)
                    )));
                }
            }
        }
        Ok(Self { visual, textual })
    }

    pub fn visual(&self) -> &Tensor2 {
        &self.visual
    }

    pub fn textual(&self) -> &Tensor2 {
        &self.textual
    }

    pub fn num_classes(&self) -> usize {
        self.visual.rows()
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CprError::config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Class probabilities `softmax(cos(z, W_i) / tau)`.
pub fn zero_shot_predict(z: &[f64], w: &Tensor2, tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    probabilities_from_cosines(&cosine_logits(z, w)?, tau)
}

pub fn probabilities_from_cosines(cosines: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let mut p = vec![0.0; cosines.len()];
    kernels::softmax_slice(cosines, 1.0 / tau, &mut p);
    Ok(p)
}

/// Two-layer ReLU bottleneck `phi(f) = relu(f W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckAdapter {
    pub w1: Tensor2,
    pub b1: Vec<f64>,
    pub w2: Tensor2,
    pub b2: Vec<f64>,
}

impl BottleneckAdapter {
    /// Random first layer, zero output layer.
    pub fn new<R: Rng + ?Sized>(dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor2::randn(dim, bottleneck, (1.0 / dim as f64).sqrt(), rng),
            b1: vec![0.0; bottleneck],
            w2: Tensor2::zeros(bottleneck, dim),
            b2: vec![0.0; dim],
        }
    }

    pub fn phi(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.w1.rows() {
            return Err(CprError::shape(format!(
                "adapter input width {} vs {}",
                f.len(),
                self.w1.rows()
            )));
        }
        let x = Tensor2::row_vector(f);
        let mut h = kernels::matmul(&x, &self.w1)?;
        for (v, b) in h.data_mut().iter_mut().zip(&self.b1) {
            *v = (*v + b).max(0.0);
        }
        let mut out = kernels::matmul(&h, &self.w2)?.into_vec();
        for (v, b) in out.iter_mut().zip(&self.b2) {
            *v += b;
        }
        Ok(out)
    }

    /// `f + scale * phi(f)` before normalization.
    pub fn adapt_raw(&self, f: &[f64], scale: f64) -> Result<Vec<f64>> {
        let phi = self.phi(f)?;
        Ok(f.iter().zip(&phi).map(|(x, p)| x + scale * p).collect())
    }

    pub fn adapt(&self, f: &[f64], scale: f64) -> Result<Vec<f64>> {
        normalize(&self.adapt_raw(f, scale)?)
    }
}
