//! Seeded Gaussian-mixture stand-in for frozen image and text features.
//!
//! Each class has a unit mean direction. Image samples are
//! `normalize(mean + spread * n)` with `n ~ N(0, I)`. Text prototypes are
//! `normalize(mean + shift * u)` with `u` a random unit vector per class, so
//! `shift` controls the gap between the text and image modalities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::emb::EmbeddingSet;
use crate::error::{CprError, Result};
use crate::numerics::kernels::normalize;
use crate::numerics::tensor::dot;
use crate::numerics::Tensor2;

/// Upper bound on pairwise cosine between class means.
pub const MAX_MEAN_COSINE: f64 = 0.95;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub dim: usize,
    pub shift: f64,
    pub spread: f64,
    pub seed: u64,
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CprError::config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.dim < 2 {
            return Err(CprError::config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(CprError::config(format!("spread must be >= 0, got {}", self.spread)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(CprError::config(format!("shift must be >= 0, got {}", self.shift)));
        }
        Ok(())
    }
}

/// Class means plus the seed streams that draw samples from them.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    params: SynthParams,
    means: Tensor2,
    text: Tensor2,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = Tensor2::randn(1, dim, 1.0, rng).into_vec();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

impl SynthGenerator {
    pub fn new(params: SynthParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream_rng(params.seed, 0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(params.classes);
        let mut rejections = 0;
        while means.len() < params.classes {
            let cand = random_unit(params.dim, &mut rng);
            if means.iter().all(|m| dot(m, &cand) < MAX_MEAN_COSINE) {
                means.push(cand);
            } else {
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(CprError::config(format!(
                        "cannot place {} separated class means in {} dimensions",
                        params.classes, params.dim
                    )));
                }
            }
        }
        let mut text_rows = Vec::with_capacity(params.classes);
        for m in &means {
            let u = random_unit(params.dim, &mut rng);
            let t: Vec<f64> = m.iter().zip(&u).map(|(a, b)| a + params.shift * b).collect();
            text_rows.push(normalize(&t).unwrap_or_else(|_| m.clone()));
        }
        Ok(Self {
            params,
            means: Tensor2::from_rows(&means)?,
            text: Tensor2::from_rows(&text_rows)?,
        })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    pub fn means(&self) -> &Tensor2 {
        &self.means
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.params.classes).map(|c| format!("class_{c:03}")).collect()
    }

    /// `n_per_class` image samples per class from seed stream `stream + 1`.
    pub fn sample(&self, n_per_class: usize, stream: u64) -> Result<EmbeddingSet> {
        if n_per_class == 0 {
            return Err(CprError::config("n_per_class must be >= 1"));
        }
        let (c, d) = (self.params.classes, self.params.dim);
        let mut rng = stream_rng(self.params.seed, stream + 1);
        let mut rows = Vec::with_capacity(c * n_per_class);
        let mut labels = Vec::with_capacity(c * n_per_class);
        for class in 0..c {
            let mean = self.means.row(class);
            for _ in 0..n_per_class {
                let noise = Tensor2::randn(1, d, self.params.spread, &mut rng).into_vec();
                let x: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
                let x = normalize(&x).map_err(|e| CprError::Degenerate(format!("synthetic sample: {e}")))?;
                // Round through f32 so the in-memory set equals what EMB1 stores.
                rows.push(x.into_iter().map(|v| f64::from(v as f32)).collect());
                labels.push(class);
            }
        }
        EmbeddingSet::new(Tensor2::from_rows(&rows)?, Some(labels), self.class_names())
    }

    /// Text prototypes, one row per class, labels `0..C`.
    pub fn text(&self) -> Result<EmbeddingSet> {
        let rows = self.text.map(|v| f64::from(v as f32));
        EmbeddingSet::new(rows, Some((0..self.params.classes).collect()), self.class_names())
    }

    /// The true class means as a labeled set.
    pub fn mean_set(&self) -> Result<EmbeddingSet> {
        let rows = self.means.map(|v| f64::from(v as f32));
        EmbeddingSet::new(rows, Some((0..self.params.classes).collect()), self.class_names())
    }
}

/// One-call form: `n_per_class` image samples from a fresh generator.
pub fn synth_gaussian(
    classes: usize,
    dim: usize,
    shift: f64,
    spread: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    SynthGenerator::new(SynthParams {
        classes,
        dim,
        shift,
        spread,
        seed,
    })?
    .sample(n_per_class, 0)
}
