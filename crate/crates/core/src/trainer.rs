//! Seeded momentum-SGD training of the context vectors and CoAdapter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coadapter::{AdapterInit, Variant};
use crate::dataio::{SynthGenerator, SynthParams};
use crate::error::{CprError, Result};
use crate::losses::LossWeights;
use crate::model::{Arch, Batch, CprModel, ModelConfig, TextInit, TrainNnr};
use crate::nnr::{NnrConfig, UnlabeledPool};
use crate::numerics::{
    finite_diff_check, perturb_trainable, FdOptions, GradCheckReport, Gradients, Graph, ParamStore, Tensor2,
};
use crate::parallel::Exec;
use crate::prototypes::visual_prototypes;

pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_BASE_LR: f64 = 2e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_CLIP_NORM: f64 = 0.1;
pub const MAX_BATCH: usize = 32;
pub const ONLINE_CHECK_THRESHOLD: f64 = 1e-3;
const ONLINE_CHECK_COORDS: usize = 4;
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `min(32, number of support samples)`.
    pub batch_size: Option<usize>,
    pub base_lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub weights: LossWeights,
    pub nnr: NnrConfig,
    /// Re-verify the gradients of one randomly chosen step.
    pub online_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: None,
            base_lr: DEFAULT_BASE_LR,
            momentum: DEFAULT_MOMENTUM,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            schedule: LrSchedule::Cosine,
            seed: 1,
            weights: LossWeights {
                lambda: crate::losses::LAMBDA_FEWSHOT,
                tau: crate::prototypes::DEFAULT_TEMPERATURE,
            },
            nnr: NnrConfig::default(),
            online_check: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(CprError::config("batch size must be >= 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(CprError::config(format!(
                "learning rate must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CprError::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CprError::config(format!("clip norm must be > 0, got {c}")));
            }
        }
        self.weights.validate()?;
        self.nnr.validate()
    }

    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine if total_steps == 0 => self.base_lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Labeled support samples plus an optional unlabeled pool for in-loop NNR.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub features: Tensor2,
    /// Positions into `classes`.
    pub labels: Vec<usize>,
    pub classes: Vec<usize>,
    pub nnr_pool: Option<UnlabeledPool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub cons: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub trace: Vec<TraceEntry>,
    pub online_check: Option<GradCheckReport>,
}

impl TrainState {
    pub fn new() -> Self {
        Self {
            step: 0,
            lr: 0.0,
            trace: Vec::new(),
            online_check: None,
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// Euclidean norm over all trainable gradients.
pub fn global_norm(store: &ParamStore, grads: &Gradients) -> f64 {
    store
        .trainable_ids()
        .flat_map(|id| grads.get(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// `v <- momentum * v + g; p <- p - lr * v` over trainable tensors.
pub fn sgd_step(store: &mut ParamStore, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let g = grads.get(id).data();
        let v = velocity.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + gi;
        }
        if lr == 0.0 {
            continue;
        }
        let p = store.get_mut(id).data_mut();
        for (pi, vi) in p.iter_mut().zip(velocity.get(id).data()) {
            *pi -= lr * vi;
        }
    }
}

struct Objective<'a> {
    arch: &'a Arch,
    weights: &'a LossWeights,
    nnr: Option<TrainNnr<'a>>,
}

impl Objective<'_> {
    /// Loss terms and gradients of a batch, evaluated in fixed-size chunks and
    /// reduced in order.
    fn evaluate(&self, store: &ParamStore, batch: &Batch<'_>, exec: Exec) -> Result<([f64; 3], Gradients)> {
        let n = batch.features.rows();
        let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
        let parts = exec.try_map(&starts, |&s| {
            let idx: Vec<usize> = (s..(s + GRAD_CHUNK).min(n)).collect();
            let sub = Batch {
                features: batch.features.select_rows(&idx),
                labels: idx.iter().map(|&i| batch.labels[i]).collect(),
                classes: batch.classes,
            };
            let mut g = Graph::new();
            let nodes = self.arch.batch_graph(&mut g, store, &sub, self.weights, self.nnr)?;
            let mut grads = g.backward(nodes.total, store)?;
            let w = idx.len() as f64 / n as f64;
            grads.scale(w);
            Ok((
                [
                    g.scalar(nodes.cls) * w,
                    g.scalar(nodes.cons) * w,
                    g.scalar(nodes.total) * w,
                ],
                grads,
            ))
        })?;
        let mut terms = [0.0; 3];
        let mut total = Gradients::zeros_like(store);
        for (t, g) in parts {
            for (a, b) in terms.iter_mut().zip(t) {
                *a += b;
            }
            total.accumulate(&g);
        }
        Ok((terms, total))
    }

    /// Forward-only total loss, reduced in the same chunk order as
    /// [`Objective::evaluate`].
    fn loss(&self, store: &ParamStore, batch: &Batch<'_>) -> Result<f64> {
        let n = batch.features.rows();
        let mut total = 0.0;
        for s in (0..n).step_by(GRAD_CHUNK) {
            let idx: Vec<usize> = (s..(s + GRAD_CHUNK).min(n)).collect();
            let sub = Batch {
                features: batch.features.select_rows(&idx),
                labels: idx.iter().map(|&i| batch.labels[i]).collect(),
                classes: batch.classes,
            };
            let mut g = Graph::new();
            let nodes = self.arch.batch_graph(&mut g, store, &sub, self.weights, self.nnr)?;
            total += g.scalar(nodes.total) * (idx.len() as f64 / n as f64);
        }
        Ok(total)
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Runs the whole schedule. Only trainable tensors of `model.store` change.
pub fn train(model: &mut CprModel, data: &TrainData, cfg: &TrainConfig, exec: Exec) -> Result<TrainState> {
    cfg.validate()?;
    let n = data.features.rows();
    if n == 0 || data.labels.len() != n {
        return Err(CprError::InsufficientData(format!(
            "{n} support features with {} labels",
            data.labels.len()
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= data.classes.len()) {
        return Err(CprError::Index(format!(
            "label {bad} with {} classes",
            data.classes.len()
        )));
    }
    let nnr = match (&data.nnr_pool, cfg.nnr.apply_during_training) {
        (Some(pool), true) => Some(TrainNnr { pool, cfg: &cfg.nnr }),
        (None, true) => {
            return Err(CprError::config("NNR during training needs an unlabeled training pool"));
        }
        _ => None,
    };
    let batch_size = cfg.batch_size.unwrap_or(MAX_BATCH.min(n)).min(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let check_step = (cfg.online_check && total_steps > 0).then(|| rng.random_range(0..total_steps));

    let arch = model.arch;
    let objective = Objective {
        arch: &arch,
        weights: &cfg.weights,
        nnr,
    };
    let mut state = TrainState::new();
    let mut velocity = Gradients::zeros_like(&model.store);
    for _ in 0..cfg.epochs {
        for idx in batches(n, batch_size, &mut rng) {
            let batch = Batch {
                features: data.features.select_rows(&idx),
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
                classes: &data.classes,
            };
            let lr = cfg.learning_rate(state.step, total_steps);
            let ([cls, cons, total], mut grads) = objective.evaluate(&model.store, &batch, exec)?;
            if !total.is_finite() || !grads.is_finite() {
                return Err(CprError::Divergence {
                    step: state.step,
                    loss: total,
                });
            }
            if check_step == Some(state.step) {
                let opts = FdOptions {
                    threshold: ONLINE_CHECK_THRESHOLD,
                    sample: Some((ONLINE_CHECK_COORDS, cfg.seed)),
                    ..FdOptions::default()
                };
                let report = finite_diff_check(|s| objective.loss(s, &batch), &model.store, &grads, opts)?;
                if !report.passed() {
                    let worst = report
                        .tensors
                        .iter()
                        .find(|t| !t.passed)
                        .map(|t| t.name.clone())
                        .unwrap_or_default();
                    return Err(CprError::GradientMismatch {
                        tensor: worst,
                        rel_error: report.worst(),
                    });
                }
                state.online_check = Some(report);
            }
            if let Some(c) = cfg.clip_norm {
                let norm = global_norm(&model.store, &grads);
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            sgd_step(&mut model.store, &mut velocity, &grads, lr, cfg.momentum);
            state.trace.push(TraceEntry {
                step: state.step,
                lr,
                cls,
                cons,
                total,
            });
            state.lr = lr;
            state.step += 1;
        }
    }
    Ok(state)
}

/// Checks analytic gradients of the full support objective against central
/// differences for every trainable tensor of `model`.
pub fn check_gradients(
    model: &CprModel,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: FdOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if data.features.rows() == 0 || data.labels.len() != data.features.rows() {
        return Err(CprError::InsufficientData(
            "gradient check needs labeled support features".into(),
        ));
    }
    let nnr = match (&data.nnr_pool, cfg.nnr.apply_during_training) {
        (Some(pool), true) => Some(TrainNnr { pool, cfg: &cfg.nnr }),
        _ => None,
    };
    let objective = Objective {
        arch: &model.arch,
        weights: &cfg.weights,
        nnr,
    };
    let batch = Batch {
        features: data.features.clone(),
        labels: data.labels.clone(),
        classes: &data.classes,
    };
    let (_, grads) = objective.evaluate(&model.store, &batch, Exec::Sequential)?;
    finite_diff_check(|s| objective.loss(s, &batch), &model.store, &grads, opts)
}

/// A small seeded problem covering every trainable tensor of a dual-branch
/// prompt-mode model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckProblem {
    pub dim: usize,
    pub classes: usize,
    pub context_len: usize,
    pub hidden: usize,
    pub samples_per_class: usize,
    /// Noise added to trainable tensors before checking.
    pub perturb: f64,
    pub nnr_in_loss: bool,
    pub seed: u64,
}

impl Default for CheckProblem {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 5,
            context_len: 4,
            hidden: 32,
            samples_per_class: 4,
            perturb: 0.1,
            nnr_in_loss: false,
            seed: 1,
        }
    }
}

impl CheckProblem {
    pub fn build(&self) -> Result<(CprModel, TrainData, TrainConfig)> {
        let gen = SynthGenerator::new(SynthParams {
            classes: self.classes,
            dim: self.dim,
            shift: 1.0,
            spread: 0.3,
            seed: self.seed,
        })?;
        let support = gen.sample(self.samples_per_class, 0)?;
        let labels = support.require_labels("gradient check")?.to_vec();
        let groups: Vec<Vec<&[f64]>> = (0..self.classes)
            .map(|c| support.indices_of(c).into_iter().map(|i| support.feature(i)).collect())
            .collect();
        let model_cfg = ModelConfig {
            variant: Variant::Dual,
            init: AdapterInit {
                hidden: Some(self.hidden),
                ..AdapterInit::default()
            },
            seed: self.seed,
            ..ModelConfig::default()
        };
        let text = TextInit::Prompt {
            class_tokens: gen.text()?.features().clone(),
            context_len: self.context_len,
        };
        let mut model = CprModel::new(text, visual_prototypes(&groups)?, None, &model_cfg)?;
        perturb_trainable(&mut model.store, self.perturb, self.seed);
        let mut cfg = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        cfg.nnr.apply_during_training = self.nnr_in_loss;
        let nnr_pool = if self.nnr_in_loss {
            Some(UnlabeledPool::new(
                gen.sample(self.samples_per_class, 1)?.features().clone(),
                None,
            )?)
        } else {
            None
        };
        let data = TrainData {
            features: support.features().clone(),
            labels,
            classes: (0..self.classes).collect(),
            nnr_pool,
        };
        Ok((model, data, cfg))
    }

    pub fn run(&self, opts: FdOptions) -> Result<GradCheckReport> {
        let (model, data, cfg) = self.build()?;
        check_gradients(&model, &data, &cfg, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn quadratic() -> (ParamStore, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor2::row_vector(&[1.0, -2.0]), true);
        (s, id)
    }

    #[test]
    fn single_step_matches_hand_update() {
        let (mut s, id) = quadratic();
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let sq = g.row_dot(p, p).unwrap();
        let loss = g.scale(sq, 0.5);
        let grads = g.backward(loss, &s).unwrap();
        let mut v = Gradients::zeros_like(&s);
        sgd_step(&mut s, &mut v, &grads, 0.1, 0.9);
        assert_eq!(s.get(id).data(), &[0.9, -1.8]);
        sgd_step(&mut s, &mut v, &grads, 0.1, 0.9);
        // v = 0.9 * [1, -2] + [1, -2]
        assert!((s.get(id).data()[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (mut s, id) = quadratic();
        let before = s.clone();
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let loss = g.mean(p).unwrap();
        let grads = g.backward(loss, &s).unwrap();
        let mut v = Gradients::zeros_like(&s);
        sgd_step(&mut s, &mut v, &grads, 0.0, 0.9);
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0, 100), cfg.base_lr);
        assert!((cfg.learning_rate(50, 100) - cfg.base_lr / 2.0).abs() < 1e-18);
        assert!(cfg.learning_rate(99, 100) < cfg.base_lr * 1e-3);
    }

    #[test]
    fn invalid_config() {
        let bad = TrainConfig {
            batch_size: Some(0),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(CprError::Config(_))));
    }
}
