//! The full CPR classifier: textual prototypes (frozen or prompt-encoded), a
//! frozen visual bank, the CoAdapter, and optional nearest-neighbor
//! rectification.

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::coadapter::{fuse_graph, AdapterInit, CoAdapter, Variant};
use crate::error::{CprError, Result};
use crate::losses::{consistency_graph, LossWeights};
use crate::nnr::{neighbor_means, rectify_bank, NnrConfig, UnlabeledPool};
use crate::numerics::kernels::{argmax, matmul_nt, normalize_rows};
use crate::numerics::tensor::dot;
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor2};
use crate::parallel::Exec;
use crate::promptenc::PromptEncoder;
use crate::prototypes::DEFAULT_TEMPERATURE;

pub const TEXT_W: &str = "text.w";
pub const VISUAL_BANK: &str = "prototypes.visual";
pub const ANCHORS: &str = "anchors";
pub const META: &str = "model.meta";

const PREDICT_CHUNK: usize = 64;

/// Where the textual prototypes W come from.
#[derive(Debug, Clone)]
pub enum TextInit {
    /// Fixed C×d rows (normalized on construction).
    Frozen(Tensor2),
    /// Class-token embeddings run through a frozen prompt encoder with a
    /// trainable context of `context_len` vectors.
    Prompt { class_tokens: Tensor2, context_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub tau: f64,
    pub init: AdapterInit,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dual,
            tau: DEFAULT_TEMPERATURE,
            init: AdapterInit::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TextSource {
    Frozen(ParamId),
    Prompt(PromptEncoder),
}

/// Parameter handles and fixed settings; the values live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arch {
    text: TextSource,
    adapter: CoAdapter,
    visual: ParamId,
    anchors: ParamId,
    pub variant: Variant,
    pub tau: f64,
}

/// Graph nodes of a batch objective.
#[derive(Debug, Clone, Copy)]
pub struct BatchNodes {
    pub cls: NodeId,
    pub cons: NodeId,
    pub total: NodeId,
}

/// Samples of one optimization batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// Unit-norm features, one per row.
    pub features: Tensor2,
    /// Positions into `classes`.
    pub labels: Vec<usize>,
    pub classes: &'a [usize],
}

/// Pool and settings for rectifying prototypes inside the training objective.
#[derive(Debug, Clone, Copy)]
pub struct TrainNnr<'a> {
    pub pool: &'a UnlabeledPool,
    pub cfg: &'a NnrConfig,
}

impl Arch {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn adapter(&self) -> &CoAdapter {
        &self.adapter
    }

    pub fn prompt(&self) -> Option<&PromptEncoder> {
        match &self.text {
            TextSource::Prompt(p) => Some(p),
            TextSource::Frozen(_) => None,
        }
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        store.get(self.anchors).rows()
    }

    fn check_classes(&self, store: &ParamStore, classes: &[usize]) -> Result<()> {
        if classes.is_empty() {
            return Err(CprError::EmptyPrototypes("no classes to classify"));
        }
        let c = self.num_classes(store);
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(CprError::Index(format!("class {bad} of {c}")));
        }
        Ok(())
    }

    /// W rows for `classes` as a graph node.
    pub fn text_graph(&self, g: &mut Graph, store: &ParamStore, classes: &[usize]) -> Result<NodeId> {
        self.check_classes(store, classes)?;
        match &self.text {
            TextSource::Frozen(id) => Ok(g.input(store.get(*id).select_rows(classes))),
            TextSource::Prompt(enc) => enc.build_w_graph(g, store, classes),
        }
    }

    pub fn text_w(&self, store: &ParamStore, classes: &[usize]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let w = self.text_graph(&mut g, store, classes)?;
        Ok(g.value(w).clone())
    }

    /// Batch objective `cls + lambda * cons`, both averaged over the batch.
    pub fn batch_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch<'_>,
        weights: &LossWeights,
        nnr: Option<TrainNnr<'_>>,
    ) -> Result<BatchNodes> {
        weights.validate()?;
        let b = batch.features.rows();
        if b == 0 || batch.labels.len() != b {
            return Err(CprError::shape(format!(
                "batch of {b} features with {} labels",
                batch.labels.len()
            )));
        }
        let w = self.text_graph(g, store, batch.classes)?;
        let z = g.input(batch.features.clone());
        let v = g.param(store, self.visual);
        let r = self.adapter.combined_residual_graph(g, store, self.variant, z, v, w)?;
        let anchors = g.input(store.get(self.anchors).select_rows(batch.classes));
        let mut logits = Vec::with_capacity(b);
        let mut cons = Vec::with_capacity(b);
        for i in 0..b {
            let zi = g.select_row(z, i)?;
            let ri = g.select_row(r, i)?;
            let p = fuse_graph(g, w, ri)?;
            let c = consistency_graph(g, p, anchors)?;
            cons.push(c);
            let p_cls = match nnr {
                Some(TrainNnr { pool, cfg }) => {
                    let means = neighbor_means(g.value(p), pool, cfg)?;
                    let kept = g.scale(p, cfg.alpha);
                    let mixed = g.input(means.scale(1.0 - cfg.alpha));
                    let raw = g.add(kept, mixed)?;
                    g.normalize_rows(raw)?
                }
                None => p,
            };
            logits.push(g.matmul_nt(zi, p_cls)?);
        }
        let logits = g.concat_rows(&logits)?;
        let logits = g.scale(logits, 1.0 / self.tau);
        let cls = g.cross_entropy(logits, &batch.labels)?;
        let cons = g.concat_rows(&cons)?;
        let cons = g.mean(cons)?;
        let weighted = g.scale(cons, weights.lambda);
        let total = g.add(cls, weighted)?;
        Ok(BatchNodes { cls, cons, total })
    }

    pub fn batch_loss(
        &self,
        store: &ParamStore,
        batch: &Batch<'_>,
        weights: &LossWeights,
        nnr: Option<TrainNnr<'_>>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let n = self.batch_graph(&mut g, store, batch, weights, nnr)?;
        Ok(g.scalar(n.total))
    }

    /// Residuals (rows) for `queries` against the text rows `w`.
    fn residuals(&self, store: &ParamStore, queries: &Tensor2, w: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let z = g.input(queries.clone());
        let v = g.param(store, self.visual);
        let wn = g.input(w.clone());
        let r = self
            .adapter
            .combined_residual_graph(&mut g, store, self.variant, z, v, wn)?;
        Ok(g.value(r).clone())
    }
}

/// Per-query fused prototypes `normalize(W_i + r)`.
pub fn fused(w: &Tensor2, r: &[f64]) -> Result<Tensor2> {
    let mut p = w.clone();
    for i in 0..p.rows() {
        for (x, ri) in p.row_mut(i).iter_mut().zip(r) {
            *x += ri;
        }
    }
    normalize_rows(&p)
}

/// Parameters plus architecture.
#[derive(Debug, Clone)]
pub struct CprModel {
    pub store: ParamStore,
    pub arch: Arch,
}

fn variant_code(v: Variant) -> f64 {
    match v {
        Variant::Dual => 0.0,
        Variant::ImageOnly => 1.0,
        Variant::TextOnly => 2.0,
    }
}

impl CprModel {
    /// Builds a fresh model. `anchors` defaults to the initial textual
    /// prototypes of every class.
    pub fn new(text: TextInit, visual_bank: Tensor2, anchors: Option<Tensor2>, cfg: &ModelConfig) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
            return Err(CprError::config(format!("tau must be > 0, got {}", cfg.tau)));
        }
        let dim = visual_bank.cols();
        if visual_bank.rows() == 0 {
            return Err(CprError::EmptyPrototypes("visual bank has no rows"));
        }
        let visual_bank = normalize_rows(&visual_bank)?;
        let mut store = ParamStore::new();
        let (source, num_classes) = match text {
            TextInit::Frozen(w) => {
                if w.cols() != dim {
                    return Err(CprError::shape(format!(
                        "text width {} vs feature width {dim}",
                        w.cols()
                    )));
                }
                let n = w.rows();
                (TextSource::Frozen(store.add(TEXT_W, normalize_rows(&w)?, false)), n)
            }
            TextInit::Prompt {
                class_tokens,
                context_len,
            } => {
                let n = class_tokens.rows();
                let enc = PromptEncoder::register(&mut store, class_tokens, context_len, dim, cfg.seed)?;
                (TextSource::Prompt(enc), n)
            }
        };
        let visual = store.add(VISUAL_BANK, visual_bank, false);
        let adapter = CoAdapter::register(&mut store, dim, cfg.init, cfg.seed)?;
        let anchors = match anchors {
            Some(a) => {
                if a.shape() != (num_classes, dim) {
                    return Err(CprError::config(format!(
                        "anchors are {}x{} but the model has {num_classes} classes of width {dim}",
                        a.rows(),
                        a.cols()
                    )));
                }
                normalize_rows(&a)?
            }
            None => {
                let all: Vec<usize> = (0..num_classes).collect();
                let mut g = Graph::new();
                let w = match &source {
                    TextSource::Frozen(id) => g.input(store.get(*id).clone()),
                    TextSource::Prompt(enc) => enc.build_w_graph(&mut g, &store, &all)?,
                };
                g.value(w).clone()
            }
        };
        let anchors = store.add(ANCHORS, anchors, false);
        store.add(
            META,
            Tensor2::row_vector(&[variant_code(cfg.variant), 1.0 / cfg.tau]),
            false,
        );
        Ok(Self {
            store,
            arch: Arch {
                text: source,
                adapter,
                visual,
                anchors,
                variant: cfg.variant,
                tau: cfg.tau,
            },
        })
    }

    /// Rebinds a store read from a checkpoint.
    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let need = |store: &ParamStore, name: &str| {
            store.find(name).ok_or_else(|| CprError::Checkpoint {
                tensor: name.to_string(),
                message: "tensor missing".into(),
            })
        };
        let meta = store.get(need(&store, META)?).clone();
        if meta.len() != 2 {
            return Err(CprError::Checkpoint {
                tensor: META.into(),
                message: format!("expected 2 values, found {}", meta.len()),
            });
        }
        let variant = match meta.data()[0] as i64 {
            0 => Variant::Dual,
            1 => Variant::ImageOnly,
            2 => Variant::TextOnly,
            other => {
                return Err(CprError::Checkpoint {
                    tensor: META.into(),
                    message: format!("unknown variant code {other}"),
                })
            }
        };
        let scale = meta.data()[1];
        if !(scale > 0.0) {
            return Err(CprError::Checkpoint {
                tensor: META.into(),
                message: format!("logit scale {scale} is not positive"),
            });
        }
        let visual = need(&store, VISUAL_BANK)?;
        let anchors = need(&store, ANCHORS)?;
        let text = match PromptEncoder::bind(&mut store)? {
            Some(enc) => TextSource::Prompt(enc),
            None => TextSource::Frozen(need(&store, TEXT_W)?),
        };
        let adapter = CoAdapter::bind(&mut store)?;
        let dim = store.get(visual).cols();
        if adapter.visual.dim(&store) != dim || store.get(anchors).cols() != dim {
            return Err(CprError::Checkpoint {
                tensor: VISUAL_BANK.into(),
                message: "widths of bank, anchors and adapter disagree".into(),
            });
        }
        Ok(Self {
            store,
            arch: Arch {
                text,
                adapter,
                visual,
                anchors,
                variant,
                tau: 1.0 / scale,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(path, &self.store)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_store(checkpoint::load(path)?)
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes(&self.store)
    }

    pub fn dim(&self) -> usize {
        self.store.get(self.arch.visual).cols()
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn tau(&self) -> f64 {
        self.arch.tau
    }

    pub fn visual_bank(&self) -> &Tensor2 {
        self.store.get(self.arch.visual)
    }

    pub fn anchors(&self) -> &Tensor2 {
        self.store.get(self.arch.anchors)
    }

    pub fn text_w(&self, classes: &[usize]) -> Result<Tensor2> {
        self.arch.text_w(&self.store, classes)
    }

    /// Adapter parameters the variant trains.
    pub fn adapter_parameter_count(&self) -> usize {
        self.arch.adapter.parameter_count(&self.store, self.arch.variant)
    }

    /// Fused prototypes for a single query over `classes`.
    pub fn prototypes(&self, z: &[f64], classes: &[usize]) -> Result<Tensor2> {
        let w = self.text_w(classes)?;
        let r = self.arch.residuals(&self.store, &Tensor2::row_vector(z), &w)?;
        fused(&w, r.row(0))
    }

    /// Predicted positions into `classes` for every query row, optionally
    /// with rectified prototypes.
    pub fn predict(
        &self,
        queries: &Tensor2,
        classes: &[usize],
        nnr: Option<(&UnlabeledPool, &NnrConfig)>,
        exec: Exec,
    ) -> Result<Vec<usize>> {
        if let Some((_, cfg)) = nnr {
            cfg.validate()?;
        }
        let w = self.text_w(classes)?;
        let starts: Vec<usize> = (0..queries.rows()).step_by(PREDICT_CHUNK).collect();
        let chunks = exec.try_map(&starts, |&s| {
            let idx: Vec<usize> = (s..(s + PREDICT_CHUNK).min(queries.rows())).collect();
            let q = queries.select_rows(&idx);
            let r = self.arch.residuals(&self.store, &q, &w)?;
            let mut out = Vec::with_capacity(idx.len());
            for (j, z) in q.iter_rows().enumerate() {
                let mut p = fused(&w, r.row(j))?;
                if let Some((pool, cfg)) = nnr {
                    p = rectify_bank(&p, pool, cfg)?;
                }
                let scores: Vec<f64> = p.iter_rows().map(|row| dot(z, row)).collect();
                out.push(argmax(&scores));
            }
            Ok(out)
        })?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Cosine zero-shot predictions of `queries` (unit rows) against `w`.
pub fn zero_shot_predictions(queries: &Tensor2, w: &Tensor2) -> Result<Vec<usize>> {
    let w = normalize_rows(w)?;
    let scores = matmul_nt(queries, &w)?;
    Ok(scores.iter_rows().map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalize_rows(&Tensor2::randn(rows, cols, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn fresh_model_matches_zero_shot() {
        let w = unit(5, 8, 1);
        let m = CprModel::new(
            TextInit::Frozen(w.clone()),
            unit(5, 8, 2),
            None,
            &ModelConfig::default(),
        )
        .unwrap();
        let q = unit(200, 8, 3);
        let classes: Vec<usize> = (0..5).collect();
        let a = m.predict(&q, &classes, None, Exec::Sequential).unwrap();
        assert_eq!(a, zero_shot_predictions(&q, &w).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_restores_arch() {
        let cfg = ModelConfig {
            variant: Variant::TextOnly,
            ..ModelConfig::default()
        };
        let m = CprModel::new(
            TextInit::Prompt {
                class_tokens: unit(4, 6, 4),
                context_len: 2,
            },
            unit(4, 6, 5),
            None,
            &cfg,
        )
        .unwrap();
        let bytes = checkpoint::encode(&checkpoint::from_store(&m.store));
        let back = CprModel::from_store(checkpoint::to_store(checkpoint::decode(&bytes).unwrap())).unwrap();
        assert_eq!(back.variant(), Variant::TextOnly);
        assert_eq!(back.tau(), 0.01);
        assert!(back.arch.prompt().is_some());
        assert_eq!(back.store.trainable_count(), m.store.trainable_count());
    }

    #[test]
    fn anchor_shape_is_checked() {
        let r = CprModel::new(
            TextInit::Frozen(unit(3, 4, 1)),
            unit(3, 4, 2),
            Some(unit(2, 4, 3)),
            &ModelConfig::default(),
        );
        assert!(matches!(r, Err(CprError::Config(_))));
    }
}
