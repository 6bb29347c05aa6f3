//! Learnable context vectors and a frozen toy prompt encoder.
//!
//! For class `i` the token sequence is `[v_1, .., v_M, c_i]` (each of width
//! `e`). The encoder runs one residual single-head self-attention block over
//! the sequence, mean-pools the tokens, projects to width `d`, and
//! L2-normalizes. Only the context `v` is trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CprError, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor2};

pub const CONTEXT_INIT_STD: f64 = 0.02;
pub const DEFAULT_CONTEXT_FEWSHOT: usize = 16;
pub const DEFAULT_CONTEXT_BASE2NEW: usize = 4;
const ATTENTION_INIT_STD: f64 = 0.1;
const PROJECTION_NOISE_STD: f64 = 0.02;

pub const CONTEXT: &str = "prompt.ctx";
pub const CLASS_TOKENS: &str = "prompt.class_tokens";
const ENC_WQ: &str = "prompt.enc.wq";
const ENC_WK: &str = "prompt.enc.wk";
const ENC_WV: &str = "prompt.enc.wv";
const ENC_PROJ: &str = "prompt.enc.proj";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptEncoder {
    context: ParamId,
    class_tokens: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    proj: ParamId,
}

impl PromptEncoder {
    /// Registers a fresh context of length `context_len` and a seeded frozen
    /// encoder mapping `class_tokens` (C×e) to `out_dim`-wide prototypes.
    ///
    /// When `e == out_dim` the projection starts near the identity so that
    /// initial prototypes stay close to the class tokens.
    pub fn register(
        store: &mut ParamStore,
        class_tokens: Tensor2,
        context_len: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let e = class_tokens.cols();
        if class_tokens.rows() == 0 || e == 0 || out_dim == 0 {
            return Err(CprError::config("prompt encoder needs classes and nonzero widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let att = ATTENTION_INIT_STD / (e as f64).sqrt();
        let wq = Tensor2::randn(e, e, att, &mut rng);
        let wk = Tensor2::randn(e, e, att, &mut rng);
        let wv = Tensor2::randn(e, e, att, &mut rng);
        let proj = if e == out_dim {
            Tensor2::identity(e).add(&Tensor2::randn(e, e, PROJECTION_NOISE_STD, &mut rng))?
        } else {
            Tensor2::randn(e, out_dim, (1.0 / e as f64).sqrt(), &mut rng)
        };
        let context = Tensor2::randn(context_len, e, CONTEXT_INIT_STD, &mut rng);
        Ok(Self {
            context: store.add(CONTEXT, context, true),
            class_tokens: store.add(CLASS_TOKENS, class_tokens, false),
            wq: store.add(ENC_WQ, wq, false),
            wk: store.add(ENC_WK, wk, false),
            wv: store.add(ENC_WV, wv, false),
            proj: store.add(ENC_PROJ, proj, false),
        })
    }

    /// Rebinds to tensors already present in `store` (e.g. from a checkpoint).
    pub fn bind(store: &mut ParamStore) -> Result<Option<Self>> {
        let Some(context) = store.find(CONTEXT) else {
            return Ok(None);
        };
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| CprError::config(format!("prompt encoder tensor `{name}` missing")))
        };
        let enc = Self {
            context,
            class_tokens: get(CLASS_TOKENS)?,
            wq: get(ENC_WQ)?,
            wk: get(ENC_WK)?,
            wv: get(ENC_WV)?,
            proj: get(ENC_PROJ)?,
        };
        store.set_trainable(context, true);
        for id in enc.frozen_ids() {
            store.set_trainable(id, false);
        }
        Ok(Some(enc))
    }

    pub fn context_id(&self) -> ParamId {
        self.context
    }

    pub fn frozen_ids(&self) -> [ParamId; 5] {
        [self.class_tokens, self.wq, self.wk, self.wv, self.proj]
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        store.get(self.class_tokens).rows()
    }

    pub fn context_len(&self, store: &ParamStore) -> usize {
        store.get(self.context).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.proj).cols()
    }

    /// Records the encoding of `classes` into `g`, returning a `C×d` node with
    /// unit rows.
    pub fn build_w_graph(&self, g: &mut Graph, store: &ParamStore, classes: &[usize]) -> Result<NodeId> {
        let c_total = self.num_classes(store);
        if let Some(&bad) = classes.iter().find(|&&c| c >= c_total) {
            return Err(CprError::Index(format!("class {bad} of {c_total}")));
        }
        if classes.is_empty() {
            return Err(CprError::EmptyPrototypes("no classes to encode"));
        }
        let e = store.get(self.class_tokens).cols();
        let scale = 1.0 / (e as f64).sqrt();
        let ctx = g.param(store, self.context);
        let tokens = g.param(store, self.class_tokens);
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let proj = g.param(store, self.proj);
        let has_context = store.get(self.context).rows() > 0;

        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            let tok = g.select_row(tokens, c)?;
            let x = if has_context { g.concat_rows(&[ctx, tok])? } else { tok };
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let scores = g.matmul_nt(q, k)?;
            let att = g.softmax_rows(scores, scale);
            let mixed = g.matmul(att, v)?;
            let h = g.add(x, mixed)?;
            let pooled = g.mean_rows(h)?;
            rows.push(g.matmul(pooled, proj)?);
        }
        let stacked = g.concat_rows(&rows)?;
        g.normalize_rows(stacked)
    }

    pub fn build_w(&self, store: &ParamStore, classes: &[usize]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let w = self.build_w_graph(&mut g, store, classes)?;
        Ok(g.value(w).clone())
    }

    pub fn build_w_all(&self, store: &ParamStore) -> Result<Tensor2> {
        let all: Vec<usize> = (0..self.num_classes(store)).collect();
        self.build_w(store, &all)
    }

    pub fn encode_class(&self, store: &ParamStore, class: usize) -> Result<Vec<f64>> {
        Ok(self.build_w(store, &[class])?.into_vec())
    }
}

/// Validates frozen textual prototypes against the dataset class count and
/// normalizes their rows.
pub fn frozen_w(text: &crate::dataio::EmbeddingSet, num_classes: usize) -> Result<Tensor2> {
    if text.len() != num_classes {
        return Err(CprError::config(format!(
            "text embeddings have {} rows but the dataset has {num_classes} classes",
            text.len()
        )));
    }
    crate::numerics::kernels::normalize_rows(text.features())
}
