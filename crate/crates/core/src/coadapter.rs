//! Conditional adapter: sample-specific residuals from cross-attention between
//! a query feature and a prototype bank, fused into per-sample prototypes.
//!
//! For one branch and query `z` over prototypes `B` (C×d):
//!
//! ```text
//! q = z Fq,  K = B Fk,  V = B Fv
//! a = softmax(q Kᵀ / sqrt(d)) V
//! r = LayerNorm(FFN0(a) + FFN1(z))
//! ```
//!
//! The residual is a single d-vector broadcast onto every class row. The
//! visual branch attends over the image prototypes, the textual branch over
//! the text prototypes, and the fused prototypes are
//! `P_i = normalize(W_i + r_t + r_v)`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CprError, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor2};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Which residual branches contribute to the fused prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Dual,
    ImageOnly,
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dual, Variant::ImageOnly, Variant::TextOnly];

    pub fn uses_visual(self) -> bool {
        matches!(self, Variant::Dual | Variant::ImageOnly)
    }

    pub fn uses_textual(self) -> bool {
        matches!(self, Variant::Dual | Variant::TextOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dual => "dual",
            Variant::ImageOnly => "image-only",
            Variant::TextOnly => "text-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Variant::Dual),
            "image-only" | "image" | "coadapter-i" => Ok(Variant::ImageOnly),
            "text-only" | "text" | "coadapter-t" => Ok(Variant::TextOnly),
            other => Err(CprError::config(format!(
                "unknown variant `{other}` (expected dual, image-only or text-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Visual,
    Textual,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Visual => "coadapter.visual",
            Branch::Textual => "coadapter.textual",
        }
    }
}

/// Initialization knobs for a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    /// Hidden width of FFN0 and FFN1; `None` means `2 * d`.
    pub hidden: Option<usize>,
    /// Fq and Fk start at `gain * I` plus small noise.
    pub attn_gain: f64,
    /// Initial layer-norm scale.
    pub norm_gamma: f64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self {
            hidden: None,
            attn_gain: 24.0,
            norm_gamma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Trainable tensors of one residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchParams {
    fq: ParamId,
    fk: ParamId,
    fv: ParamId,
    ffn0: Mlp,
    ffn1: Mlp,
    gamma: ParamId,
    beta: ParamId,
}

const TENSOR_SUFFIXES: [&str; 13] = [
    "fq",
    "fk",
    "fv",
    "ffn0.w1",
    "ffn0.b1",
    "ffn0.w2",
    "ffn0.b2",
    "ffn1.w1",
    "ffn1.b1",
    "ffn1.w2",
    "ffn1.b2",
    "norm.gamma",
    "norm.beta",
];

impl BranchParams {
    fn register(
        store: &mut ParamStore,
        branch: Branch,
        dim: usize,
        init: AdapterInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = init.hidden.unwrap_or(2 * dim);
        if dim == 0 || h == 0 {
            return Err(CprError::config("adapter widths must be nonzero"));
        }
        let p = branch.prefix();
        let small = 0.1 / (dim as f64).sqrt();
        let gain_init = |rng: &mut ChaCha8Rng| -> Result<Tensor2> {
            Tensor2::identity(dim)
                .scale(init.attn_gain)
                .add(&Tensor2::randn(dim, dim, small, rng))
        };
        let fq = gain_init(rng)?;
        let fk = gain_init(rng)?;
        let fv = Tensor2::randn(dim, dim, (1.0 / dim as f64).sqrt(), rng);
        let fq = store.add(format!("{p}.fq"), fq, true);
        let fk = store.add(format!("{p}.fk"), fk, true);
        let fv = store.add(format!("{p}.fv"), fv, true);
        let mut mlp = |name: &str, rng: &mut ChaCha8Rng| Mlp {
            w1: store.add(
                format!("{p}.{name}.w1"),
                Tensor2::randn(dim, h, (1.0 / dim as f64).sqrt(), rng),
                true,
            ),
            b1: store.add(format!("{p}.{name}.b1"), Tensor2::zeros(1, h), true),
            w2: store.add(format!("{p}.{name}.w2"), Tensor2::zeros(h, dim), true),
            b2: store.add(format!("{p}.{name}.b2"), Tensor2::zeros(1, dim), true),
        };
        let ffn0 = mlp("ffn0", rng);
        let ffn1 = mlp("ffn1", rng);
        let gamma = store.add(
            format!("{p}.norm.gamma"),
            Tensor2::filled(1, dim, init.norm_gamma),
            true,
        );
        let beta = store.add(format!("{p}.norm.beta"), Tensor2::zeros(1, dim), true);
        Ok(Self {
            fq,
            fk,
            fv,
            ffn0,
            ffn1,
            gamma,
            beta,
        })
    }

    fn bind(store: &mut ParamStore, branch: Branch) -> Result<Self> {
        let p = branch.prefix();
        let mut ids = Vec::with_capacity(TENSOR_SUFFIXES.len());
        for s in TENSOR_SUFFIXES {
            let name = format!("{p}.{s}");
            let id = store
                .find(&name)
                .ok_or_else(|| CprError::config(format!("adapter tensor `{name}` missing")))?;
            store.set_trainable(id, true);
            ids.push(id);
        }
        let mlp = |o: usize| Mlp {
            w1: ids[o],
            b1: ids[o + 1],
            w2: ids[o + 2],
            b2: ids[o + 3],
        };
        Ok(Self {
            fq: ids[0],
            fk: ids[1],
            fv: ids[2],
            ffn0: mlp(3),
            ffn1: mlp(7),
            gamma: ids[11],
            beta: ids[12],
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.fq, self.fk, self.fv];
        v.extend(self.ffn0.ids());
        v.extend(self.ffn1.ids());
        v.extend([self.gamma, self.beta]);
        v
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.get(id).len()).sum()
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.fq).rows()
    }

    /// Residuals for every row of `z` (B×d) against `protos` (C×d), as B×d.
    pub fn residual_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        protos: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (c, d) = g.value(protos).shape();
        if c == 0 {
            return Err(CprError::EmptyPrototypes("residual over an empty prototype bank"));
        }
        let fq = g.param(store, self.fq);
        let fk = g.param(store, self.fk);
        let fv = g.param(store, self.fv);
        let q = g.matmul(z, fq)?;
        let k = g.matmul(protos, fk)?;
        let v = g.matmul(protos, fv)?;
        let scores = g.matmul_nt(q, k)?;
        let weights = g.softmax_rows(scores, 1.0 / (d as f64).sqrt());
        let attended = g.matmul(weights, v)?;
        let a = self.ffn0.forward(g, store, attended)?;
        let b = self.ffn1.forward(g, store, z)?;
        let sum = g.add(a, b)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm_rows(sum, gamma, beta, eps)
    }

    /// Residual for a single query.
    pub fn residual(&self, store: &ParamStore, z: &[f64], protos: &Tensor2, eps: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zn = g.input(Tensor2::row_vector(z));
        let pn = g.input(protos.clone());
        let r = self.residual_graph(&mut g, store, zn, pn, eps)?;
        Ok(g.value(r).clone().into_vec())
    }
}

/// Both residual branches, registered in a shared store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoAdapter {
    pub visual: BranchParams,
    pub textual: BranchParams,
    pub eps: f64,
}

impl CoAdapter {
    pub fn register(store: &mut ParamStore, dim: usize, init: AdapterInit, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok(Self {
            visual: BranchParams::register(store, Branch::Visual, dim, init, &mut rng)?,
            textual: BranchParams::register(store, Branch::Textual, dim, init, &mut rng)?,
            eps: DEFAULT_LN_EPS,
        })
    }

    pub fn bind(store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            visual: BranchParams::bind(store, Branch::Visual)?,
            textual: BranchParams::bind(store, Branch::Textual)?,
            eps: DEFAULT_LN_EPS,
        })
    }

    pub fn branch(&self, b: Branch) -> &BranchParams {
        match b {
            Branch::Visual => &self.visual,
            Branch::Textual => &self.textual,
        }
    }

    /// Trainable scalars that the variant actually uses.
    pub fn parameter_count(&self, store: &ParamStore, variant: Variant) -> usize {
        let mut n = 0;
        if variant.uses_visual() {
            n += self.visual.parameter_count(store);
        }
        if variant.uses_textual() {
            n += self.textual.parameter_count(store);
        }
        n
    }

    /// Summed residual `r_t + r_v` (B×d) for the active branches, or `None`
    /// when the variant uses neither (never the case for the defined variants).
    pub fn combined_residual_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        variant: Variant,
        z: NodeId,
        visual_bank: NodeId,
        textual_bank: NodeId,
    ) -> Result<NodeId> {
        let rv = variant
            .uses_visual()
            .then(|| self.visual.residual_graph(g, store, z, visual_bank, self.eps))
            .transpose()?;
        let rt = variant
            .uses_textual()
            .then(|| self.textual.residual_graph(g, store, z, textual_bank, self.eps))
            .transpose()?;
        match (rt, rv) {
            (Some(t), Some(v)) => g.add(t, v),
            (Some(r), None) | (None, Some(r)) => Ok(r),
            (None, None) => unreachable!("every variant uses a branch"),
        }
    }
}

/// Per-sample prototypes `normalize(W_i + residual)` for one residual row.
pub fn fuse_graph(g: &mut Graph, w: NodeId, residual_row: NodeId) -> Result<NodeId> {
    let p = g.add_row(w, residual_row)?;
    g.normalize_rows(p)
}

/// `P_i = normalize(W_i + r_t + r_v)`.
pub fn fuse(w: &Tensor2, r_t: &[f64], r_v: &[f64]) -> Result<Tensor2> {
    if r_t.len() != w.cols() || r_v.len() != w.cols() {
        return Err(CprError::shape(format!(
            "fuse: residual widths {} and {} for {}-dim prototypes",
            r_t.len(),
            r_v.len(),
            w.cols()
        )));
    }
    let mut g = Graph::new();
    let wn = g.input(w.clone());
    let t = g.input(Tensor2::row_vector(r_t));
    let v = g.input(Tensor2::row_vector(r_v));
    let r = g.add(t, v)?;
    let p = fuse_graph(&mut g, wn, r)?;
    Ok(g.value(p).clone())
}
