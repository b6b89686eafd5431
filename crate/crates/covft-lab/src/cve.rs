//! Contextual vector extraction.
//!
//! A frozen toy text tower embeds the instruction once per sample. Inside the
//! encoder, each context-routed block refines the visual hidden state and the
//! text stream with lightweight residual bottlenecks, then distills a single
//! context vector `c` by single-head cross-attention: the summary token of the
//! refined text queries the joint (visual ++ text) sequence. `c` drives expert
//! routing in the same block; the refined text stream threads forward so it
//! evolves in step with the visual features.

use crate::autodiff::Var;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Tape};
use crate::seed::stream;
use crate::taskgen::{TOK_CLS, VOCAB_SIZE};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Text-stream capacity including the leading summary token.
pub const TEXT_MAX: usize = 16;
/// Depth of the frozen text tower.
pub const TEXT_DEPTH: usize = 2;
/// The text tower mimics a downloaded pretrained checkpoint: its weights come
/// from this fixed seed, independent of the run seed, and are never trained.
const TEXT_TOWER_SEED: u64 = 0x636f_7674;

/// What signal feeds the per-block router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    /// Mean of the refined visual tokens.
    ImageOnly,
    /// Summary row of the refined text stream.
    TextOnly,
    /// Linear projection of `[mean(ẑ); t_cls]` back to width `dim`.
    Concat,
    /// Full cross-attention extraction.
    Cve,
}

impl ContextKind {
    pub fn name(self) -> &'static str {
        match self {
            ContextKind::ImageOnly => "image_only",
            ContextKind::TextOnly => "text_only",
            ContextKind::Concat => "concat",
            ContextKind::Cve => "cve",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "image_only" => ContextKind::ImageOnly,
            "text_only" => ContextKind::TextOnly,
            "concat" => ContextKind::Concat,
            "cve" => ContextKind::Cve,
            other => return Err(Error::Config(format!("unknown context kind {other:?}"))),
        })
    }
}

/// Context carried through the encoder during one forward pass: the latest
/// context vector, the refined text stream, and the block that produced them.
pub struct ContextState {
    pub c: Var,
    pub t: Var,
    pub layer: usize,
}

fn text_block_cfg(dim: usize) -> EncoderConfig {
    EncoderConfig {
        image: 0,
        patch: 1,
        depth: TEXT_DEPTH,
        dim,
        heads: 4,
        hidden: 4 * dim,
        feature_layer: TEXT_DEPTH - 1,
        eps: 1e-5,
    }
}

/// Create the frozen text tower. Deterministic: same `dim` → same weights,
/// whatever the run seed.
pub fn init_text_params(store: &mut ParamStore, dim: usize) -> Result<()> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!("text tower dim {dim} not divisible by 4 heads")));
    }
    let mut rng = stream(TEXT_TOWER_SEED, "text-tower");
    let std = 0.02;
    store.insert("text.tok_embed", normal(&mut rng, vec![VOCAB_SIZE, dim], std))?;
    store.insert("text.pos_embed", normal(&mut rng, vec![TEXT_MAX, dim], std))?;
    for i in 0..TEXT_DEPTH {
        encoder::init_block(store, &format!("text.blocks.{i}"), dim, 4 * dim, &mut rng)?;
    }
    store.insert("text.ln_f.weight", Tensor::full(vec![dim], 1.0))?;
    store.insert("text.ln_f.bias", Tensor::zeros(vec![dim]))?;
    Ok(())
}

/// Embed `[summary] ++ instruction` with the frozen tower: `[T+1, dim]`.
/// Row 0 is the summary token.
pub fn text_embed(t: &mut Tape, dim: usize, instruction: &[usize]) -> Result<Var> {
    if let Some(&bad) = instruction.iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::Input(format!("token {bad} outside vocabulary {VOCAB_SIZE}")));
    }
    if instruction.len() + 1 > TEXT_MAX {
        return Err(Error::Input(format!(
            "instruction length {} exceeds text capacity {}",
            instruction.len(),
            TEXT_MAX - 1
        )));
    }
    let mut ids = Vec::with_capacity(instruction.len() + 1);
    ids.push(TOK_CLS);
    ids.extend_from_slice(instruction);

    let cfg = text_block_cfg(dim);
    let table = t.param("text.tok_embed")?;
    let pos = t.param("text.pos_embed")?;
    let emb = t.graph.embed(table, &ids)?;
    let pos = t.graph.slice_rows(pos, 0, ids.len())?;
    let mut x = t.graph.add(emb, pos)?;
    for i in 0..TEXT_DEPTH {
        x = encoder::block_forward(t, &cfg, &format!("text.blocks.{i}"), x)?;
    }
    encoder::layer_norm(t, x, "text.ln_f", cfg.eps)
}

/// Create the per-block extraction parameters under `base`: two residual
/// refiners (down-projections start at zero, so refinement starts as the
/// identity), the cross-attention projections and three layer norms.
pub fn init_cve_block(store: &mut ParamStore, base: &str, dim: usize, rng: &mut impl rand::Rng) -> Result<()> {
    let r = dim / 4;
    if r == 0 {
        return Err(Error::Config(format!("refiner bottleneck collapsed: dim {dim} < 4")));
    }
    let std = 0.02;
    for refiner in ["vis_refiner", "txt_refiner"] {
        store.insert(format!("{base}.{refiner}.up.weight"), normal(rng, vec![dim, r], std))?;
        store.insert(format!("{base}.{refiner}.down.weight"), Tensor::zeros(vec![r, dim]))?;
    }
    for proj in ["wq", "wk", "wv"] {
        store.insert(format!("{base}.attn.{proj}.weight"), normal(rng, vec![dim, dim], std))?;
    }
    for ln in ["ln_q", "ln_kv_vis", "ln_kv_txt"] {
        store.insert(format!("{base}.{ln}.weight"), Tensor::full(vec![dim], 1.0))?;
        store.insert(format!("{base}.{ln}.bias"), Tensor::zeros(vec![dim]))?;
    }
    Ok(())
}

/// `x + GELU(x·W_up)·W_down`, weights under `{base}.{which}`.
pub fn residual_refine(t: &mut Tape, base: &str, which: &str, x: Var) -> Result<Var> {
    let up = t.param(&format!("{base}.{which}.up.weight"))?;
    let down = t.param(&format!("{base}.{which}.down.weight"))?;
    let u = t.graph.matmul(x, up)?;
    let u = t.graph.gelu(u)?;
    let d = t.graph.matmul(u, down)?;
    t.graph.add(x, d)
}

/// Single-head cross-attention: the normed summary row of `th` queries the
/// joint normed `[zh; th]` sequence; returns the value mix `[1, dim]`.
pub fn extract_context(t: &mut Tape, base: &str, zh: Var, th: Var, eps: f64) -> Result<Var> {
    let (vis_rows, dim) = t.graph.value(zh).dims2()?;
    if vis_rows == 0 {
        return Err(Error::Contract("context extraction requires visual tokens".into()));
    }
    let nq = encoder::layer_norm(t, th, &format!("{base}.ln_q"), eps)?;
    let q_row = t.graph.slice_rows(nq, 0, 1)?;
    let wq = t.param(&format!("{base}.attn.wq.weight"))?;
    let q = t.graph.matmul(q_row, wq)?;

    let nz = encoder::layer_norm(t, zh, &format!("{base}.ln_kv_vis"), eps)?;
    let nt = encoder::layer_norm(t, th, &format!("{base}.ln_kv_txt"), eps)?;
    let kv = t.graph.concat_rows(&[nz, nt])?;
    let wk = t.param(&format!("{base}.attn.wk.weight"))?;
    let wv = t.param(&format!("{base}.attn.wv.weight"))?;
    let k = t.graph.matmul(kv, wk)?;
    let v = t.graph.matmul(kv, wv)?;

    let scores = t.graph.matmul_tb(q, k)?;
    let scores = t.graph.scale(scores, 1.0 / (dim as f64).sqrt())?;
    let attn = t.graph.softmax(scores, 1)?;
    t.graph.matmul(attn, v)
}

/// Context signal ablations. All kinds consume the refined streams; only the
/// reduction to `c` differs. `concat` expects a shared `cve.concat_proj.weight`
/// of shape `[2·dim, dim]` in the store.
pub fn contextual_variant(
    t: &mut Tape,
    kind: ContextKind,
    base: &str,
    zh: Var,
    th: Var,
    eps: f64,
) -> Result<Var> {
    match kind {
        ContextKind::ImageOnly => t.graph.mean_rows(zh),
        ContextKind::TextOnly => t.graph.slice_rows(th, 0, 1),
        ContextKind::Concat => {
            let m = t.graph.mean_rows(zh)?;
            let tc = t.graph.slice_rows(th, 0, 1)?;
            let cat = t.graph.concat_cols(&[m, tc])?;
            let w = t.param("cve.concat_proj.weight")?;
            t.graph.matmul(cat, w)
        }
        ContextKind::Cve => extract_context(t, base, zh, th, eps),
    }
}
