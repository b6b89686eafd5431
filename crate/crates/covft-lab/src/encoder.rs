//! ViT-style visual encoder.
//!
//! Images are cut into non-overlapping patches, linearly embedded, given a
//! learned position embedding and pushed through pre-LN transformer blocks.
//! Features are read after `feature_layer` (then a final layer norm).
//!
//! Two fine-tuning hooks live directly in the forward pass and activate on
//! parameter presence: low-rank `lora_a`/`lora_b` factors next to the q/v
//! projections, and a learned prompt block (`encoder.prompts`) prepended to
//! the patch sequence and stripped again before the features leave.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Blocks `0..=feature_layer` run; the projector reads what comes out.
    pub feature_layer: usize,
    pub eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image: 16,
            patch: 4,
            depth: 8,
            dim: 32,
            heads: 4,
            hidden: 128,
            feature_layer: 7,
            eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.feature_layer >= self.depth {
            return Err(Error::Config(format!(
                "feature layer {} outside depth {}",
                self.feature_layer, self.depth
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("ffn hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn block_param(i: usize, part: &str) -> String {
    format!("encoder.blocks.{i}.{part}")
}

/// Create the parameters of one transformer block under `base`. Shared with
/// the frozen text encoder, which uses the same block shape under another
/// prefix. Weights are N(0, 0.02), biases zero, layer norms identity.
pub fn init_block(
    store: &mut ParamStore,
    base: &str,
    dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = 0.02;
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{base}.{ln}.weight"), Tensor::full(vec![dim], 1.0))?;
        store.insert(format!("{base}.{ln}.bias"), Tensor::zeros(vec![dim]))?;
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{base}.attn.{proj}.weight"), normal(rng, vec![dim, dim], std))?;
        store.insert(format!("{base}.attn.{proj}.bias"), Tensor::zeros(vec![dim]))?;
    }
    store.insert(format!("{base}.ffn.fc1.weight"), normal(rng, vec![dim, hidden], std))?;
    store.insert(format!("{base}.ffn.fc1.bias"), Tensor::zeros(vec![hidden]))?;
    store.insert(format!("{base}.ffn.fc2.weight"), normal(rng, vec![hidden, dim], std))?;
    store.insert(format!("{base}.ffn.fc2.bias"), Tensor::zeros(vec![dim]))?;
    Ok(())
}

/// Create all encoder parameters.
pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let std = 0.02;
    store.insert(
        "encoder.patch_embed.weight",
        normal(rng, vec![cfg.patch_dim(), cfg.dim], std),
    )?;
    store.insert("encoder.patch_embed.bias", Tensor::zeros(vec![cfg.dim]))?;
    store.insert("encoder.pos_embed", normal(rng, vec![cfg.n_patches(), cfg.dim], std))?;
    for i in 0..cfg.depth {
        init_block(store, &format!("encoder.blocks.{i}"), cfg.dim, cfg.hidden, rng)?;
    }
    store.insert("encoder.ln_f.weight", Tensor::full(vec![cfg.dim], 1.0))?;
    store.insert("encoder.ln_f.bias", Tensor::zeros(vec![cfg.dim]))?;
    Ok(())
}

/// Flatten a rendered `[H, W, 3]` image into the `[n_patches, patch_dim]`
/// matrix the embedding expects (patches row-major, pixels row-major within
/// a patch, RGB innermost).
pub fn image_to_patches(img: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    if img.shape() != [cfg.image, cfg.image, 3] {
        return Err(Error::Shape {
            op: "image_to_patches",
            detail: format!("image {:?} vs config {}x{}x3", img.shape(), cfg.image, cfg.image),
        });
    }
    let side = cfg.image / cfg.patch;
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for y in 0..cfg.patch {
                for x in 0..cfg.patch {
                    let iy = pr * cfg.patch + y;
                    let ix = pc * cfg.patch + x;
                    let base = (iy * cfg.image + ix) * 3;
                    data.extend_from_slice(&img.data()[base..base + 3]);
                }
            }
        }
    }
    Tensor::matrix(cfg.n_patches(), cfg.patch_dim(), data)
}

/// Patch embedding plus learned positions: `[n_patches, dim]`.
pub fn patch_embed(t: &mut Tape, patches: Tensor) -> Result<Var> {
    let x = t.constant(patches);
    let w = t.param("encoder.patch_embed.weight")?;
    let b = t.param("encoder.patch_embed.bias")?;
    let pos = t.param("encoder.pos_embed")?;
    let e = t.graph.matmul(x, w)?;
    let e = t.graph.add_row(e, b)?;
    t.graph.add(e, pos)
}

/// A linear projection with optional low-rank adaptation factors. When
/// `<name>.lora_a` / `<name>.lora_b` exist in the store the result is
/// `x·W + (x·A)·B + bias`; LoRA keeps `B` zero-initialized so a fresh
/// adapter leaves the function unchanged.
pub(crate) fn projection(t: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let w = t.param(&format!("{name}.weight"))?;
    let b = t.param(&format!("{name}.bias"))?;
    let mut out = t.graph.matmul(x, w)?;
    if t.has_param(&format!("{name}.lora_a")) {
        let a = t.param(&format!("{name}.lora_a"))?;
        let bb = t.param(&format!("{name}.lora_b"))?;
        let xa = t.graph.matmul(x, a)?;
        let xab = t.graph.matmul(xa, bb)?;
        out = t.graph.add(out, xab)?;
    }
    t.graph.add_row(out, b)
}

pub(crate) fn layer_norm(t: &mut Tape, x: Var, name: &str, eps: f64) -> Result<Var> {
    let gamma = t.param(&format!("{name}.weight"))?;
    let beta = t.param(&format!("{name}.bias"))?;
    t.graph.layer_norm(x, gamma, beta, eps)
}

/// Multi-head self-attention over `x` using the named projection prefix.
pub(crate) fn self_attention(t: &mut Tape, cfg: &EncoderConfig, prefix: &str, x: Var) -> Result<Var> {
    let q = projection(t, x, &format!("{prefix}.wq"))?;
    let k = projection(t, x, &format!("{prefix}.wk"))?;
    let v = projection(t, x, &format!("{prefix}.wv"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = t.graph.slice_cols(q, h * dh, dh)?;
        let kh = t.graph.slice_cols(k, h * dh, dh)?;
        let vh = t.graph.slice_cols(v, h * dh, dh)?;
        let scores = t.graph.matmul_tb(qh, kh)?;
        let scores = t.graph.scale(scores, scale)?;
        let attn = t.graph.softmax(scores, 1)?;
        heads.push(t.graph.matmul(attn, vh)?);
    }
    let joined = t.graph.concat_cols(&heads)?;
    projection(t, joined, &format!("{prefix}.wo"))
}

/// `x + attn(ln1(x))`. `base` is the block's parameter prefix.
pub fn attn_sublayer(t: &mut Tape, cfg: &EncoderConfig, base: &str, x: Var) -> Result<Var> {
    let normed = layer_norm(t, x, &format!("{base}.ln1"), cfg.eps)?;
    let attn = self_attention(t, cfg, &format!("{base}.attn"), normed)?;
    t.graph.add(x, attn)
}

/// `h + fc2(gelu(fc1(ln2(h))))` — the dense FFN path.
pub fn ffn_sublayer(t: &mut Tape, cfg: &EncoderConfig, base: &str, h: Var) -> Result<Var> {
    let normed = layer_norm(t, h, &format!("{base}.ln2"), cfg.eps)?;
    let u = projection(t, normed, &format!("{base}.ffn.fc1"))?;
    let u = t.graph.gelu(u)?;
    let y = projection(t, u, &format!("{base}.ffn.fc2"))?;
    t.graph.add(h, y)
}

/// One full transformer block.
pub fn block_forward(t: &mut Tape, cfg: &EncoderConfig, base: &str, x: Var) -> Result<Var> {
    let h = attn_sublayer(t, cfg, base, x)?;
    ffn_sublayer(t, cfg, base, h)
}

/// Full plain encode: patches in, `[n_patches, dim]` features out. If the
/// store carries `encoder.prompts`, those rows ride along through the blocks
/// and are stripped before the final norm.
pub fn encode(t: &mut Tape, cfg: &EncoderConfig, patches: Tensor) -> Result<Var> {
    let mut x = patch_embed(t, patches)?;
    let prompts = t.has_param("encoder.prompts");
    if prompts {
        let p = t.param("encoder.prompts")?;
        x = t.graph.concat_rows(&[p, x])?;
    }
    for i in 0..=cfg.feature_layer {
        x = block_forward(t, cfg, &format!("encoder.blocks.{i}"), x)?;
    }
    if prompts {
        let n_prompt = t.graph.value(x).dims2()?.0 - cfg.n_patches();
        x = t.graph.slice_rows(x, n_prompt, cfg.n_patches())?;
    }
    layer_norm(t, x, "encoder.ln_f", cfg.eps)
}
