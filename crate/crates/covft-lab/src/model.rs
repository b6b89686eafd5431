//! The assembled multimodal model.
//!
//! Plain shape: ViT encoder → projector → causal decoder. With a CoMoE range
//! configured, blocks `start..=end` of the encoder swap their FFN for a
//! context-routed expert mixture: the instruction (embedded by a frozen text
//! tower) and the block's own hidden state are refined and distilled into a
//! context vector, the router gates the experts, and the gate-weighted sum
//! replaces the single FFN output. Experts start as exact copies of the donor
//! FFN, so a freshly converted model computes bit-for-bit (well, within 1e-12)
//! what the plain one does.

use crate::autodiff::Var;
use crate::comoe::{self, Routing};
use crate::cve::{self, ContextKind};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Tape};
use crate::pipeline::{self, DecoderConfig, EvalReport};
use crate::seed::{indexed_stream, stream};
use crate::taskgen::Sample;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Which encoder blocks host expert mixtures and how they are gated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComoeSettings {
    pub start: usize,
    pub end: usize,
    pub n_experts: usize,
    pub routing: Routing,
    pub context: ContextKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub comoe: Option<ComoeSettings>,
}

impl ModelConfig {
    /// Plain model: no context path, no experts.
    pub fn plain() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            comoe: None,
        }
    }

    /// The reference CoVFT shape: experts in the upper half of the encoder,
    /// dense routing, full cross-attention context.
    pub fn default_covft() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            comoe: Some(ComoeSettings {
                start: 4,
                end: 7,
                n_experts: 4,
                routing: Routing::Dense,
                context: ContextKind::Cve,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(cm) = &self.comoe {
            if cm.start > cm.end || cm.end > self.encoder.feature_layer {
                return Err(Error::Config(format!(
                    "comoe blocks {}..={} outside active encoder range 0..={}",
                    cm.start, cm.end, self.encoder.feature_layer
                )));
            }
            if cm.n_experts < 2 {
                return Err(Error::Config(format!(
                    "comoe needs at least 2 experts, got {}",
                    cm.n_experts
                )));
            }
            cm.routing.validate(cm.n_experts)?;
            if self.encoder.dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "encoder dim {} incompatible with the 4-head text tower",
                    self.encoder.dim
                )));
            }
        }
        Ok(())
    }
}

/// Parameter prefix of the context-extraction weights attached to encoder
/// block `i`. Kept under `cve.` so the fine-tuning masks can address the
/// whole context path at once.
pub fn cve_base(i: usize) -> String {
    format!("cve.blocks.{i}")
}

/// Parameter prefix of the expert mixture inside encoder block `i`.
pub fn comoe_base(i: usize) -> String {
    format!("encoder.blocks.{i}.comoe")
}

/// Create every parameter of the model from one root seed. Each module pulls
/// from its own named stream, so e.g. adding experts does not shift the
/// decoder's draw. The text tower has a fixed internal seed (it stands in for
/// a downloaded checkpoint) and ignores `seed` entirely.
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = stream(seed, "init-encoder");
    encoder::init_params(store, &cfg.encoder, &mut rng)?;
    let mut rng = stream(seed, "init-projector");
    pipeline::init_projector(store, cfg.encoder.dim, cfg.decoder.dim, &mut rng)?;
    let mut rng = stream(seed, "init-decoder");
    pipeline::init_decoder(store, &cfg.decoder, &mut rng)?;
    if let Some(cm) = &cfg.comoe {
        cve::init_text_params(store, cfg.encoder.dim)?;
        let mut rng = stream(seed, "init-cve");
        for i in cm.start..=cm.end {
            cve::init_cve_block(store, &cve_base(i), cfg.encoder.dim, &mut rng)?;
        }
        let mut rng = stream(seed, "init-comoe");
        for i in cm.start..=cm.end {
            comoe::init_experts_from_ffn(
                store,
                &format!("encoder.blocks.{i}.ffn"),
                &comoe_base(i),
                cm.n_experts,
                cfg.encoder.dim,
                &mut rng,
            )?;
        }
        if cm.context == ContextKind::Concat {
            let mut rng = stream(seed, "init-concat");
            store.insert(
                "cve.concat_proj.weight",
                normal(&mut rng, vec![2 * cfg.encoder.dim, cfg.encoder.dim], 0.02),
            )?;
        }
    }
    Ok(())
}

/// An encoder pass with its per-block context and gate observations.
/// Traces are empty for plain models.
pub struct EncodeOut {
    pub features: Var,
    /// Context vector per mixture block, in block order.
    pub ctx_trace: Vec<Vec<f64>>,
    /// Gate vector per mixture block, in block order.
    pub routing_trace: Vec<Vec<f64>>,
}

/// Visual encode. For plain models this is exactly [`encoder::encode`] and
/// `instruction` is unused. With CoMoE, the instruction is embedded once by
/// the frozen tower and its refined stream threads through the mixture
/// blocks. `sample_rng` is consumed only by `random_k` routing.
pub fn encode_with_context(
    t: &mut Tape,
    cfg: &ModelConfig,
    patches: Tensor,
    instruction: &[usize],
    mut sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodeOut> {
    let Some(cm) = &cfg.comoe else {
        let features = encoder::encode(t, &cfg.encoder, patches)?;
        return Ok(EncodeOut { features, ctx_trace: Vec::new(), routing_trace: Vec::new() });
    };

    let ecfg = &cfg.encoder;
    let mut x = encoder::patch_embed(t, patches)?;
    let prompts = t.has_param("encoder.prompts");
    if prompts {
        let p = t.param("encoder.prompts")?;
        x = t.graph.concat_rows(&[p, x])?;
    }
    let mut th = cve::text_embed(t, ecfg.dim, instruction)?;
    let mut ctx_trace = Vec::with_capacity(cm.end - cm.start + 1);
    let mut routing_trace = Vec::with_capacity(cm.end - cm.start + 1);

    for i in 0..=ecfg.feature_layer {
        let base = format!("encoder.blocks.{i}");
        if i < cm.start || i > cm.end {
            x = encoder::block_forward(t, ecfg, &base, x)?;
            continue;
        }
        let h = encoder::attn_sublayer(t, ecfg, &base, x)?;
        let cb = cve_base(i);
        th = cve::residual_refine(t, &cb, "txt_refiner", th)?;
        let zh = cve::residual_refine(t, &cb, "vis_refiner", h)?;
        let c = cve::contextual_variant(t, cm.context, &cb, zh, th, ecfg.eps)?;
        let gates = comoe::route(
            t,
            &comoe_base(i),
            c,
            cm.routing,
            cm.n_experts,
            sample_rng.as_deref_mut(),
        )?;
        let normed = encoder::layer_norm(t, h, &format!("{base}.ln2"), ecfg.eps)?;
        let mix = comoe::comoe_forward(t, &comoe_base(i), normed, gates)?;
        x = t.graph.add(h, mix)?;
        ctx_trace.push(t.graph.value(c).data().to_vec());
        routing_trace.push(t.graph.value(gates).data().to_vec());
    }
    if prompts {
        let n_prompt = t.graph.value(x).dims2()?.0 - ecfg.n_patches();
        x = t.graph.slice_rows(x, n_prompt, ecfg.n_patches())?;
    }
    let features = encoder::layer_norm(t, x, "encoder.ln_f", ecfg.eps)?;
    Ok(EncodeOut { features, ctx_trace, routing_trace })
}

/// Loss of one sample, plus the encoder observations.
pub fn sample_loss(
    t: &mut Tape,
    cfg: &ModelConfig,
    sample: &Sample,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, EncodeOut)> {
    let patches = encoder::image_to_patches(&sample.scene.render(), &cfg.encoder)?;
    let enc = encode_with_context(t, cfg, patches, &sample.instruction, sample_rng)?;
    let vis = pipeline::project(t, enc.features)?;
    let loss =
        pipeline::instruction_loss(t, &cfg.decoder, vis, &sample.instruction, &sample.answer)?;
    Ok((loss, enc))
}

/// Mean loss over a batch, with gate vectors averaged across the batch
/// (one mean per mixture block).
pub fn batch_loss(
    t: &mut Tape,
    cfg: &ModelConfig,
    batch: &[&Sample],
    mut sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut gate_sums: Vec<Vec<f64>> = Vec::new();
    for sample in batch {
        let (loss, enc) = sample_loss(t, cfg, sample, sample_rng.as_deref_mut())?;
        losses.push(loss);
        if gate_sums.is_empty() {
            gate_sums = enc.routing_trace;
        } else {
            for (acc, g) in gate_sums.iter_mut().zip(&enc.routing_trace) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
    let total = losses
        .into_iter()
        .reduce(|a, b| t.graph.add(a, b).expect("scalar add"))
        .expect("non-empty batch");
    let mean = t.graph.scale(total, 1.0 / batch.len() as f64)?;
    for g in &mut gate_sums {
        for v in g.iter_mut() {
            *v /= batch.len() as f64;
        }
    }
    Ok((mean, gate_sums))
}

/// Raw visual features of one sample as values (no gradients tracked).
pub fn features_values(
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &Sample,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let frozen = BTreeSet::new();
    let mut t = Tape::with_mask(store, &frozen);
    let patches = encoder::image_to_patches(&sample.scene.render(), &cfg.encoder)?;
    let enc = encode_with_context(&mut t, cfg, patches, &sample.instruction, sample_rng)?;
    Ok(t.graph.value(enc.features).clone())
}

/// Greedy exact-match evaluation over a sample set. `random_k` routing draws
/// from a per-sample stream of `seed`, so results do not depend on evaluation
/// order or count.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    seed: u64,
) -> Result<EvalReport> {
    let needs_rng = cfg.comoe.as_ref().is_some_and(|cm| cm.routing.is_random());
    let mut outcomes = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng = needs_rng.then(|| indexed_stream(seed, "eval-route", idx as u64));
        let features = features_values(store, cfg, sample, rng.as_mut())?;
        let out =
            pipeline::generate(store, &cfg.decoder, &features, &sample.instruction, 20)?;
        outcomes.push((sample.kind, out == sample.answer));
    }
    EvalReport::from_outcomes(&outcomes)
}
