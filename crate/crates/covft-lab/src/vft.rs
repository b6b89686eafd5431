//! Visual fine-tuning strategies and the training loop.
//!
//! Every strategy trains the projector during alignment and the projector
//! plus decoder during instruction tuning; they differ only in how the visual
//! encoder is allowed to move:
//!
//! * `freeze`  — encoder untouched.
//! * `full_ft` — everything trains (except the frozen text tower).
//! * `bitfit`  — encoder biases only.
//! * `lora`    — low-rank adapters on the q/v projections.
//! * `vpt`     — learned prompt tokens prepended to the patch sequence.
//! * `covft`   — the context path: extraction weights, experts, router, and
//!   the encoder layer norms.
//!
//! Training is plain AdamW with cosine decay and linear warmup. The loop can
//! snapshot the encoder-side gradient vector and checkpoint full parameter
//! sets at fixed intervals — the conflict diagnostics are built on those.

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::params::Tape;
use crate::seed::stream;
use crate::taskgen::Sample;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Freeze,
    FullFt,
    BitFit,
    Lora { rank: usize },
    Vpt { n_prompts: usize },
    Covft,
}

pub const DEFAULT_LORA_RANK: usize = 8;
pub const DEFAULT_VPT_PROMPTS: usize = 4;

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Freeze => "freeze",
            Strategy::FullFt => "full_ft",
            Strategy::BitFit => "bitfit",
            Strategy::Lora { .. } => "lora",
            Strategy::Vpt { .. } => "vpt",
            Strategy::Covft => "covft",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "freeze" => Strategy::Freeze,
            "full_ft" => Strategy::FullFt,
            "bitfit" => Strategy::BitFit,
            "lora" => Strategy::Lora { rank: DEFAULT_LORA_RANK },
            "vpt" => Strategy::Vpt { n_prompts: DEFAULT_VPT_PROMPTS },
            "covft" => Strategy::Covft,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }

    pub const ALL_NAMES: [&'static str; 6] =
        ["freeze", "full_ft", "bitfit", "lora", "vpt", "covft"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Caption alignment: only the projector learns.
    Pretrain,
    /// Instruction tuning: projector + decoder + the strategy's encoder slice.
    Instruct,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Instruct => "instruct",
        }
    }
}

/// Attach low-rank adapters to every encoder block's q and v projections.
/// `lora_b` starts at zero, so the adapted model computes exactly what the
/// bare one did.
pub fn apply_lora(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let dim = cfg.encoder.dim;
    if rank == 0 || rank > dim {
        return Err(Error::Config(format!("lora rank {rank} outside 1..={dim}")));
    }
    for i in 0..=cfg.encoder.feature_layer {
        for proj in ["wq", "wv"] {
            let base = format!("encoder.blocks.{i}.attn.{proj}");
            store.insert(
                format!("{base}.lora_a"),
                crate::params::normal(rng, vec![dim, rank], 0.02),
            )?;
            store.insert(format!("{base}.lora_b"), crate::tensor::Tensor::zeros(vec![rank, dim]))?;
        }
    }
    Ok(())
}

/// Attach `n_prompts` learned prompt tokens to the encoder input.
pub fn apply_vpt(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    n_prompts: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if n_prompts == 0 {
        return Err(Error::Config("vpt needs at least one prompt token".into()));
    }
    store.insert(
        "encoder.prompts",
        crate::params::normal(rng, vec![n_prompts, cfg.encoder.dim], 0.02),
    )?;
    Ok(())
}

fn is_encoder_ln(name: &str) -> bool {
    name.starts_with("encoder.")
        && (name.contains(".ln1.") || name.contains(".ln2.") || name.contains(".ln_f."))
}

/// The set of parameter names a strategy may update at a given stage.
/// Presence of the strategy's machinery is checked against the store:
/// `lora`/`vpt` need their adapters applied first, `covft` needs a model
/// built with an expert range.
pub fn trainable_mask(
    store: &ParamStore,
    strategy: Strategy,
    stage: Stage,
) -> Result<BTreeSet<String>> {
    let mut mask: BTreeSet<String> =
        store.names().filter(|n| n.starts_with("proj.")).map(String::from).collect();
    if mask.is_empty() {
        return Err(Error::Contract("store has no projector".into()));
    }
    if stage == Stage::Pretrain {
        return Ok(mask);
    }
    mask.extend(store.names().filter(|n| n.starts_with("dec.")).map(String::from));

    let encoder_side: Vec<String> = match strategy {
        Strategy::Freeze => Vec::new(),
        Strategy::FullFt => store
            .names()
            .filter(|n| !n.starts_with("proj.") && !n.starts_with("dec.") && !n.starts_with("text."))
            .map(String::from)
            .collect(),
        Strategy::BitFit => store
            .names()
            .filter(|n| n.starts_with("encoder.") && n.ends_with(".bias") && !n.contains(".comoe."))
            .map(String::from)
            .collect(),
        Strategy::Lora { .. } => {
            let lora: Vec<String> = store
                .names()
                .filter(|n| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
                .map(String::from)
                .collect();
            if lora.is_empty() {
                return Err(Error::Config("lora strategy on a store without adapters".into()));
            }
            lora
        }
        Strategy::Vpt { .. } => {
            if !store.contains("encoder.prompts") {
                return Err(Error::Config("vpt strategy on a store without prompts".into()));
            }
            vec!["encoder.prompts".into()]
        }
        Strategy::Covft => {
            let ctx: Vec<String> = store
                .names()
                .filter(|n| n.starts_with("cve.") || n.contains(".comoe.") || is_encoder_ln(n))
                .map(String::from)
                .collect();
            if !ctx.iter().any(|n| n.contains(".comoe.")) {
                return Err(Error::Config("covft strategy on a model without experts".into()));
            }
            ctx
        }
    };
    mask.extend(encoder_side);
    Ok(mask)
}

/// Parameter-update rule. AdamW is the default everywhere; plain SGD exists
/// for probes that need parameter motion to mirror raw gradient geometry —
/// Adam's per-coordinate normalization makes every update roughly `lr` in
/// magnitude, which erases depth structure from the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optim {
    AdamW,
    Sgd,
}

/// AdamW with decoupled weight decay (matrices only; vectors — biases and
/// norms — are never decayed).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }

    /// One update over `mask`, in name order. Parameters without a gradient
    /// entry (masked but absent from the graph this step) are skipped whole —
    /// no decay, no moment advance.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        mask: &BTreeSet<String>,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in mask {
            let Some(g) = grads.get(name) else { continue };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in {name} at optimizer step {}",
                    self.t
                )));
            }
            let w = store.get_mut(name)?;
            let decay = if w.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &g), (m, v)) in
                w.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// Plain `w -= lr * g` over `mask` in name order. Same skip rule as
/// [`AdamW::step`]: masked parameters absent from this step's graph are
/// left untouched.
pub fn sgd_step(
    store: &mut ParamStore,
    mask: &BTreeSet<String>,
    grads: &IndexMap<String, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    for name in mask {
        let Some(g) = grads.get(name) else { continue };
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} in {name}")));
        }
        let w = store.get_mut(name)?;
        for (w, &g) in w.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// Linear warmup over the first 5% of steps, cosine decay to ~0 after.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64) * 0.05).round().max(1.0) as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optim,
    pub weight_decay: f64,
    /// Emit a record every this many steps (plus always the last step).
    pub log_every: usize,
    /// Record the encoder-side gradient vector every this many steps.
    pub snapshot_every: Option<usize>,
    /// Clone the full parameter set every this many completed steps
    /// (an initial checkpoint at 0 completed steps is always included).
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, stage: Stage, steps: usize, batch: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            strategy,
            stage,
            steps,
            batch,
            lr,
            optimizer: Optim::AdamW,
            weight_decay: 0.01,
            log_every: 10,
            snapshot_every: None,
            checkpoint_every: None,
            seed,
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if n_samples == 0 {
            return Err(Error::Input("training needs at least one sample".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub stage: String,
    pub strategy: String,
    pub loss: f64,
    pub lr: f64,
    /// Batch-mean gate vector per mixture block, when the model has experts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing: Option<Vec<Vec<f64>>>,
    /// Index into the gradient snapshot list, when this step took one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_snapshot: Option<usize>,
    /// Macro accuracy from an evaluation hook, when one fired.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<f64>,
}

/// The encoder-side gradient at one step, flattened in name order. The name
/// set is the strategy mask minus the projector and decoder, so snapshots of
/// runs sharing a strategy are directly comparable.
#[derive(Debug, Clone, Serialize)]
pub struct GradSnapshot {
    pub step: usize,
    pub names: Vec<String>,
    pub flat: Vec<f64>,
    pub norm: f64,
}

pub struct Checkpoint {
    /// Completed optimizer steps at the time of the clone (0 = init).
    pub step: usize,
    pub params: ParamStore,
}

pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub snapshots: Vec<GradSnapshot>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_loss: f64,
}

/// Run the training loop, mutating `store` in place.
pub fn train(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    data: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(store, cfg, data, tc, |_, _| Ok(None))
}

/// [`train`] with a per-step hook, called after each optimizer step with the
/// 1-based completed-step count. Returning `Some(metric)` records it.
pub fn train_with(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    data: &[Sample],
    tc: &TrainConfig,
    mut on_step: impl FnMut(usize, &ParamStore) -> Result<Option<f64>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate(data.len())?;
    let mask = trainable_mask(store, tc.strategy, tc.stage)?;
    let snapshot_names: Vec<String> = mask
        .iter()
        .filter(|n| !n.starts_with("proj.") && !n.starts_with("dec."))
        .cloned()
        .collect();
    let needs_rng = cfg.comoe.as_ref().is_some_and(|cm| cm.routing.is_random());
    let mut batch_rng = stream(tc.seed, "batch");
    let mut route_rng = needs_rng.then(|| stream(tc.seed, "random-route"));

    let mut opt = AdamW::new(tc.weight_decay);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut checkpoints = Vec::new();
    if tc.checkpoint_every.is_some() {
        checkpoints.push(Checkpoint { step: 0, params: store.clone() });
    }
    let mut final_loss = f64::NAN;

    for step in 0..tc.steps {
        let lr = cosine_lr(tc.lr, step, tc.steps);
        let batch: Vec<&Sample> =
            (0..tc.batch).map(|_| &data[batch_rng.random_range(0..data.len())]).collect();

        let mut t = Tape::with_mask(store, &mask);
        let (loss, gates) = model::batch_loss(&mut t, cfg, &batch, route_rng.as_mut())?;
        let loss_v = t.graph.scalar_value(loss)?;
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!("loss {loss_v} at step {step}")));
        }
        let grads = t.graph.backward(loss)?;
        let by_name = t.grads_by_name(&grads);

        let snap_id = match tc.snapshot_every {
            Some(every) if step % every == 0 && !snapshot_names.is_empty() => {
                let mut flat = Vec::new();
                for name in &snapshot_names {
                    match by_name.get(name) {
                        Some(g) => flat.extend_from_slice(g),
                        None => flat.extend(std::iter::repeat_n(0.0, store.get(name)?.len())),
                    }
                }
                let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Numeric(format!("gradient norm {norm} at step {step}")));
                }
                snapshots.push(GradSnapshot { step, names: snapshot_names.clone(), flat, norm });
                Some(snapshots.len() - 1)
            }
            _ => None,
        };

        drop(t);
        match tc.optimizer {
            Optim::AdamW => opt.step(store, &mask, &by_name, lr)?,
            Optim::Sgd => sgd_step(store, &mask, &by_name, lr)?,
        }
        final_loss = loss_v;

        let done = step + 1;
        if let Some(every) = tc.checkpoint_every {
            if done % every == 0 {
                checkpoints.push(Checkpoint { step: done, params: store.clone() });
            }
        }
        let eval = on_step(done, store)?;
        if step % tc.log_every == 0 || done == tc.steps || eval.is_some() {
            records.push(RunRecord {
                step,
                stage: tc.stage.name().into(),
                strategy: tc.strategy.name().into(),
                loss: loss_v,
                lr,
                routing: (!gates.is_empty()).then_some(gates),
                grad_snapshot: snap_id,
                eval,
            });
        }
    }
    Ok(TrainOutcome { records, snapshots, checkpoints, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comoe::Routing;
    use crate::cve::ContextKind;
    use crate::encoder::EncoderConfig;
    use crate::model::{ComoeSettings, ModelConfig};
    use crate::pipeline::DecoderConfig;
    use crate::taskgen::{make_sample, TaskKind, VOCAB_SIZE};
    use crate::tensor::Tensor;

    fn tiny_cfg(comoe: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image: 16,
                patch: 8,
                depth: 4,
                dim: 8,
                heads: 2,
                hidden: 16,
                feature_layer: 3,
                eps: 1e-5,
            },
            decoder: DecoderConfig {
                vocab: VOCAB_SIZE,
                dim: 8,
                depth: 2,
                heads: 2,
                hidden: 16,
                max_len: 48,
                eps: 1e-5,
            },
            comoe: comoe.then_some(ComoeSettings {
                start: 1,
                end: 2,
                n_experts: 3,
                routing: Routing::Dense,
                context: ContextKind::Cve,
            }),
        }
    }

    fn built(comoe: bool, seed: u64) -> (ParamStore, ModelConfig) {
        let cfg = tiny_cfg(comoe);
        let mut store = ParamStore::new();
        model::init_model(&mut store, &cfg, seed).unwrap();
        (store, cfg)
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = crate::seed::indexed_stream(seed, "vft-test", i as u64);
                make_sample(TaskKind::ColorAt, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in Strategy::ALL_NAMES {
            assert_eq!(Strategy::from_name(name).unwrap().name(), name);
        }
        assert!(Strategy::from_name("fullft").is_err());
    }

    #[test]
    fn pretrain_masks_are_projector_only() {
        let (store, _) = built(true, 1);
        for name in Strategy::ALL_NAMES {
            let strategy = Strategy::from_name(name).unwrap();
            let mask = trainable_mask(&store, strategy, Stage::Pretrain).unwrap();
            assert!(!mask.is_empty());
            assert!(mask.iter().all(|n| n.starts_with("proj.")), "{name}");
        }
    }

    #[test]
    fn instruct_masks_cover_the_right_slices() {
        let (store, _) = built(true, 2);
        let freeze = trainable_mask(&store, Strategy::Freeze, Stage::Instruct).unwrap();
        assert!(freeze.iter().all(|n| n.starts_with("proj.") || n.starts_with("dec.")));
        assert!(freeze.iter().any(|n| n.starts_with("dec.")));

        let full = trainable_mask(&store, Strategy::FullFt, Stage::Instruct).unwrap();
        assert!(full.iter().any(|n| n.starts_with("encoder.blocks.0.attn.")));
        assert!(full.iter().all(|n| !n.starts_with("text.")));

        let bitfit = trainable_mask(&store, Strategy::BitFit, Stage::Instruct).unwrap();
        let enc_side: Vec<_> =
            bitfit.iter().filter(|n| !n.starts_with("proj.") && !n.starts_with("dec.")).collect();
        assert!(!enc_side.is_empty());
        assert!(enc_side.iter().all(|n| n.ends_with(".bias")));

        let covft = trainable_mask(&store, Strategy::Covft, Stage::Instruct).unwrap();
        assert!(covft.iter().any(|n| n.starts_with("cve.")));
        assert!(covft.iter().any(|n| n.contains(".comoe.router.")));
        assert!(covft.iter().any(|n| n.starts_with("encoder.") && n.contains(".ln1.")));
        let covft_enc: Vec<_> = covft.iter().filter(|n| n.starts_with("encoder.")).collect();
        assert!(!covft_enc.iter().any(|n| n.contains(".attn.")));
        assert!(!covft_enc.iter().any(|n| n.contains(".ffn.")));
    }

    #[test]
    fn strategies_demand_their_machinery() {
        let (plain, cfg) = built(false, 3);
        assert!(trainable_mask(&plain, Strategy::Covft, Stage::Instruct).is_err());
        assert!(trainable_mask(&plain, Strategy::Lora { rank: 4 }, Stage::Instruct).is_err());
        assert!(trainable_mask(&plain, Strategy::Vpt { n_prompts: 2 }, Stage::Instruct).is_err());

        let mut store = plain;
        let mut rng = stream(9, "adapters");
        apply_lora(&mut store, &cfg, 4, &mut rng).unwrap();
        apply_vpt(&mut store, &cfg, 2, &mut rng).unwrap();
        let lora = trainable_mask(&store, Strategy::Lora { rank: 4 }, Stage::Instruct).unwrap();
        assert!(lora.iter().any(|n| n.ends_with(".lora_a")));
        assert!(!lora.iter().any(|n| n.starts_with("encoder.") && n.ends_with(".attn.wq.weight")));
        let vpt = trainable_mask(&store, Strategy::Vpt { n_prompts: 2 }, Stage::Instruct).unwrap();
        assert!(vpt.contains("encoder.prompts"));
    }

    #[test]
    fn fresh_adapters_leave_the_forward_pass_unchanged() {
        let (mut store, cfg) = built(false, 4);
        let sample = &samples(1, 5)[0];
        let before = model::features_values(&store, &cfg, sample, None).unwrap();
        let mut rng = stream(11, "adapters");
        apply_lora(&mut store, &cfg, 4, &mut rng).unwrap();
        let after = model::features_values(&store, &cfg, sample, None).unwrap();
        assert_eq!(before.data(), after.data());

        // Prompts do change the features (they join the attention pool) but
        // not the shape.
        apply_vpt(&mut store, &cfg, 2, &mut rng).unwrap();
        let with_prompts = model::features_values(&store, &cfg, sample, None).unwrap();
        assert_eq!(with_prompts.dims2().unwrap(), before.dims2().unwrap());
        assert_ne!(with_prompts.data(), before.data());

        assert!(apply_lora(&mut store, &cfg, 0, &mut rng).is_err());
        assert!(apply_vpt(&mut store, &cfg, 0, &mut rng).is_err());
    }

    #[test]
    fn adamw_first_step_matches_the_closed_form() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let mask: BTreeSet<String> = ["w".to_string()].into();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.25]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, &mask, &grads, 0.1).unwrap();
        // First step: mhat = g, vhat = g^2, so the Adam term is g/(|g|+eps).
        for (&got, (w0, g)) in
            store.get("w").unwrap().data().iter().zip([(1.0, 0.5), (-2.0, -0.25)])
        {
            let want = w0 - 0.1 * (g / (f64::abs(g) + 1e-8) + 0.01 * w0);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0])).unwrap();
        let mask: BTreeSet<String> = ["w".to_string()].into();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        let mut opt = AdamW::new(0.0);
        assert!(matches!(opt.step(&mut store, &mask, &grads, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let mask: BTreeSet<String> = ["w".to_string()].into();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.25]);
        sgd_step(&mut store, &mask, &grads, 0.1).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0 - 0.05, -2.0 + 0.025]);
        grads.insert("w".to_string(), vec![f64::INFINITY, 0.0]);
        assert!(matches!(sgd_step(&mut store, &mask, &grads, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sgd_training_runs_and_reduces_the_loss() {
        let (mut store, cfg) = built(false, 13);
        let data = samples(4, 14);
        let mut tc = TrainConfig::new(Strategy::FullFt, Stage::Instruct, 30, 2, 2e-2, 15);
        tc.optimizer = Optim::Sgd;
        let out = train(&mut store, &cfg, &data, &tc).unwrap();
        let first = out.records.first().unwrap().loss;
        assert!(out.final_loss < first, "{} -> {}", first, out.final_loss);
    }

    #[test]
    fn vectors_are_never_weight_decayed() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::row(vec![3.0])).unwrap();
        let mask: BTreeSet<String> = ["b".to_string()].into();
        let mut grads = IndexMap::new();
        grads.insert("b".to_string(), vec![0.0]);
        let mut opt = AdamW::new(0.5);
        opt.step(&mut store, &mask, &grads, 0.1).unwrap();
        // Zero gradient + no decay on vectors = untouched.
        assert_eq!(store.get("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 1e-3;
        let total = 100;
        assert!(cosine_lr(base, 0, total) < base / 2.0);
        let warmup = 5;
        assert!((cosine_lr(base, warmup - 1, total) - base).abs() < 1e-15);
        let mut prev = cosine_lr(base, warmup, total);
        for step in warmup + 1..total {
            let lr = cosine_lr(base, step, total);
            assert!(lr < prev);
            prev = lr;
        }
        assert!(prev < 0.01 * base);
    }

    #[test]
    fn training_reduces_the_loss() {
        let (mut store, cfg) = built(true, 6);
        let data = samples(4, 7);
        let tc = TrainConfig::new(Strategy::Covft, Stage::Instruct, 30, 2, 3e-3, 8);
        let out = train(&mut store, &cfg, &data, &tc).unwrap();
        let first = out.records.first().unwrap().loss;
        assert!(out.final_loss < first, "{} -> {}", first, out.final_loss);
        assert!(out.records.iter().all(|r| r.routing.as_ref().is_some_and(|g| g.len() == 2)));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut store, cfg) = built(true, 9);
        let before = store.clone();
        let data = samples(3, 10);
        let tc = TrainConfig::new(Strategy::Freeze, Stage::Instruct, 10, 2, 1e-3, 11);
        train(&mut store, &cfg, &data, &tc).unwrap();
        let mask = trainable_mask(&store, Strategy::Freeze, Stage::Instruct).unwrap();
        let mut moved = 0;
        for name in before.names() {
            let same = before.get(name).unwrap().data() == store.get(name).unwrap().data();
            if mask.contains(name) {
                if !same {
                    moved += 1;
                }
            } else {
                assert!(same, "frozen {name} moved");
            }
        }
        assert!(moved > 0, "nothing trained at all");
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(3, 12);
        let run = || {
            let (mut store, cfg) = built(true, 13);
            let mut tc = TrainConfig::new(Strategy::Covft, Stage::Instruct, 8, 2, 1e-3, 14);
            tc.snapshot_every = Some(4);
            tc.checkpoint_every = Some(4);
            let out = train(&mut store, &cfg, &data, &tc).unwrap();
            (store.digest(), out.final_loss.to_bits(), out.snapshots.len(), out.checkpoints.len())
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.2, 2); // steps 0 and 4
        assert_eq!(a.3, 3); // init, after 4, after 8
    }

    #[test]
    fn snapshots_capture_encoder_side_gradients_only() {
        let (mut store, cfg) = built(true, 15);
        let data = samples(2, 16);
        let mut tc = TrainConfig::new(Strategy::Covft, Stage::Instruct, 2, 1, 1e-3, 17);
        tc.snapshot_every = Some(1);
        let out = train(&mut store, &cfg, &data, &tc).unwrap();
        assert_eq!(out.snapshots.len(), 2);
        let snap = &out.snapshots[0];
        assert!(snap.names.iter().all(|n| !n.starts_with("proj.") && !n.starts_with("dec.")));
        let total: usize =
            snap.names.iter().map(|n| store.get(n).unwrap().len()).sum();
        assert_eq!(snap.flat.len(), total);
        assert!(snap.flat.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn checkpoints_start_at_init() {
        let (mut store, cfg) = built(false, 18);
        let init_digest = store.digest();
        let data = samples(2, 19);
        let mut tc = TrainConfig::new(Strategy::FullFt, Stage::Instruct, 4, 1, 1e-3, 20);
        tc.checkpoint_every = Some(2);
        let out = train(&mut store, &cfg, &data, &tc).unwrap();
        assert_eq!(out.checkpoints[0].step, 0);
        assert_eq!(out.checkpoints[0].params.digest(), init_digest);
        assert_eq!(out.checkpoints.last().unwrap().params.digest(), store.digest());
    }

    #[test]
    fn a_single_sample_can_be_memorized() {
        let (mut store, cfg) = built(false, 21);
        let data = samples(1, 22);
        let tc = TrainConfig::new(Strategy::FullFt, Stage::Instruct, 300, 1, 1e-2, 23);
        let out = train(&mut store, &cfg, &data, &tc).unwrap();
        assert!(out.final_loss < 0.1, "loss stuck at {}", out.final_loss);
        let report = model::evaluate(&store, &cfg, &data, 24).unwrap();
        assert_eq!(report.macro_mean, 1.0, "answer not reproduced");
    }

    #[test]
    fn eval_hook_lands_in_the_records() {
        let (mut store, cfg) = built(false, 25);
        let data = samples(2, 26);
        let tc = TrainConfig::new(Strategy::Freeze, Stage::Instruct, 6, 1, 1e-3, 27);
        let out = train_with(&mut store, &cfg, &data, &tc, |done, _| {
            Ok((done == 3).then_some(0.5))
        })
        .unwrap();
        let hits: Vec<_> = out.records.iter().filter(|r| r.eval == Some(0.5)).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].step, 2);
    }
}
