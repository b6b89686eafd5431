//! Experiment orchestration: the flat config format, the two-stage
//! train/evaluate pipeline, self-describing run directories, benchmark
//! matrices, the preference-conflict bundle, and context-trace analysis.
//! The CLI subcommands and most examples are thin wrappers over this module.

use crate::analysis::{
    encoder_l2_distance, grad_cosine_series, kmeans, pca_2d, routing_context_correlation,
    shuffled_routing_correlation, similarity_lift, spearman, KmeansResult, Pca2d,
};
use crate::comoe::Routing;
use crate::cve::{self, ContextKind};
use crate::error::{Error, Result};
use crate::model::{self, ComoeSettings, ModelConfig};
use crate::params::{ParamStore, Tape};
use crate::pipeline::EvalReport;
use crate::seed::{indexed_stream, stream, subseed};
use crate::taskgen::{self, Sample, TaskKind, ALL_KINDS};
use crate::tensor::Tensor;
use crate::vft::{self, GradSnapshot, RunRecord, Stage, Strategy, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

/// Pairs sampled when correlating context similarity with gate similarity.
pub const ROUTING_PAIRS: usize = 10_000;
/// Samples listed per cluster as nearest-to-centroid exemplars.
pub const EXEMPLARS: usize = 4;

// ---- configuration ----------------------------------------------------------

/// Dataset shape shared by the two stages and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kinds: Vec<TaskKind>,
    /// Instruction-stage pool size before `fraction` is applied.
    pub n_train: usize,
    pub n_eval: usize,
    /// Caption pairs for the projector-alignment stage.
    pub n_pretrain: usize,
    pub fraction: f64,
}

/// Step and learning-rate budget for the two stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBudget {
    /// 0 skips the alignment stage entirely.
    pub pretrain_steps: usize,
    pub instruct_steps: usize,
    pub batch: usize,
    pub pretrain_lr: f64,
    pub instruct_lr: f64,
    pub log_every: usize,
}

/// The model ablation knobs; geometry is fixed per crate version.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelKnobs {
    pub experts: usize,
    pub routing: Routing,
    pub context: ContextKind,
    pub comoe_start: usize,
    pub comoe_end: usize,
}

/// Everything a run needs beyond the code itself. The text form (one dotted
/// `key = value` per line) round-trips through [`parse_config`] /
/// [`ExperimentConfig::to_text`], and a verbatim copy lands in every run
/// directory, so `config.txt + version + seed` pins a run down exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub strategy: Strategy,
    pub lora_rank: usize,
    pub vpt_prompts: usize,
    pub data: DataConfig,
    pub budget: TrainBudget,
    pub knobs: ModelKnobs,
    /// Cluster count for context analysis.
    pub analysis_k: usize,
    /// Samples traced through a contextual model after training.
    pub n_trace: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out: PathBuf::from("runs"),
            jobs: 1,
            strategy: Strategy::Covft,
            lora_rank: vft::DEFAULT_LORA_RANK,
            vpt_prompts: vft::DEFAULT_VPT_PROMPTS,
            data: DataConfig {
                kinds: ALL_KINDS.to_vec(),
                n_train: 600,
                n_eval: 150,
                n_pretrain: 300,
                fraction: 1.0,
            },
            budget: TrainBudget {
                pretrain_steps: 150,
                instruct_steps: 400,
                batch: 8,
                pretrain_lr: 1e-3,
                instruct_lr: 3e-4,
                log_every: 10,
            },
            knobs: ModelKnobs {
                experts: 4,
                routing: Routing::Dense,
                context: ContextKind::Cve,
                comoe_start: 4,
                comoe_end: 7,
            },
            analysis_k: 10,
            n_trace: 1050,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for config key {key}")))
}

fn parse_kinds(value: &str) -> Result<Vec<TaskKind>> {
    if value == "all" {
        return Ok(ALL_KINDS.to_vec());
    }
    value.split(',').map(|s| TaskKind::from_name(s.trim())).collect()
}

fn kinds_text(kinds: &[TaskKind]) -> String {
    if kinds == ALL_KINDS {
        "all".into()
    } else {
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "jobs" => self.jobs = parse_as(key, value)?,
            "strategy" => self.strategy = Strategy::from_name(value)?,
            "data.kinds" => self.data.kinds = parse_kinds(value)?,
            "data.n_train" => self.data.n_train = parse_as(key, value)?,
            "data.n_eval" => self.data.n_eval = parse_as(key, value)?,
            "data.n_pretrain" => self.data.n_pretrain = parse_as(key, value)?,
            "data.fraction" => self.data.fraction = parse_as(key, value)?,
            "train.pretrain_steps" => self.budget.pretrain_steps = parse_as(key, value)?,
            "train.instruct_steps" => self.budget.instruct_steps = parse_as(key, value)?,
            "train.batch" => self.budget.batch = parse_as(key, value)?,
            "train.pretrain_lr" => self.budget.pretrain_lr = parse_as(key, value)?,
            "train.instruct_lr" => self.budget.instruct_lr = parse_as(key, value)?,
            "train.log_every" => self.budget.log_every = parse_as(key, value)?,
            "train.lora_rank" => self.lora_rank = parse_as(key, value)?,
            "train.vpt_prompts" => self.vpt_prompts = parse_as(key, value)?,
            "model.experts" => self.knobs.experts = parse_as(key, value)?,
            "model.routing" => self.knobs.routing = Routing::from_name(value)?,
            "model.context" => self.knobs.context = ContextKind::from_name(value)?,
            "model.comoe_start" => self.knobs.comoe_start = parse_as(key, value)?,
            "model.comoe_end" => self.knobs.comoe_end = parse_as(key, value)?,
            "analysis.k" => self.analysis_k = parse_as(key, value)?,
            "analysis.n_trace" => self.n_trace = parse_as(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("jobs", self.jobs.to_string());
        kv("strategy", self.strategy.name().into());
        kv("data.kinds", kinds_text(&self.data.kinds));
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_eval", self.data.n_eval.to_string());
        kv("data.n_pretrain", self.data.n_pretrain.to_string());
        kv("data.fraction", self.data.fraction.to_string());
        kv("train.pretrain_steps", self.budget.pretrain_steps.to_string());
        kv("train.instruct_steps", self.budget.instruct_steps.to_string());
        kv("train.batch", self.budget.batch.to_string());
        kv("train.pretrain_lr", self.budget.pretrain_lr.to_string());
        kv("train.instruct_lr", self.budget.instruct_lr.to_string());
        kv("train.log_every", self.budget.log_every.to_string());
        kv("train.lora_rank", self.lora_rank.to_string());
        kv("train.vpt_prompts", self.vpt_prompts.to_string());
        kv("model.experts", self.knobs.experts.to_string());
        kv("model.routing", self.knobs.routing.name());
        kv("model.context", self.knobs.context.name().into());
        kv("model.comoe_start", self.knobs.comoe_start.to_string());
        kv("model.comoe_end", self.knobs.comoe_end.to_string());
        kv("analysis.k", self.analysis_k.to_string());
        kv("analysis.n_trace", self.n_trace.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.data.kinds.is_empty() {
            return Err(Error::Config("data.kinds must not be empty".into()));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("data.n_train and data.n_eval must be positive".into()));
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.fraction {} outside (0, 1]",
                self.data.fraction
            )));
        }
        if self.budget.instruct_steps == 0 || self.budget.batch == 0 {
            return Err(Error::Config(
                "train.instruct_steps and train.batch must be positive".into(),
            ));
        }
        if self.budget.pretrain_steps > 0 && self.data.n_pretrain == 0 {
            return Err(Error::Config("pretraining needs data.n_pretrain > 0".into()));
        }
        if self.analysis_k == 0 {
            return Err(Error::Config("analysis.k must be at least 1".into()));
        }
        // The contextual variant must assemble even if this config never
        // trains one, so knob typos surface early.
        self.model_for(Strategy::Covft).validate()
    }

    /// Fill in adapter sizes for the strategies that carry them.
    pub fn effective(&self, s: Strategy) -> Strategy {
        match s {
            Strategy::Lora { .. } => Strategy::Lora { rank: self.lora_rank },
            Strategy::Vpt { .. } => Strategy::Vpt { n_prompts: self.vpt_prompts },
            other => other,
        }
    }

    /// The model a strategy trains: contextual for covft, plain otherwise.
    /// Both share every donor parameter at init.
    pub fn model_for(&self, s: Strategy) -> ModelConfig {
        let mut cfg = ModelConfig::plain();
        if matches!(s, Strategy::Covft) {
            cfg.comoe = Some(ComoeSettings {
                start: self.knobs.comoe_start,
                end: self.knobs.comoe_end,
                n_experts: self.knobs.experts,
                routing: self.knobs.routing,
                context: self.knobs.context,
            });
        }
        cfg
    }
}

impl ExperimentConfig {
    /// Apply a block of `key = value` lines on top of the current values.
    /// `#` lines are comments. Unknown keys are errors so typos cannot
    /// silently fall back to defaults.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    i + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Parse the flat config format starting from defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(text)?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

// ---- run-directory plumbing --------------------------------------------------

fn write_text_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path, format!("serialize: {e}")))?;
    s.push('\n');
    write_text_file(path, &s)
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn records_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::Parse { path: "records.jsonl".into(), detail: e.to_string() })?,
        );
        s.push('\n');
    }
    Ok(s)
}

/// SHA-256 of a file's bytes, hex-encoded. The reproducibility checks compare
/// rerun artifacts with this.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::params::hex(&Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'static str,
    run_id: &'a str,
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    strategy: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params_digest: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    failed: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    notes: Option<&'a str>,
}

impl<'a> Meta<'a> {
    fn new(run_id: &'a str, command: &'a str, seed: u64) -> Self {
        Meta {
            version: env!("CARGO_PKG_VERSION"),
            run_id,
            command,
            seed,
            strategy: None,
            model: None,
            params_digest: None,
            failed: Vec::new(),
            notes: None,
        }
    }
}

// ---- the two-stage pipeline ---------------------------------------------------

/// What to record during the instruction stage beyond the loss curve.
#[derive(Debug, Clone, Copy, Default)]
pub struct Instrument {
    pub snapshot_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

/// Everything a finished run leaves in memory.
pub struct RunArtifacts {
    pub strategy: Strategy,
    pub seed: u64,
    pub model: ModelConfig,
    pub store: ParamStore,
    pub records: Vec<RunRecord>,
    pub snapshots: Vec<GradSnapshot>,
    pub checkpoints: Vec<vft::Checkpoint>,
    pub report: EvalReport,
}

fn instruct_data(xc: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    taskgen::build_dataset(
        xc.data.n_train,
        subseed(seed, "data-train"),
        xc.data.fraction,
        &xc.data.kinds,
    )
}

fn eval_data(xc: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    taskgen::build_dataset(xc.data.n_eval, subseed(seed, "data-eval"), 1.0, &xc.data.kinds)
}

/// Initialize the model for `strategy` from `seed`, attaching adapters where
/// the strategy needs them. Runs that share a seed share every donor
/// parameter bit-for-bit across strategies.
pub fn init_for_strategy(
    xc: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<(ModelConfig, ParamStore)> {
    let strategy = xc.effective(strategy);
    let cfg = xc.model_for(strategy);
    cfg.validate()?;
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg, seed)?;
    match strategy {
        Strategy::Lora { rank } => {
            vft::apply_lora(&mut store, &cfg, rank, &mut stream(seed, "init-adapters"))?
        }
        Strategy::Vpt { n_prompts } => {
            vft::apply_vpt(&mut store, &cfg, n_prompts, &mut stream(seed, "init-adapters"))?
        }
        _ => {}
    }
    Ok((cfg, store))
}

/// Alignment pretraining followed by instruction tuning, then a held-out
/// evaluation. Data, init, and batch order all derive from `seed` alone, so
/// two strategies at one seed see the same world.
pub fn two_stage(
    xc: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
    instrument: Instrument,
) -> Result<RunArtifacts> {
    let strategy = xc.effective(strategy);
    let (cfg, mut store) = init_for_strategy(xc, strategy, seed)?;
    let mut records = Vec::new();

    if xc.budget.pretrain_steps > 0 {
        let pairs = taskgen::pretrain_pairs(xc.data.n_pretrain, subseed(seed, "data-pretrain"))?;
        let mut tc = TrainConfig::new(
            strategy,
            Stage::Pretrain,
            xc.budget.pretrain_steps,
            xc.budget.batch,
            xc.budget.pretrain_lr,
            subseed(seed, "pretrain"),
        );
        tc.log_every = xc.budget.log_every;
        let out = vft::train(&mut store, &cfg, &pairs, &tc)?;
        records.extend(out.records);
    }

    let train_set = instruct_data(xc, seed)?;
    let mut tc = TrainConfig::new(
        strategy,
        Stage::Instruct,
        xc.budget.instruct_steps,
        xc.budget.batch,
        xc.budget.instruct_lr,
        subseed(seed, "instruct"),
    );
    tc.log_every = xc.budget.log_every;
    tc.snapshot_every = instrument.snapshot_every;
    tc.checkpoint_every = instrument.checkpoint_every;
    let out = vft::train(&mut store, &cfg, &train_set, &tc)?;
    records.extend(out.records);

    let eval_set = eval_data(xc, seed)?;
    let report = model::evaluate(&store, &cfg, &eval_set, subseed(seed, "eval"))?;
    Ok(RunArtifacts {
        strategy,
        seed,
        model: cfg,
        store,
        records,
        snapshots: out.snapshots,
        checkpoints: out.checkpoints,
        report,
    })
}

// ---- context traces ------------------------------------------------------------

/// One sample's pass through a contextual model, flattened for analysis:
/// per-block context and gate vectors concatenated in block order, the mean
/// encoder token as the visual fingerprint, and the frozen tower's summary
/// embedding as the textual one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: usize,
    pub kind: String,
    pub context: Vec<f64>,
    pub routing: Vec<f64>,
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
}

fn mean_rows(t: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = t.dims2()?;
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, v) in out.iter_mut().enumerate() {
            *v += t.data()[r * cols + c];
        }
    }
    for v in &mut out {
        *v /= rows as f64;
    }
    Ok(out)
}

/// Run `samples` through a trained contextual model without training and
/// collect one [`TraceRow`] each. `seed` feeds per-sample routing draws under
/// `random_k`, keeping rows independent of collection order.
pub fn collect_traces(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let Some(cm) = &cfg.comoe else {
        return Err(Error::Config("tracing needs a model with a context path".into()));
    };
    let needs_rng = cm.routing.is_random();
    let frozen = BTreeSet::new();
    let mut rows = Vec::with_capacity(samples.len());
    for (id, sample) in samples.iter().enumerate() {
        let mut rng = needs_rng.then(|| indexed_stream(seed, "eval-route", id as u64));
        let mut t = Tape::with_mask(store, &frozen);
        let patches = crate::encoder::image_to_patches(&sample.scene.render(), &cfg.encoder)?;
        let enc =
            model::encode_with_context(&mut t, cfg, patches, &sample.instruction, rng.as_mut())?;
        let visual = mean_rows(t.graph.value(enc.features))?;
        let th = cve::text_embed(&mut t, cfg.encoder.dim, &sample.instruction)?;
        let textual = t.graph.value(th).data()[..cfg.encoder.dim].to_vec();
        rows.push(TraceRow {
            id,
            kind: sample.kind.name().into(),
            context: enc.ctx_trace.concat(),
            routing: enc.routing_trace.concat(),
            visual,
            textual,
        });
    }
    Ok(rows)
}

// ---- train command ---------------------------------------------------------------

/// Where a run landed and how it scored.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dir: PathBuf,
    pub macro_mean: f64,
}

/// Train one strategy end to end and leave a self-describing run directory:
/// `config.txt`, `meta.json`, `records.jsonl`, `eval.csv`, the final
/// parameters plus their digest, and `traces.json` for contextual models.
pub fn cmd_train(xc: &ExperimentConfig) -> Result<RunSummary> {
    xc.validate()?;
    let strategy = xc.effective(xc.strategy);
    let run_id = format!("train-{}-s{}", strategy.name(), xc.seed);
    let art = two_stage(xc, strategy, xc.seed, Instrument::default())?;

    let dir = xc.out.join(&run_id);
    write_text_file(&dir.join("config.txt"), &xc.to_text())?;
    let mut meta = Meta::new(&run_id, "train", xc.seed);
    let strategy_name = strategy.name();
    meta.strategy = Some(strategy_name);
    meta.model = Some(&art.model);
    meta.params_digest = Some(art.store.digest());
    write_json_file(&dir.join("meta.json"), &meta)?;
    write_text_file(&dir.join("records.jsonl"), &records_jsonl(&art.records)?)?;
    write_text_file(&dir.join("eval.csv"), &art.report.to_csv(&run_id))?;
    art.store.save(dir.join("params.json"))?;
    write_text_file(&dir.join("params.digest.txt"), &format!("{}\n", art.store.digest()))?;

    if art.model.comoe.is_some() {
        let trace_set =
            taskgen::build_dataset(xc.n_trace, subseed(xc.seed, "data-trace"), 1.0, &xc.data.kinds)?;
        let rows = collect_traces(&art.store, &art.model, &trace_set, subseed(xc.seed, "trace"))?;
        write_json_file(&dir.join("traces.json"), &rows)?;
    }
    Ok(RunSummary { run_id, dir, macro_mean: art.report.macro_mean })
}

// ---- benchmark matrices -------------------------------------------------------------

/// The sweeps the bench command knows how to lay out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Strategy,
    Routing,
    Contextual,
    Experts,
    Diversity,
}

impl MatrixKind {
    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Strategy => "strategy",
            MatrixKind::Routing => "routing",
            MatrixKind::Contextual => "contextual",
            MatrixKind::Experts => "experts",
            MatrixKind::Diversity => "diversity",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "strategy" => MatrixKind::Strategy,
            "routing" => MatrixKind::Routing,
            "contextual" => MatrixKind::Contextual,
            "experts" => MatrixKind::Experts,
            "diversity" => MatrixKind::Diversity,
            other => return Err(Error::Config(format!("unknown bench matrix {other:?}"))),
        })
    }

    pub const ALL: [MatrixKind; 5] = [
        MatrixKind::Strategy,
        MatrixKind::Routing,
        MatrixKind::Contextual,
        MatrixKind::Experts,
        MatrixKind::Diversity,
    ];
}

struct Cell {
    variant: String,
    strategy: Strategy,
    xc: ExperimentConfig,
}

fn build_cells(xc: &ExperimentConfig, matrix: MatrixKind) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    match matrix {
        MatrixKind::Strategy => {
            for name in Strategy::ALL_NAMES {
                cells.push(Cell {
                    variant: name.into(),
                    strategy: Strategy::from_name(name)?,
                    xc: xc.clone(),
                });
            }
        }
        MatrixKind::Routing => {
            for name in ["dense", "sparse_2", "uniform", "random_2"] {
                let mut c = xc.clone();
                c.knobs.routing = Routing::from_name(name)?;
                cells.push(Cell { variant: name.into(), strategy: Strategy::Covft, xc: c });
            }
        }
        MatrixKind::Contextual => {
            for name in ["image_only", "text_only", "concat", "cve"] {
                let mut c = xc.clone();
                c.knobs.context = ContextKind::from_name(name)?;
                cells.push(Cell { variant: name.into(), strategy: Strategy::Covft, xc: c });
            }
        }
        MatrixKind::Experts => {
            for n in [2usize, 4, 8] {
                let mut c = xc.clone();
                c.knobs.experts = n;
                cells.push(Cell {
                    variant: format!("experts_{n}"),
                    strategy: Strategy::Covft,
                    xc: c,
                });
            }
        }
        MatrixKind::Diversity => {
            for n in [3usize, 6, 9, 12, 15] {
                let mut c = xc.clone();
                c.data.kinds = ALL_KINDS[..n].to_vec();
                cells.push(Cell { variant: format!("kinds_{n}"), strategy: xc.strategy, xc: c });
            }
        }
    }
    Ok(cells)
}

/// A finished (or failed) benchmark sweep.
pub struct BenchOutcome {
    pub dir: PathBuf,
    pub table: String,
    /// `variant-sSEED: error` for every cell that did not finish. Non-empty
    /// means the table carries `failed` rows and the caller should signal a
    /// partial result.
    pub failed: Vec<String>,
}

fn push_cell_rows(table: &mut String, matrix: &str, variant: &str, seed: u64, report: &EvalReport) {
    for (kind, acc) in &report.per_kind {
        table.push_str(&format!(
            "{matrix},{variant},{seed},{kind},{:.4},{}\n",
            acc.accuracy(),
            acc.n
        ));
    }
    table.push_str(&format!("{matrix},{variant},{seed},macro,{:.4},\n", report.macro_mean));
}

/// Run every cell of `matrix` at every seed and assemble one long-form CSV.
/// Cells are independent; with `jobs > 1` they run on a bounded worker pool.
/// A failing cell is recorded and skipped rather than aborting the sweep.
pub fn cmd_bench(xc: &ExperimentConfig, matrix: MatrixKind, n_seeds: usize) -> Result<BenchOutcome> {
    xc.validate()?;
    if n_seeds == 0 {
        return Err(Error::Config("bench needs at least one seed".into()));
    }
    let cells = build_cells(xc, matrix)?;
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..n_seeds as u64).map(move |s| (c, xc.seed + s)))
        .collect();

    let run_cell = |&(ci, seed): &(usize, u64)| -> (usize, u64, Result<RunArtifacts>) {
        let cell = &cells[ci];
        (ci, seed, two_stage(&cell.xc, cell.strategy, seed, Instrument::default()))
    };
    let results: Vec<(usize, u64, Result<RunArtifacts>)> = if xc.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(xc.jobs)
            .build()
            .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run_cell).collect())
    } else {
        tasks.iter().map(run_cell).collect()
    };

    let dir = xc.out.join(format!("bench-{}-s{}", matrix.name(), xc.seed));
    let mut table = String::from("matrix,variant,seed,task_kind,accuracy,n\n");
    let mut failed = Vec::new();
    let mut macros: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    for (ci, seed, outcome) in &results {
        let cell = &cells[*ci];
        match outcome {
            Ok(art) => {
                push_cell_rows(&mut table, matrix.name(), &cell.variant, *seed, &art.report);
                macros[*ci].push(art.report.macro_mean);
                let cell_dir = dir.join("cells").join(format!("{}-s{seed}", cell.variant));
                let run_id = format!("{}-s{seed}", cell.variant);
                write_text_file(&cell_dir.join("records.jsonl"), &records_jsonl(&art.records)?)?;
                write_text_file(&cell_dir.join("eval.csv"), &art.report.to_csv(&run_id))?;
                write_text_file(
                    &cell_dir.join("params.digest.txt"),
                    &format!("{}\n", art.store.digest()),
                )?;
            }
            Err(e) => {
                table.push_str(&format!(
                    "{},{},{seed},failed,,\n",
                    matrix.name(),
                    cell.variant
                ));
                failed.push(format!("{}-s{seed}: {e}", cell.variant));
            }
        }
    }
    for (ci, cell) in cells.iter().enumerate() {
        let m = &macros[ci];
        if m.is_empty() {
            continue;
        }
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64;
        table.push_str(&format!(
            "{},{},all,macro_mean,{mean:.4},\n{},{},all,macro_std,{:.4},\n",
            matrix.name(),
            cell.variant,
            matrix.name(),
            cell.variant,
            var.sqrt()
        ));
    }

    write_text_file(&dir.join("config.txt"), &xc.to_text())?;
    let bench_id = format!("bench-{}-s{}", matrix.name(), xc.seed);
    let mut meta = Meta::new(&bench_id, "bench", xc.seed);
    meta.failed = failed.clone();
    write_json_file(&dir.join("meta.json"), &meta)?;
    write_text_file(&dir.join("table.csv"), &table)?;
    Ok(BenchOutcome { dir, table, failed })
}

// ---- preference conflict ---------------------------------------------------------

/// Grounding/captioning sample pairs over *identical* scenes, so twin runs
/// differ in nothing but the instruction distribution.
pub fn twin_datasets(n: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut grounding = Vec::with_capacity(n);
    let mut captioning = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = indexed_stream(seed, "twin", i as u64);
        let mut found = false;
        // A scene without a uniquely-describable object cannot host the
        // grounding task; redraw, bounded.
        for _ in 0..64 {
            let scene = taskgen::Scene::random(&mut rng);
            let g = taskgen::sample_for_scene(&scene, TaskKind::LocateColorShape, &mut rng);
            let c = taskgen::sample_for_scene(&scene, TaskKind::CaptionAll, &mut rng);
            if let (Ok(g), Ok(c)) = (g, c) {
                grounding.push(g);
                captioning.push(c);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Contract(format!("no twin-compatible scene after 64 draws at {i}")));
        }
    }
    Ok((grounding, captioning))
}

/// One checkpoint's distance between the twins' encoders.
#[derive(Debug, Clone, Serialize)]
pub struct DivergencePoint {
    pub step: usize,
    pub total: f64,
    pub per_block: Vec<f64>,
}

/// How far two full-tuned encoders drift apart when trained from a shared
/// init on grounding vs. captioning views of the same scenes.
#[derive(Debug, Clone, Serialize)]
pub struct TwinDivergence {
    pub seed: u64,
    pub series: Vec<DivergencePoint>,
    /// Rank correlation of step against total distance.
    pub spearman: f64,
    /// Mean final per-block distance over the shallower half…
    pub shallow_mean: f64,
    /// …and the deeper half of the encoder.
    pub deep_mean: f64,
}

/// Gradient-direction stability of one strategy on mixed data: each snapshot's
/// cosine to the run's dominant direction.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentSide {
    pub strategy: String,
    pub mean: f64,
    pub std: f64,
    pub series: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TwinAlignment {
    pub seed: u64,
    pub full_ft: AlignmentSide,
    pub covft: AlignmentSide,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConflictBundle {
    pub grounding: String,
    pub captioning: String,
    pub divergence: Vec<TwinDivergence>,
    pub alignment: Vec<TwinAlignment>,
}

/// Twin full-tuning runs from one shared post-alignment init, checkpointed on
/// a fixed cadence and compared encoder-to-encoder.
pub fn conflict_divergence(xc: &ExperimentConfig, seed: u64) -> Result<TwinDivergence> {
    let cfg = ModelConfig::plain();
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg, seed)?;
    if xc.budget.pretrain_steps > 0 {
        let pairs = taskgen::pretrain_pairs(xc.data.n_pretrain, subseed(seed, "data-pretrain"))?;
        let mut tc = TrainConfig::new(
            Strategy::FullFt,
            Stage::Pretrain,
            xc.budget.pretrain_steps,
            xc.budget.batch,
            xc.budget.pretrain_lr,
            subseed(seed, "pretrain"),
        );
        tc.log_every = xc.budget.log_every;
        vft::train(&mut store, &cfg, &pairs, &tc)?;
    }

    let (grounding, captioning) = twin_datasets(xc.data.n_train, subseed(seed, "twin-data"))?;
    let steps = xc.budget.instruct_steps;
    let mut tc = TrainConfig::new(
        Strategy::FullFt,
        Stage::Instruct,
        steps,
        xc.budget.batch,
        xc.budget.instruct_lr,
        subseed(seed, "instruct"),
    );
    tc.log_every = xc.budget.log_every;
    tc.checkpoint_every = Some((steps / 10).max(1));
    // Identical train seeds: the twins draw the same batch indices, so the
    // instruction distribution is the only thing that differs.
    let mut store_g = store.clone();
    let run_g = vft::train(&mut store_g, &cfg, &grounding, &tc)?;
    let mut store_c = store;
    let run_c = vft::train(&mut store_c, &cfg, &captioning, &tc)?;

    let mut series = Vec::with_capacity(run_g.checkpoints.len());
    for (g, c) in run_g.checkpoints.iter().zip(&run_c.checkpoints) {
        if g.step != c.step {
            return Err(Error::Contract(format!(
                "checkpoint cadence mismatch: {} vs {}",
                g.step, c.step
            )));
        }
        let d = encoder_l2_distance(&g.params, &c.params)?;
        series.push(DivergencePoint { step: g.step, total: d.total, per_block: d.per_block });
    }
    let steps_x: Vec<f64> = series.iter().map(|p| p.step as f64).collect();
    let totals: Vec<f64> = series.iter().map(|p| p.total).collect();
    let rho = spearman(&steps_x, &totals)?;
    let last = series
        .last()
        .ok_or_else(|| Error::Contract("no checkpoints collected".into()))?;
    let half = last.per_block.len() / 2;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(TwinDivergence {
        seed,
        spearman: rho,
        shallow_mean: mean(&last.per_block[..half]),
        deep_mean: mean(&last.per_block[half..]),
        series,
    })
}

fn alignment_side(art: &RunArtifacts) -> Result<AlignmentSide> {
    let cs = grad_cosine_series(&art.snapshots)?;
    Ok(AlignmentSide {
        strategy: art.strategy.name().into(),
        mean: cs.mean,
        std: cs.std,
        series: cs.series,
    })
}

/// Full tuning vs. covft on the same mixed data, compared by how steadily
/// their encoder-side gradients point along each run's dominant direction.
pub fn conflict_alignment(xc: &ExperimentConfig, seed: u64) -> Result<TwinAlignment> {
    let every = (xc.budget.instruct_steps / 32).max(1);
    let instrument = Instrument { snapshot_every: Some(every), checkpoint_every: None };
    let full = two_stage(xc, Strategy::FullFt, seed, instrument)?;
    let covft = two_stage(xc, Strategy::Covft, seed, instrument)?;
    Ok(TwinAlignment {
        seed,
        full_ft: alignment_side(&full)?,
        covft: alignment_side(&covft)?,
    })
}

/// The conflict diagnostics at `n_seeds` consecutive seeds, written as
/// `bundle.json` plus flat CSV views of both series.
pub fn cmd_conflict(xc: &ExperimentConfig, n_seeds: usize) -> Result<(PathBuf, ConflictBundle)> {
    xc.validate()?;
    if n_seeds == 0 {
        return Err(Error::Config("conflict needs at least one seed".into()));
    }
    let mut bundle = ConflictBundle {
        grounding: TaskKind::LocateColorShape.name().into(),
        captioning: TaskKind::CaptionAll.name().into(),
        divergence: Vec::new(),
        alignment: Vec::new(),
    };
    for s in 0..n_seeds as u64 {
        bundle.divergence.push(conflict_divergence(xc, xc.seed + s)?);
        bundle.alignment.push(conflict_alignment(xc, xc.seed + s)?);
    }

    let run_id = format!("conflict-s{}", xc.seed);
    let dir = xc.out.join(&run_id);
    write_text_file(&dir.join("config.txt"), &xc.to_text())?;
    let mut meta = Meta::new(&run_id, "conflict", xc.seed);
    meta.notes = Some(
        "alignment reference: each run's dominant direction, the normalized \
         mean of its normalized gradient snapshots",
    );
    write_json_file(&dir.join("meta.json"), &meta)?;
    write_json_file(&dir.join("bundle.json"), &bundle)?;

    let mut div = String::from("seed,step,block,distance\n");
    for d in &bundle.divergence {
        for p in &d.series {
            for (b, v) in p.per_block.iter().enumerate() {
                div.push_str(&format!("{},{},{b},{v:.6}\n", d.seed, p.step));
            }
            div.push_str(&format!("{},{},total,{:.6}\n", d.seed, p.step, p.total));
        }
    }
    write_text_file(&dir.join("divergence.csv"), &div)?;
    let mut al = String::from("seed,strategy,step,cosine\n");
    for a in &bundle.alignment {
        for side in [&a.full_ft, &a.covft] {
            for (step, c) in &side.series {
                al.push_str(&format!("{},{},{step},{c:.6}\n", a.seed, side.strategy));
            }
        }
    }
    write_text_file(&dir.join("alignment.csv"), &al)?;
    Ok((dir, bundle))
}

// ---- trace analysis ----------------------------------------------------------------

/// One cluster of context vectors: who's in it and what it looks like.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    /// Task kinds by member count, largest first (top 3).
    pub top_kinds: Vec<(String, usize)>,
    /// Trace row ids nearest the centroid.
    pub exemplars: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub k: usize,
    pub n: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub clusters: Vec<ClusterSummary>,
    /// Intra minus inter mean cosine of the visual fingerprints under the
    /// context clustering; positive means clusters are visually coherent.
    pub visual_lift: f64,
    pub textual_lift: f64,
    /// Context-similarity vs. gate-similarity correlation over seeded pairs,
    pub routing_r: f64,
    /// …and the same statistic with gates shuffled against contexts.
    pub shuffle_r: f64,
    /// Variance fractions of the first two principal components.
    pub explained: [f64; 2],
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cluster_summaries(rows: &[TraceRow], km: &KmeansResult) -> Vec<ClusterSummary> {
    let k = km.centroids.len();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> =
            (0..rows.len()).filter(|&i| km.assignments[i] == c).collect();
        let mut counts: indexmap::IndexMap<String, usize> = indexmap::IndexMap::new();
        for &i in &members {
            *counts.entry(rows[i].kind.clone()).or_insert(0) += 1;
        }
        let mut top: Vec<(String, usize)> = counts.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        top.truncate(3);
        let mut by_dist: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| (sq_dist(&rows[i].context, &km.centroids[c]), rows[i].id))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(ClusterSummary {
            cluster: c,
            size: members.len(),
            top_kinds: top,
            exemplars: by_dist.iter().take(EXEMPLARS).map(|&(_, id)| id).collect(),
        });
    }
    out
}

/// Cluster the traced context vectors and measure what the clusters carry:
/// visual/textual coherence, the routing–context coupling, and a 2-D map.
pub fn analyze_traces(
    rows: &[TraceRow],
    k: usize,
    seed: u64,
) -> Result<(AnalyzeReport, Pca2d, KmeansResult)> {
    if rows.is_empty() {
        return Err(Error::Input("no trace rows to analyze".into()));
    }
    let contexts: Vec<Vec<f64>> = rows.iter().map(|r| r.context.clone()).collect();
    let gates: Vec<Vec<f64>> = rows.iter().map(|r| r.routing.clone()).collect();
    let visual: Vec<Vec<f64>> = rows.iter().map(|r| r.visual.clone()).collect();
    let textual: Vec<Vec<f64>> = rows.iter().map(|r| r.textual.clone()).collect();

    let km = kmeans(&contexts, k, subseed(seed, "kmeans"))?;
    let pca = pca_2d(&contexts)?;
    let visual_lift = similarity_lift(&visual, &km.assignments)?.lift();
    let textual_lift = similarity_lift(&textual, &km.assignments)?.lift();
    let routing_r =
        routing_context_correlation(&contexts, &gates, ROUTING_PAIRS, subseed(seed, "pairs"))?;
    let shuffle_r =
        shuffled_routing_correlation(&contexts, &gates, ROUTING_PAIRS, subseed(seed, "pairs"))?;

    let report = AnalyzeReport {
        k,
        n: rows.len(),
        inertia: km.inertia,
        iterations: km.iterations,
        clusters: cluster_summaries(rows, &km),
        visual_lift,
        textual_lift,
        routing_r,
        shuffle_r,
        explained: pca.explained,
    };
    Ok((report, pca, km))
}

/// Post-hoc analysis of a finished contextual run directory. Reads
/// `traces.json`, writes `analysis/{cluster_report.json, pca.csv,
/// metrics.json}`, and returns the report.
pub fn cmd_analyze(run_dir: &Path, k: usize, seed: u64) -> Result<(PathBuf, AnalyzeReport)> {
    let traces_path = run_dir.join("traces.json");
    if !traces_path.exists() {
        return Err(Error::Config(format!(
            "{} has no traces.json; analyze needs a run trained with a context path",
            run_dir.display()
        )));
    }
    let rows: Vec<TraceRow> = read_json_file(&traces_path)?;
    let (report, pca, km) = analyze_traces(&rows, k, seed)?;

    let dir = run_dir.join("analysis");
    write_json_file(&dir.join("cluster_report.json"), &report)?;
    let mut csv = String::from("id,kind,x,y,cluster\n");
    for (i, row) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            row.id, row.kind, pca.coords[i][0], pca.coords[i][1], km.assignments[i]
        ));
    }
    write_text_file(&dir.join("pca.csv"), &csv)?;
    #[derive(Serialize)]
    struct Metrics<'a> {
        k: usize,
        n: usize,
        inertia: f64,
        visual_lift: f64,
        textual_lift: f64,
        routing_r: f64,
        shuffle_r: f64,
        explained: &'a [f64; 2],
    }
    write_json_file(
        &dir.join("metrics.json"),
        &Metrics {
            k: report.k,
            n: report.n,
            inertia: report.inertia,
            visual_lift: report.visual_lift,
            textual_lift: report.textual_lift,
            routing_r: report.routing_r,
            shuffle_r: report.shuffle_r,
            explained: &report.explained,
        },
    )?;
    Ok((dir, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut xc = ExperimentConfig::default();
        xc.out = out.to_path_buf();
        xc.data.n_train = 24;
        xc.data.n_eval = 15;
        xc.data.n_pretrain = 16;
        xc.budget.pretrain_steps = 2;
        xc.budget.instruct_steps = 4;
        xc.budget.batch = 2;
        xc.n_trace = 40;
        xc.analysis_k = 4;
        xc
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut xc = ExperimentConfig::default();
        xc.seed = 7;
        xc.strategy = Strategy::Lora { rank: 8 };
        xc.data.kinds = vec![TaskKind::CountAll, TaskKind::ColorAt];
        xc.data.fraction = 0.25;
        xc.knobs.routing = Routing::SparseK(2);
        xc.knobs.context = ContextKind::Concat;
        let parsed = parse_config(&xc.to_text()).unwrap();
        assert_eq!(parsed, xc);
    }

    #[test]
    fn config_parser_rejects_junk() {
        assert!(parse_config("bogus.key = 3").unwrap_err().is_usage());
        assert!(parse_config("seed == 3").unwrap_err().is_usage());
        assert!(parse_config("seed = banana").unwrap_err().is_usage());
        assert!(parse_config("model.routing = sparse_x").unwrap_err().is_usage());
        // Comments and blanks are fine.
        let cfg = parse_config("# comment\n\nseed = 9\ndata.kinds = count_all\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.kinds, vec![TaskKind::CountAll]);
    }

    #[test]
    fn validate_catches_bad_ranges() {
        let mut xc = ExperimentConfig::default();
        xc.data.fraction = 0.0;
        assert!(xc.validate().unwrap_err().is_usage());
        let mut xc = ExperimentConfig::default();
        xc.knobs.comoe_end = 99;
        assert!(xc.validate().unwrap_err().is_usage());
    }

    #[test]
    fn twin_datasets_share_scenes() {
        let (g, c) = twin_datasets(12, 5).unwrap();
        assert_eq!(g.len(), 12);
        for (a, b) in g.iter().zip(&c) {
            assert_eq!(a.scene.objects, b.scene.objects);
            assert_eq!(a.kind, TaskKind::LocateColorShape);
            assert_eq!(b.kind, TaskKind::CaptionAll);
        }
        let (g2, _) = twin_datasets(12, 5).unwrap();
        assert_eq!(g.len(), g2.len());
        for (a, b) in g.iter().zip(&g2) {
            assert_eq!(a.instruction, b.instruction);
            assert_eq!(a.answer, b.answer);
        }
    }

    #[test]
    fn matrices_enumerate_expected_variants() {
        let xc = ExperimentConfig::default();
        let names = |m| -> Vec<String> {
            build_cells(&xc, m).unwrap().into_iter().map(|c| c.variant).collect()
        };
        assert_eq!(names(MatrixKind::Strategy), Strategy::ALL_NAMES.to_vec());
        assert_eq!(names(MatrixKind::Routing), ["dense", "sparse_2", "uniform", "random_2"]);
        assert_eq!(names(MatrixKind::Contextual), ["image_only", "text_only", "concat", "cve"]);
        assert_eq!(names(MatrixKind::Experts), ["experts_2", "experts_4", "experts_8"]);
        assert_eq!(names(MatrixKind::Diversity), ["kinds_3", "kinds_6", "kinds_9", "kinds_12", "kinds_15"]);
        for cell in build_cells(&xc, MatrixKind::Diversity).unwrap() {
            assert!(cell.xc.validate().is_ok());
        }
    }

    #[test]
    fn train_run_dir_is_self_describing_and_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let xc = tiny(&tmp.path().join("a"));
        let summary = cmd_train(&xc).unwrap();
        for f in ["config.txt", "meta.json", "records.jsonl", "eval.csv", "params.json", "params.digest.txt", "traces.json"] {
            assert!(summary.dir.join(f).exists(), "missing {f}");
        }
        // The stored config reproduces the run.
        let stored = load_config(summary.dir.join("config.txt")).unwrap();
        assert_eq!(stored.seed, xc.seed);

        let xc2 = tiny(&tmp.path().join("b"));
        let summary2 = cmd_train(&xc2).unwrap();
        for f in ["records.jsonl", "eval.csv", "params.digest.txt", "traces.json"] {
            assert_eq!(
                file_digest(summary.dir.join(f)).unwrap(),
                file_digest(summary2.dir.join(f)).unwrap(),
                "artifact {f} not reproducible"
            );
        }
    }

    #[test]
    fn analyze_reads_traces_and_writes_reports() {
        let tmp = tempfile::tempdir().unwrap();
        let xc = tiny(tmp.path());
        let summary = cmd_train(&xc).unwrap();
        let (dir, report) = cmd_analyze(&summary.dir, xc.analysis_k, xc.seed).unwrap();
        assert_eq!(report.k, 4);
        assert_eq!(report.n, 40);
        assert_eq!(report.clusters.len(), 4);
        assert!(report.clusters.iter().all(|c| c.exemplars.len() <= EXEMPLARS));
        assert_eq!(report.clusters.iter().map(|c| c.size).sum::<usize>(), 40);
        for f in ["cluster_report.json", "pca.csv", "metrics.json"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        let pca = fs::read_to_string(dir.join("pca.csv")).unwrap();
        assert_eq!(pca.lines().count(), 41);
    }

    #[test]
    fn analyze_without_traces_is_a_usage_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = cmd_analyze(tmp.path(), 4, 0).unwrap_err();
        assert!(err.is_usage(), "got {err:?}");
    }

    #[test]
    fn bench_experts_matrix_produces_complete_table() {
        let tmp = tempfile::tempdir().unwrap();
        let mut xc = tiny(tmp.path());
        xc.data.kinds = vec![TaskKind::CountAll, TaskKind::ColorAt];
        let out = cmd_bench(&xc, MatrixKind::Experts, 1).unwrap();
        assert!(out.failed.is_empty(), "{:?}", out.failed);
        assert!(out.dir.join("table.csv").exists());
        let lines: Vec<&str> = out.table.lines().collect();
        assert_eq!(lines[0], "matrix,variant,seed,task_kind,accuracy,n");
        // 3 variants × (2 kinds + macro) + 3 × 2 summary rows.
        assert_eq!(lines.len(), 1 + 3 * 3 + 3 * 2);
        for v in ["experts_2", "experts_4", "experts_8"] {
            assert!(lines.iter().any(|l| l.starts_with(&format!("experts,{v},42,macro"))));
            assert!(out.dir.join("cells").join(format!("{v}-s42")).join("eval.csv").exists());
        }
    }

    #[test]
    fn conflict_bundle_has_paired_series() {
        let tmp = tempfile::tempdir().unwrap();
        let mut xc = tiny(tmp.path());
        xc.budget.instruct_steps = 6;
        let (dir, bundle) = cmd_conflict(&xc, 1).unwrap();
        assert_eq!(bundle.divergence.len(), 1);
        let d = &bundle.divergence[0];
        // Checkpoints at 0 and then every step for 6 steps.
        assert_eq!(d.series.len(), 7);
        assert_eq!(d.series[0].step, 0);
        assert!(d.series[0].total < 1e-12, "twins must share their init");
        assert!(d.series.last().unwrap().total > 0.0);
        assert!(d.spearman.is_finite());
        let a = &bundle.alignment[0];
        assert_eq!(a.full_ft.strategy, "full_ft");
        assert_eq!(a.covft.strategy, "covft");
        assert!(!a.covft.series.is_empty());
        for f in ["bundle.json", "divergence.csv", "alignment.csv", "meta.json"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
    }
}
