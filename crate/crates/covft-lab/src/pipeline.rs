//! The language side of the toy multimodal model: a two-layer projector lifts
//! visual features into the decoder width, and a small causal transformer
//! predicts answer tokens autoregressively. The loss covers answer positions
//! (plus the closing end token) only — visual and instruction positions are
//! masked out of the cross-entropy.
//!
//! Sequence layout fed to the decoder:
//!
//! ```text
//! [visual tokens (projected)] [BOS] [instruction...] [SEP] [answer...] [EOS]
//! ```

use crate::autodiff::Var;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Tape};
use crate::taskgen::{TaskKind, TOK_BOS, TOK_EOS, TOK_SEP, VOCAB_SIZE};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab: VOCAB_SIZE,
            dim: 48,
            depth: 2,
            heads: 4,
            hidden: 96,
            max_len: 48,
            eps: 1e-5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.vocab == 0 || self.hidden == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }

    fn block_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            image: 0,
            patch: 1,
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden,
            feature_layer: self.depth - 1,
            eps: self.eps,
        }
    }
}

/// Projector parameters: two affine layers, GELU between.
pub fn init_projector(store: &mut ParamStore, d_v: usize, d_t: usize, rng: &mut impl Rng) -> Result<()> {
    let std = 0.02;
    store.insert("proj.fc1.weight", normal(rng, vec![d_v, d_t], std))?;
    store.insert("proj.fc1.bias", Tensor::zeros(vec![d_t]))?;
    store.insert("proj.fc2.weight", normal(rng, vec![d_t, d_t], std))?;
    store.insert("proj.fc2.bias", Tensor::zeros(vec![d_t]))?;
    Ok(())
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let std = 0.02;
    store.insert("dec.tok_embed", normal(rng, vec![cfg.vocab, cfg.dim], std))?;
    store.insert("dec.pos_embed", normal(rng, vec![cfg.max_len, cfg.dim], std))?;
    for i in 0..cfg.depth {
        encoder::init_block(store, &format!("dec.blocks.{i}"), cfg.dim, cfg.hidden, rng)?;
    }
    store.insert("dec.ln_f.weight", Tensor::full(vec![cfg.dim], 1.0))?;
    store.insert("dec.ln_f.bias", Tensor::zeros(vec![cfg.dim]))?;
    store.insert("dec.out.weight", normal(rng, vec![cfg.dim, cfg.vocab], std))?;
    store.insert("dec.out.bias", Tensor::zeros(vec![cfg.vocab]))?;
    Ok(())
}

/// `fc2(gelu(fc1(z)))` — visual features into decoder width.
pub fn project(t: &mut Tape, z: Var) -> Result<Var> {
    let u = encoder::projection(t, z, "proj.fc1")?;
    let u = t.graph.gelu(u)?;
    encoder::projection(t, u, "proj.fc2")
}

/// Causal self-attention: like the encoder's, plus a strictly-upper-triangular
/// penalty on the scores so position i never attends beyond itself.
fn causal_attention(t: &mut Tape, cfg: &DecoderConfig, prefix: &str, x: Var) -> Result<Var> {
    let (rows, _) = t.graph.value(x).dims2()?;
    let mut mask = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i + 1..rows {
            mask[i * rows + j] = -1e9;
        }
    }
    let mask = t.constant(Tensor::matrix(rows, rows, mask)?);

    let q = encoder::projection(t, x, &format!("{prefix}.wq"))?;
    let k = encoder::projection(t, x, &format!("{prefix}.wk"))?;
    let v = encoder::projection(t, x, &format!("{prefix}.wv"))?;
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = t.graph.slice_cols(q, h * dh, dh)?;
        let kh = t.graph.slice_cols(k, h * dh, dh)?;
        let vh = t.graph.slice_cols(v, h * dh, dh)?;
        let scores = t.graph.matmul_tb(qh, kh)?;
        let scores = t.graph.scale(scores, scale)?;
        let scores = t.graph.add(scores, mask)?;
        let attn = t.graph.softmax(scores, 1)?;
        heads.push(t.graph.matmul(attn, vh)?);
    }
    let joined = t.graph.concat_cols(&heads)?;
    encoder::projection(t, joined, &format!("{prefix}.wo"))
}

/// Full decoder pass over `[vis; embedded text]`: next-token logits per
/// position, `[L_v + text_len, vocab]`.
pub fn decode_logits(t: &mut Tape, cfg: &DecoderConfig, vis: Var, text: &[usize]) -> Result<Var> {
    let (l_v, d) = t.graph.value(vis).dims2()?;
    if d != cfg.dim {
        return Err(Error::Shape {
            op: "decode_logits",
            detail: format!("visual width {d}, decoder width {}", cfg.dim),
        });
    }
    let rows = l_v + text.len();
    if rows > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence of {rows} tokens overflows decoder capacity {}",
            cfg.max_len
        )));
    }
    let table = t.param("dec.tok_embed")?;
    let emb = t.graph.embed(table, text)?;
    let mut x = t.graph.concat_rows(&[vis, emb])?;
    let pos = t.param("dec.pos_embed")?;
    let pos = t.graph.slice_rows(pos, 0, rows)?;
    x = t.graph.add(x, pos)?;
    for i in 0..cfg.depth {
        let base = format!("dec.blocks.{i}");
        let normed = encoder::layer_norm(t, x, &format!("{base}.ln1"), cfg.eps)?;
        let attn = causal_attention(t, cfg, &format!("{base}.attn"), normed)?;
        let h = t.graph.add(x, attn)?;
        x = encoder::ffn_sublayer(t, &cfg.block_cfg(), &base, h)?;
    }
    let x = encoder::layer_norm(t, x, "dec.ln_f", cfg.eps)?;
    encoder::projection(t, x, "dec.out")
}

/// Assemble the decoder input text and the per-position next-token targets.
/// Only answer tokens and the closing EOS carry targets.
pub fn answer_targets(
    l_v: usize,
    instruction: &[usize],
    answer: &[usize],
) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut text = Vec::with_capacity(instruction.len() + answer.len() + 3);
    text.push(TOK_BOS);
    text.extend_from_slice(instruction);
    text.push(TOK_SEP);
    let ans_start = text.len();
    text.extend_from_slice(answer);
    text.push(TOK_EOS);

    let rows = l_v + text.len();
    let mut targets = vec![None; rows];
    for (q, &tok) in text.iter().enumerate().skip(ans_start) {
        // Position l_v + q - 1 holds the token before text[q] and predicts it.
        targets[l_v + q - 1] = Some(tok);
    }
    (text, targets)
}

/// Summed cross-entropy over the answer span of one sample. `vis` is the
/// projected visual sequence.
pub fn instruction_loss(
    t: &mut Tape,
    cfg: &DecoderConfig,
    vis: Var,
    instruction: &[usize],
    answer: &[usize],
) -> Result<Var> {
    if answer.is_empty() {
        return Err(Error::Input("sample has an empty answer".into()));
    }
    let (l_v, _) = t.graph.value(vis).dims2()?;
    let (text, targets) = answer_targets(l_v, instruction, answer);
    let logits = decode_logits(t, cfg, vis, &text)?;
    t.graph.cross_entropy(logits, &targets)
}

/// Greedy decoding from raw visual features (pre-projector values): emits
/// until EOS or `max_new` tokens. Deterministic.
pub fn generate(
    store: &ParamStore,
    cfg: &DecoderConfig,
    features: &Tensor,
    instruction: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut text = Vec::with_capacity(instruction.len() + max_new + 2);
    text.push(TOK_BOS);
    text.extend_from_slice(instruction);
    text.push(TOK_SEP);
    let mut out = Vec::new();
    for _ in 0..max_new {
        let mut t = Tape::new(store);
        let f = t.constant(features.clone());
        let vis = project(&mut t, f)?;
        if t.graph.value(vis).dims2()?.0 + text.len() >= cfg.max_len {
            break;
        }
        let logits = decode_logits(&mut t, cfg, vis, &text)?;
        let lv = t.graph.value(logits);
        let (rows, v) = lv.dims2()?;
        let last = &lv.data()[(rows - 1) * v..];
        let tok = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .expect("vocab is non-empty");
        if tok == TOK_EOS {
            break;
        }
        text.push(tok);
        out.push(tok);
    }
    Ok(out)
}

/// Exact-match accuracy per task kind plus the unweighted macro mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_kind: IndexMap<String, KindAccuracy>,
    pub macro_mean: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KindAccuracy {
    pub correct: usize,
    pub n: usize,
}

impl KindAccuracy {
    pub fn accuracy(self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

impl EvalReport {
    /// Aggregate per-sample exact-match outcomes.
    pub fn from_outcomes(outcomes: &[(TaskKind, bool)]) -> Result<EvalReport> {
        if outcomes.is_empty() {
            return Err(Error::Input("evaluation needs at least one sample".into()));
        }
        let mut per_kind: IndexMap<String, KindAccuracy> = IndexMap::new();
        for &(kind, ok) in outcomes {
            let e = per_kind
                .entry(kind.name().to_string())
                .or_insert(KindAccuracy { correct: 0, n: 0 });
            e.n += 1;
            if ok {
                e.correct += 1;
            }
        }
        let macro_mean =
            per_kind.values().map(|k| k.accuracy()).sum::<f64>() / per_kind.len() as f64;
        Ok(EvalReport { per_kind, macro_mean })
    }

    /// `run_id,task_kind,accuracy,n` rows plus a macro summary row.
    pub fn to_csv(&self, run_id: &str) -> String {
        let mut out = String::from("run_id,task_kind,accuracy,n\n");
        let total_n: usize = self.per_kind.values().map(|k| k.n).sum();
        for (kind, acc) in &self.per_kind {
            out.push_str(&format!("{run_id},{kind},{:.6},{}\n", acc.accuracy(), acc.n));
        }
        out.push_str(&format!("{run_id},macro,{:.6},{total_n}\n", self.macro_mean));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::seed::stream;

    const DV: usize = 8;

    fn tiny_dec() -> DecoderConfig {
        DecoderConfig {
            vocab: VOCAB_SIZE,
            dim: 8,
            depth: 2,
            heads: 2,
            hidden: 16,
            max_len: 48,
            eps: 1e-5,
        }
    }

    fn tiny_store(seed: u64) -> (ParamStore, DecoderConfig) {
        let cfg = tiny_dec();
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "pipeline-test");
        init_projector(&mut store, DV, cfg.dim, &mut rng).unwrap();
        init_decoder(&mut store, &cfg, &mut rng).unwrap();
        (store, cfg)
    }

    fn feats(seed: u64, rows: usize) -> Tensor {
        let mut rng = stream(seed, "features");
        normal(&mut rng, vec![rows, DV], 1.0)
    }

    #[test]
    fn zeroed_projector_emits_its_bias() {
        let (mut store, _) = tiny_store(1);
        for name in ["proj.fc1.weight", "proj.fc2.weight"] {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let beta: Vec<f64> = (0..8).map(|i| i as f64 / 3.0).collect();
        *store.get_mut("proj.fc2.bias").unwrap() = Tensor::new(vec![8], beta.clone()).unwrap();
        let mut t = Tape::new(&store);
        let z = t.constant(feats(2, 4));
        let p = project(&mut t, z).unwrap();
        for row in t.graph.value(p).data().chunks(8) {
            assert_eq!(row, beta.as_slice());
        }
    }

    #[test]
    fn identity_projector_is_a_gelu_path() {
        let (mut store, _) = tiny_store(3);
        let mut eye = Tensor::zeros(vec![8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        *store.get_mut("proj.fc1.weight").unwrap() = eye.clone();
        *store.get_mut("proj.fc2.weight").unwrap() = eye;
        *store.get_mut("proj.fc1.bias").unwrap() = Tensor::zeros(vec![8]);
        *store.get_mut("proj.fc2.bias").unwrap() = Tensor::zeros(vec![8]);
        let x = feats(4, 3);
        let mut t = Tape::new(&store);
        let z = t.constant(x.clone());
        let p = project(&mut t, z).unwrap();
        for (got, want) in t.graph.value(p).data().iter().zip(x.data()) {
            assert!((got - crate::autodiff::gelu(*want)).abs() < 1e-15);
        }
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        let (mut store, _) = tiny_store(5);
        let x = feats(6, 4);
        let names: Vec<String> =
            store.names().filter(|n| n.starts_with("proj.")).map(String::from).collect();
        let analytic = {
            let mut t = Tape::new(&store);
            let z = t.constant(x.clone());
            let p = project(&mut t, z).unwrap();
            let g = t.graph.gelu(p).unwrap();
            let loss = t.graph.sum(g).unwrap();
            let grads = t.graph.backward(loss).unwrap();
            t.grads_by_name(&grads)
        };
        let report = finite_diff_check(
            &mut store,
            &names,
            &analytic,
            |s| {
                let mut t = Tape::new(s);
                let z = t.constant(x.clone());
                let p = project(&mut t, z)?;
                let g = t.graph.gelu(p)?;
                let loss = t.graph.sum(g)?;
                t.graph.scalar_value(loss)
            },
            1e-5,
            6,
            45,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    fn sample_loss_value(store: &ParamStore, cfg: &DecoderConfig, f: &Tensor, q: &[usize], a: &[usize]) -> f64 {
        let mut t = Tape::new(store);
        let z = t.constant(f.clone());
        let vis = project(&mut t, z).unwrap();
        let loss = instruction_loss(&mut t, cfg, vis, q, a).unwrap();
        t.graph.scalar_value(loss).unwrap()
    }

    #[test]
    fn untrained_loss_sits_near_uniform_chance() {
        let (store, cfg) = tiny_store(7);
        let f = feats(8, 4);
        let q = [36, 20, 24];
        let a = [10, 21];
        let loss = sample_loss_value(&store, &cfg, &f, &q, &a);
        // Answer plus EOS: 3 positions of roughly uniform logits.
        let expect = 3.0 * (VOCAB_SIZE as f64).ln();
        assert!((loss - expect).abs() < 0.2 * expect, "loss {loss}, expected ≈ {expect}");
    }

    #[test]
    fn empty_answer_is_rejected() {
        let (store, cfg) = tiny_store(9);
        let mut t = Tape::new(&store);
        let z = t.constant(feats(10, 4));
        let vis = project(&mut t, z).unwrap();
        let r = instruction_loss(&mut t, &cfg, vis, &[5], &[]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn oversized_sequence_is_a_config_error() {
        let (store, cfg) = tiny_store(11);
        let mut t = Tape::new(&store);
        let z = t.constant(feats(12, 4));
        let vis = project(&mut t, z).unwrap();
        let long = vec![5usize; cfg.max_len];
        let r = instruction_loss(&mut t, &cfg, vis, &long, &[6]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn loss_ignores_non_answer_logits() {
        let (store, cfg) = tiny_store(13);
        let f = feats(14, 4);
        let q = [36, 20];
        let a = [10];
        let (text, targets) = answer_targets(4, &q, &a);

        let run = |bump_masked: bool| {
            let mut t = Tape::new(&store);
            let z = t.constant(f.clone());
            let vis = project(&mut t, z).unwrap();
            let logits = decode_logits(&mut t, &cfg, vis, &text).unwrap();
            let (rows, v) = t.graph.value(logits).dims2().unwrap();
            let mut bump = vec![0.0; rows * v];
            for (p, tgt) in targets.iter().enumerate() {
                if tgt.is_none() && bump_masked {
                    for x in &mut bump[p * v..(p + 1) * v] {
                        *x = 7.5;
                    }
                }
            }
            let bump = t.constant(Tensor::matrix(rows, v, bump).unwrap());
            let logits = t.graph.add(logits, bump).unwrap();
            let loss = t.graph.cross_entropy(logits, &targets).unwrap();
            t.graph.scalar_value(loss).unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn future_tokens_cannot_reach_earlier_logits() {
        let (store, cfg) = tiny_store(15);
        let f = feats(16, 4);
        let logits_for = |text: &[usize]| {
            let mut t = Tape::new(&store);
            let z = t.constant(f.clone());
            let vis = project(&mut t, z).unwrap();
            let l = decode_logits(&mut t, &cfg, vis, text).unwrap();
            t.graph.value(l).clone()
        };
        let a = logits_for(&[TOK_BOS, 5, 9, TOK_SEP, 10, 11]);
        let b = logits_for(&[TOK_BOS, 5, 9, TOK_SEP, 22, 30]);
        // Positions before the first difference (text index 4 → row 4+4) agree bitwise.
        let (_, v) = a.dims2().unwrap();
        let boundary = 4 + 4;
        assert_eq!(a.data()[..boundary * v], b.data()[..boundary * v]);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn whole_decoder_gradients_match_finite_differences() {
        let (mut store, cfg) = tiny_store(17);
        let f = feats(18, 4);
        let q = [36, 20, 24];
        let a = [10, 21];
        let names: Vec<String> = store.names().map(String::from).collect();
        let analytic = {
            let mut t = Tape::new(&store);
            let z = t.constant(f.clone());
            let vis = project(&mut t, z).unwrap();
            let loss = instruction_loss(&mut t, &cfg, vis, &q, &a).unwrap();
            let grads = t.graph.backward(loss).unwrap();
            t.grads_by_name(&grads)
        };
        let report = finite_diff_check(
            &mut store,
            &names,
            &analytic,
            |s| {
                let mut t = Tape::new(s);
                let z = t.constant(f.clone());
                let vis = project(&mut t, z)?;
                let loss = instruction_loss(&mut t, &cfg, vis, &q, &a)?;
                t.graph.scalar_value(loss)
            },
            1e-5,
            4,
            46,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn generation_is_deterministic_and_in_vocab() {
        let (store, cfg) = tiny_store(19);
        let f = feats(20, 4);
        let a = generate(&store, &cfg, &f, &[36, 20], 8).unwrap();
        let b = generate(&store, &cfg, &f, &[36, 20], 8).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
        assert!(a.iter().all(|&t| t < VOCAB_SIZE));
    }

    #[test]
    fn eval_report_aggregates_exact_matches() {
        let outcomes = [
            (TaskKind::CountAll, true),
            (TaskKind::CountAll, false),
            (TaskKind::ColorAt, true),
        ];
        let r = EvalReport::from_outcomes(&outcomes).unwrap();
        assert_eq!(r.per_kind["count_all"].n, 2);
        assert!((r.per_kind["count_all"].accuracy() - 0.5).abs() < 1e-15);
        assert!((r.macro_mean - 0.75).abs() < 1e-15);
        let csv = r.to_csv("run1");
        assert!(csv.contains("run1,count_all,0.5"));
        assert!(csv.lines().last().unwrap().starts_with("run1,macro,"));
        assert!(EvalReport::from_outcomes(&[]).is_err());
    }
}
