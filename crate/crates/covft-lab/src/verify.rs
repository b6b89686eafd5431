//! The release checklist: every quantitative claim the lab makes about
//! itself, runnable as one suite. Each check returns pass/fail plus a detail
//! line; `run_all` executes them in order and reports progress as it goes.
//!
//! The suite fixes its own training budgets — a config passed to [`run_all`]
//! contributes only the base seed, the output root (scratch space lands under
//! `<out>/verify/`), and the worker count for the benchmark matrices.

use crate::analysis::{
    kmeans, routing_context_correlation, shuffled_routing_correlation, similarity_lift,
};
use crate::autodiff::{finite_diff_check, gelu, gelu_grad, Var};
use crate::comoe::{self, Routing};
use crate::error::{Error, Result};
use crate::experiment::{
    self, cmd_bench, cmd_conflict, cmd_train, collect_traces, file_digest, two_stage,
    ExperimentConfig, Instrument, MatrixKind, RunArtifacts, TraceRow,
};
use crate::model::{self, ModelConfig};
use crate::params::{normal, ParamStore, Tape};
use crate::seed::{indexed_stream, stream, subseed};
use crate::taskgen::{self, ALL_KINDS};
use crate::tensor::Tensor;
use crate::vft::{self, Stage, Strategy, TrainConfig};
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

/// One verdict from the checklist.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    /// The one-line form every frontend prints.
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<24} {:>7.1}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst elementwise deviation of `got` from `want`, relative to the largest
/// magnitude in `want`. Tensor-level normalization keeps near-zero entries
/// from inflating an otherwise exact match.
fn tensor_rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    max_abs_diff(got, want) / scale
}

// ---- check 1: end-to-end gradients ------------------------------------------

fn check_gradient(base_seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::default_covft();
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg, subseed(base_seed, "verify-fd"))?;
    let data = taskgen::build_dataset(1, subseed(base_seed, "verify-fd-data"), 1.0, &ALL_KINDS)?;
    let sample = data[0].clone();

    let mut t = Tape::new(&store);
    let (loss, _) = model::sample_loss(&mut t, &cfg, &sample, None)?;
    let grads = t.graph.backward(loss)?;
    let analytic = t.grads_by_name(&grads);
    drop(t);
    let names: Vec<String> = analytic.keys().cloned().collect();

    let fd = finite_diff_check(
        &mut store,
        &names,
        &analytic,
        |s| {
            let mut t = Tape::new(s);
            let (loss, _) = model::sample_loss(&mut t, &cfg, &sample, None)?;
            t.graph.scalar_value(loss)
        },
        1e-5,
        2,
        subseed(base_seed, "verify-fd-probe"),
    )?;
    Ok((
        fd.max_rel_err < 1e-4,
        format!(
            "max rel err {:.1e} over {} probed coords across {} tensors (worst: {})",
            fd.max_rel_err,
            fd.checked,
            names.len(),
            fd.worst
        ),
    ))
}

// ---- check 2: gradient modulation through the gates ---------------------------

/// An isolated expert mixture: one donor FFN, its expert copies and router,
/// and a fixed (detached) context — the regime where the gate's effect on
/// expert gradients can be stated exactly.
#[derive(Debug, Clone, Copy)]
pub struct ModulationSetup {
    pub dim: usize,
    pub hidden: usize,
    pub rows: usize,
    pub n_experts: usize,
    pub routing: Routing,
    pub seed: u64,
}

/// The three modulation facts, measured: inactive experts get exactly zero
/// gradient; identical experts get gradients proportional to their gates;
/// autodiff matches an independently hand-computed gate × chain product.
#[derive(Debug, Clone)]
pub struct ModulationReport {
    pub gates: Vec<f64>,
    pub inactive_max_abs: f64,
    pub worst_inactive: String,
    pub ratio_rel_err: f64,
    pub worst_ratio: String,
    pub chain_rel_err: f64,
    pub worst_chain: String,
}

const EXPERT_PARTS: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

struct ManualGrads {
    fc1_w: Vec<f64>,
    fc1_b: Vec<f64>,
    fc2_w: Vec<f64>,
    fc2_b: Vec<f64>,
}

/// Hand-rolled gradient of `loss = Σ z̃ ⊙ G` with respect to one expert's
/// parameters, where the expert contributes `gate · fc2(gelu(z·fc1 + b1))`.
/// Plain loops on store values — shares nothing with the graph backward pass.
fn manual_expert_grads(
    z: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    g_loss: &Tensor,
    gate: f64,
) -> Result<ManualGrads> {
    let (l, d) = z.dims2()?;
    let (_, h) = w1.dims2()?;
    let (zv, w1v, b1v, w2v, gv) = (z.data(), w1.data(), b1.data(), w2.data(), g_loss.data());

    let mut u = vec![0.0; l * h];
    for i in 0..l {
        for j in 0..h {
            let mut s = b1v[j];
            for k in 0..d {
                s += zv[i * d + k] * w1v[k * h + j];
            }
            u[i * h + j] = s;
        }
    }
    let a: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    // Gradient reaching this expert's output: gate × ∂loss/∂z̃.
    let gn: Vec<f64> = gv.iter().map(|&v| gate * v).collect();

    let mut fc2_w = vec![0.0; h * d];
    let mut fc2_b = vec![0.0; d];
    for i in 0..l {
        for j in 0..d {
            fc2_b[j] += gn[i * d + j];
            for k in 0..h {
                fc2_w[k * d + j] += a[i * h + k] * gn[i * d + j];
            }
        }
    }
    let mut du = vec![0.0; l * h];
    for i in 0..l {
        for k in 0..h {
            let mut s = 0.0;
            for j in 0..d {
                s += gn[i * d + j] * w2v[k * d + j];
            }
            du[i * h + k] = s * gelu_grad(u[i * h + k]);
        }
    }
    let mut fc1_w = vec![0.0; d * h];
    let mut fc1_b = vec![0.0; h];
    for i in 0..l {
        for k in 0..h {
            fc1_b[k] += du[i * h + k];
            for j in 0..d {
                fc1_w[j * h + k] += zv[i * d + j] * du[i * h + k];
            }
        }
    }
    Ok(ManualGrads { fc1_w, fc1_b, fc2_w, fc2_b })
}

/// Loss `Σᵢⱼ x[i,j]·w[i,j]` built row by row, so `∂loss/∂x = w` exactly.
fn weighted_sum(t: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let (rows, cols) = t.graph.value(x).dims2()?;
    let mut acc: Option<Var> = None;
    for r in 0..rows {
        let xr = t.graph.slice_rows(x, r, 1)?;
        let wr = t.constant(Tensor::matrix(
            1,
            cols,
            weights.data()[r * cols..(r + 1) * cols].to_vec(),
        )?);
        let p = t.graph.matmul_tb(xr, wr)?;
        acc = Some(match acc {
            Some(a) => t.graph.add(a, p)?,
            None => p,
        });
    }
    acc.ok_or_else(|| Error::Contract("weighted_sum over empty tensor".into()))
}

/// Measure how the gates shape expert gradients in one isolated mixture.
pub fn verify_gradient_modulation(setup: &ModulationSetup) -> Result<ModulationReport> {
    let ModulationSetup { dim, hidden, rows, n_experts, routing, seed } = *setup;
    let mut rng = stream(seed, "modulation");
    let mut store = ParamStore::new();
    store.insert("donor.fc1.weight", normal(&mut rng, vec![dim, hidden], 0.2))?;
    store.insert("donor.fc1.bias", normal(&mut rng, vec![hidden], 0.1))?;
    store.insert("donor.fc2.weight", normal(&mut rng, vec![hidden, dim], 0.2))?;
    store.insert("donor.fc2.bias", normal(&mut rng, vec![dim], 0.1))?;
    comoe::init_experts_from_ffn(&mut store, "donor", "mix", n_experts, dim, &mut rng)?;

    let z_t = normal(&mut rng, vec![rows, dim], 1.0);
    let c_t = normal(&mut rng, vec![1, dim], 1.0);
    let g_t = normal(&mut rng, vec![rows, dim], 1.0);

    let mut t = Tape::new(&store);
    let z = t.constant(z_t.clone());
    let c = t.constant(c_t);
    let mut route_rng = routing.is_random().then(|| stream(seed, "modulation-route"));
    let gates_var = comoe::route(&mut t, "mix", c, routing, n_experts, route_rng.as_mut())?;
    let gates = t.graph.value(gates_var).data().to_vec();
    let mix = comoe::comoe_forward(&mut t, "mix", z, gates_var)?;
    let loss = weighted_sum(&mut t, mix, &g_t)?;
    let grads = t.graph.backward(loss)?;
    let by_name = t.grads_by_name(&grads);
    drop(t);

    let grad_of = |expert: usize, part: &str| -> Option<&Vec<f64>> {
        by_name.get(&format!("mix.experts.{expert}.{part}"))
    };

    // (a) experts the gates zeroed out must receive exactly nothing.
    let mut inactive_max_abs = 0.0_f64;
    let mut worst_inactive = String::from("-");
    for (i, &g) in gates.iter().enumerate() {
        if g != 0.0 {
            continue;
        }
        for part in EXPERT_PARTS {
            let m = grad_of(i, part)
                .map(|v| v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())))
                .unwrap_or(0.0);
            if m > inactive_max_abs {
                inactive_max_abs = m;
                worst_inactive = format!("mix.experts.{i}.{part}");
            }
        }
    }

    // (b) identical experts differ only by their gate, so gradients must be
    // proportional with the gate ratio.
    let active: Vec<usize> =
        gates.iter().enumerate().filter(|(_, &g)| g != 0.0).map(|(i, _)| i).collect();
    let r = *active
        .first()
        .ok_or_else(|| Error::Contract("no active experts".into()))?;
    let mut ratio_rel_err = 0.0_f64;
    let mut worst_ratio = String::from("-");
    for &m in active.iter().skip(1) {
        let scale = gates[m] / gates[r];
        for part in EXPERT_PARTS {
            let gr = grad_of(r, part)
                .ok_or_else(|| Error::Contract(format!("missing grad for expert {r} {part}")))?;
            let gm = grad_of(m, part)
                .ok_or_else(|| Error::Contract(format!("missing grad for expert {m} {part}")))?;
            let want: Vec<f64> = gr.iter().map(|v| v * scale).collect();
            let err = tensor_rel_err(gm, &want);
            if err > ratio_rel_err {
                ratio_rel_err = err;
                worst_ratio = format!("mix.experts.{m}.{part}");
            }
        }
    }

    // (c) autodiff against the hand-computed gate × chain product.
    let mut chain_rel_err = 0.0_f64;
    let mut worst_chain = String::from("-");
    for &n in &active {
        let man = manual_expert_grads(
            &z_t,
            store.get(&format!("mix.experts.{n}.fc1.weight"))?,
            store.get(&format!("mix.experts.{n}.fc1.bias"))?,
            store.get(&format!("mix.experts.{n}.fc2.weight"))?,
            &g_t,
            gates[n],
        )?;
        for (part, want) in [
            ("fc1.weight", &man.fc1_w),
            ("fc1.bias", &man.fc1_b),
            ("fc2.weight", &man.fc2_w),
            ("fc2.bias", &man.fc2_b),
        ] {
            let got = grad_of(n, part)
                .ok_or_else(|| Error::Contract(format!("missing grad for expert {n} {part}")))?;
            let err = tensor_rel_err(got, want);
            if err > chain_rel_err {
                chain_rel_err = err;
                worst_chain = format!("mix.experts.{n}.{part}");
            }
        }
    }

    Ok(ModulationReport {
        gates,
        inactive_max_abs,
        worst_inactive,
        ratio_rel_err,
        worst_ratio,
        chain_rel_err,
        worst_chain,
    })
}

const MODULATION_CONFIGS: [(usize, usize, usize, Routing); 10] = [
    (16, 32, 4, Routing::Dense),
    (16, 32, 4, Routing::SparseK(2)),
    (16, 32, 4, Routing::Uniform),
    (16, 32, 4, Routing::RandomK(2)),
    (12, 24, 2, Routing::Dense),
    (16, 32, 4, Routing::SparseK(1)),
    (16, 32, 8, Routing::SparseK(2)),
    (12, 24, 3, Routing::RandomK(1)),
    (16, 32, 8, Routing::Dense),
    (20, 40, 6, Routing::SparseK(3)),
];

fn check_modulation(base_seed: u64) -> Result<(bool, String)> {
    let mut worst = ModulationReport {
        gates: Vec::new(),
        inactive_max_abs: 0.0,
        worst_inactive: "-".into(),
        ratio_rel_err: 0.0,
        worst_ratio: "-".into(),
        chain_rel_err: 0.0,
        worst_chain: "-".into(),
    };
    for (i, &(dim, hidden, n_experts, routing)) in MODULATION_CONFIGS.iter().enumerate() {
        let rep = verify_gradient_modulation(&ModulationSetup {
            dim,
            hidden,
            rows: 5,
            n_experts,
            routing,
            seed: subseed(base_seed, "verify-modulation") + i as u64,
        })?;
        if rep.inactive_max_abs > worst.inactive_max_abs {
            worst.inactive_max_abs = rep.inactive_max_abs;
            worst.worst_inactive = rep.worst_inactive.clone();
        }
        if rep.ratio_rel_err > worst.ratio_rel_err {
            worst.ratio_rel_err = rep.ratio_rel_err;
            worst.worst_ratio = rep.worst_ratio.clone();
        }
        if rep.chain_rel_err > worst.chain_rel_err {
            worst.chain_rel_err = rep.chain_rel_err;
            worst.worst_chain = rep.worst_chain.clone();
        }
    }
    let pass = worst.inactive_max_abs == 0.0
        && worst.ratio_rel_err < 1e-10
        && worst.chain_rel_err < 1e-8;
    Ok((
        pass,
        format!(
            "10 configs: inactive max |g| {:.1e} ({}), gate-ratio rel {:.1e} ({}), manual-chain rel {:.1e} ({})",
            worst.inactive_max_abs,
            worst.worst_inactive,
            worst.ratio_rel_err,
            worst.worst_ratio,
            worst.chain_rel_err,
            worst.worst_chain
        ),
    ))
}

// ---- check 3: mixture equals donor at init -------------------------------------

fn check_init_equivalence(base_seed: u64) -> Result<(bool, String)> {
    let (dim, hidden, rows, n_experts) = (16, 32, 5, 4);
    let routings = [Routing::Dense, Routing::SparseK(2), Routing::Uniform, Routing::RandomK(2)];
    let frozen = BTreeSet::new();
    let mut worst = 0.0_f64;
    for (ri, routing) in routings.into_iter().enumerate() {
        let mut rng = indexed_stream(base_seed, "verify-equiv", ri as u64);
        let mut store = ParamStore::new();
        store.insert("donor.fc1.weight", normal(&mut rng, vec![dim, hidden], 0.2))?;
        store.insert("donor.fc1.bias", normal(&mut rng, vec![hidden], 0.1))?;
        store.insert("donor.fc2.weight", normal(&mut rng, vec![hidden, dim], 0.2))?;
        store.insert("donor.fc2.bias", normal(&mut rng, vec![dim], 0.1))?;
        comoe::init_experts_from_ffn(&mut store, "donor", "mix", n_experts, dim, &mut rng)?;
        for trial in 0..100_u64 {
            let mut t = Tape::with_mask(&store, &frozen);
            let z = t.constant(normal(&mut rng, vec![rows, dim], 1.0));
            let c = t.constant(normal(&mut rng, vec![1, dim], 1.0));
            let mut route_rng =
                routing.is_random().then(|| indexed_stream(base_seed, "verify-equiv-route", trial));
            let gates = comoe::route(&mut t, "mix", c, routing, n_experts, route_rng.as_mut())?;
            let mix = comoe::comoe_forward(&mut t, "mix", z, gates)?;
            let donor = comoe::expert_forward(&mut t, "donor", z)?;
            let diff = max_abs_diff(t.graph.value(mix).data(), t.graph.value(donor).data());
            worst = worst.max(diff);
        }
    }
    Ok((
        worst < 1e-12,
        format!("max |mixture − donor| {worst:.1e} over 4 routings × 100 contexts"),
    ))
}

// ---- check 4: strategy masks hold --------------------------------------------

fn check_mask_soundness(xc: &ExperimentConfig) -> Result<(bool, String)> {
    let seed = subseed(xc.seed, "verify-mask");
    let data = taskgen::build_dataset(64, subseed(seed, "data"), 1.0, &ALL_KINDS)?;
    let mut all_ok = true;
    let mut parts = Vec::new();
    for name in ["freeze", "bitfit", "lora", "vpt", "covft"] {
        let strategy = xc.effective(Strategy::from_name(name)?);
        let (cfg, mut store) = experiment::init_for_strategy(xc, strategy, seed)?;
        let init = store.clone();
        let mut tc =
            TrainConfig::new(strategy, Stage::Instruct, 50, 4, 3e-4, subseed(seed, name));
        tc.log_every = 50;
        vft::train(&mut store, &cfg, &data, &tc)?;
        let mask = vft::trainable_mask(&init, strategy, Stage::Instruct)?;
        let mut moved = 0usize;
        let mut held = 0usize;
        for (pname, before) in init.iter() {
            if mask.contains(pname) {
                continue;
            }
            let after = store.get(pname)?;
            let same = before
                .data()
                .iter()
                .zip(after.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if same {
                held += 1;
            } else {
                moved += 1;
            }
        }
        if moved > 0 {
            all_ok = false;
            parts.push(format!("{name}: {moved} frozen tensors moved"));
        } else {
            parts.push(format!("{name}: {held} held"));
        }
    }
    Ok((all_ok, format!("50-step runs — {}", parts.join(", "))))
}

// ---- checks 5–6: conflict diagnostics ------------------------------------------

fn conflict_xc(xc: &ExperimentConfig, scratch: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = xc.seed;
    c.out = scratch.to_path_buf();
    c.jobs = xc.jobs;
    c.budget.pretrain_steps = 100;
    c.budget.instruct_steps = 200;
    c
}

fn check_conflict_divergence(xc: &ExperimentConfig) -> Result<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in 0..3_u64 {
        let d = experiment::conflict_divergence(xc, xc.seed + s)?;
        let ok = d.spearman > 0.9 && d.deep_mean > d.shallow_mean;
        pass &= ok;
        parts.push(format!(
            "s{}: ρ={:.3} deep={:.4} shallow={:.4}",
            d.seed, d.spearman, d.deep_mean, d.shallow_mean
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn check_gradient_alignment(xc: &ExperimentConfig) -> Result<(bool, String)> {
    let mut mean_wins = 0;
    let mut std_wins = 0;
    let mut parts = Vec::new();
    for s in 0..3_u64 {
        let a = experiment::conflict_alignment(xc, xc.seed + s)?;
        if a.covft.mean > a.full_ft.mean {
            mean_wins += 1;
        }
        if a.covft.std < a.full_ft.std {
            std_wins += 1;
        }
        parts.push(format!(
            "s{}: mean {:.3} vs {:.3}, std {:.3} vs {:.3}",
            a.seed, a.covft.mean, a.full_ft.mean, a.covft.std, a.full_ft.std
        ));
    }
    let pass = mean_wins == 3 && std_wins >= 2;
    Ok((
        pass,
        format!("covft vs full_ft — {} (mean wins {mean_wins}/3, std wins {std_wins}/3)", parts.join("; ")),
    ))
}

// ---- checks 7–9: trained-run properties -----------------------------------------

struct TrainedCovft {
    seed: u64,
    art: RunArtifacts,
    rows: Vec<TraceRow>,
}

const TRACE_SAMPLES: usize = 1050;

fn train_covft(xc: &ExperimentConfig, seed: u64) -> Result<TrainedCovft> {
    let art = two_stage(xc, Strategy::Covft, seed, Instrument::default())?;
    let trace_set =
        taskgen::build_dataset(TRACE_SAMPLES, subseed(seed, "data-trace"), 1.0, &xc.data.kinds)?;
    let rows = collect_traces(&art.store, &art.model, &trace_set, subseed(seed, "trace"))?;
    Ok(TrainedCovft { seed, art, rows })
}

fn ensure_covft<'a>(
    trained: &'a mut Vec<TrainedCovft>,
    xc: &ExperimentConfig,
    upto: usize,
) -> Result<&'a [TrainedCovft]> {
    while trained.len() < upto {
        let seed = xc.seed + trained.len() as u64;
        let t = train_covft(xc, seed)?;
        trained.push(t);
    }
    Ok(&trained[..upto])
}

fn check_routing_correlation(run: &TrainedCovft) -> Result<(bool, String)> {
    let contexts: Vec<Vec<f64>> = run.rows.iter().map(|r| r.context.clone()).collect();
    let gates: Vec<Vec<f64>> = run.rows.iter().map(|r| r.routing.clone()).collect();
    let r = routing_context_correlation(
        &contexts,
        &gates,
        experiment::ROUTING_PAIRS,
        subseed(run.seed, "pairs"),
    )?;
    let null = shuffled_routing_correlation(
        &contexts,
        &gates,
        experiment::ROUTING_PAIRS,
        subseed(run.seed, "pairs"),
    )?;
    Ok((
        r > 0.3 && null.abs() < 0.1,
        format!(
            "r={r:.3} (need >0.3), shuffle null {null:+.3} (need |r|<0.1), {} pairs over {} samples",
            experiment::ROUTING_PAIRS,
            run.rows.len()
        ),
    ))
}

fn check_context_clusters(runs: &[TrainedCovft]) -> Result<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let contexts: Vec<Vec<f64>> = run.rows.iter().map(|r| r.context.clone()).collect();
        let visual: Vec<Vec<f64>> = run.rows.iter().map(|r| r.visual.clone()).collect();
        let textual: Vec<Vec<f64>> = run.rows.iter().map(|r| r.textual.clone()).collect();
        let km = kmeans(&contexts, 10, subseed(run.seed, "kmeans"))?;
        let v = similarity_lift(&visual, &km.assignments)?.lift();
        let t = similarity_lift(&textual, &km.assignments)?.lift();
        pass &= v > 0.0 && t > 0.0;
        parts.push(format!("s{}: visual {v:+.4} textual {t:+.4}", run.seed));
    }
    Ok((pass, format!("k=10 on {TRACE_SAMPLES} contexts — {}", parts.join("; "))))
}

fn check_benchmark_directionality(
    xc: &ExperimentConfig,
    covft: &[TrainedCovft],
) -> Result<(bool, String)> {
    let mut covft_macros = Vec::new();
    let mut freeze_macros = Vec::new();
    let mut full_macros = Vec::new();
    for run in covft {
        covft_macros.push(run.art.report.macro_mean);
        let f = two_stage(xc, Strategy::Freeze, run.seed, Instrument::default())?;
        freeze_macros.push(f.report.macro_mean);
        let ff = two_stage(xc, Strategy::FullFt, run.seed, Instrument::default())?;
        full_macros.push(ff.report.macro_mean);
    }
    let required = covft_macros.iter().zip(&freeze_macros).all(|(c, f)| c >= f);
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let recorded = avg(&covft_macros) >= avg(&full_macros);
    let fmt = |v: &[f64]| {
        v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
    };
    Ok((
        required,
        format!(
            "macro covft [{}] vs freeze [{}] (required: {}), avg {:.3} vs full_ft avg {:.3} (recorded: {})",
            fmt(&covft_macros),
            fmt(&freeze_macros),
            if required { "holds" } else { "violated" },
            avg(&covft_macros),
            avg(&full_macros),
            if recorded { "holds" } else { "does not hold" }
        ),
    ))
}

// ---- check 10: ablation matrices -------------------------------------------------

fn bench_xc(xc: &ExperimentConfig, scratch: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = xc.seed;
    c.out = scratch.to_path_buf();
    c.jobs = xc.jobs;
    c.budget.pretrain_steps = 40;
    c.budget.instruct_steps = 80;
    c
}

fn table_problem(table: &str, matrix: MatrixKind, variants: &[&str], seed: u64) -> Option<String> {
    let mut lines = table.lines();
    if lines.next() != Some("matrix,variant,seed,task_kind,accuracy,n") {
        return Some(format!("{}: bad header", matrix.name()));
    }
    for line in lines.clone() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Some(format!("{}: malformed row {line:?}", matrix.name()));
        }
        if !fields[4].is_empty() && fields[4].parse::<f64>().is_err() {
            return Some(format!("{}: bad accuracy in {line:?}", matrix.name()));
        }
    }
    for v in variants {
        let macro_row = format!("{},{v},{seed},macro,", matrix.name());
        let summary_row = format!("{},{v},all,macro_mean,", matrix.name());
        if !table.lines().any(|l| l.starts_with(&macro_row)) {
            return Some(format!("{}: no macro row for {v}", matrix.name()));
        }
        if !table.lines().any(|l| l.starts_with(&summary_row)) {
            return Some(format!("{}: no summary row for {v}", matrix.name()));
        }
    }
    None
}

fn check_ablation_matrices(xc: &ExperimentConfig) -> Result<(bool, String)> {
    let matrices: [(MatrixKind, &[&str]); 4] = [
        (MatrixKind::Routing, &["dense", "sparse_2", "uniform", "random_2"]),
        (MatrixKind::Contextual, &["image_only", "text_only", "concat", "cve"]),
        (MatrixKind::Experts, &["experts_2", "experts_4", "experts_8"]),
        (MatrixKind::Diversity, &["kinds_3", "kinds_6", "kinds_9", "kinds_12", "kinds_15"]),
    ];
    let mut cells = 0;
    for (matrix, variants) in matrices {
        let out = cmd_bench(xc, matrix, 1)?;
        if !out.failed.is_empty() {
            return Ok((
                false,
                format!("{} matrix had failing cells: {}", matrix.name(), out.failed.join("; ")),
            ));
        }
        if let Some(problem) = table_problem(&out.table, matrix, variants, xc.seed) {
            return Ok((false, problem));
        }
        cells += variants.len();
    }
    Ok((true, format!("4 matrices, {cells} cells, all tables complete and well-formed")))
}

// ---- check 11: bitwise reruns ------------------------------------------------------

fn det_train_xc(seed: u64, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.out = out.to_path_buf();
    c.data.n_train = 24;
    c.data.n_eval = 15;
    c.data.n_pretrain = 16;
    c.budget.pretrain_steps = 5;
    c.budget.instruct_steps = 10;
    c.budget.batch = 2;
    c.n_trace = 60;
    c
}

fn check_determinism(xc: &ExperimentConfig, scratch: &Path) -> Result<(bool, String)> {
    let mut mismatched = Vec::new();
    let mut compared = 0;

    let a = cmd_train(&det_train_xc(xc.seed, &scratch.join("det-a")))?;
    let b = cmd_train(&det_train_xc(xc.seed, &scratch.join("det-b")))?;
    for f in ["records.jsonl", "eval.csv", "params.digest.txt", "traces.json"] {
        compared += 1;
        if file_digest(a.dir.join(f))? != file_digest(b.dir.join(f))? {
            mismatched.push(format!("train/{f}"));
        }
    }

    let mut cxc = det_train_xc(xc.seed, &scratch.join("det-a"));
    cxc.budget.instruct_steps = 8;
    let (dir_a, _) = cmd_conflict(&cxc, 1)?;
    cxc.out = scratch.join("det-b");
    let (dir_b, _) = cmd_conflict(&cxc, 1)?;
    for f in ["bundle.json", "divergence.csv", "alignment.csv"] {
        compared += 1;
        if file_digest(dir_a.join(f))? != file_digest(dir_b.join(f))? {
            mismatched.push(format!("conflict/{f}"));
        }
    }

    if mismatched.is_empty() {
        Ok((true, format!("{compared} metric files digest-identical across reruns")))
    } else {
        Ok((false, format!("digest mismatch in {}", mismatched.join(", "))))
    }
}

// ---- the suite ------------------------------------------------------------------

/// Run every check in order, invoking `progress` as each one lands. Failures
/// are reported, not propagated; an `Err` from a check body becomes a failed
/// check whose detail carries the error.
pub fn run_all(
    xc: &ExperimentConfig,
    mut progress: impl FnMut(&CheckResult),
) -> Result<VerifyReport> {
    let scratch = xc.out.join("verify");
    let mut report = VerifyReport::default();

    // Default-budget config the trained-run checks share.
    let mut xc_full = ExperimentConfig::default();
    xc_full.seed = xc.seed;
    xc_full.out = scratch.clone();
    xc_full.jobs = xc.jobs;

    let mut trained: Vec<TrainedCovft> = Vec::new();

    macro_rules! check {
        ($id:expr, $name:expr, $body:expr) => {{
            let t0 = Instant::now();
            let (passed, detail) = match $body {
                Ok(pd) => pd,
                Err(e) => (false, format!("error: {e}")),
            };
            let result = CheckResult {
                id: $id,
                name: $name,
                passed,
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            };
            progress(&result);
            report.checks.push(result);
        }};
    }

    check!(1, "gradient-check", check_gradient(xc.seed));
    check!(2, "gradient-modulation", check_modulation(xc.seed));
    check!(3, "init-equivalence", check_init_equivalence(xc.seed));
    check!(4, "mask-soundness", check_mask_soundness(&xc_full));
    let cxc = conflict_xc(xc, &scratch);
    check!(5, "conflict-divergence", check_conflict_divergence(&cxc));
    check!(6, "gradient-alignment", check_gradient_alignment(&cxc));
    check!(7, "routing-correlation", {
        ensure_covft(&mut trained, &xc_full, 1).and_then(|runs| check_routing_correlation(&runs[0]))
    });
    check!(8, "context-clusters", {
        ensure_covft(&mut trained, &xc_full, 3).and_then(check_context_clusters)
    });
    check!(9, "benchmark-direction", {
        ensure_covft(&mut trained, &xc_full, 3)
            .and_then(|runs| check_benchmark_directionality(&xc_full, runs))
    });
    drop(trained);
    let bxc = bench_xc(xc, &scratch);
    check!(10, "ablation-matrices", check_ablation_matrices(&bxc));
    check!(11, "determinism", check_determinism(xc, &scratch));

    Ok(report)
}
