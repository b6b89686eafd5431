//! Context-conditioned mixture of FFN experts.
//!
//! A donor FFN is cloned into N experts; a linear router turns the context
//! vector into a gate distribution and the block output is the gate-weighted
//! sum of expert outputs. Aggregation is dense by default so every expert
//! keeps receiving gradient; sparse/uniform/random gating exist as ablations.
//! Because each expert's gradient is its gate times a shared downstream
//! factor, the gates literally scale per-expert learning — this module also
//! ships an independent verifier for that identity.
//!
//! Expert parameters are exact copies at construction, so the mixture output
//! equals the donor's for *any* gate vector. Router weights start small but
//! non-zero: a zero router with byte-identical experts is a fixed point of
//! training (identical expert gradients keep experts identical, which keeps
//! the router gradient exactly zero), so routing would never leave uniform.
//! Small weights break the tie while keeping early usage unbiased in
//! expectation (the bias starts at zero).

use crate::autodiff::{softmax_row, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Tape};
use crate::seed::stream;
use crate::tensor::{self, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gate construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Full softmax over all experts.
    Dense,
    /// Top-k of the softmax, renormalized to sum 1; the rest exactly 0.
    SparseK(usize),
    /// 1/N each; the router is ignored.
    Uniform,
    /// k experts drawn per sample (seeded), 1/k each.
    RandomK(usize),
}

impl Routing {
    pub fn name(self) -> String {
        match self {
            Routing::Dense => "dense".into(),
            Routing::SparseK(k) => format!("sparse_{k}"),
            Routing::Uniform => "uniform".into(),
            Routing::RandomK(k) => format!("random_{k}"),
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        let parse_k = |rest: &str, what: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {what} count in routing {s:?}")))
        };
        Ok(match s {
            "dense" => Routing::Dense,
            "uniform" => Routing::Uniform,
            _ => {
                if let Some(rest) = s.strip_prefix("sparse_") {
                    Routing::SparseK(parse_k(rest, "sparse")?)
                } else if let Some(rest) = s.strip_prefix("random_") {
                    Routing::RandomK(parse_k(rest, "random")?)
                } else {
                    return Err(Error::Config(format!("unknown routing {s:?}")));
                }
            }
        })
    }

    pub fn validate(self, n_experts: usize) -> Result<()> {
        let k = match self {
            Routing::SparseK(k) | Routing::RandomK(k) => k,
            _ => return Ok(()),
        };
        if k == 0 || k > n_experts {
            return Err(Error::Config(format!(
                "routing {} needs 1..={n_experts} experts",
                self.name()
            )));
        }
        Ok(())
    }

    /// Does this strategy need a per-sample RNG?
    pub fn is_random(self) -> bool {
        matches!(self, Routing::RandomK(_))
    }
}

/// A realized gate vector: non-negative, inactive entries exactly zero,
/// active entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    pub g: Vec<f64>,
    pub active: Vec<usize>,
}

/// Clone the donor FFN under `{base}.experts.{i}` and create the router.
///
/// Copies are byte-exact, which makes the mixture equal the donor regardless
/// of gates. Router weights are small-random (see module docs), bias zero.
pub fn init_experts_from_ffn(
    store: &mut ParamStore,
    donor_base: &str,
    base: &str,
    n_experts: usize,
    ctx_dim: usize,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    if n_experts < 2 {
        return Err(Error::Config(format!("need at least 2 experts, got {n_experts}")));
    }
    for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
        let donor = store.get(&format!("{donor_base}.{part}"))?.clone();
        for i in 0..n_experts {
            store.insert(format!("{base}.experts.{i}.{part}"), donor.clone())?;
        }
    }
    store.insert(
        format!("{base}.router.weight"),
        normal(rng, vec![n_experts, ctx_dim], 0.02),
    )?;
    store.insert(format!("{base}.router.bias"), Tensor::zeros(vec![n_experts]))?;
    Ok(())
}

/// Gate vector for context `c` (`[1, d]`) as a graph node `[1, n]`.
/// `sample_rng` feeds `random_k` draws and must be present for that strategy.
pub fn route(
    t: &mut Tape,
    base: &str,
    c: Var,
    routing: Routing,
    n_experts: usize,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    routing.validate(n_experts)?;
    match routing {
        Routing::Dense | Routing::SparseK(_) => {
            let w = t.param(&format!("{base}.router.weight"))?;
            let b = t.param(&format!("{base}.router.bias"))?;
            let logits = t.graph.matmul_tb(c, w)?;
            let logits = t.graph.add_row(logits, b)?;
            let g = t.graph.softmax(logits, 1)?;
            match routing {
                Routing::SparseK(k) => t.graph.topk_renorm(g, k),
                _ => Ok(g),
            }
        }
        Routing::Uniform => {
            let g = 1.0 / n_experts as f64;
            Ok(t.constant(Tensor::matrix(1, n_experts, vec![g; n_experts])?))
        }
        Routing::RandomK(k) => {
            let rng = sample_rng
                .ok_or_else(|| Error::Contract("random_k routing needs a sample rng".into()))?;
            let picks = rand::seq::index::sample(rng, n_experts, k).into_vec();
            let mut g = vec![0.0; n_experts];
            for &i in &picks {
                g[i] = 1.0 / k as f64;
            }
            Ok(t.constant(Tensor::matrix(1, n_experts, g)?))
        }
    }
}

/// Same gates as [`route`] but computed outside any graph, for analysis of
/// finished runs. Uses the same kernels, so dense/sparse gates agree with the
/// graph path bit for bit.
pub fn route_weights(
    c: &[f64],
    w: &Tensor,
    b: &Tensor,
    routing: Routing,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<RoutingWeights> {
    let (n, d) = w.dims2()?;
    routing.validate(n)?;
    if c.len() != d {
        return Err(Error::Shape {
            op: "route_weights",
            detail: format!("context width {} vs router width {d}", c.len()),
        });
    }
    let softmax_gates = |w: &Tensor, b: &Tensor| {
        let mut logits = b.data().to_vec();
        tensor::mm_tb_acc(c, w.data(), 1, d, n, &mut logits);
        let mut g = vec![0.0; n];
        softmax_row(&logits, &mut g);
        g
    };
    match routing {
        Routing::Dense => {
            let g = softmax_gates(w, b);
            Ok(RoutingWeights { g, active: (0..n).collect() })
        }
        Routing::SparseK(k) => {
            let soft = softmax_gates(w, b);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                soft[b].partial_cmp(&soft[a]).unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut active = idx[..k].to_vec();
            active.sort_unstable();
            let s: f64 = active.iter().map(|&i| soft[i]).sum();
            if s <= 0.0 {
                return Err(Error::Numeric(format!("top-{k} mass {s} not positive")));
            }
            let mut g = vec![0.0; n];
            for &i in &active {
                g[i] = soft[i] / s;
            }
            Ok(RoutingWeights { g, active })
        }
        Routing::Uniform => Ok(RoutingWeights {
            g: vec![1.0 / n as f64; n],
            active: (0..n).collect(),
        }),
        Routing::RandomK(k) => {
            let rng = sample_rng
                .ok_or_else(|| Error::Contract("random_k routing needs a sample rng".into()))?;
            let mut active = rand::seq::index::sample(rng, n, k).into_vec();
            active.sort_unstable();
            let mut g = vec![0.0; n];
            for &i in &active {
                g[i] = 1.0 / k as f64;
            }
            Ok(RoutingWeights { g, active })
        }
    }
}

/// One expert (or the donor): `fc2(gelu(fc1(z)))`.
pub fn expert_forward(t: &mut Tape, base: &str, z: Var) -> Result<Var> {
    let u = crate::encoder::projection(t, z, &format!("{base}.fc1"))?;
    let u = t.graph.gelu(u)?;
    crate::encoder::projection(t, u, &format!("{base}.fc2"))
}

/// `z̃ = Σ gₙ·Eₙ(z)` over experts with non-zero gates. Zero-gated experts are
/// never evaluated, so they stay out of the graph entirely.
pub fn comoe_forward(t: &mut Tape, base: &str, z: Var, gates: Var) -> Result<Var> {
    let (rows, n) = t.graph.value(gates).dims2()?;
    if rows != 1 {
        return Err(Error::Shape {
            op: "comoe_forward",
            detail: format!("gates must be a single row, got {rows}"),
        });
    }
    let gv = t.graph.value(gates).data().to_vec();
    let mut out: Option<Var> = None;
    for (i, &g) in gv.iter().enumerate().take(n) {
        if g == 0.0 {
            continue;
        }
        let e = expert_forward(t, &format!("{base}.experts.{i}"), z)?;
        let gi = t.graph.slice_cols(gates, i, 1)?;
        let weighted = t.graph.scale_by(e, gi)?;
        out = Some(match out {
            None => weighted,
            Some(acc) => t.graph.add(acc, weighted)?,
        });
    }
    out.ok_or_else(|| Error::Contract("no active experts".into()))
}

/// Measured worst cases from the three gradient-modulation checks; all below
/// their thresholds when this is returned (failures become contract errors).
#[derive(Debug, Clone, Serialize)]
pub struct ModulationReport {
    pub n_experts: usize,
    pub dim: usize,
    /// Check 1 — gradient mass on inactive experts (must be exactly 0).
    pub max_inactive_norm: f64,
    /// Check 2 — identical experts: deviation of per-expert gradients from
    /// exact proportionality to the gates.
    pub max_ratio_err: f64,
    /// Check 3 — autodiff vs the hand-written chain rule for the
    /// gate-times-downstream gradient, per expert tensor.
    pub max_chain_err: f64,
}

const EXPERT_PARTS: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

struct ModCase {
    store: ParamStore,
    n: usize,
    dim: usize,
    hidden: usize,
    rows: usize,
    z: Tensor,
    c: Tensor,
    left: Vec<f64>,
    right: Vec<f64>,
}

const MOD_BASE: &str = "layer.comoe";

fn mod_case(seed: u64) -> Result<ModCase> {
    let mut rng = stream(seed, "modulation");
    let dim = 8 + 4 * (seed as usize % 3);
    let hidden = dim + dim / 2;
    let rows = 2 + (seed as usize % 3);
    let n = if seed % 2 == 0 { 4 } else { 8 };

    let mut store = ParamStore::new();
    store.insert("donor.fc1.weight", normal(&mut rng, vec![dim, hidden], 0.5))?;
    store.insert("donor.fc1.bias", normal(&mut rng, vec![hidden], 0.1))?;
    store.insert("donor.fc2.weight", normal(&mut rng, vec![hidden, dim], 0.5))?;
    store.insert("donor.fc2.bias", normal(&mut rng, vec![dim], 0.1))?;
    init_experts_from_ffn(&mut store, "donor", MOD_BASE, n, dim, &mut rng)?;
    // Spread the gates well away from uniform.
    *store.get_mut(&format!("{MOD_BASE}.router.weight"))? = normal(&mut rng, vec![n, dim], 1.0);

    Ok(ModCase {
        z: normal(&mut rng, vec![rows, dim], 1.0),
        c: normal(&mut rng, vec![1, dim], 1.0),
        left: crate::params::randn_vec(&mut rng, rows, 1.0),
        right: crate::params::randn_vec(&mut rng, dim, 1.0),
        store,
        n,
        dim,
        hidden,
        rows,
    })
}

/// Run one routing + mixture + scalar-loss graph and return (gates, grads by name).
fn mod_backward(
    case: &ModCase,
    routing: Routing,
) -> Result<(Vec<f64>, indexmap::IndexMap<String, Vec<f64>>)> {
    let mut t = Tape::new(&case.store);
    let c = t.constant(case.c.clone());
    let z = t.constant(case.z.clone());
    let gates = route(&mut t, MOD_BASE, c, routing, case.n, None)?;
    let mix = comoe_forward(&mut t, MOD_BASE, z, gates)?;
    let left = t.constant(Tensor::matrix(1, case.rows, case.left.clone())?);
    let right = t.constant(Tensor::matrix(case.dim, 1, case.right.clone())?);
    let y = t.graph.matmul(left, mix)?;
    let lo = t.graph.matmul(y, right)?;
    let loss = t.graph.sum(lo)?;
    let grads = t.graph.backward(loss)?;
    let gv = t.graph.value(gates).data().to_vec();
    Ok((gv, t.grads_by_name(&grads)))
}

fn rel_vec_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let na = tensor::l2_norm(a);
    let nb = tensor::l2_norm(b);
    tensor::l2_norm(&diff) / na.max(nb).max(1e-300)
}

/// Independent verification that gates scale per-expert learning:
///
/// 1. zero-gated experts receive exactly zero gradient;
/// 2. with byte-identical experts the per-expert gradient tensors are
///    proportional to the gates (rel err < 1e-10);
/// 3. autodiff matches a hand-written chain-rule product
///    gate × (∂loss/∂mix) × (∂expert/∂θ) per tensor (rel err < 1e-8).
///
/// The first failed check aborts with a contract error naming the worst
/// tensor; success returns the measured worst cases.
pub fn verify_gradient_modulation(seed: u64) -> Result<ModulationReport> {
    let mut case = mod_case(seed)?;
    let mut report = ModulationReport {
        n_experts: case.n,
        dim: case.dim,
        max_inactive_norm: 0.0,
        max_ratio_err: 0.0,
        max_chain_err: 0.0,
    };

    // -- check 1: sparse gating starves inactive experts completely ---------
    let (gates, grads) = mod_backward(&case, Routing::SparseK(2))?;
    for (i, &g) in gates.iter().enumerate() {
        for part in EXPERT_PARTS {
            let name = format!("{MOD_BASE}.experts.{i}.{part}");
            let norm = grads.get(&name).map(|v| tensor::l2_norm(v)).unwrap_or(0.0);
            if g == 0.0 {
                report.max_inactive_norm = report.max_inactive_norm.max(norm);
                if norm != 0.0 {
                    return Err(Error::Contract(format!(
                        "inactive expert leaked gradient: ‖∂L/∂{name}‖ = {norm:e}"
                    )));
                }
            } else if norm == 0.0 {
                return Err(Error::Contract(format!("active expert got no gradient: {name}")));
            }
        }
    }

    // -- check 2: identical experts ⇒ gradients proportional to gates -------
    let (gates, grads) = mod_backward(&case, Routing::Dense)?;
    for i in 1..case.n {
        for part in EXPERT_PARTS {
            let g0 = &grads[&format!("{MOD_BASE}.experts.0.{part}")];
            let gi = &grads[&format!("{MOD_BASE}.experts.{i}.{part}")];
            let a: Vec<f64> = gi.iter().map(|v| v * gates[0]).collect();
            let b: Vec<f64> = g0.iter().map(|v| v * gates[i]).collect();
            let err = rel_vec_err(&a, &b);
            report.max_ratio_err = report.max_ratio_err.max(err);
            if err >= 1e-10 {
                return Err(Error::Contract(format!(
                    "gradient/gate proportionality broke at experts 0↔{i} {part}: rel err {err:e}"
                )));
            }
        }
    }

    // -- check 3: autodiff equals the hand-written chain rule ---------------
    // Perturb experts so they genuinely differ, then recompute.
    {
        let mut prng = stream(seed, "modulation-perturb");
        for i in 0..case.n {
            for part in EXPERT_PARTS {
                let t = case.store.get_mut(&format!("{MOD_BASE}.experts.{i}.{part}"))?;
                let noise = crate::params::randn_vec(&mut prng, t.len(), 0.3);
                for (v, dv) in t.data_mut().iter_mut().zip(noise) {
                    *v += dv;
                }
            }
        }
    }
    let (gates, grads) = mod_backward(&case, Routing::Dense)?;
    let (rows, dim, hidden) = (case.rows, case.dim, case.hidden);
    // Downstream factor ∂loss/∂mix of the probe loss left·mix·right.
    let delta: Vec<f64> = (0..rows * dim)
        .map(|i| case.left[i / dim] * case.right[i % dim])
        .collect();
    for i in 0..case.n {
        let w1 = case.store.get(&format!("{MOD_BASE}.experts.{i}.fc1.weight"))?;
        let b1 = case.store.get(&format!("{MOD_BASE}.experts.{i}.fc1.bias"))?;
        let w2 = case.store.get(&format!("{MOD_BASE}.experts.{i}.fc2.weight"))?;

        let mut u = vec![0.0; rows * hidden];
        for r in 0..rows {
            u[r * hidden..(r + 1) * hidden].copy_from_slice(b1.data());
        }
        tensor::mm_acc(case.z.data(), w1.data(), rows, dim, hidden, &mut u);
        let act: Vec<f64> = u.iter().map(|&v| crate::autodiff::gelu(v)).collect();

        let d_e: Vec<f64> = delta.iter().map(|v| gates[i] * v).collect();
        let mut d_w2 = vec![0.0; hidden * dim];
        tensor::mm_ta_acc(&act, &d_e, rows, hidden, dim, &mut d_w2);
        let mut d_b2 = vec![0.0; dim];
        for r in 0..rows {
            for (s, v) in d_b2.iter_mut().zip(&d_e[r * dim..(r + 1) * dim]) {
                *s += v;
            }
        }
        let mut d_act = vec![0.0; rows * hidden];
        tensor::mm_tb_acc(&d_e, w2.data(), rows, dim, hidden, &mut d_act);
        let d_u: Vec<f64> = d_act
            .iter()
            .zip(&u)
            .map(|(da, &uv)| da * crate::autodiff::gelu_grad(uv))
            .collect();
        let mut d_w1 = vec![0.0; dim * hidden];
        tensor::mm_ta_acc(case.z.data(), &d_u, rows, dim, hidden, &mut d_w1);
        let mut d_b1 = vec![0.0; hidden];
        for r in 0..rows {
            for (s, v) in d_b1.iter_mut().zip(&d_u[r * hidden..(r + 1) * hidden]) {
                *s += v;
            }
        }

        for (part, manual) in
            [("fc1.weight", d_w1), ("fc1.bias", d_b1), ("fc2.weight", d_w2), ("fc2.bias", d_b2)]
        {
            let name = format!("{MOD_BASE}.experts.{i}.{part}");
            let err = rel_vec_err(&manual, &grads[&name]);
            report.max_chain_err = report.max_chain_err.max(err);
            if err >= 1e-8 {
                return Err(Error::Contract(format!(
                    "autodiff disagrees with the chain-rule product at {name}: rel err {err:e}"
                )));
            }
        }
    }
    Ok(report)
}
