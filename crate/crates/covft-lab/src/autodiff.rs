//! Reverse-mode autodiff on an append-only tape.
//!
//! A [`Graph`] records every op eagerly: each node stores its op kind, input
//! node ids and forward value. [`Graph::backward`] walks the tape in reverse
//! and accumulates adjoints, so a parameter used in several places receives
//! the sum of all its contributions. Nodes whose inputs are all non-trainable
//! propagate `needs_grad = false` and are skipped by the backward sweep,
//! which keeps frozen-backbone passes cheap.
//!
//! The op set is exactly what the models here need — matrix products, row
//! broadcasts, GELU, softmax, layer norm, concat/slice, embedding lookups,
//! masked cross-entropy and top-k renormalization — all in f64.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, mm_acc, mm_ta_acc, mm_tb_acc, Tensor};
use indexmap::IndexMap;
use rand::seq::index::sample as index_sample;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] · b[k,n]
    Matmul { a: usize, b: usize },
    /// a[m,k] · b[n,k]ᵀ
    MatmulTB { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// a[m,n] + row[n] broadcast over rows
    AddRow { a: usize, row: usize },
    Scale { x: usize, k: f64 },
    /// x · s where s is a one-element tensor (used for gate-weighted experts)
    ScaleBy { x: usize, s: usize },
    Gelu { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Sum { x: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    /// Row lookup: out[i] = table[ids[i]]
    Embed { table: usize, ids: Vec<usize> },
    /// Summed token cross-entropy; rows with `None` target contribute nothing.
    CrossEntropy { logits: usize, targets: Vec<Option<usize>> },
    /// Keep the top-k entries of a single row, renormalized to sum 1; the
    /// dropped entries are exactly zero. `keep` is fixed at forward time.
    TopKRenorm { x: usize, keep: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-node adjoints produced by [`Graph::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Shape {
                op: "scalar_value",
                detail: format!("expected one element, got shape {:?}", t.shape()),
            });
        }
        Ok(t.data()[0])
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output of {name}")));
        }
        Ok(self.push(op, value, needs_grad))
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        self.emit(Op::Matmul { a: a.0, b: b.0 }, t, self.ng2(a, b), "matmul")
    }

    /// a · bᵀ — `b` given row-major as `[n, k]`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_tb",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_tb_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        self.emit(Op::MatmulTB { a: a.0, b: b.0 }, t, self.ng2(a, b), "matmul_tb")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.emit(Op::Add { a: a.0, b: b.0 }, t, self.ng2(a, b), "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (rr, rn) = self.value(row).dims2()?;
        if rr != 1 || rn != n {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("row {:?} vs matrix cols {n}", self.value(row).shape()),
            });
        }
        let rowd = self.value(row).data();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let arow = &self.value(a).data()[r * n..(r + 1) * n];
            data.extend(arow.iter().zip(rowd).map(|(x, y)| x + y));
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.emit(Op::AddRow { a: a.0, row: row.0 }, t, self.ng2(a, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::Scale { x: x.0, k }, t, ng, "scale")
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                detail: format!("scale must be one element, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.emit(Op::ScaleBy { x: x.0, s: s.0 }, t, self.ng2(x, s), "scale_by")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::Gelu { x: x.0 }, t, ng, "gelu")
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows). A rank-1
    /// tensor is treated as a single row.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if axis > 1 {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range"),
            });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        if axis == 1 {
            for r in 0..m {
                softmax_row(&xd[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
            }
        } else {
            let mut col = vec![0.0; m];
            let mut out = vec![0.0; m];
            for c in 0..n {
                for r in 0..m {
                    col[r] = xd[r * n + c];
                }
                softmax_row(&col, &mut out);
                for r in 0..m {
                    data[r * n + c] = out[r];
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::Softmax { x: x.0, axis }, t, ng, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            let (r, c) = self.value(v).dims2()?;
            if r != 1 || c != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("{what} {:?} vs feature dim {n}", self.value(v).shape()),
                });
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                data[r * n + c] = (row[c] - mean) * inv * gd[c] + bd[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.ng2(x, gamma) || self.nodes[beta.0].needs_grad;
        self.emit(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            t,
            ng,
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::Sum { x: x.0 }, Tensor::scalar(s), ng, "sum")
    }

    /// Mean over rows: `[m, n] -> [1, n]`. Composite (constant · x, scaled).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims2()?;
        let ones = self.constant(Tensor::matrix(1, m, vec![1.0; m])?);
        let summed = self.matmul(ones, x)?;
        self.scale(summed, 1.0 / m as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows of nothing".into()));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("col counts {pn} vs {n}"),
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
            ng |= self.nodes[p.0].needs_grad;
        }
        let t = Tensor::matrix(rows, n, data)?;
        let ids = parts.iter().map(|v| v.0).collect();
        self.emit(Op::ConcatRows { parts: ids }, t, ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of nothing".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {pm} vs {m}"),
                });
            }
            widths.push(pn);
            ng |= self.nodes[p.0].needs_grad;
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::matrix(m, n, data)?;
        let ids = parts.iter().map(|v| v.0).collect();
        self.emit(Op::ConcatCols { parts: ids }, t, ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {m}", start + len),
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::matrix(len, n, data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::SliceRows { x: x.0, start, len }, t, ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {n}", start + len),
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::SliceCols { x: x.0, start, len }, t, ng, "slice_cols")
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("embed id {bad} out of vocab {v}")));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        let ng = self.nodes[table.0].needs_grad;
        self.emit(Op::Embed { table: table.0, ids: ids.to_vec() }, t, ng, "embed")
    }

    /// Cross-entropy summed over rows with a `Some` target; rows with `None`
    /// are ignored. Output is a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} targets for {m} rows", targets.len()),
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target {bad} out of {n} classes")));
        }
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &ld[r * n..(r + 1) * n];
                loss += log_sum_exp(row) - row[*t];
            }
        }
        let ng = self.nodes[logits.0].needs_grad;
        self.emit(
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            Tensor::scalar(loss),
            ng,
            "cross_entropy",
        )
    }

    /// Top-k renormalization of a single row (ties broken toward the lower
    /// index). Kept entries are divided by their sum; the rest become 0.
    pub fn topk_renorm(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m != 1 {
            return Err(Error::Shape {
                op: "topk_renorm",
                detail: format!("expected a single row, got {m} rows"),
            });
        }
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k k={k} out of 1..={n}")));
        }
        let xd = self.value(x).data();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| xd[b].partial_cmp(&xd[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut keep = idx[..k].to_vec();
        keep.sort_unstable();
        let s: f64 = keep.iter().map(|&i| xd[i]).sum();
        if s <= 0.0 {
            return Err(Error::Numeric(format!("top-{k} mass {s} not positive")));
        }
        let mut data = vec![0.0; n];
        for &i in &keep {
            data[i] = xd[i] / s;
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.nodes[x.0].needs_grad;
        self.emit(Op::TopKRenorm { x: x.0, keep }, t, ng, "topk_renorm")
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node adjoints; leaves
    /// that were created with `needs_grad = false` get none.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", lt.shape()),
            });
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric("loss is non-finite".into()));
        }
        let mut slots: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                slots[id] = None;
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.propagate(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn propagate(&self, id: usize, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let ng = |i: usize| self.nodes[i].needs_grad;
        let dims = |i: usize| self.nodes[i].value.dims2().expect("rank checked at forward");

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                if ng(*a) {
                    let da = slot(slots, *a, m * k);
                    mm_tb_acc(g, val(*b), m, n, k, da);
                }
                if ng(*b) {
                    let db = slot(slots, *b, k * n);
                    mm_ta_acc(val(*a), g, m, k, n, db);
                }
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = dims(*a);
                let (n, _) = dims(*b);
                if ng(*a) {
                    let da = slot(slots, *a, m * k);
                    mm_acc(g, val(*b), m, n, k, da);
                }
                if ng(*b) {
                    let db = slot(slots, *b, n * k);
                    mm_ta_acc(g, val(*a), m, n, k, db);
                }
            }
            Op::Add { a, b } => {
                for &i in [a, b].iter() {
                    if ng(*i) {
                        let d = slot(slots, *i, g.len());
                        for (d, gv) in d.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = dims(*a);
                if ng(*a) {
                    let da = slot(slots, *a, m * n);
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if ng(*row) {
                    let dr = slot(slots, *row, n);
                    for r in 0..m {
                        for c in 0..n {
                            dr[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                if ng(*x) {
                    let dx = slot(slots, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += k * gv;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                if ng(*x) {
                    let dx = slot(slots, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += sv * gv;
                    }
                }
                if ng(*s) {
                    let ds = slot(slots, *s, 1);
                    ds[0] += dot(g, val(*x));
                }
            }
            Op::Gelu { x } => {
                if ng(*x) {
                    let xd = val(*x);
                    let dx = slot(slots, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xd[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !ng(*x) {
                    return;
                }
                let (m, n) = dims(*x);
                let y = self.nodes[id].value.data();
                let dx = slot(slots, *x, m * n);
                if *axis == 1 {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(gr, yr);
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            dr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                } else {
                    for c in 0..n {
                        let mut s = 0.0;
                        for r in 0..m {
                            s += g[r * n + c] * y[r * n + c];
                        }
                        for r in 0..m {
                            dx[r * n + c] += y[r * n + c] * (g[r * n + c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = dims(*x);
                let xd = val(*x);
                let gd = val(*gamma);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    for c in 0..n {
                        xhat[c] = (row[c] - mean) * inv;
                        dxhat[c] = gr[c] * gd[c];
                    }
                    if ng(*gamma) {
                        let dg = slot(slots, *gamma, n);
                        for c in 0..n {
                            dg[c] += gr[c] * xhat[c];
                        }
                    }
                    if ng(*beta) {
                        let db = slot(slots, *beta, n);
                        for c in 0..n {
                            db[c] += gr[c];
                        }
                    }
                    if ng(*x) {
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat: f64 =
                            dot(&dxhat, &xhat) / n as f64;
                        let dx = slot(slots, *x, m * n);
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            dr[c] += inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if ng(*x) {
                    let len = self.nodes[*x].value.len();
                    let dx = slot(slots, *x, len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if ng(p) {
                        let dp = slot(slots, p, len);
                        for (d, gv) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, n) = self.nodes[id].value.dims2().expect("matrix");
                let mut off = 0;
                for &p in parts {
                    let (_, w) = dims(p);
                    if ng(p) {
                        let dp = slot(slots, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                dp[r * w + c] += g[r * n + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                if ng(*x) {
                    let (_, n) = dims(*x);
                    let total = self.nodes[*x].value.len();
                    let dx = slot(slots, *x, total);
                    for (d, gv) in dx[start * n..(start + len) * n].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if ng(*x) {
                    let (m, n) = dims(*x);
                    let dx = slot(slots, *x, m * n);
                    for r in 0..m {
                        for c in 0..*len {
                            dx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if ng(*table) {
                    let (_, d) = dims(*table);
                    let total = self.nodes[*table].value.len();
                    let dt = slot(slots, *table, total);
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if ng(*logits) {
                    let (m, n) = dims(*logits);
                    let ld = val(*logits);
                    let dl = slot(slots, *logits, m * n);
                    let mut probs = vec![0.0; n];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            softmax_row(&ld[r * n..(r + 1) * n], &mut probs);
                            let dr = &mut dl[r * n..(r + 1) * n];
                            for c in 0..n {
                                dr[c] += g[0] * probs[c];
                            }
                            dr[*t] -= g[0];
                        }
                    }
                }
            }
            Op::TopKRenorm { x, keep } => {
                if ng(*x) {
                    let xd = val(*x);
                    let y = self.nodes[id].value.data();
                    let s: f64 = keep.iter().map(|&i| xd[i]).sum();
                    let gy: f64 = keep.iter().map(|&i| g[i] * y[i]).sum();
                    let dx = slot(slots, *x, xd.len());
                    for &i in keep {
                        dx[i] += (g[i] - gy) / s;
                    }
                }
            }
        }
    }
}

fn slot<'a>(slots: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut [f64] {
    slots[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

// ---- elementwise math ----------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

// ---- finite differences ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences of `loss`.
///
/// For each named tensor, up to `coords_per_tensor` coordinates are probed
/// (0 = all of them), chosen by a seeded draw so reports are reproducible.
/// The relative error is `|fd - an| / max(|fd| + |an|, 1e-4)`; the floor
/// turns the comparison into an absolute one (at ~1e-8 for a 1e-4 threshold)
/// for near-zero gradients, where central differences only deliver noise.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    names: &[String],
    analytic: &IndexMap<String, Vec<f64>>,
    mut loss: F,
    step: f64,
    coords_per_tensor: usize,
    probe_seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for name in names {
        let an = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?;
        let len = store.get(name)?.len();
        if an.len() != len {
            return Err(Error::Contract(format!(
                "gradient length {} vs tensor length {len} for {name}",
                an.len()
            )));
        }
        let coords: Vec<usize> = if coords_per_tensor == 0 || coords_per_tensor >= len {
            (0..len).collect()
        } else {
            let mut rng = crate::seed::stream(probe_seed, name);
            let mut v = index_sample(&mut rng, len, coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = orig + step;
            let up = loss(store)?;
            store.get_mut(name)?.data_mut()[i] = orig - step;
            let down = loss(store)?;
            store.get_mut(name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while probing {name}[{i}]"
                )));
            }
            let fd = (up - down) / (2.0 * step);
            let rel = (fd - an[i]).abs() / (fd.abs() + an[i].abs()).max(1e-4);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
