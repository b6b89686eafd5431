//! Statistics for the diagnostics: parameter divergence between runs,
//! gradient-direction agreement, context clustering (k-means, 2-D PCA),
//! similarity lifts, and rank/linear correlations. Everything is exact f64
//! and deterministic for a given seed.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seed::stream;
use crate::tensor::cosine;
use crate::vft::GradSnapshot;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Pearson correlation. Constant input → `Degenerate`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "correlation needs two equal series of ≥2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("constant series has no correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Unit vector bisecting a bundle of gradient directions: normalize each,
/// average, normalize the mean. Zero vectors are skipped; nothing usable →
/// `Degenerate`.
pub fn dominant_direction(vecs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = vecs.first().map(Vec::len).ok_or_else(|| {
        Error::Input("dominant direction of an empty bundle".into())
    })?;
    let mut acc = vec![0.0; dim];
    let mut used = 0usize;
    for v in vecs {
        if v.len() != dim {
            return Err(Error::Input("mixed vector widths in bundle".into()));
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b / norm;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("all gradient vectors are zero".into()));
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Degenerate("gradient directions cancel exactly".into()));
    }
    for a in &mut acc {
        *a /= norm;
    }
    Ok(acc)
}

/// Per-step cosine of each gradient snapshot to the run's dominant
/// direction, with summary statistics. A tight, high-mean series means the
/// updates keep pulling the same way; conflict shows up as a low mean and a
/// wide spread.
#[derive(Debug, Clone, Serialize)]
pub struct CosineSeries {
    pub series: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
}

pub fn grad_cosine_series(snapshots: &[GradSnapshot]) -> Result<CosineSeries> {
    if snapshots.len() < 2 {
        return Err(Error::Input("need at least 2 gradient snapshots".into()));
    }
    if snapshots.iter().any(|s| s.names != snapshots[0].names) {
        return Err(Error::Input("snapshot name sets differ within the run".into()));
    }
    let flats: Vec<Vec<f64>> = snapshots.iter().map(|s| s.flat.clone()).collect();
    let dir = dominant_direction(&flats)?;
    let series: Vec<(usize, f64)> =
        snapshots.iter().map(|s| (s.step, cosine(&s.flat, &dir))).collect();
    let n = series.len() as f64;
    let mean = series.iter().map(|(_, c)| c).sum::<f64>() / n;
    let var = series.iter().map(|(_, c)| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok(CosineSeries { series, mean, std: var.sqrt() })
}

/// L2 distance between two parameter sets, bucketed per encoder block.
/// `other` covers encoder parameters outside any block (patch/pos embedding,
/// final norm, prompts). Non-encoder parameters are ignored.
#[derive(Debug, Clone, Serialize)]
pub struct BlockDistances {
    pub per_block: Vec<f64>,
    pub other: f64,
    pub total: f64,
}

pub fn encoder_l2_distance(a: &ParamStore, b: &ParamStore) -> Result<BlockDistances> {
    let names: Vec<&str> = a.names().filter(|n| n.starts_with("encoder.")).collect();
    if names.is_empty() {
        return Err(Error::Input("no encoder parameters to compare".into()));
    }
    if b.names().filter(|n| n.starts_with("encoder.")).count() != names.len() {
        return Err(Error::Input("encoder parameter sets differ".into()));
    }
    let mut blocks: BTreeMap<usize, f64> = BTreeMap::new();
    let mut other = 0.0;
    for name in names {
        let ta = a.get(name)?;
        let tb = b.get(name)?;
        if ta.shape() != tb.shape() {
            return Err(Error::Input(format!("shape mismatch in {name}")));
        }
        let sq: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        match name
            .strip_prefix("encoder.blocks.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
        {
            Some(i) => *blocks.entry(i).or_insert(0.0) += sq,
            None => other += sq,
        }
    }
    let n_blocks = blocks.keys().next_back().map_or(0, |&i| i + 1);
    let mut per_block = vec![0.0; n_blocks];
    for (i, sq) in blocks {
        per_block[i] = sq.sqrt();
    }
    let total = (per_block.iter().map(|d| d * d).sum::<f64>() + other).sqrt();
    Ok(BlockDistances { per_block, other: other.sqrt(), total })
}

/// k-means with k-means++ seeding and Lloyd iterations.
#[derive(Debug, Clone, Serialize)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Input(format!("k = {k} outside 1..={n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Input("mixed point widths".into()));
    }
    let mut rng = stream(seed, "kmeans");

    // k-means++: next centroid drawn ∝ squared distance to the nearest chosen.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..300 {
        iterations = it + 1;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, dist) = centroids
                .iter()
                .map(|c| sq_dist(p, c))
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("k >= 1");
            assignments[i] = best;
            inertia += dist;
        }
        if inertia > prev_inertia + 1e-9 {
            return Err(Error::Numeric(format!(
                "inertia rose from {prev_inertia} to {inertia}"
            )));
        }
        prev_inertia = inertia;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement = 0.0f64;
        for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if count == 0 {
                continue; // re-seeded below
            }
            let mut moved = 0.0;
            for (cv, s) in c.iter_mut().zip(sum) {
                let next = s / count as f64;
                moved += (next - *cv) * (next - *cv);
                *cv = next;
            }
            movement = movement.max(moved.sqrt());
        }
        // An emptied cluster restarts at the point farthest from its centroid.
        for e in 0..k {
            if counts[e] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignments[a]]);
                    let db = sq_dist(&points[b], &centroids[assignments[b]]);
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("n >= 1");
            centroids[e] = points[far].clone();
            movement = f64::INFINITY; // force another pass
        }

        if movement < 1e-6 {
            break;
        }
    }
    Ok(KmeansResult { assignments, centroids, inertia: prev_inertia, iterations })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major `[d,d]`).
/// Returns eigenvalues and eigenvectors as columns of `v` (row-major).
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    Ok((eig, v))
}

/// 2-D principal component projection.
#[derive(Debug, Clone, Serialize)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
}

pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2d> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Input("pca needs at least 2 points".into()));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Input("pca needs ≥2 consistent dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (p[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }

    let (eig, v) = jacobi_eigen(cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = eig.iter().map(|&l| l.max(0.0)).sum();
    if total < 1e-12 {
        return Err(Error::Degenerate("no variance: all points identical".into()));
    }
    let comp = |col: usize| -> Vec<f64> { (0..d).map(|i| v[i * d + col]).collect() };
    let c0 = comp(order[0]);
    let c1 = comp(order[1]);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    if (dot(&c0, &c0) - 1.0).abs() > 1e-10
        || (dot(&c1, &c1) - 1.0).abs() > 1e-10
        || dot(&c0, &c1).abs() > 1e-10
    {
        return Err(Error::Numeric("eigenvectors lost orthonormality".into()));
    }
    let coords = points
        .iter()
        .map(|p| {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [dot(&centered, &c0), dot(&centered, &c1)]
        })
        .collect();
    Ok(Pca2d {
        coords,
        components: [c0, c1],
        explained: [eig[order[0]].max(0.0) / total, eig[order[1]].max(0.0) / total],
    })
}

/// Mean pairwise cosine inside clusters vs across clusters. The lift
/// (`intra − inter`) is positive when the partition tracks real structure.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimilarityLift {
    pub intra: f64,
    pub inter: f64,
}

impl SimilarityLift {
    pub fn lift(self) -> f64 {
        self.intra - self.inter
    }
}

pub fn similarity_lift(features: &[Vec<f64>], assignments: &[usize]) -> Result<SimilarityLift> {
    if features.len() != assignments.len() || features.len() < 2 {
        return Err(Error::Input("features and assignments must match, ≥2 points".into()));
    }
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let c = cosine(&features[i], &features[j]);
            let bucket = if assignments[i] == assignments[j] { &mut intra } else { &mut inter };
            bucket.0 += c;
            bucket.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Degenerate(
            "partition has no intra- or no inter-cluster pairs".into(),
        ));
    }
    Ok(SimilarityLift { intra: intra.0 / intra.1 as f64, inter: inter.0 / inter.1 as f64 })
}

/// Pearson correlation between context similarity and gate similarity over
/// seeded random pairs: for a pair `(i, j)`, x = cos(ctxᵢ, ctxⱼ) and
/// y = cos(gᵢ, gⱼ).
pub fn routing_context_correlation(
    contexts: &[Vec<f64>],
    gates: &[Vec<f64>],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let n = contexts.len();
    if n < 2 || gates.len() != n {
        return Err(Error::Input(format!(
            "need matching contexts and gates for ≥2 samples, got {n} and {}",
            gates.len()
        )));
    }
    if n_pairs < 2 {
        return Err(Error::Input("need at least 2 pairs".into()));
    }
    let mut rng = stream(seed, "routing-pairs");
    let mut x = Vec::with_capacity(n_pairs);
    let mut y = Vec::with_capacity(n_pairs);
    while x.len() < n_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        x.push(cosine(&contexts[i], &contexts[j]));
        y.push(cosine(&gates[i], &gates[j]));
    }
    pearson(&x, &y)
}

/// The same statistic with gate vectors randomly permuted against contexts —
/// the null the real correlation is compared to.
pub fn shuffled_routing_correlation(
    contexts: &[Vec<f64>],
    gates: &[Vec<f64>],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, "routing-shuffle");
    let mut perm: Vec<usize> = (0..gates.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| gates[i].clone()).collect();
    routing_context_correlation(contexts, &shuffled, n_pairs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn_vec;
    use crate::tensor::Tensor;

    #[test]
    fn pearson_matches_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        // Hand-computed: x vs [1,3,2,4] → r = 0.8.
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[5.0; 4]), Err(Error::Degenerate(_))));
        assert!(pearson(&x, &[1.0]).is_err());
    }

    #[test]
    fn spearman_sees_monotone_structure_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        // Hand case: ranks x = [1,2,3], y = [3,1,2] → ρ = −0.5.
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 1.0, 5.0]).unwrap() + 0.5).abs() < 1e-12);
        // Ties get average ranks.
        assert!(
            (spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 20.0, 40.0]).unwrap() - 1.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn dominant_direction_bisects_orthogonal_directions() {
        let vecs = vec![vec![2.0, 0.0], vec![0.0, 5.0]];
        let d = dominant_direction(&vecs).unwrap();
        let inv = 1.0 / 2.0f64.sqrt();
        assert!((d[0] - inv).abs() < 1e-12 && (d[1] - inv).abs() < 1e-12);
        assert!(matches!(
            dominant_direction(&[vec![0.0, 0.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            dominant_direction(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
            Err(Error::Degenerate(_))
        ));
    }

    fn snap(step: usize, flat: Vec<f64>) -> GradSnapshot {
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        GradSnapshot { step, names: vec!["w".into()], flat, norm }
    }

    #[test]
    fn cosine_series_measures_alignment_with_the_dominant_direction() {
        // Constant direction, varying magnitude: all cosines 1, std 0.
        let constant = vec![snap(0, vec![1.0, 1.0]), snap(5, vec![3.0, 3.0])];
        let s = grad_cosine_series(&constant).unwrap();
        assert!(s.series.iter().all(|(_, c)| (c - 1.0).abs() < 1e-12));
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!(s.std < 1e-12);

        // Alternating orthogonal pair: the dominant direction bisects, every
        // cosine is exactly 1/√2.
        let alt = vec![
            snap(0, vec![1.0, 0.0]),
            snap(1, vec![0.0, 2.0]),
            snap(2, vec![3.0, 0.0]),
            snap(3, vec![0.0, 1.0]),
        ];
        let s = grad_cosine_series(&alt).unwrap();
        let want = 1.0 / 2.0f64.sqrt();
        for (_, c) in &s.series {
            assert!((c - want).abs() < 1e-12);
        }
        assert!(s.std < 1e-12);

        // Opposite gradients cancel: no dominant direction.
        let opposed = vec![snap(0, vec![1.0, 0.0]), snap(1, vec![-1.0, 0.0])];
        assert!(matches!(grad_cosine_series(&opposed), Err(Error::Degenerate(_))));
        assert!(grad_cosine_series(&constant[..1]).is_err());
    }

    fn store_with(names: &[(&str, Vec<usize>, f64)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape, fill) in names {
            s.insert(*name, Tensor::full(shape.clone(), *fill)).unwrap();
        }
        s
    }

    #[test]
    fn block_distance_localizes_the_change() {
        let spec: Vec<(&str, Vec<usize>, f64)> = vec![
            ("encoder.pos_embed", vec![4, 2], 0.0),
            ("encoder.blocks.0.attn.wq.weight", vec![2, 2], 1.0),
            ("encoder.blocks.1.ffn.fc1.weight", vec![2, 2], 1.0),
            ("proj.fc1.weight", vec![2, 2], 5.0),
        ];
        let a = store_with(&spec);
        let mut b = store_with(&spec);
        // Move one element of block 1 by 3; ignore a projector change entirely.
        b.get_mut("encoder.blocks.1.ffn.fc1.weight").unwrap().data_mut()[0] += 3.0;
        b.get_mut("proj.fc1.weight").unwrap().data_mut()[0] += 100.0;
        let d = encoder_l2_distance(&a, &b).unwrap();
        assert_eq!(d.per_block, vec![0.0, 3.0]);
        assert_eq!(d.other, 0.0);
        assert!((d.total - 3.0).abs() < 1e-12);

        let same = encoder_l2_distance(&a, &a).unwrap();
        assert_eq!(same.total, 0.0);

        let mut c = store_with(&spec);
        *c.get_mut("encoder.pos_embed").unwrap() = Tensor::full(vec![4, 3], 0.0);
        assert!(matches!(encoder_l2_distance(&a, &c), Err(Error::Input(_))));
    }

    fn blobs(seed: u64, n_per: usize, centers: &[Vec<f64>], std: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(seed, "blobs");
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (li, c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                let noise = randn_vec(&mut rng, c.len(), std);
                pts.push(c.iter().zip(&noise).map(|(a, b)| a + b).collect());
                labels.push(li);
            }
        }
        (pts, labels)
    }

    fn purity(assignments: &[usize], labels: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for cluster in 0..k {
            let mut counts = BTreeMap::new();
            for (a, l) in assignments.iter().zip(labels) {
                if *a == cluster {
                    *counts.entry(*l).or_insert(0usize) += 1;
                }
            }
            hits += counts.values().max().copied().unwrap_or(0);
        }
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let centers = vec![
            vec![10.0, 0.0, 0.0, 0.0],
            vec![0.0, 10.0, 0.0, 0.0],
            vec![0.0, 0.0, 10.0, 0.0],
        ];
        let (pts, labels) = blobs(1, 20, &centers, 0.3);
        let r = kmeans(&pts, 3, 2).unwrap();
        assert_eq!(purity(&r.assignments, &labels, 3), 1.0);
        // 60 points, 4 dims of N(0, 0.3) noise → E[inertia] ≈ 21.6.
        assert!(r.inertia < 35.0, "inertia {}", r.inertia);
    }

    #[test]
    fn kmeans_edge_cases_and_determinism() {
        let (pts, _) = blobs(3, 10, &[vec![0.0, 0.0], vec![6.0, 6.0]], 0.5);
        assert!(kmeans(&pts, 0, 1).is_err());
        assert!(kmeans(&pts, pts.len() + 1, 1).is_err());

        let exact = kmeans(&pts, pts.len(), 4).unwrap();
        assert!(exact.inertia < 1e-20);

        let a = kmeans(&pts, 2, 5).unwrap();
        let b = kmeans(&pts, 2, 5).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());

        // More clusters never fit worse.
        let mut prev = f64::INFINITY;
        for k in 1..=4 {
            let r = kmeans(&pts, k, 6).unwrap();
            assert!(r.inertia <= prev + 1e-9, "k={k}: {} > {prev}", r.inertia);
            prev = r.inertia;
        }
    }

    #[test]
    fn pca_recovers_a_planted_plane() {
        // Orthonormal u, v in 6 dimensions.
        let u = {
            let mut u = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
            for x in &mut u {
                *x /= 2.0;
            }
            u
        };
        let v = {
            let mut v = vec![1.0, -1.0, 1.0, -1.0, 0.0, 0.0];
            for x in &mut v {
                *x /= 2.0;
            }
            v
        };
        let mut rng = stream(7, "pca");
        let mut pts = Vec::new();
        for _ in 0..200 {
            let a = 3.0 * randn_vec(&mut rng, 1, 1.0)[0];
            let b = randn_vec(&mut rng, 1, 1.0)[0];
            pts.push((0..6).map(|i| a * u[i] + b * v[i] + 0.5).collect::<Vec<f64>>());
        }
        let p = pca_2d(&pts).unwrap();
        assert!(cosine(&p.components[0], &u).abs() > 0.999, "{:?}", p.components[0]);
        assert!(cosine(&p.components[1], &v).abs() > 0.999);
        assert!(p.explained[0] > p.explained[1]);
        assert!(p.explained[0] + p.explained[1] > 0.999); // plane carries everything
        assert_eq!(p.coords.len(), 200);
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(pca_2d(&pts), Err(Error::Degenerate(_))));
        assert!(pca_2d(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn similarity_lift_tracks_real_partitions() {
        // Two bundles pointing at right angles.
        let mut feats = Vec::new();
        let mut assign = Vec::new();
        let mut rng = stream(9, "lift");
        for i in 0..20 {
            let mut f = vec![0.0; 4];
            let noise = randn_vec(&mut rng, 4, 0.05);
            f[i % 2] = 1.0;
            for (a, b) in f.iter_mut().zip(&noise) {
                *a += b;
            }
            feats.push(f);
            assign.push(i % 2);
        }
        let l = similarity_lift(&feats, &assign).unwrap();
        assert!(l.intra > 0.9);
        assert!(l.inter < 0.2);
        assert!(l.lift() > 0.7);

        // Shuffled assignment destroys the lift.
        let shuffled: Vec<usize> = (0..20).map(|i| (i / 10) % 2).collect();
        let l2 = similarity_lift(&feats, &shuffled).unwrap();
        assert!(l2.lift().abs() < 0.3);

        // One cluster only → no inter pairs.
        assert!(matches!(
            similarity_lift(&feats, &vec![0; 20]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn routing_correlation_finds_planted_coupling() {
        let mut rng = stream(11, "coupling");
        let n = 200;
        let dim = 8;
        let experts = 4;
        // Fixed random map from context to gate logits.
        let w = randn_vec(&mut rng, dim * experts, 1.0);
        let mut contexts = Vec::new();
        let mut gates = Vec::new();
        for _ in 0..n {
            let c = randn_vec(&mut rng, dim, 1.0);
            let mut logits = vec![0.0; experts];
            for (e, l) in logits.iter_mut().enumerate() {
                for (i, cv) in c.iter().enumerate() {
                    *l += w[e * dim + i] * cv;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            gates.push(exps.iter().map(|e| e / s).collect());
            contexts.push(c);
        }
        let r = routing_context_correlation(&contexts, &gates, 4000, 13).unwrap();
        assert!(r > 0.3, "planted coupling invisible: r = {r}");
        let null = shuffled_routing_correlation(&contexts, &gates, 4000, 13).unwrap();
        assert!(null.abs() < 0.1, "null r = {null}");
        assert!(r > null + 0.2);

        let constant = vec![vec![0.25; experts]; n];
        assert!(matches!(
            routing_context_correlation(&contexts, &constant, 100, 1),
            Err(Error::Degenerate(_))
        ));
    }
}
