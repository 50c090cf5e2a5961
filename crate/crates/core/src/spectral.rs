//! Spectral clustering of coefficient affinities.
//!
//! Symmetric-normalized Laplacian `L = I − D^{−1/2} A D^{−1/2}`, embedding into
//! the eigenvectors of its `k` smallest eigenvalues, row normalization, and
//! k-means (k-means++ seeding, best of several restarts).

use serde::{Deserialize, Serialize};

use crate::assignment::ClusterAssignment;
use crate::edsc::{build_affinity, AffinityMatrix, CoefficientMatrix};
use crate::error::{domain, Result};
use crate::numerics::{sym_eig, Matrix, RngState};

/// Degree floor keeping `D^{−1/2}` finite for isolated vertices.
pub const DEGREE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the inertia changes by less than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iters: 300,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
}

/// Spectral clustering output with the diagnostics written to JSON summaries.
#[derive(Clone, Debug)]
pub struct SpectralClustering {
    pub assignment: ClusterAssignment,
    pub inertia: f64,
    /// Smallest `min(k + 1, N)` Laplacian eigenvalues, ascending.
    pub laplacian_eigenvalues: Vec<f64>,
    /// `λ_{k+1} − λ_k` of the Laplacian (0 when `k = N`).
    pub eigengap: f64,
    /// The affinity had no off-diagonal mass.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub cluster_sizes: Vec<usize>,
    pub inertia: f64,
    pub eigengap: f64,
    pub laplacian_eigenvalues: Vec<f64>,
    pub degenerate: bool,
}

impl SpectralClustering {
    pub fn summary(&self) -> SpectralSummary {
        SpectralSummary {
            cluster_sizes: self.assignment.cluster_sizes(),
            inertia: self.inertia,
            eigengap: self.eigengap,
            laplacian_eigenvalues: self.laplacian_eigenvalues.clone(),
            degenerate: self.degenerate,
        }
    }
}

/// `D^{−1/2} A D^{−1/2}`; its eigenvalues are `1 − eig(L)`.
pub fn normalized_affinity(a: &AffinityMatrix) -> Matrix {
    let m = a.matrix();
    let inv_sqrt: Vec<f64> = m
        .row_iter()
        .map(|r| 1.0 / r.sum().max(DEGREE_FLOOR).sqrt())
        .collect();
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        m[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
    })
}

/// Symmetric-normalized Laplacian `I − D^{−1/2} A D^{−1/2}`.
pub fn normalized_laplacian(a: &AffinityMatrix) -> Matrix {
    let n = a.len();
    Matrix::identity(n, n) - normalized_affinity(a)
}

pub fn spectral_cluster(a: &AffinityMatrix, k: usize, rng: &mut RngState) -> Result<SpectralClustering> {
    spectral_cluster_with(a, k, &KMeansConfig::default(), rng)
}

pub fn spectral_cluster_with(
    a: &AffinityMatrix,
    k: usize,
    kmeans_config: &KMeansConfig,
    rng: &mut RngState,
) -> Result<SpectralClustering> {
    let n = a.len();
    if k < 2 {
        return Err(domain(format!("spectral clustering needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(domain(format!("k = {k} exceeds the number of points {n}")));
    }
    let m = a.matrix();
    let off_diagonal: f64 = m.sum() - m.trace();
    let degenerate = off_diagonal <= 0.0;
    if degenerate {
        log::warn!("degenerate affinity: no off-diagonal mass, spectral embedding is arbitrary");
    }

    let normalized = normalized_affinity(a);
    let (mu, vecs) = sym_eig(&normalized)?;
    // Largest eigenvalues of the normalized affinity are the smallest of L.
    let lap: Vec<f64> = mu.iter().rev().map(|m| 1.0 - m).collect();
    let take = (k + 1).min(n);
    let laplacian_eigenvalues = lap[..take].to_vec();
    let eigengap = if k < n { lap[k] - lap[k - 1] } else { 0.0 };

    // Embedding: points as columns of a k × N matrix, rows normalized.
    let mut embed = Matrix::zeros(k, n);
    for c in 0..k {
        let src = n - 1 - c;
        for i in 0..n {
            embed[(c, i)] = vecs[(i, src)];
        }
    }
    for mut col in embed.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let km = kmeans(&embed, k, kmeans_config, rng)?;
    Ok(SpectralClustering {
        assignment: ClusterAssignment::new(km.labels, k)?,
        inertia: km.inertia,
        laplacian_eigenvalues,
        eigengap,
        degenerate,
    })
}

/// Keeps the `m` largest-magnitude entries of every row, zeroing the rest.
pub fn sparsify_rows(c: &Matrix, m: usize) -> Matrix {
    let mut out = Matrix::zeros(c.nrows(), c.ncols());
    if m >= c.ncols() {
        return c.clone();
    }
    let mut order: Vec<usize> = Vec::with_capacity(c.ncols());
    for i in 0..c.nrows() {
        order.clear();
        order.extend(0..c.ncols());
        order.sort_by(|&a, &b| c[(i, b)].abs().total_cmp(&c[(i, a)].abs()).then(a.cmp(&b)));
        for &j in &order[..m] {
            out[(i, j)] = c[(i, j)];
        }
    }
    out
}

/// Affinity refinement applied to `C` before spectral clustering: per-column
/// thresholding, a rank-`r` symmetric factor `U`, and `A = max(ÛÛᵀ, 0)^power`
/// with `Û` the row-normalized `U`. This is the post-processing used by deep
/// subspace clustering networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Refinement {
    /// Keep the largest entries of each column until this fraction of its
    /// absolute mass is covered; `1.0` keeps everything.
    pub mass: f64,
    /// Subspace dimension `d`; the factor keeps `r = d·K + 1` components.
    /// `None` uses the block dimension.
    pub dim: Option<usize>,
    pub power: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Self {
            mass: 1.0,
            dim: None,
            power: 8.0,
        }
    }
}

/// How pseudo-labels are derived from a coefficient matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Keep only the `top_m` largest entries per row of `C` first.
    pub top_m: Option<usize>,
    pub refine: Option<Refinement>,
    pub kmeans: KMeansConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            top_m: None,
            refine: Some(Refinement::default()),
            kmeans: KMeansConfig::default(),
        }
    }
}

impl PseudoLabelConfig {
    /// `A = |C| + |C|ᵀ` without sparsification or refinement.
    pub fn plain() -> Self {
        Self {
            top_m: None,
            refine: None,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Zeroes all but the largest-magnitude entries of each column that together
/// reach `mass` of the column's absolute sum.
pub fn threshold_columns(c: &Matrix, mass: f64) -> Matrix {
    if mass >= 1.0 {
        return c.clone();
    }
    let mut out = Matrix::zeros(c.nrows(), c.ncols());
    let mut order: Vec<usize> = Vec::with_capacity(c.nrows());
    for j in 0..c.ncols() {
        let col = c.column(j);
        let total: f64 = col.iter().map(|v| v.abs()).sum();
        order.clear();
        order.extend(0..c.nrows());
        order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
        let mut acc = 0.0;
        for &i in &order {
            acc += col[i].abs();
            out[(i, j)] = col[i];
            if acc > mass * total {
                break;
            }
        }
    }
    out
}

/// Refined affinity for `k` clusters; `dim` is used when `r.dim` is unset.
pub fn refined_affinity(c: &Matrix, k: usize, dim: usize, r: &Refinement) -> Result<AffinityMatrix> {
    if !(r.mass > 0.0) || !(r.power > 0.0) {
        return Err(domain("refinement mass and power must be positive"));
    }
    let n = c.nrows();
    let cp = threshold_columns(c, r.mass);
    let sym = (&cp + cp.transpose()) * 0.5;
    let (vals, vecs) = sym_eig(&sym)?;
    // Singular values of a symmetric matrix are |eigenvalues|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()).then(a.cmp(&b)));
    let rank = (r.dim.unwrap_or(dim) * k + 1).min(n);
    let mut u = Matrix::zeros(n, rank);
    for (col, &src) in order[..rank].iter().enumerate() {
        let scale = vals[src].abs().sqrt();
        for i in 0..n {
            u[(i, col)] = vecs[(i, src)] * scale;
        }
    }
    for mut row in u.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let z = &u * u.transpose();
    let mut a = z.map(|v| v.max(0.0).powf(r.power));
    let max = a.max();
    if max > 0.0 {
        a /= max;
    }
    let a = (&a + a.transpose()) * 0.5;
    AffinityMatrix::from_matrix(a)
}

/// Pseudo-labels from a learned coefficient matrix. `dim` is the per-cluster
/// subspace dimension used by the refinement when it has none of its own.
pub fn pseudo_labels(
    q: &CoefficientMatrix,
    k: usize,
    dim: usize,
    config: &PseudoLabelConfig,
    rng: &mut RngState,
) -> Result<SpectralClustering> {
    let c = match config.top_m {
        Some(m) => sparsify_rows(&q.c, m),
        None => q.c.clone(),
    };
    let affinity = match &config.refine {
        Some(r) => refined_affinity(&c, k, dim, r)?,
        None => build_affinity(&CoefficientMatrix::new(c, q.lambda, q.source)?),
    };
    spectral_cluster_with(&affinity, k, &config.kmeans, rng)
}

fn sq_dist(points: &Matrix, i: usize, centers: &Matrix, c: usize) -> f64 {
    points
        .column(i)
        .iter()
        .zip(centers.column(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut RngState) -> Matrix {
    let n = points.ncols();
    let mut centers = Matrix::zeros(points.nrows(), k);
    let first = rng.below(n);
    centers.set_column(0, &points.column(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.set_column(c, &points.column(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &Matrix, mut centers: Matrix, config: &KMeansConfig) -> KMeansResult {
    let n = points.ncols();
    let k = centers.ncols();
    let mut labels = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..config.max_iters {
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(points, i, &centers, c);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
            dists[i] = best_d;
        }
        // Refill empty clusters with the points farthest from their centers.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                }
            }
        }
        inertia = dists.iter().sum();
        let mut sums = Matrix::zeros(points.nrows(), k);
        for (i, &l) in labels.iter().enumerate() {
            let mut col = sums.column_mut(l);
            col += points.column(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.set_column(c, &(sums.column(c) / counts[c] as f64));
            }
        }
        if (prev - inertia).abs() < config.tol {
            break;
        }
        prev = inertia;
    }
    // Final inertia against the final centers.
    let inertia_final: f64 = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    KMeansResult {
        labels,
        centers,
        inertia: inertia_final.min(inertia),
    }
}

/// k-means on the columns of `points`; restarts use child streams of `rng`.
pub fn kmeans(points: &Matrix, k: usize, config: &KMeansConfig, rng: &mut RngState) -> Result<KMeansResult> {
    let n = points.ncols();
    if k == 0 || k > n {
        return Err(domain(format!("k-means needs 1 <= k <= N, got k = {k}, N = {n}")));
    }
    let base = RngState::new(rng.next_seed());
    let mut best: Option<KMeansResult> = None;
    for restart in 0..config.restarts.max(1) {
        let mut r = base.split(restart as u64);
        let centers = seed_plus_plus(points, k, &mut r);
        let result = lloyd(points, centers, config);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}
