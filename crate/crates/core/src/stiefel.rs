//! Geometric out-of-sample classifier.
//!
//! Embeddings `H` (`d_H × N`) are rotated by an orthogonal `R`, and point `i`
//! is assigned to the axis-aligned block `j` whose coordinate subspace is
//! closest in orthogonal projection distance
//! `‖ĥᵢ − S_jS_jᵀĥᵢ‖² = Σ_{c ∉ block j} ĥ_{ic}²`. Memberships are the softmin
//! of these distances. `R` is fit to pseudo-labels with cross-entropy and
//! Adam-style momentum on the Stiefel manifold, retracting with the Cayley
//! transform so that `RᵀR = I` holds after every step.

use nalgebra::LU;
use serde::{Deserialize, Serialize};

use crate::assignment::{ClusterAssignment, SoftAssignment};
use crate::error::{domain, Error, Result};
use crate::metrics::hungarian;
use crate::numerics::{orthonormality_error, random_orthonormal, Matrix, RngState};

/// Manifold tolerance for the rotation after every optimizer step.
pub const MANIFOLD_TOL: f64 = 1e-6;

/// `k` blocks of `q` consecutive coordinates in `R^{k·q}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisAlignedSubspaces {
    pub k: usize,
    pub q: usize,
}

impl AxisAlignedSubspaces {
    pub fn new(k: usize, q: usize) -> Result<Self> {
        if k == 0 || q == 0 {
            return Err(domain("cluster count and block dimension must be positive"));
        }
        Ok(Self { k, q })
    }

    /// `d_H = k · q`.
    pub fn dim(&self) -> usize {
        self.k * self.q
    }

    pub fn block_of(&self, coord: usize) -> usize {
        coord / self.q
    }

    /// Orthonormal basis `S_j` of block `j` (`d_H × q`).
    pub fn basis(&self, j: usize) -> Matrix {
        Matrix::from_fn(self.dim(), self.q, |r, c| {
            if r == j * self.q + c {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Fallback block dimension `1 + ⌈rank / k⌉` when none is configured.
pub fn default_block_dim(rank: usize, k: usize) -> usize {
    1 + rank.div_ceil(k.max(1))
}

/// Entry `(i, j)`: squared mass of point `i` outside block `j`.
pub fn projection_distances(h_rot: &Matrix, subspaces: &AxisAlignedSubspaces) -> Result<Matrix> {
    if h_rot.nrows() != subspaces.dim() {
        return Err(domain(format!(
            "embeddings have {} rows but {} blocks of dimension {} need {}",
            h_rot.nrows(),
            subspaces.k,
            subspaces.q,
            subspaces.dim()
        )));
    }
    let n = h_rot.ncols();
    let mut out = Matrix::zeros(n, subspaces.k);
    for (i, col) in h_rot.column_iter().enumerate() {
        let total = col.norm_squared();
        for j in 0..subspaces.k {
            let inside = col.rows(j * subspaces.q, subspaces.q).norm_squared();
            out[(i, j)] = (total - inside).max(0.0);
        }
    }
    Ok(out)
}

/// Row-wise softmin `y_ij = exp(−d_ij) / Σ_k exp(−d_ik)`, max-shifted.
pub fn softmin_assign(distances: &Matrix) -> SoftAssignment {
    let mut y = Matrix::zeros(distances.nrows(), distances.ncols());
    for (i, row) in distances.row_iter().enumerate() {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, d) in row.iter().enumerate() {
            let e = (-(d - min)).exp();
            y[(i, j)] = e;
            sum += e;
        }
        for j in 0..distances.ncols() {
            y[(i, j)] /= sum;
        }
    }
    SoftAssignment { y }
}

/// Row argmin, lowest index on ties.
pub fn nearest_blocks(distances: &Matrix) -> Vec<usize> {
    distances
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, d) in row.iter().enumerate() {
                if *d < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of softmin memberships of `R·H` against `targets`
/// (block ids), with its Euclidean gradient in `R`.
pub fn cross_entropy_and_gradient(
    r: &Matrix,
    h: &Matrix,
    targets: &[usize],
    subspaces: &AxisAlignedSubspaces,
) -> Result<(f64, Matrix)> {
    let h_rot = r * h;
    let d = projection_distances(&h_rot, subspaces)?;
    let y = softmin_assign(&d).y;
    let n = h.ncols() as f64;
    let mut loss = 0.0;
    let mut g_rot = Matrix::zeros(h_rot.nrows(), h_rot.ncols());
    for (i, &t) in targets.iter().enumerate() {
        loss -= y[(i, t)].max(f64::MIN_POSITIVE).ln();
        for c in 0..h_rot.nrows() {
            let b = subspaces.block_of(c);
            let indicator = if b == t { 1.0 } else { 0.0 };
            g_rot[(c, i)] = 2.0 * h_rot[(c, i)] * (y[(i, b)] - indicator) / n;
        }
    }
    Ok((loss / n, g_rot * h.transpose()))
}

/// Cayley-Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CayleyAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Caps the step so that `α‖W‖ ≤ 2q`.
    pub q: f64,
}

impl Default for CayleyAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            q: 0.5,
        }
    }
}

/// Optimizer state: a tangent momentum matrix and a scalar second moment.
#[derive(Clone, Debug)]
pub struct CayleyAdam {
    pub config: CayleyAdamConfig,
    momentum: Option<Matrix>,
    second_moment: f64,
    t: i32,
}

impl CayleyAdam {
    pub fn new(config: CayleyAdamConfig) -> Self {
        Self {
            config,
            momentum: None,
            second_moment: 0.0,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of `x` (orthonormal columns) against the Euclidean gradient.
    pub fn step(&mut self, x: &mut Matrix, grad: &Matrix) -> Result<()> {
        if x.shape() != grad.shape() {
            return Err(domain("gradient and parameter shapes differ"));
        }
        let err = orthonormality_error(x);
        if err > MANIFOLD_TOL {
            return Err(domain(format!(
                "parameter is off the Stiefel manifold (‖XᵀX − I‖ = {err:.3e})"
            )));
        }
        let c = &self.config;
        self.t += 1;
        let m_prev = self
            .momentum
            .take()
            .unwrap_or_else(|| Matrix::zeros(x.nrows(), x.ncols()));
        let m = m_prev * c.beta1 + grad * (1.0 - c.beta1);
        self.second_moment = c.beta2 * self.second_moment + (1.0 - c.beta2) * grad.norm_squared();
        let v_hat = self.second_moment / (1.0 - c.beta2.powi(self.t));
        let scale = (1.0 - c.beta1.powi(self.t)) * (v_hat + c.eps).sqrt();

        // Skew-symmetric generator of the tangent direction.
        let mx_t = &m * x.transpose();
        let w_hat = &mx_t - &*x * (x.transpose() * &mx_t) * 0.5;
        let w = (&w_hat - w_hat.transpose()) / scale;
        // Project the momentum onto the tangent space.
        self.momentum = Some(&w * &*x * scale);

        let w_norm = w.norm();
        if w_norm == 0.0 {
            return Ok(());
        }
        let mut alpha = c.lr.min(2.0 * c.q / (w_norm + c.eps));
        let n = x.nrows();
        let id = Matrix::identity(n, n);
        for _ in 0..=10 {
            let lhs = &id + &w * (alpha / 2.0);
            let rhs = (&id - &w * (alpha / 2.0)) * &*x;
            if let Some(next) = LU::new(lhs).solve(&rhs) {
                if next.iter().all(|v| v.is_finite()) && orthonormality_error(&next) <= MANIFOLD_TOL {
                    *x = next;
                    return Ok(());
                }
            }
            alpha *= 0.5;
        }
        Err(Error::Numerical {
            message: "Cayley retraction failed after 10 step halvings".into(),
            condition: None,
        })
    }
}

/// How to initialise the rotation before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationInit {
    Identity,
    Random,
    /// Procrustes fit sending the top-q principal directions of each
    /// pseudo-class onto its block. Independent of the embedding frame.
    Aligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationTrainConfig {
    pub iters: usize,
    pub optimizer: CayleyAdamConfig,
    pub init: RotationInit,
    pub seed: u64,
}

impl Default for RotationTrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            optimizer: CayleyAdamConfig::default(),
            init: RotationInit::Aligned,
            seed: 0,
        }
    }
}

/// Trained rotation plus the class → block matching used for its targets.
#[derive(Clone, Debug)]
pub struct RotationFit {
    pub rotation: Matrix,
    pub subspaces: AxisAlignedSubspaces,
    /// `class_to_block[c]` is the block that pseudo-label `c` was trained towards.
    pub class_to_block: Vec<usize>,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub trace: Vec<f64>,
    /// Agreement of the trained classifier with the pseudo-labels.
    pub train_accuracy: f64,
}

/// Fits `R` so that softmin memberships of `R·H` agree with `pseudo_labels`.
pub fn train_rotation(
    h: &Matrix,
    pseudo_labels: &[usize],
    subspaces: &AxisAlignedSubspaces,
    config: &RotationTrainConfig,
) -> Result<RotationFit> {
    if pseudo_labels.len() != h.ncols() {
        return Err(domain(format!(
            "{} pseudo-labels for {} points",
            pseudo_labels.len(),
            h.ncols()
        )));
    }
    if h.nrows() != subspaces.dim() {
        return Err(domain(format!(
            "embedding dimension {} does not equal k·q = {}",
            h.nrows(),
            subspaces.dim()
        )));
    }
    let k = subspaces.k;
    if let Some(&bad) = pseudo_labels.iter().find(|&&l| l >= k) {
        return Err(domain(format!("pseudo-label {bad} is outside [0, {k})")));
    }
    let mut present = vec![false; k];
    for &l in pseudo_labels {
        present[l] = true;
    }
    let missing: Vec<usize> = (0..k).filter(|&c| !present[c]).collect();
    if !missing.is_empty() {
        log::warn!("pseudo-labels never use classes {missing:?}; training on the present classes only");
    }

    let dim = subspaces.dim();
    let mut r = match config.init {
        RotationInit::Identity => Matrix::identity(dim, dim),
        RotationInit::Random => random_orthonormal(dim, dim, &mut RngState::new(config.seed))?,
        RotationInit::Aligned => aligned_rotation(h, pseudo_labels, subspaces),
    };

    // Match classes to blocks on the initial soft confusion.
    let y0 = softmin_assign(&projection_distances(&(&r * h), subspaces)?).y;
    let mut confusion = Matrix::zeros(k, k);
    for (i, &l) in pseudo_labels.iter().enumerate() {
        for j in 0..k {
            confusion[(l, j)] += y0[(i, j)];
        }
    }
    let top = confusion.max();
    let class_to_block: Vec<usize> = hungarian(&confusion.map(|v| top - v))
        .into_iter()
        .enumerate()
        .map(|(c, b)| b.unwrap_or(c))
        .collect();
    let targets: Vec<usize> = pseudo_labels.iter().map(|&l| class_to_block[l]).collect();

    let mut opt = CayleyAdam::new(config.optimizer.clone());
    let (initial_loss, mut grad) = cross_entropy_and_gradient(&r, h, &targets, subspaces)?;
    let mut best_loss = initial_loss;
    let mut best = r.clone();
    let mut trace = vec![initial_loss];
    for _ in 0..config.iters {
        opt.step(&mut r, &grad)?;
        let (loss, g) = cross_entropy_and_gradient(&r, h, &targets, subspaces)?;
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = r.clone();
        }
        grad = g;
    }
    let predicted = nearest_blocks(&projection_distances(&(&best * h), subspaces)?);
    let hits = predicted.iter().zip(&targets).filter(|(a, b)| a == b).count();
    Ok(RotationFit {
        rotation: best,
        subspaces: *subspaces,
        class_to_block,
        best_loss,
        initial_loss,
        trace,
        train_accuracy: hits as f64 / targets.len().max(1) as f64,
    })
}

fn aligned_rotation(h: &Matrix, labels: &[usize], subspaces: &AxisAlignedSubspaces) -> Matrix {
    let dim = subspaces.dim();
    let q = subspaces.q;
    let mut bases = Matrix::zeros(dim, dim);
    for c in 0..subspaces.k {
        let cols: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if cols.is_empty() {
            continue;
        }
        let u = h.select_columns(cols.iter()).svd(true, false).u.expect("u requested");
        let take = q.min(u.ncols());
        bases.view_mut((0, c * q), (dim, take)).copy_from(&u.columns(0, take));
    }
    // argmin over orthogonal R of ‖R·bases − I‖ is V Uᵀ for bases = U S Vᵀ.
    let svd = bases.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    v_t.transpose() * u.transpose()
}

/// Hard labels (nearest block) and softmin memberships for embeddings `H`.
pub fn classify_embeddings(
    h: &Matrix,
    rotation: &Matrix,
    subspaces: &AxisAlignedSubspaces,
) -> Result<ClusterAssignment> {
    if rotation.ncols() != h.nrows() {
        return Err(domain(format!(
            "rotation expects {}-dimensional embeddings, got {}",
            rotation.ncols(),
            h.nrows()
        )));
    }
    let d = projection_distances(&(rotation * h), subspaces)?;
    let labels = nearest_blocks(&d);
    let soft = softmin_assign(&d);
    Ok(ClusterAssignment::new(labels, subspaces.k)?.with_soft(soft))
}

/// Anything that maps points (columns) to embeddings `H`.
pub trait Embedder {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed(&self, x: &Matrix) -> Result<Matrix>;
}

/// A trained embedding model plus its rotation, ready for new points.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a, E: Embedder> {
    pub model: &'a E,
    pub rotation: &'a Matrix,
    pub subspaces: AxisAlignedSubspaces,
}

impl<'a, E: Embedder> Classifier<'a, E> {
    pub fn new(model: &'a E, rotation: &'a Matrix, subspaces: AxisAlignedSubspaces) -> Result<Self> {
        if model.embed_dim() != subspaces.dim() || rotation.shape() != (subspaces.dim(), subspaces.dim()) {
            return Err(domain(format!(
                "embedding dimension {} and rotation {}×{} do not match k·q = {}",
                model.embed_dim(),
                rotation.nrows(),
                rotation.ncols(),
                subspaces.dim()
            )));
        }
        Ok(Self {
            model,
            rotation,
            subspaces,
        })
    }

    /// Labels every column of `x` at once.
    pub fn classify(&self, x: &Matrix) -> Result<ClusterAssignment> {
        classify_embeddings(&self.model.embed(x)?, self.rotation, &self.subspaces)
    }

    /// Labels `x` in chunks of `batch` columns; working memory is
    /// `O(batch · (d_X + d_H))` on top of the `N × K` memberships.
    pub fn classify_streaming(&self, x: &Matrix, batch: usize) -> Result<ClusterAssignment> {
        if batch == 0 {
            return Err(domain("streaming batch size must be positive"));
        }
        let n = x.ncols();
        let k = self.subspaces.k;
        let mut labels = Vec::with_capacity(n);
        let mut y = Matrix::zeros(n, k);
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let h = self.model.embed(&x.columns(start, len).into_owned())?;
            let d = projection_distances(&(self.rotation * h), &self.subspaces)?;
            labels.extend(nearest_blocks(&d));
            y.rows_mut(start, len).copy_from(&softmin_assign(&d).y);
            start += len;
        }
        Ok(ClusterAssignment::new(labels, k)?.with_soft(SoftAssignment { y }))
    }
}
