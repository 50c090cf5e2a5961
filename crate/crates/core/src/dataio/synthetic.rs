use serde::{Deserialize, Serialize};

use super::DataMatrix;
use crate::error::{domain, Result};
use crate::numerics::{random_orthonormal, Matrix, RngState};

/// Recipe for a union of independent linear subspaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceSpec {
    pub ambient_dim: usize,
    pub cluster_dims: Vec<usize>,
    pub points_per_cluster: Vec<usize>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SubspaceSpec {
    fn default() -> Self {
        Self {
            ambient_dim: 10,
            cluster_dims: vec![2, 2, 2],
            points_per_cluster: vec![50, 50, 50],
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SubspaceSpec {
    pub fn num_clusters(&self) -> usize {
        self.cluster_dims.len()
    }

    pub fn total_points(&self) -> usize {
        self.points_per_cluster.iter().sum()
    }

    pub fn max_cluster_dim(&self) -> usize {
        self.cluster_dims.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_dims.is_empty() {
            return Err(domain("at least one cluster is required"));
        }
        if self.cluster_dims.len() != self.points_per_cluster.len() {
            return Err(domain(format!(
                "cluster_dims has {} entries but points_per_cluster has {}",
                self.cluster_dims.len(),
                self.points_per_cluster.len()
            )));
        }
        if self.cluster_dims.contains(&0) || self.ambient_dim == 0 {
            return Err(domain("all dimensions must be at least 1"));
        }
        let total: usize = self.cluster_dims.iter().sum();
        if total > self.ambient_dim {
            return Err(domain(format!(
                "sum of cluster_dims ({total}) exceeds ambient_dim ({}): independent subspaces are impossible",
                self.ambient_dim
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(domain("noise_sigma must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Samples points from `K` independent subspaces.
///
/// A single `d_X × Σ dims` orthonormal matrix is drawn and its columns are
/// partitioned into the per-cluster bases, which makes the subspaces
/// independent by construction. Points are `basis · g` with standard Gaussian
/// `g`, plus isotropic noise of scale `noise_sigma`. Returns the data and the
/// bases.
pub fn generate_union_of_subspaces(spec: &SubspaceSpec) -> Result<(DataMatrix, Vec<Matrix>)> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let total_dim: usize = spec.cluster_dims.iter().sum();
    let frame = random_orthonormal(spec.ambient_dim, total_dim, &mut rng)?;

    let mut bases = Vec::with_capacity(spec.num_clusters());
    let mut offset = 0;
    for &d in &spec.cluster_dims {
        bases.push(frame.columns(offset, d).into_owned());
        offset += d;
    }

    let n = spec.total_points();
    let mut x = Matrix::zeros(spec.ambient_dim, n);
    let mut labels = Vec::with_capacity(n);
    let mut col = 0;
    for (k, (basis, &count)) in bases.iter().zip(&spec.points_per_cluster).enumerate() {
        let coeffs = rng.gaussian_matrix(basis.ncols(), count);
        let points = basis * coeffs;
        x.columns_mut(col, count).copy_from(&points);
        labels.extend(std::iter::repeat_n(k, count));
        col += count;
    }
    if spec.noise_sigma > 0.0 {
        let noise = rng.gaussian_matrix(spec.ambient_dim, n);
        x += noise * spec.noise_sigma;
    }
    Ok((DataMatrix::new(x, Some(labels))?, bases))
}

/// Fresh points from the same subspaces (same bases), with a different seed for coefficients.
pub fn sample_from_bases(
    bases: &[Matrix],
    points_per_cluster: &[usize],
    noise_sigma: f64,
    rng: &mut RngState,
) -> Result<DataMatrix> {
    if bases.len() != points_per_cluster.len() || bases.is_empty() {
        return Err(domain("one point count per basis is required"));
    }
    let d = bases[0].nrows();
    let n: usize = points_per_cluster.iter().sum();
    let mut x = Matrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    let mut col = 0;
    for (k, (basis, &count)) in bases.iter().zip(points_per_cluster).enumerate() {
        let points = basis * rng.gaussian_matrix(basis.ncols(), count);
        x.columns_mut(col, count).copy_from(&points);
        labels.extend(std::iter::repeat_n(k, count));
        col += count;
    }
    if noise_sigma > 0.0 {
        x += rng.gaussian_matrix(d, n) * noise_sigma;
    }
    DataMatrix::new(x, Some(labels))
}

/// A fixed random map `x ↦ A₂ tanh(A₁x)` into `out_dim` dimensions.
///
/// `strength` scales `A₁`; small values keep the map close to linear. There
/// is no bias: a shared offset would turn every subspace into an affine one.
#[derive(Clone, Debug)]
pub struct NonlinearLift {
    pub a1: Matrix,
    pub a2: Matrix,
}

impl NonlinearLift {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, strength: f64, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        let a1 = rng.gaussian_matrix(hidden, in_dim) * (strength / (in_dim as f64).sqrt());
        let a2 = rng.gaussian_matrix(out_dim, hidden) * (1.0 / (strength * (hidden as f64).sqrt()));
        Self { a1, a2 }
    }

    pub fn apply(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let mut pre = &self.a1 * x.x();
        pre.apply(|v| *v = v.tanh());
        DataMatrix::new(&self.a2 * pre, x.labels().map(<[usize]>::to_vec))
    }
}
