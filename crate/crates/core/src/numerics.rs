//! Dense linear algebra and seeded randomness shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major.
//! Data points are always columns, so a data matrix is `d × N`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Singular values at or below `DEFAULT_RANK_TOL * sigma_max` are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Condition estimates above this make `solve_spd` refuse to answer.
pub const MAX_CONDITION: f64 = 1e12;

/// Seeded, platform-stable random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the same `(seed, stream)` pair always yields the same child.
    pub fn split(&self, stream: u64) -> RngState {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        RngState {
            seed: self.seed,
            inner,
        }
    }

    /// Draws a seed for a derived generator.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        // Fill column by column so the stream order matches the storage order.
        let data: Vec<f64> = (0..rows * cols).map(|_| self.gaussian()).collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection keeps this exactly uniform.
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Thin SVD with the numerically-zero tail removed.
#[derive(Clone, Debug)]
pub struct ReducedSvd {
    /// `n × r`, orthonormal columns.
    pub u: Matrix,
    /// `r` strictly positive values, non-increasing.
    pub sigma: Vec<f64>,
    /// `m × r`, orthonormal columns.
    pub v: Matrix,
}

impl ReducedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("{what} contains non-finite entries")))
    }
}

fn ensure_nonempty(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        Err(domain(format!("{what} is empty ({}×{})", a.nrows(), a.ncols())))
    } else {
        Ok(())
    }
}

fn ensure_symmetric(a: &Matrix, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(domain(format!(
            "{what} must be square, got {}×{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(domain(format!(
                    "{what} is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {:.3e}",
                    (a[(i, j)] - a[(j, i)]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Thin SVD of `a`, dropping singular values `<= rank_tol * sigma_max`.
pub fn reduced_svd(a: &Matrix, rank_tol: f64) -> Result<ReducedSvd> {
    ensure_nonempty(a, "matrix")?;
    ensure_finite(a, "matrix")?;
    if !(rank_tol > 0.0) {
        return Err(domain("rank tolerance must be positive"));
    }
    let svd = a.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(Error::Numerical {
                message: "SVD did not return singular vectors".into(),
                condition: None,
            })
        }
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma_max = order
        .first()
        .map(|&i| svd.singular_values[i])
        .unwrap_or(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| sigma_max > 0.0 && svd.singular_values[i] > rank_tol * sigma_max)
        .collect();
    let r = keep.len();
    let mut u_r = Matrix::zeros(a.nrows(), r);
    let mut v_r = Matrix::zeros(a.ncols(), r);
    let mut sigma = Vec::with_capacity(r);
    for (dst, &src) in keep.iter().enumerate() {
        u_r.set_column(dst, &u.column(src));
        v_r.set_column(dst, &v_t.row(src).transpose());
        sigma.push(svd.singular_values[src]);
    }
    Ok(ReducedSvd {
        u: u_r,
        sigma,
        v: v_r,
    })
}

/// Numerical rank of `a` at the default tolerance.
pub fn numerical_rank(a: &Matrix) -> Result<usize> {
    Ok(reduced_svd(a, DEFAULT_RANK_TOL)?.rank())
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky with one refinement step.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_nonempty(a, "system matrix")?;
    ensure_finite(a, "system matrix")?;
    ensure_finite(b, "right-hand side")?;
    ensure_symmetric(a, "system matrix")?;
    if b.nrows() != a.nrows() {
        return Err(domain(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    let chol = Cholesky::new(a.clone()).ok_or_else(|| Error::Numerical {
        message: "matrix is not positive definite (Cholesky failed)".into(),
        condition: None,
    })?;
    let cond = spd_condition_estimate(a, &chol);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numerical {
            message: format!("system is ill-conditioned (condition estimate {cond:.3e})"),
            condition: Some(cond),
        });
    }
    let mut x = chol.solve(b);
    let residual = b - a * &x;
    x += chol.solve(&residual);
    Ok(x)
}

/// Power iteration on `a` and on `a⁻¹` (through the factorization); a lower bound on κ₂.
fn spd_condition_estimate(a: &Matrix, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let n = a.nrows();
    let start = Vector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    let power = |apply: &dyn Fn(&Vector) -> Vector| -> f64 {
        let mut v = start.normalize();
        let mut est = 0.0;
        for _ in 0..30 {
            let w = apply(&v);
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            est = norm;
            v = w / norm;
        }
        est
    };
    let lambda_max = power(&|v| a * v);
    let inv_max = power(&|v| chol.solve(v));
    if inv_max == 0.0 {
        return f64::INFINITY;
    }
    lambda_max * inv_max
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure_nonempty(a, "matrix")?;
    ensure_finite(a, "matrix")?;
    ensure_symmetric(a, "matrix")?;
    // Symmetrize exactly so the solver never sees rounding asymmetry.
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(a.nrows(), a.nrows());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Draws an `n × p` matrix with orthonormal columns, uniformly (Haar) distributed.
pub fn random_orthonormal(n: usize, p: usize, rng: &mut RngState) -> Result<Matrix> {
    if n < p {
        return Err(domain(format!(
            "Stiefel sample needs n >= p, got n = {n}, p = {p}"
        )));
    }
    if p == 0 {
        return Err(domain("Stiefel sample needs p >= 1"));
    }
    let g = rng.gaussian_matrix(n, p);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `‖aᵀa − I‖_F`, the distance of `a` from the Stiefel manifold.
pub fn orthonormality_error(a: &Matrix) -> f64 {
    let gram = a.transpose() * a;
    (gram - Matrix::identity(a.ncols(), a.ncols())).norm()
}

pub fn relative_frobenius(a: &Matrix, reference: &Matrix) -> f64 {
    let denom = reference.norm();
    let diff = (a - reference).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_of_identity() {
        let svd = reduced_svd(&Matrix::identity(3, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0, 1.0]);
        assert!(relative_frobenius(&svd.reconstruct(), &Matrix::identity(3, 3)) < 1e-14);
        assert!(orthonormality_error(&svd.u) < 1e-12);
    }

    #[test]
    fn svd_of_rank_one_outer_product() {
        let a = Vector::from_vec(vec![2.0, 0.0, 0.0, 0.0]);
        let b = Vector::from_vec(vec![0.0, 3.0 / 5.0_f64.sqrt(), 6.0 / 5.0_f64.sqrt()]);
        assert!((b.norm() - 3.0).abs() < 1e-14);
        let m = &a * b.transpose();
        let svd = reduced_svd(&m, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(svd.rank(), 1);
        assert!((svd.sigma[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn svd_rejects_bad_input() {
        let mut a = Matrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(reduced_svd(&a, 1e-10), Err(Error::Domain(_))));
        assert!(matches!(
            reduced_svd(&Matrix::zeros(0, 3), 1e-10),
            Err(Error::Domain(_))
        ));
        assert!(reduced_svd(&Matrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn svd_of_zero_matrix_has_rank_zero() {
        let svd = reduced_svd(&Matrix::zeros(3, 4), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(svd.rank(), 0);
    }

    #[test]
    fn spd_identity_and_scalar() {
        let mut rng = RngState::new(1);
        let b = rng.gaussian_matrix(4, 3);
        let x = solve_spd(&Matrix::identity(4, 4), &b).unwrap();
        assert_eq!(x, b);
        let x = solve_spd(&(Matrix::identity(4, 4) * 2.0), &Matrix::identity(4, 4)).unwrap();
        assert!((x - Matrix::identity(4, 4) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn spd_rejects_indefinite_and_ill_conditioned() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            solve_spd(&a, &Matrix::identity(2, 2)),
            Err(Error::Numerical { .. })
        ));
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1e-14]));
        match solve_spd(&a, &Matrix::identity(2, 2)) {
            Err(Error::Numerical { condition, .. }) => assert!(condition.unwrap() > 1e12),
            other => panic!("expected ill-conditioning error, got {other:?}"),
        }
        let mut asym = Matrix::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(matches!(
            solve_spd(&asym, &Matrix::identity(2, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sym_eig_textbook_cases() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 2.0]));
        let (vals, _) = sym_eig(&d).unwrap();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
        let swap = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (vals, vecs) = sym_eig(&swap).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert!(orthonormality_error(&vecs) < 1e-12);
        assert!(sym_eig(&Matrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])).is_err());
    }

    #[test]
    fn random_orthonormal_contract() {
        let mut rng = RngState::new(7);
        let q = random_orthonormal(1, 1, &mut rng).unwrap();
        assert_eq!(q[(0, 0)].abs(), 1.0);
        let q = random_orthonormal(5, 3, &mut rng).unwrap();
        assert!(orthonormality_error(&q) <= 1e-10);
        assert!(random_orthonormal(2, 3, &mut rng).is_err());
        let a = random_orthonormal(6, 4, &mut RngState::new(42)).unwrap();
        let b = random_orthonormal(6, 4, &mut RngState::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_streams_are_reproducible_and_distinct() {
        let base = RngState::new(3);
        let mut a = base.split(0);
        let mut b = base.split(0);
        let mut c = base.split(1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = RngState::new(11);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[rng.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }
}
