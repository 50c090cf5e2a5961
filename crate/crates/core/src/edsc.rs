//! Closed-form dense self-expression.
//!
//! Minimizes `½‖C‖_F² + (λ/2)‖X − XC‖_F²` over all `N × N` matrices `C`. The
//! unique minimizer solves `(I + λXᵀX) C = λXᵀX`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{DataMatrix, TensorFile};
use crate::error::{domain, Error, Result};
use crate::numerics::{reduced_svd, solve_spd, Matrix, DEFAULT_RANK_TOL};

/// Largest `N` the dense `N × N` path accepts by default.
pub const DEFAULT_DENSE_BUDGET: usize = 5000;

/// Where a coefficient matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSource {
    ClosedForm,
    SiameseAnalytic,
    SiameseTrained,
    Sscn,
}

/// `N × N` self-expression coefficients; column `i` expresses point `i`.
#[derive(Clone, Debug)]
pub struct CoefficientMatrix {
    pub c: Matrix,
    pub lambda: f64,
    pub source: CoefficientSource,
}

impl CoefficientMatrix {
    pub fn new(c: Matrix, lambda: f64, source: CoefficientSource) -> Result<Self> {
        if !c.is_square() {
            return Err(domain(format!(
                "coefficient matrix must be square, got {}×{}",
                c.nrows(),
                c.ncols()
            )));
        }
        crate::numerics::ensure_finite(&c, "coefficient matrix")?;
        Ok(Self { c, lambda, source })
    }

    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::default();
        f.push("c", self.c.clone());
        f.metadata = serde_json::json!({ "lambda": self.lambda, "source": self.source });
        f
    }
}

/// Symmetric non-negative affinity `|C| + |C|ᵀ`.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    a: Matrix,
}

impl AffinityMatrix {
    /// Wraps an existing matrix, checking symmetry and sign.
    pub fn from_matrix(a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(domain("affinity must be square"));
        }
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain("affinity entries must be finite and non-negative"));
        }
        if a != a.transpose() {
            return Err(domain("affinity must be exactly symmetric"));
        }
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    /// Applies the same permutation to rows and columns: entry `(i, j)` of the
    /// result is entry `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> AffinityMatrix {
        let n = self.a.nrows();
        AffinityMatrix {
            a: Matrix::from_fn(n, n, |i, j| self.a[(perm[i], perm[j])]),
        }
    }
}

/// `C* = (I + λXᵀX)⁻¹ λXᵀX`, refusing `N` above [`DEFAULT_DENSE_BUDGET`].
pub fn solve_edsc_closed_form(x: &DataMatrix, lambda: f64) -> Result<CoefficientMatrix> {
    solve_edsc_closed_form_with_budget(x, lambda, DEFAULT_DENSE_BUDGET)
}

pub fn solve_edsc_closed_form_with_budget(
    x: &DataMatrix,
    lambda: f64,
    budget: usize,
) -> Result<CoefficientMatrix> {
    let n = x.len();
    check_inputs(n, lambda)?;
    if n > budget {
        return Err(Error::Resource(format!(
            "dense self-expression needs an {n}×{n} matrix, above the budget of {budget} points; \
             use the siamese model, whose size does not grow with N"
        )));
    }
    let gram = x.x().transpose() * x.x() * lambda;
    let system = Matrix::identity(n, n) + &gram;
    let mut c = solve_spd(&system, &gram)?;
    // The exact solution is symmetric; remove rounding asymmetry.
    c = (&c + c.transpose()) * 0.5;
    CoefficientMatrix::new(c, lambda, CoefficientSource::ClosedForm)
}

/// Same minimizer through the SVD of `X`: `C* = V diag(λσ²/(1+λσ²)) Vᵀ`.
pub fn solve_edsc_spectral(x: &DataMatrix, lambda: f64) -> Result<CoefficientMatrix> {
    let n = x.len();
    check_inputs(n, lambda)?;
    let svd = reduced_svd(x.x(), DEFAULT_RANK_TOL)?;
    let mut scaled = svd.v.clone();
    for (j, s) in svd.sigma.iter().enumerate() {
        let s2 = s * s;
        scaled.column_mut(j).scale_mut(lambda * s2 / (1.0 + lambda * s2));
    }
    let c = scaled * svd.v.transpose();
    CoefficientMatrix::new(c, lambda, CoefficientSource::ClosedForm)
}

fn check_inputs(n: usize, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(domain(format!("lambda must be positive, got {lambda}")));
    }
    if n < 2 {
        return Err(domain(format!("self-expression needs at least 2 points, got {n}")));
    }
    Ok(())
}

/// `½‖C‖_F² + (λ/2)‖X − XC‖_F²` with `λ` taken from `c`.
pub fn edsc_objective(x: &DataMatrix, c: &CoefficientMatrix) -> Result<f64> {
    if c.len() != x.len() {
        return Err(domain(format!(
            "coefficient matrix is {}×{} but data has {} points",
            c.len(),
            c.len(),
            x.len()
        )));
    }
    let residual = x.x() - x.x() * &c.c;
    Ok(0.5 * c.c.norm_squared() + 0.5 * c.lambda * residual.norm_squared())
}

/// `a_ij = |c_ij| + |c_ji|`.
pub fn build_affinity(c: &CoefficientMatrix) -> AffinityMatrix {
    let abs = c.c.abs();
    AffinityMatrix {
        a: &abs + abs.transpose(),
    }
}

/// Fraction of absolute coefficient mass that links points with different labels.
pub fn check_subspace_preserving(c: &CoefficientMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != c.len() {
        return Err(domain(format!(
            "{} labels for {} points",
            labels.len(),
            c.len()
        )));
    }
    let mut off = 0.0;
    let mut total = 0.0;
    for (j, col) in c.c.column_iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            let a = v.abs();
            total += a;
            if labels[i] != labels[j] {
                off += a;
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { off / total })
}

/// Plain CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}
