//! Single-linear-layer siamese self-expression.
//!
//! With `h(X) = WX` and `Q = HᵀH = XᵀWᵀWX`, the objective
//! `½‖Q‖_F² + (λ/2)‖X − XQ‖_F²` depends on `W` only through `M = WᵀW`, and in
//! terms of the Gram matrix `G = XXᵀ` it reads
//!
//! ```text
//! ½ tr(MGMG) + (λ/2) [tr G − 2 tr(GMG) + tr(MG²MG)]
//! ```
//!
//! so it can be evaluated and differentiated in `d_X × d_X` space without ever
//! forming an `N × N` matrix. The global optimum is known in closed form:
//! `W* = R diag(√(λ/(1+λσᵢ²))) U_rᵀ` with `X = U_r Σ_r V_rᵀ` and any `R` with
//! orthonormal columns, giving `Q* = V_r diag(λσ²/(1+λσ²)) V_rᵀ`, which is the
//! dense closed-form solution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{data_fingerprint, read_tensors, write_tensors, DataMatrix, TensorFile};
use crate::edsc::{CoefficientMatrix, CoefficientSource, DEFAULT_DENSE_BUDGET};
use crate::error::{domain, Error, Result};
use crate::numerics::{random_orthonormal, reduced_svd, sym_eig, Matrix, RngState, DEFAULT_RANK_TOL};

/// `h(x) = W x` without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEmbeddingModel {
    pub w: Matrix,
    pub lambda: f64,
}

/// How to fill the free orthonormal factor of the analytic optimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationChoice {
    /// First `r` columns of the identity.
    IdentityPadded,
    /// First `r` columns of a random `d_H × d_H` orthogonal matrix.
    Random { seed: u64 },
}

impl LinearEmbeddingModel {
    pub fn new(w: Matrix, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(domain(format!("lambda must be positive, got {lambda}")));
        }
        crate::numerics::ensure_finite(&w, "embedding weights")?;
        Ok(Self { w, lambda })
    }

    pub fn embed_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Trainable parameter count, `d_H · d_X`; independent of the number of points.
    pub fn parameter_count(&self) -> usize {
        self.w.len()
    }

    /// `H = W X`.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.input_dim() {
            return Err(domain(format!(
                "model expects {}-dimensional points, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(&self.w * x)
    }

    /// Full coefficient matrix `Q = HᵀH` for a (small) data set.
    pub fn coefficient_matrix(&self, x: &DataMatrix, source: CoefficientSource) -> Result<CoefficientMatrix> {
        let h = self.embed(x.x())?;
        CoefficientMatrix::new(h.transpose() * &h, self.lambda, source)
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut f = TensorFile::default();
        f.push("w", self.w.clone());
        f.push("lambda", Matrix::from_element(1, 1, self.lambda));
        f.metadata = metadata;
        write_tensors(path, &f)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let f = read_tensors(path)?;
        let w = f.require("w")?.clone();
        let lambda = f.require("lambda")?[(0, 0)];
        Ok((Self::new(w, lambda)?, f.metadata))
    }
}

/// Metadata stored next to a saved linear model.
pub fn model_metadata(x: &DataMatrix, seed: u64, config: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "kind": "siamese_linear",
        "seed": seed,
        "config": serde_json::to_value(config)?,
        "data_fingerprint": data_fingerprint(x.x()),
    }))
}

impl crate::stiefel::Embedder for LinearEmbeddingModel {
    fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    fn embed_dim(&self) -> usize {
        self.w.nrows()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        LinearEmbeddingModel::embed(self, x)
    }
}

/// Analytic global optimum of the siamese objective.
pub fn analytic_optimum(
    x: &DataMatrix,
    lambda: f64,
    embed_dim: usize,
    rotation: RotationChoice,
) -> Result<LinearEmbeddingModel> {
    if !(lambda > 0.0) {
        return Err(domain(format!("lambda must be positive, got {lambda}")));
    }
    let svd = reduced_svd(x.x(), DEFAULT_RANK_TOL)?;
    let r = svd.rank();
    if embed_dim < r {
        return Err(domain(format!(
            "embedding dimension d_H = {embed_dim} is below the data rank r = {r}; \
             the analytic optimum requires d_H >= r"
        )));
    }
    let frame = match rotation {
        RotationChoice::IdentityPadded => Matrix::identity(embed_dim, r),
        RotationChoice::Random { seed } => {
            let full = random_orthonormal(embed_dim, embed_dim, &mut RngState::new(seed))?;
            full.columns(0, r).into_owned()
        }
    };
    // λ(1 − λ(σ⁻² + λ)⁻¹) = λ / (1 + λσ²) ≥ 0.
    let mut scaled_ut = svd.u.transpose();
    for (i, s) in svd.sigma.iter().enumerate() {
        let inner = lambda / (1.0 + lambda * s * s);
        scaled_ut.row_mut(i).scale_mut(inner.sqrt());
    }
    LinearEmbeddingModel::new(frame * scaled_ut, lambda)
}

/// Siamese objective; uses the Gram form when `N` exceeds the dense budget.
pub fn siamese_objective(x: &DataMatrix, model: &LinearEmbeddingModel) -> Result<f64> {
    if x.len() > DEFAULT_DENSE_BUDGET || x.len() > x.dim() * 4 {
        let gram = x.x() * x.x().transpose();
        gram_objective(&gram, &(model.w.transpose() * &model.w), model.lambda)
    } else {
        dense_objective(x, model)
    }
}

/// Direct evaluation through `Q = HᵀH` (allocates `N × N`).
pub fn dense_objective(x: &DataMatrix, model: &LinearEmbeddingModel) -> Result<f64> {
    let h = model.embed(x.x())?;
    let q = h.transpose() * &h;
    let residual = x.x() - x.x() * &q;
    Ok(0.5 * q.norm_squared() + 0.5 * model.lambda * residual.norm_squared())
}

/// Objective from the Gram matrix `G = XXᵀ` and `M = WᵀW`.
pub fn gram_objective(gram: &Matrix, m: &Matrix, lambda: f64) -> Result<f64> {
    if gram.shape() != m.shape() {
        return Err(domain("Gram and metric shapes differ"));
    }
    let gm = gram * m;
    let gmg = &gm * gram;
    let quad = gm.component_mul(&gm.transpose()).sum(); // tr(GMGM)
    let trace_g = gram.trace();
    let trace_gmg = gmg.trace();
    // tr(MG²MG) = tr((GM)ᵀ GMG) = ⟨GM, GMG⟩
    let quart = gm.component_mul(&gmg).sum();
    Ok(0.5 * quad + 0.5 * lambda * (trace_g - 2.0 * trace_gmg + quart))
}

/// `∂L/∂W = 2 W S` with `S = ½(GMB + BMG) + (λ/2)(G²MB + BMG² − GB − BG)`,
/// where `B` is the Gram matrix of the columns whose loss terms are included
/// (`B = G` for the full objective).
fn gram_gradient(w: &Matrix, gram: &Matrix, batch_gram: &Matrix, lambda: f64) -> Matrix {
    let m = w.transpose() * w;
    let gm = gram * &m;
    let gmb = &gm * batch_gram;
    let g2mb = gram * &gmb;
    let gb = gram * batch_gram;
    let mut s = &gmb + gmb.transpose();
    s *= 0.5;
    s += (&g2mb + g2mb.transpose() - &gb - gb.transpose()) * (0.5 * lambda);
    w * s * 2.0
}

/// Gradient of the full siamese objective with respect to `W`.
pub fn siamese_gradient(x: &DataMatrix, model: &LinearEmbeddingModel) -> Matrix {
    let gram = x.x() * x.x().transpose();
    gram_gradient(&model.w, &gram, &gram, model.lambda)
}

/// `(W x_a)ᵀ (W x_b)`: the coefficient block between two point sets.
pub fn coefficients(model: &LinearEmbeddingModel, x_a: &Matrix, x_b: &Matrix) -> Result<Matrix> {
    let ha = model.embed(x_a)?;
    let hb = model.embed(x_b)?;
    Ok(ha.transpose() * hb)
}

/// Gradient-descent settings for [`train_linear`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearTrainConfig {
    pub max_iters: usize,
    /// Fixed step; `None` derives one from the largest singular value of `X`.
    pub step: Option<f64>,
    /// Heavy-ball momentum in `[0, 1)`.
    pub momentum: f64,
    /// Stop once `‖∇W‖ ≤ tol · 2‖W‖ · λ‖G‖₂²`.
    pub tol: f64,
    /// Columns per stochastic step; `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            step: None,
            momentum: 0.0,
            tol: 1e-9,
            batch_size: None,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

/// Result of [`train_linear`]: the model and the objective after every step.
#[derive(Clone, Debug)]
pub struct LinearTrainOutput {
    pub model: LinearEmbeddingModel,
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Gradient training of `W` from a random start.
///
/// Full-batch mode is plain gradient descent (optionally with momentum). In
/// mini-batch mode the dictionary Gram `G = XXᵀ` is accumulated once and each
/// step samples a batch of columns whose loss terms form the stochastic
/// gradient; every per-column gradient vanishes at the optimum, so a fixed
/// step still converges to it.
pub fn train_linear(
    x: &DataMatrix,
    embed_dim: usize,
    lambda: f64,
    config: &LinearTrainConfig,
) -> Result<LinearTrainOutput> {
    if !(lambda > 0.0) {
        return Err(domain(format!("lambda must be positive, got {lambda}")));
    }
    if embed_dim == 0 {
        return Err(domain("embedding dimension must be positive"));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(domain("momentum must lie in [0, 1)"));
    }
    let d = x.dim();
    let n = x.len();
    let gram = x.x() * x.x().transpose();
    let (eigs, _) = sym_eig(&gram)?;
    let sigma2_max = eigs.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    // Curvature along the i-th singular direction at the optimum is 4λσᵢ⁴.
    let step = config
        .step
        .unwrap_or(0.25 / (4.0 * (1.0 + lambda) * sigma2_max * sigma2_max));
    let grad_scale = 2.0 * lambda * sigma2_max * sigma2_max;

    let mut rng = RngState::new(config.seed);
    let init = config.init_scale / (sigma2_max.sqrt() * (d as f64).sqrt());
    let mut w = rng.gaussian_matrix(embed_dim, d) * init;
    let mut velocity = Matrix::zeros(embed_dim, d);
    let mut sampler = match config.batch_size {
        Some(b) if b < n => Some(crate::dataio::BatchSampler::new(b, n, rng.split(1))?),
        _ => None,
    };

    let mut trace = Vec::new();
    let initial = gram_objective(&gram, &(w.transpose() * &w), lambda)?;
    trace.push(initial);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        iterations = it + 1;
        let grad = match sampler.as_mut() {
            Some(s) => {
                let idx = s.sample_batch();
                let xb = x.x().select_columns(idx.iter());
                let batch_gram = &xb * xb.transpose() * (n as f64 / idx.len() as f64);
                gram_gradient(&w, &gram, &batch_gram, lambda)
            }
            None => gram_gradient(&w, &gram, &gram, lambda),
        };
        velocity = &velocity * config.momentum - &grad * step;
        w += &velocity;
        let m = w.transpose() * &w;
        let loss = gram_objective(&gram, &m, lambda)?;
        if !loss.is_finite() || loss > 1e3 * initial.max(1e-300) {
            return Err(Error::Diverged {
                step: it,
                loss,
                limit: 1e3 * initial,
                trace,
            });
        }
        trace.push(loss);
        let full_grad = if sampler.is_some() {
            gram_gradient(&w, &gram, &gram, lambda)
        } else {
            grad
        };
        let w_norm = w.norm().max(f64::MIN_POSITIVE);
        if full_grad.norm() <= config.tol * w_norm * grad_scale {
            converged = true;
            break;
        }
    }
    if !converged {
        let last = *trace.last().unwrap_or(&f64::NAN);
        return Err(Error::NotConverged {
            iterations,
            last,
            trace,
        });
    }
    Ok(LinearTrainOutput {
        model: LinearEmbeddingModel::new(w, lambda)?,
        trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edsc::{edsc_objective, solve_edsc_closed_form};
    use crate::numerics::{relative_frobenius, sym_eig};

    fn random_data(d: usize, n: usize, seed: u64) -> DataMatrix {
        let x = RngState::new(seed).gaussian_matrix(d, n) / (d as f64).sqrt();
        DataMatrix::unlabeled(x).unwrap()
    }

    #[test]
    fn orthonormal_square_data_gives_half_spectrum() {
        let q = random_orthonormal(5, 5, &mut RngState::new(1)).unwrap();
        let x = DataMatrix::unlabeled(q).unwrap();
        let model = analytic_optimum(&x, 1.0, 5, RotationChoice::IdentityPadded).unwrap();
        let (eigs, _) = sym_eig(&(model.w.transpose() * &model.w)).unwrap();
        for e in eigs {
            assert!((e - 0.5).abs() < 1e-12, "{e}");
        }
    }

    #[test]
    fn analytic_coefficients_match_closed_form() {
        let x = random_data(8, 30, 2);
        for lambda in [1.0, 10.0, 100.0] {
            let model = analytic_optimum(&x, lambda, 10, RotationChoice::Random { seed: 3 }).unwrap();
            let q = model.coefficient_matrix(&x, CoefficientSource::SiameseAnalytic).unwrap();
            let c = solve_edsc_closed_form(&x, lambda).unwrap();
            assert!(relative_frobenius(&q.c, &c.c) <= 1e-8);
            let obj = siamese_objective(&x, &model).unwrap();
            let reference = edsc_objective(&x, &c).unwrap();
            assert!((obj - reference).abs() <= 1e-8 * reference.max(1.0));
        }
    }

    #[test]
    fn rotation_does_not_change_coefficients() {
        let x = random_data(6, 20, 4);
        let a = analytic_optimum(&x, 10.0, 9, RotationChoice::Random { seed: 1 }).unwrap();
        let b = analytic_optimum(&x, 10.0, 9, RotationChoice::Random { seed: 2 }).unwrap();
        let qa = coefficients(&a, x.x(), x.x()).unwrap();
        let qb = coefficients(&b, x.x(), x.x()).unwrap();
        assert!((qa - qb).amax() <= 1e-10);
    }

    #[test]
    fn too_small_embedding_is_rejected() {
        let x = random_data(6, 20, 5);
        let err = analytic_optimum(&x, 1.0, 5, RotationChoice::IdentityPadded).unwrap_err();
        assert!(err.to_string().contains("d_H >= r"), "{err}");
    }

    #[test]
    fn zero_weights_cost_half_lambda_data_norm() {
        let x = random_data(4, 10, 6);
        let model = LinearEmbeddingModel::new(Matrix::zeros(3, 4), 7.0).unwrap();
        let obj = dense_objective(&x, &model).unwrap();
        assert!((obj - 3.5 * x.x().norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn gram_and_dense_objectives_agree() {
        let x = random_data(5, 40, 7);
        let mut rng = RngState::new(8);
        for _ in 0..5 {
            let model = LinearEmbeddingModel::new(rng.gaussian_matrix(6, 5) * 0.3, 3.0).unwrap();
            let dense = dense_objective(&x, &model).unwrap();
            let gram = x.x() * x.x().transpose();
            let g = gram_objective(&gram, &(model.w.transpose() * &model.w), 3.0).unwrap();
            assert!((dense - g).abs() <= 1e-10 * dense.max(1.0), "{dense} vs {g}");
        }
    }

    #[test]
    fn optimum_beats_random_weights() {
        let x = random_data(6, 25, 9);
        let best = analytic_optimum(&x, 10.0, 6, RotationChoice::IdentityPadded).unwrap();
        let best_obj = siamese_objective(&x, &best).unwrap();
        let mut rng = RngState::new(10);
        for _ in 0..100 {
            let scale = rng.uniform() * 2.0;
            let model = LinearEmbeddingModel::new(rng.gaussian_matrix(6, 6) * scale, 10.0).unwrap();
            assert!(siamese_objective(&x, &model).unwrap() >= best_obj - 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = random_data(4, 12, 11);
        let model = LinearEmbeddingModel::new(RngState::new(12).gaussian_matrix(5, 4) * 0.5, 10.0).unwrap();
        let grad = siamese_gradient(&x, &model);
        let h = 1e-5;
        for i in 0..5 {
            for j in 0..4 {
                let mut plus = model.clone();
                plus.w[(i, j)] += h;
                let mut minus = model.clone();
                minus.w[(i, j)] -= h;
                let fd = (dense_objective(&x, &plus).unwrap() - dense_objective(&x, &minus).unwrap()) / (2.0 * h);
                let rel = (fd - grad[(i, j)]).abs() / grad[(i, j)].abs().max(1e-8);
                assert!(rel <= 1e-6, "({i},{j}): fd {fd} analytic {}", grad[(i, j)]);
            }
        }
    }

    #[test]
    fn full_batch_training_reaches_analytic_loss() {
        let x = random_data(20, 100, 13);
        let out = train_linear(&x, 20, 10.0, &LinearTrainConfig::default()).unwrap();
        let trained = siamese_objective(&x, &out.model).unwrap();
        let best = siamese_objective(&x, &analytic_optimum(&x, 10.0, 20, RotationChoice::IdentityPadded).unwrap()).unwrap();
        assert!(trained <= 1.0001 * best, "{trained} vs {best}");
    }

    #[test]
    fn mini_batch_training_reaches_analytic_loss() {
        let x = random_data(20, 100, 14);
        let cfg = LinearTrainConfig {
            batch_size: Some(50),
            ..Default::default()
        };
        let out = train_linear(&x, 20, 10.0, &cfg).unwrap();
        let trained = siamese_objective(&x, &out.model).unwrap();
        let best = siamese_objective(&x, &analytic_optimum(&x, 10.0, 20, RotationChoice::IdentityPadded).unwrap()).unwrap();
        assert!(trained <= 1.01 * best, "{trained} vs {best}");
    }

    #[test]
    fn coefficient_blocks_examples() {
        let x = random_data(5, 8, 15);
        let model = LinearEmbeddingModel::new(RngState::new(16).gaussian_matrix(4, 5), 1.0).unwrap();
        let q = coefficients(&model, x.x(), x.x()).unwrap();
        assert!((&q - q.transpose()).amax() <= 1e-10);
        let p = x.x().columns(0, 1).into_owned();
        let s = coefficients(&model, &p, &p).unwrap();
        assert!(s[(0, 0)] >= 0.0);
        assert!((s[(0, 0)] - (&model.w * &p).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn parameter_count_ignores_n() {
        for n in [100, 1000] {
            let x = random_data(10, n, 17);
            let model = analytic_optimum(&x, 10.0, 12, RotationChoice::IdentityPadded).unwrap();
            assert_eq!(model.parameter_count(), 12 * 10);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let x = random_data(4, 10, 18);
        let model = analytic_optimum(&x, 5.0, 4, RotationChoice::IdentityPadded).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let meta = model_metadata(&x, 18, &LinearTrainConfig::default()).unwrap();
        model.save(&p, meta.clone()).unwrap();
        let (back, meta_back) = LinearEmbeddingModel::load(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta_back, meta);
    }
}
