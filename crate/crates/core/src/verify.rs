//! Self-check suite: the closed-form equivalence, subspace preservation,
//! gradient and manifold properties on randomized instances.

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_union_of_subspaces, DataMatrix, SubspaceSpec};
use crate::edsc::{check_subspace_preserving, solve_edsc_closed_form, CoefficientSource};
use crate::error::Result;
use crate::numerics::{orthonormality_error, random_orthonormal, relative_frobenius, Matrix, RngState};
use crate::siamese::{analytic_optimum, siamese_gradient, siamese_objective, LinearEmbeddingModel, RotationChoice};
use crate::sscn::{sscn_gradients, sscn_loss, Architecture, Lambdas, SscnModel, Stage};
use crate::stiefel::{cross_entropy_and_gradient, AxisAlignedSubspaces, CayleyAdam, CayleyAdamConfig, MANIFOLD_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances for the equivalence check.
    pub instances: usize,
    pub cayley_steps: usize,
    /// Perturb the analytic optimum so the equivalence checks must fail.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            cayley_steps: 1000,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest measured error.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub failed: Vec<String>,
    pub seconds: f64,
}

fn check(name: &str, value: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: value <= tolerance,
        value,
        tolerance,
        detail,
    }
}

fn optimum(x: &DataMatrix, lambda: f64, d_h: usize, seed: u64, fault: bool) -> Result<LinearEmbeddingModel> {
    let mut m = analytic_optimum(x, lambda, d_h, RotationChoice::Random { seed })?;
    if fault {
        m.w[(0, 0)] += 1e-3 * (1.0 + m.w[(0, 0)].abs());
    }
    Ok(m)
}

fn equivalence(cfg: &VerifyConfig, rng: &mut RngState) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..cfg.instances {
        let d = 2 + rng.below(49);
        let n = 2 + rng.below(199);
        let lambda = [1.0, 10.0, 100.0][i % 3];
        let x = DataMatrix::unlabeled(rng.gaussian_matrix(d, n))?;
        let c = solve_edsc_closed_form(&x, lambda)?;
        let m = optimum(&x, lambda, d.min(n), rng.next_seed(), cfg.inject_fault)?;
        let q = m.coefficient_matrix(&x, CoefficientSource::SiameseAnalytic)?;
        worst = worst.max(relative_frobenius(&q.c, &c.c));
    }
    Ok(check(
        "closed_form_equivalence",
        worst,
        1e-8,
        format!("{} instances, d_X ≤ 50, N ≤ 200, λ ∈ {{1, 10, 100}}", cfg.instances),
    ))
}

fn rotation_invariance(cfg: &VerifyConfig, rng: &mut RngState) -> Result<CheckResult> {
    let x = DataMatrix::unlabeled(rng.gaussian_matrix(8, 40))?;
    let reference = optimum(&x, 10.0, 12, 0, false)?.coefficient_matrix(&x, CoefficientSource::SiameseAnalytic)?;
    let mut worst: f64 = 0.0;
    for r in 1..=10 {
        let m = optimum(&x, 10.0, 12, r, cfg.inject_fault && r == 5)?;
        let q = m.coefficient_matrix(&x, CoefficientSource::SiameseAnalytic)?;
        worst = worst.max((&q.c - &reference.c).amax());
    }
    Ok(check("rotation_invariance", worst, 1e-10, "10 random rotations, max abs difference".into()))
}

fn subspace_preservation(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let spec = SubspaceSpec {
        ambient_dim: 10,
        cluster_dims: vec![2, 2, 2],
        points_per_cluster: vec![50; 3],
        noise_sigma: 0.0,
        seed: cfg.seed,
    };
    let (x, _) = generate_union_of_subspaces(&spec)?;
    let labels = x.labels().unwrap_or_default().to_vec();
    let c = solve_edsc_closed_form(&x, 100.0)?;
    let q = optimum(&x, 100.0, 6, cfg.seed, cfg.inject_fault)?.coefficient_matrix(&x, CoefficientSource::SiameseAnalytic)?;
    Ok(vec![
        check(
            "subspace_preservation_edsc",
            check_subspace_preserving(&c, &labels)?,
            1e-6,
            "off-block mass ratio, K = 3, dims 2, d_X = 10, N = 150, λ = 100".into(),
        ),
        check(
            "subspace_preservation_analytic",
            check_subspace_preserving(&q, &labels)?,
            1e-6,
            "same data, siamese optimum".into(),
        ),
    ])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn gradients(rng: &mut RngState) -> Result<Vec<CheckResult>> {
    let h = 1e-6;

    let x = DataMatrix::unlabeled(rng.gaussian_matrix(5, 12))?;
    let model = LinearEmbeddingModel::new(rng.gaussian_matrix(4, 5) * 0.3, 3.0)?;
    let g = siamese_gradient(&x, &model);
    let mut worst: f64 = 0.0;
    for i in 0..model.w.len() {
        let mut p = model.clone();
        p.w[i] += h;
        let mut m = model.clone();
        m.w[i] -= h;
        let fd = (siamese_objective(&x, &p)? - siamese_objective(&x, &m)?) / (2.0 * h);
        worst = worst.max(rel_err(g[i], fd));
    }
    let linear = check("gradient_siamese_linear", worst, 1e-5, "central differences, step 1e-6".into());

    let subspaces = AxisAlignedSubspaces::new(2, 2)?;
    let arch = Architecture {
        hidden: vec![5],
        latent_dim: 3,
        ..Default::default()
    };
    let mut net = SscnModel::new(4, &arch, subspaces, Lambdas { l1: 1.3, l2: 0.8, l3: 0.5 }, rng)?;
    net.rotation = random_orthonormal(4, 4, rng)?;
    let xb = rng.gaussian_matrix(4, 5);
    let targets = [0usize, 1, 1, 0, 1];
    let (_, grads) = sscn_gradients(&net, &xb, Stage::Joint, Some(&targets))?;
    let loss = |m: &SscnModel| sscn_loss(m, &xb, Some(&targets)).map(|t| t.total);
    let mut worst: f64 = 0.0;
    for p in 0..grads.params.len() {
        for i in 0..grads.params[p].len() {
            let mut a = net.clone();
            a.params_mut()[p][i] += h;
            let mut b = net.clone();
            b.params_mut()[p][i] -= h;
            worst = worst.max(rel_err(grads.params[p][i], (loss(&a)? - loss(&b)?) / (2.0 * h)));
        }
    }
    if let Some(gr) = &grads.rotation {
        for i in 0..net.rotation.len() {
            let mut a = net.clone();
            a.rotation[i] += h;
            let mut b = net.clone();
            b.rotation[i] -= h;
            worst = worst.max(rel_err(gr[i], (loss(&a)? - loss(&b)?) / (2.0 * h)));
        }
    }
    let full = check("gradient_full_loss", worst, 1e-5, "all network weights and R on a 5-point batch".into());

    let hm = rng.gaussian_matrix(4, 9);
    let t: Vec<usize> = (0..9).map(|i| i % 2).collect();
    let r = random_orthonormal(4, 4, rng)?;
    let (_, gr) = cross_entropy_and_gradient(&r, &hm, &t, &subspaces)?;
    let mut worst: f64 = 0.0;
    for i in 0..r.len() {
        let mut a = r.clone();
        a[i] += h;
        let mut b = r.clone();
        b[i] -= h;
        let fd = (cross_entropy_and_gradient(&a, &hm, &t, &subspaces)?.0
            - cross_entropy_and_gradient(&b, &hm, &t, &subspaces)?.0)
            / (2.0 * h);
        worst = worst.max(rel_err(gr[i], fd));
    }
    let ce = check("gradient_rotation_cross_entropy", worst, 1e-5, "softmin cross-entropy w.r.t. R".into());
    Ok(vec![linear, full, ce])
}

fn stiefel(cfg: &VerifyConfig, rng: &mut RngState) -> Result<Vec<CheckResult>> {
    let mut x = random_orthonormal(8, 8, rng)?;
    let mut opt = CayleyAdam::new(CayleyAdamConfig {
        lr: 0.1,
        ..Default::default()
    });
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.cayley_steps {
        let g = rng.gaussian_matrix(8, 8);
        opt.step(&mut x, &g)?;
        worst = worst.max(orthonormality_error(&x));
    }
    let start = random_orthonormal(6, 6, rng)?;
    let mut y = start.clone();
    let mut opt = CayleyAdam::new(CayleyAdamConfig::default());
    for _ in 0..10 {
        opt.step(&mut y, &Matrix::zeros(6, 6))?;
    }
    let moved = (&y - &start).amax();
    Ok(vec![
        check(
            "stiefel_constraint",
            worst,
            MANIFOLD_TOL,
            format!("max ‖RᵀR − I‖ over {} Cayley-Adam steps with random gradients", cfg.cayley_steps),
        ),
        check("stiefel_fixed_point", moved, 0.0, "zero gradient leaves R unchanged".into()),
    ])
}

/// Runs every check. Errors inside a check become failed entries.
pub fn run_verify(cfg: &VerifyConfig) -> VerifyReport {
    let start = std::time::Instant::now();
    let rng = RngState::new(cfg.seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckResult>>| match r {
        Ok(v) => checks.extend(v),
        Err(e) => checks.push(CheckResult {
            name: name.to_string(),
            passed: false,
            value: f64::MAX,
            tolerance: 0.0,
            detail: e.to_string(),
        }),
    };
    push("closed_form_equivalence", equivalence(cfg, &mut rng.split(1)).map(|c| vec![c]));
    push("rotation_invariance", rotation_invariance(cfg, &mut rng.split(2)).map(|c| vec![c]));
    push("subspace_preservation", subspace_preservation(cfg));
    push("gradients", gradients(&mut rng.split(3)));
    push("stiefel", stiefel(cfg, &mut rng.split(4)));
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    VerifyReport {
        passed: failed.is_empty(),
        checks,
        failed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: bool) -> VerifyReport {
        run_verify(&VerifyConfig {
            instances: 6,
            cayley_steps: 50,
            inject_fault: fault,
            ..Default::default()
        })
    }

    #[test]
    fn clean_run_passes() {
        let r = quick(false);
        assert!(r.passed, "{:?}", r.failed);
        let eq = r.checks.iter().find(|c| c.name == "closed_form_equivalence").unwrap();
        assert!(eq.value <= 1e-8);
    }

    #[test]
    fn injected_fault_is_detected() {
        let r = quick(true);
        assert!(!r.passed);
        assert!(r.failed.contains(&"closed_form_equivalence".to_string()));
        assert!(r.failed.contains(&"rotation_invariance".to_string()));
        let json = serde_json::to_string(&r).unwrap();
        let back: VerifyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.failed, r.failed);
    }
}
