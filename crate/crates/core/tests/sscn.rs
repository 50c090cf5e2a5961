use sscn::autodiff::{Activation, AdamConfig};
use sscn::dataio::{generate_union_of_subspaces, BatchSampler, DataMatrix, NonlinearLift, SubspaceSpec};
use sscn::edsc::{check_subspace_preserving, solve_edsc_closed_form};
use sscn::sscn::*;
use sscn::stiefel::AxisAlignedSubspaces;
use sscn::{Error, Matrix, RngState};

fn model(input: usize, hidden: usize, latent: usize, k: usize, q: usize, seed: u64) -> SscnModel {
    let arch = Architecture {
        hidden: vec![hidden],
        latent_dim: latent,
        activation: Activation::Tanh,
        output_activation: Activation::Identity,
        bias: true,
    };
    SscnModel::new(
        input,
        &arch,
        AxisAlignedSubspaces::new(k, q).unwrap(),
        Lambdas { l1: 1.3, l2: 0.8, l3: 0.5 },
        &mut RngState::new(seed),
    )
    .unwrap()
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut m = model(4, 5, 3, 2, 2, 1);
    // Move the rotation off the identity so its gradient is generic.
    m.rotation = sscn::numerics::random_orthonormal(4, 4, &mut RngState::new(9)).unwrap();
    let x = RngState::new(2).gaussian_matrix(4, 5);
    let targets = [0usize, 1, 1, 0, 1];
    let (_, grads) = sscn_gradients(&m, &x, Stage::Joint, Some(&targets)).unwrap();
    let rot_grad = grads.rotation.clone().unwrap();
    let loss = |m: &SscnModel| sscn_loss(m, &x, Some(&targets)).unwrap().total;
    let h = 1e-6;
    let check = |analytic: f64, numeric: f64, what: &str| {
        let scale = analytic.abs().max(numeric.abs()).max(1e-3);
        assert!((analytic - numeric).abs() / scale <= 1e-5, "{what}: {analytic} vs {numeric}");
    };
    let count = m.params_mut().len();
    for p in 0..count {
        let len = m.params_mut()[p].len();
        for i in 0..len {
            let mut plus = m.clone();
            plus.params_mut()[p][i] += h;
            let mut minus = m.clone();
            minus.params_mut()[p][i] -= h;
            check(grads.params[p][i], (loss(&plus) - loss(&minus)) / (2.0 * h), &format!("param {p}[{i}]"));
        }
    }
    for i in 0..m.rotation.len() {
        let mut plus = m.clone();
        plus.rotation[i] += h;
        let mut minus = m.clone();
        minus.rotation[i] -= h;
        check(rot_grad[i], (loss(&plus) - loss(&minus)) / (2.0 * h), &format!("rotation[{i}]"));
    }
}

#[test]
fn small_steps_decrease_the_loss() {
    let mut m = model(6, 8, 4, 2, 2, 3);
    m.lambdas.l3 = 0.0;
    let x = RngState::new(4).gaussian_matrix(6, 12);
    let mut prev = sscn_loss(&m, &x, None).unwrap().total;
    for step in 0..50 {
        let (_, g) = sscn_gradients(&m, &x, Stage::Joint, None).unwrap();
        for (p, gp) in m.params_mut().into_iter().zip(&g.params) {
            *p -= gp * 1e-4;
        }
        let cur = sscn_loss(&m, &x, None).unwrap().total;
        assert!(cur < prev, "step {step}: {cur} >= {prev}");
        prev = cur;
    }
}

fn lifted_data(seed: u64) -> DataMatrix {
    lifted(seed, 0.5)
}

fn lifted(seed: u64, strength: f64) -> DataMatrix {
    let spec = SubspaceSpec {
        ambient_dim: 8,
        cluster_dims: vec![2, 2, 2],
        points_per_cluster: vec![40; 3],
        noise_sigma: 0.0,
        seed,
    };
    let (data, _) = generate_union_of_subspaces(&spec).unwrap();
    NonlinearLift::new(8, 32, 20, strength, seed + 100).apply(&data).unwrap()
}

#[test]
fn pretraining_cuts_reconstruction_error_tenfold() {
    let data = lifted_data(5);
    let mut m = model(20, 32, 6, 3, 2, 6);
    let before = {
        let xh = m.decoder.forward(&m.encode(data.x()));
        (data.x() - xh).norm_squared()
    };
    let schedule = TrainSchedule {
        adam: AdamConfig { lr: 1e-2, ..Default::default() },
        ..Default::default()
    };
    let mut sampler = BatchSampler::new(data.len(), data.len(), RngState::new(7)).unwrap();
    let trace = train_stage(&mut m, data.x(), &mut sampler, Stage::Pretrain, 300, &schedule).unwrap();
    let after = {
        let xh = m.decoder.forward(&m.encode(data.x()));
        (data.x() - xh).norm_squared()
    };
    assert!(after * 10.0 <= before, "{before} -> {after}");
    assert_eq!(trace.rows.len(), 300);
}

#[test]
fn trained_latent_space_is_a_union_of_subspaces() {
    for seed in 1..=3 {
        let data = lifted(seed, 0.3);
        let arch = Architecture {
            hidden: vec![32],
            latent_dim: 12,
            bias: false,
            ..Default::default()
        };
        let mut m = SscnModel::new(
            20,
            &arch,
            AxisAlignedSubspaces::new(3, 4).unwrap(),
            Lambdas { l1: 10.0, l2: 100.0, l3: 0.0 },
            &mut RngState::new(seed + 1),
        )
        .unwrap();
        let schedule = TrainSchedule {
            pretrain_epochs: 500,
            joint_epochs: 1000,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let mut sampler = BatchSampler::new(data.len(), data.len(), RngState::new(10)).unwrap();
        train_sscn(&mut m, data.x(), &mut sampler, &schedule).unwrap();
        let z = DataMatrix::new(m.encode(data.x()), data.labels().map(<[usize]>::to_vec)).unwrap();
        let c = solve_edsc_closed_form(&z, 1.0).unwrap();
        let ratio = check_subspace_preserving(&c, data.labels().unwrap()).unwrap();
        assert!(ratio < 0.05, "seed {seed}: off-block ratio {ratio}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = lifted_data(11);
    let run = || {
        let mut m = model(20, 16, 6, 3, 2, 12);
        let schedule = TrainSchedule {
            pretrain_epochs: 5,
            joint_epochs: 5,
            ..Default::default()
        };
        let mut sampler = BatchSampler::new(40, data.len(), RngState::new(13)).unwrap();
        train_sscn(&mut m, data.x(), &mut sampler, &schedule).unwrap()
    };
    let a = run();
    let b = run();
    let bits = |t: &LossTrace| t.totals().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.rows.len(), 10);
}

#[test]
fn divergence_aborts_with_trace() {
    let data = lifted_data(14);
    let mut m = model(20, 16, 6, 3, 2, 15);
    let schedule = TrainSchedule {
        pretrain_epochs: 0,
        joint_epochs: 50,
        adam: AdamConfig { lr: 50.0, ..Default::default() },
        divergence_factor: 10.0,
        ..Default::default()
    };
    let mut sampler = BatchSampler::new(data.len(), data.len(), RngState::new(16)).unwrap();
    match train_sscn(&mut m, data.x(), &mut sampler, &schedule) {
        Err(Error::Diverged { trace, .. }) => assert!(!trace.is_empty()),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.rows.len())),
    }
}

#[test]
fn trace_csv_has_one_row_per_epoch() {
    let data = lifted_data(17);
    let mut m = model(20, 8, 6, 3, 2, 18);
    let schedule = TrainSchedule {
        pretrain_epochs: 2,
        joint_epochs: 3,
        ..Default::default()
    };
    let mut sampler = BatchSampler::new(60, data.len(), RngState::new(19)).unwrap();
    let trace = train_sscn(&mut m, data.x(), &mut sampler, &schedule).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    trace.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "epoch,stage,self_expr,latent,recon,clf,total");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,pretrain,"));
    assert!(lines[5].starts_with("2,joint,"));
    let _ = Matrix::zeros(1, 1);
}
