//! Peak-allocation audit for mini-batch training and streaming classification.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use sscn::autodiff::Activation;
use sscn::dataio::{generate_union_of_subspaces, BatchSampler, SubspaceSpec};
use sscn::sscn::{train_stage, Architecture, Lambdas, SscnModel, Stage, TrainSchedule};
use sscn::stiefel::{AxisAlignedSubspaces, Classifier};
use sscn::RngState;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed) - base)
}

// One test only: the counters are process-wide.
#[test]
fn training_and_inference_stay_batch_sized() {
    let n = 20_000;
    let batch = 500;
    let spec = SubspaceSpec {
        ambient_dim: 12,
        cluster_dims: vec![2, 2, 2],
        points_per_cluster: vec![n / 2, n / 4, n / 4],
        noise_sigma: 0.0,
        seed: 3,
    };
    let (data, _) = generate_union_of_subspaces(&spec).unwrap();
    let arch = Architecture {
        hidden: vec![16],
        latent_dim: 6,
        activation: Activation::Tanh,
        output_activation: Activation::Identity,
        bias: false,
    };
    let subspaces = AxisAlignedSubspaces::new(3, 2).unwrap();
    let mut model = SscnModel::new(12, &arch, subspaces, Lambdas::default(), &mut RngState::new(1)).unwrap();
    let schedule = TrainSchedule::default();
    let mut sampler = BatchSampler::new(batch, n, RngState::new(2)).unwrap();
    let dense = n * n * 8;
    // Allowance: a few batch×batch matrices plus batch-wide activations.
    let budget = 16 * batch * batch * 8;

    let (trace, peak) = peak_during(|| train_stage(&mut model, data.x(), &mut sampler, Stage::Joint, 1, &schedule).unwrap());
    assert_eq!(trace.rows.len(), 1);
    assert!(peak < budget, "training peak {peak} bytes, budget {budget}, dense {dense}");

    let clf = Classifier::new(&model, &model.rotation, subspaces).unwrap();
    let (out, peak) = peak_during(|| clf.classify_streaming(data.x(), batch).unwrap());
    assert_eq!(out.labels.len(), n);
    // Labels and soft memberships for all points are the only N-sized outputs.
    let outputs = n * (8 + 3 * 8);
    assert!(peak < budget + 2 * outputs, "inference peak {peak} bytes");
}
