//! Fixtures shared by the benchmarks.

use sscn::dataio::{generate_union_of_subspaces, DataMatrix, SubspaceSpec};

/// Three independent subspaces of dimension `dim` in `ambient` dimensions.
pub fn fixture(ambient: usize, dim: usize, per_cluster: usize) -> DataMatrix {
    let spec = SubspaceSpec {
        ambient_dim: ambient,
        cluster_dims: vec![dim; 3],
        points_per_cluster: vec![per_cluster; 3],
        noise_sigma: 0.0,
        seed: 0,
    };
    generate_union_of_subspaces(&spec).expect("valid fixture").0
}
