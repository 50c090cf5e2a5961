//! Data sources: synthetic unions of subspaces, MNIST IDX files, batch
//! sampling and the binary containers used to persist datasets and models.

mod batch;
mod container;
mod idx;
mod synthetic;

pub use batch::{BatchSampler, MIN_POINTS_PER_CLUSTER};
pub use container::{
    data_fingerprint, read_dataset, read_tensors, write_dataset, write_tensors, TensorFile,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synthetic::{generate_union_of_subspaces, sample_from_bases, NonlinearLift, SubspaceSpec};

use crate::error::{domain, Result};
use crate::numerics::{ensure_finite, Matrix};

/// A point set with points stored as columns (`d_X × N`) and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    x: Matrix,
    labels: Option<Vec<usize>>,
}

impl DataMatrix {
    pub fn new(x: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        ensure_finite(&x, "data matrix")?;
        if let Some(l) = &labels {
            if l.len() != x.ncols() {
                return Err(domain(format!(
                    "label count {} does not match point count {}",
                    l.len(),
                    x.ncols()
                )));
            }
        }
        Ok(Self { x, labels })
    }

    pub fn unlabeled(x: Matrix) -> Result<Self> {
        Self::new(x, None)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Ambient dimension `d_X`.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Number of points `N`.
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Number of distinct ground-truth classes (max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Columns at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> DataMatrix {
        let x = self.x.select_columns(indices.iter());
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        DataMatrix { x, labels }
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> DataMatrix {
        let x = self.x.columns(start, end - start).into_owned();
        let labels = self.labels.as_ref().map(|l| l[start..end].to_vec());
        DataMatrix { x, labels }
    }

    pub fn into_parts(self) -> (Matrix, Option<Vec<usize>>) {
        (self.x, self.labels)
    }
}
