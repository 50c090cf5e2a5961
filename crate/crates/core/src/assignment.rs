use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::Matrix;

/// Row-stochastic memberships, one row per point and one column per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    pub y: Matrix,
}

impl SoftAssignment {
    pub fn num_points(&self) -> usize {
        self.y.nrows()
    }

    pub fn num_clusters(&self) -> usize {
        self.y.ncols()
    }

    /// Row argmax, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.y
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Hard cluster labels in `[0, k)` with optional soft memberships.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    #[serde(skip)]
    pub soft: Option<SoftAssignment>,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(domain(format!("label {bad} is outside [0, {k})")));
        }
        Ok(Self {
            labels,
            k,
            soft: None,
        })
    }

    pub fn with_soft(mut self, soft: SoftAssignment) -> Self {
        self.soft = Some(soft);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Clusters that received no point.
    pub fn empty_clusters(&self) -> Vec<usize> {
        self.cluster_sizes()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0)
            .map(|(j, _)| j)
            .collect()
    }
}
