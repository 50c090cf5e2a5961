//! Clustering quality: accuracy under optimal label matching, adjusted Rand
//! index and normalized mutual information.
//!
//! NMI is normalized by the geometric mean of the two entropies (natural log),
//! `MI / sqrt(H(pred) · H(truth))`, with `0/0` taken as `0`. Other
//! normalizations (arithmetic mean, max) give slightly different numbers.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::Matrix;

/// `K_pred × K_true` co-occurrence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        check_lengths(pred, truth)?;
        let kp = pred.iter().copied().max().map_or(0, |m| m + 1);
        let kt = truth.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; kt]; kp];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(Self {
            counts,
            n: pred.len() as u64,
        })
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let kt = self.counts.first().map_or(0, Vec::len);
        (0..kt)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(domain(format!(
            "label length mismatch: predicted {}, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Minimum-cost assignment of rows to columns.
///
/// Rectangular inputs are padded with zero-cost dummies; the result maps
/// each real row to its column, or `None` when it was matched to padding.
pub fn hungarian(cost: &Matrix) -> Vec<Option<usize>> {
    let rows = cost.nrows();
    let cols = cost.ncols();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[(i, j)] } else { 0.0 };

    // Shortest augmenting paths with row/column potentials, 1-indexed with a
    // virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Best-matching accuracy; also returns the `pred → truth` label map.
pub fn accuracy_with_mapping(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<Option<usize>>)> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n == 0 {
        return Ok((1.0, Vec::new()));
    }
    let kp = table.counts.len();
    let kt = table.counts[0].len();
    let max = table.counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost = Matrix::from_fn(kp, kt, |i, j| max - table.counts[i][j] as f64);
    let mapping = hungarian(&cost);
    let hits: u64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| table.counts[i][j]))
        .sum();
    Ok((hits as f64 / table.n as f64, mapping))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(accuracy_with_mapping(pred, truth)?.0)
}

fn choose2(k: u64) -> f64 {
    let k = k as f64;
    k * (k - 1.0) / 2.0
}

pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(domain("adjusted Rand index needs at least 2 points"));
    }
    let table = ContingencyTable::new(pred, truth)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = table.row_sums().into_iter().map(choose2).sum();
    let b: f64 = table.col_sums().into_iter().map(choose2).sum();
    let expected = a * b / choose2(table.n);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        // Both partitions are trivial in the same way (all-in-one or all singletons).
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn normalized_mutual_info(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.n == 0 {
        return Ok(0.0);
    }
    let n = table.n as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let denom = (entropy(&rows, n) * entropy(&cols, n)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// The metric report written by evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub n: usize,
    pub k_pred: usize,
    pub k_true: usize,
    pub seed: Option<u64>,
}

pub fn evaluate(pred: &[usize], truth: &[usize], seed: Option<u64>) -> Result<MetricReport> {
    let distinct = |l: &[usize]| {
        let mut v = l.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    Ok(MetricReport {
        acc: accuracy(pred, truth)?,
        ari: adjusted_rand_index(pred, truth)?,
        nmi: normalized_mutual_info(pred, truth)?,
        n: pred.len(),
        k_pred: distinct(pred),
        k_true: distinct(truth),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn accuracy_handles_more_predicted_clusters() {
        // Three predicted clusters, two true; the best matching leaves one unmatched.
        let acc = accuracy(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ari_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&truth, &truth).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0; 6], &truth).unwrap(), 0.0);
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
    }

    #[test]
    fn nmi_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert!((normalized_mutual_info(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_mutual_info(&[0; 6], &truth).unwrap(), 0.0);
    }

    #[test]
    fn hungarian_small_cases() {
        let mut cost = Matrix::from_element(3, 3, 1.0);
        cost.fill_diagonal(0.0);
        assert_eq!(hungarian(&cost), vec![Some(0), Some(1), Some(2)]);
        assert_eq!(hungarian(&Matrix::from_element(1, 1, 5.0)), vec![Some(0)]);
        let wide = Matrix::from_row_slice(2, 3, &[5.0, 1.0, 9.0, 1.0, 5.0, 9.0]);
        assert_eq!(hungarian(&wide), vec![Some(1), Some(0)]);
        let tall = Matrix::from_row_slice(3, 1, &[3.0, 1.0, 2.0]);
        assert_eq!(hungarian(&tall), vec![None, Some(0), None]);
    }

    fn relabel(labels: &[usize], perm: &[usize]) -> Vec<usize> {
        labels.iter().map(|&l| perm[l]).collect()
    }

    proptest! {
        #[test]
        fn metrics_ignore_predicted_label_names(
            pred in proptest::collection::vec(0usize..4, 12),
            truth in proptest::collection::vec(0usize..3, 12),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let renamed = relabel(&pred, &perm);
            prop_assert!((accuracy(&pred, &truth).unwrap() - accuracy(&renamed, &truth).unwrap()).abs() < 1e-12);
            prop_assert!((adjusted_rand_index(&pred, &truth).unwrap() - adjusted_rand_index(&renamed, &truth).unwrap()).abs() < 1e-12);
            prop_assert!((normalized_mutual_info(&pred, &truth).unwrap() - normalized_mutual_info(&renamed, &truth).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn constant_prediction_scores_the_majority_share(truth in proptest::collection::vec(0usize..4, 1..30)) {
            let pred = vec![0usize; truth.len()];
            let mut counts = [0usize; 4];
            for &t in &truth { counts[t] += 1; }
            let majority = *counts.iter().max().unwrap() as f64 / truth.len() as f64;
            prop_assert!(accuracy(&pred, &truth).unwrap() >= majority - 1e-12);
        }
    }
}
