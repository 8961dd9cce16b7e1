//! Inception Score over a matrix of class posteriors.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{exp64, ln64, sqrt64};
use crate::tensor::Tensor;

/// Row-sum tolerance for a posterior row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Conventional number of splits.
pub const DEFAULT_SPLITS: usize = 10;

/// `N x K` matrix whose rows are class posteriors `p(y|x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    classes: usize,
    values: Vec<f32>,
}

impl ProbMatrix {
    /// Validates that every entry is finite and non-negative and every row
    /// sums to one within [`ROW_SUM_TOLERANCE`].
    pub fn new(rows: usize, classes: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || classes == 0 {
            return Err(Error::Data(format!("probability matrix must be non-empty, got {rows}x{classes}")));
        }
        if values.len() != rows * classes {
            return Err(Error::Data(format!(
                "probability matrix {rows}x{classes} needs {} values, got {}",
                rows * classes,
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(classes).enumerate() {
            if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(Error::Data(format!("row {i} has invalid probability {p}")));
            }
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Data(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(ProbMatrix { rows, classes, values })
    }

    /// From a rank-2 `N x K` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.shape().dims();
        if dims.len() != 2 {
            return Err(Error::Data(format!("probability matrix must be rank 2, got {}", t.shape())));
        }
        ProbMatrix::new(dims[0], dims[1], t.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over splits.
    pub std: f64,
    pub n: usize,
    pub k: usize,
    pub splits: usize,
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` per split, with `p(y)` the column mean
/// of the split. Split `s` covers rows `s*N/splits .. (s+1)*N/splits`.
pub fn inception_score(probs: &ProbMatrix, splits: usize) -> Result<ScoreReport> {
    let n = probs.rows();
    if splits == 0 || splits > n {
        return Err(Error::Usage(format!("splits must be in 1..={n}, got {splits}")));
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| split_score(probs, s * n / splits, (s + 1) * n / splits))
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok(ScoreReport { scores, mean, std: sqrt64(var), n, k: probs.classes(), splits })
}

fn split_score(probs: &ProbMatrix, start: usize, end: usize) -> f64 {
    let k = probs.classes();
    let count = (end - start) as f64;
    let mut marginal = alloc::vec![0.0f64; k];
    for i in start..end {
        for (m, &p) in marginal.iter_mut().zip(probs.row(i)) {
            *m += p as f64;
        }
    }
    for m in &mut marginal {
        *m /= count;
    }
    let mut total = 0.0;
    for i in start..end {
        total += kl(probs.row(i), &marginal);
    }
    exp64(total / count)
}

/// `KL(p || q)` with `0 * log 0 = 0`.
fn kl(p: &[f32], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pi = pi as f64;
            pi * (ln64(pi) - ln64(qi))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_rows_score_one() {
        let k = 10;
        let probs = ProbMatrix::new(50, k, vec![0.1; 50 * k]).unwrap();
        let r = inception_score(&probs, 5).unwrap();
        for s in &r.scores {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(r.std < 1e-9);
    }

    #[test]
    fn balanced_one_hot_scores_k() {
        let k = 10;
        let n = 100;
        let values: Vec<f32> = (0..n * k).map(|i| if i % k == (i / k) % k { 1.0 } else { 0.0 }).collect();
        let probs = ProbMatrix::new(n, k, values).unwrap();
        let r = inception_score(&probs, 1).unwrap();
        assert!((r.mean - 10.0).abs() < 1e-6, "{}", r.mean);
    }

    #[test]
    fn two_row_case() {
        let probs = ProbMatrix::new(2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let r = inception_score(&probs, 1).unwrap();
        let (a, b) = (0.9f32 as f64, 0.1f32 as f64);
        let expected = libm::exp(a * libm::log(a / 0.5) + b * libm::log(b / 0.5));
        assert!((r.mean - expected).abs() < 1e-6);
        assert!((r.mean - 1.445).abs() < 1e-3);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(matches!(ProbMatrix::new(1, 2, vec![0.5, 0.6]), Err(Error::Data(_))));
        assert!(matches!(ProbMatrix::new(1, 2, vec![1.5, -0.5]), Err(Error::Data(_))));
        assert!(matches!(ProbMatrix::new(1, 2, vec![f32::NAN, 1.0]), Err(Error::Data(_))));
        assert!(ProbMatrix::new(1, 2, vec![0.5, 0.500_001]).is_ok());
    }

    #[test]
    fn rejects_bad_splits() {
        let probs = ProbMatrix::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(inception_score(&probs, 0).is_err());
        assert!(inception_score(&probs, 3).is_err());
    }

    #[test]
    fn uneven_splits_cover_every_row() {
        let probs = ProbMatrix::new(7, 2, [[1.0, 0.0], [0.0, 1.0]].repeat(4).concat()[..14].to_vec()).unwrap();
        let r = inception_score(&probs, 3).unwrap();
        assert_eq!(r.scores.len(), 3);
        assert_eq!(r.n, 7);
    }
}
