use capsgan_core::metrics::{inception_score, ProbMatrix};
use capsgan_core::Error;
use proptest::prelude::*;

/// Rows normalized in f64 then rounded, re-normalized so the f32 row sums
/// stay within tolerance.
fn normalized_rows(raw: &[Vec<f64>]) -> Vec<f32> {
    raw.iter()
        .flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(move |v| (v / s) as f32)
        })
        .collect()
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..12, 2usize..11).prop_flat_map(|(n, k)| {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, k), n).prop_map(move |raw| {
            let raw: Vec<Vec<f64>> =
                raw.into_iter().map(|r| r.into_iter().map(|v| v * v * v + 1e-12).collect()).collect();
            (n, k, normalized_rows(&raw))
        })
    })
}

/// The expected-KL formula written out directly over the whole set.
fn whole_set_score(n: usize, k: usize, v: &[f32]) -> f64 {
    let mut marginal = vec![0.0f64; k];
    for i in 0..n {
        for j in 0..k {
            marginal[j] += v[i * k + j] as f64;
        }
    }
    for m in &mut marginal {
        *m /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut kl = 0.0;
        for j in 0..k {
            let p = v[i * k + j] as f64;
            if p > 0.0 {
                kl += p * (libm::log(p) - libm::log(marginal[j]));
            }
        }
        total += kl;
    }
    libm::exp(total / n as f64)
}

#[test]
fn two_row_case_matches_direct_evaluation() {
    let probs = ProbMatrix::new(2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
    let (a, b) = (0.9f64, 0.1f64);
    let oracle = (a * (a / 0.5).ln() + b * (b / 0.5).ln()).exp();
    let score = inception_score(&probs, 1).unwrap().mean;
    assert!((score - oracle).abs() < 1e-6, "{score} vs {oracle}");
}

#[test]
fn one_hot_balanced_reaches_k_and_uniform_is_one() {
    for k in [2, 5, 10] {
        let n = 3 * k;
        let hot: Vec<f32> = (0..n * k).map(|i| if i % k == (i / k) % k { 1.0 } else { 0.0 }).collect();
        let r = inception_score(&ProbMatrix::new(n, k, hot).unwrap(), 1).unwrap();
        assert!((r.mean - k as f64).abs() < 1e-6);
        let uniform = vec![1.0 / k as f32; n * k];
        let r = inception_score(&ProbMatrix::new(n, k, uniform).unwrap(), 3).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-6);
        assert_eq!((r.n, r.k, r.splits), (n, k, 3));
    }
}

#[test]
fn unnormalized_rows_are_data_errors() {
    let err = ProbMatrix::new(2, 2, vec![0.5, 0.5, 0.7, 0.2]).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

proptest! {
    #[test]
    fn score_is_between_one_and_k((n, k, v) in matrix()) {
        let r = inception_score(&ProbMatrix::new(n, k, v).unwrap(), 1).unwrap();
        prop_assert!(r.mean >= 1.0 - 1e-9 && r.mean <= k as f64 + 1e-9, "{}", r.mean);
    }

    #[test]
    fn single_split_equals_whole_set_formula((n, k, v) in matrix()) {
        let direct = whole_set_score(n, k, &v);
        let r = inception_score(&ProbMatrix::new(n, k, v).unwrap(), 1).unwrap();
        prop_assert_eq!(r.mean.to_bits(), direct.to_bits());
        prop_assert_eq!(r.std, 0.0);
    }

    #[test]
    fn invariant_under_class_permutation((n, k, v) in matrix(), shift in 1usize..10) {
        let shift = shift % k;
        let permuted: Vec<f32> = (0..n * k).map(|i| v[(i / k) * k + (i % k + shift) % k]).collect();
        let a = inception_score(&ProbMatrix::new(n, k, v).unwrap(), 1).unwrap().mean;
        let b = inception_score(&ProbMatrix::new(n, k, permuted).unwrap(), 1).unwrap().mean;
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn split_scores_each_respect_the_bound((n, k, v) in matrix(), splits in 1usize..4) {
        prop_assume!(splits <= n);
        let r = inception_score(&ProbMatrix::new(n, k, v).unwrap(), splits).unwrap();
        prop_assert_eq!(r.scores.len(), splits);
        for s in &r.scores {
            prop_assert!(*s >= 1.0 - 1e-9 && *s <= k as f64 + 1e-9);
        }
        prop_assert!(r.std >= 0.0);
    }
}
