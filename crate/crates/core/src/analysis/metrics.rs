use serde::{Deserialize, Serialize};

use super::AnalysisError;

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(AnalysisError::TooShort { len: a.len(), needed: 2 });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(())
}

/// Coefficient of determination, 1 − SS_res / SS_tot. Unbounded below for
/// predictions worse than the mean.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(truth, pred)?;
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(AnalysisError::DegenerateVariance);
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// Sample Pearson correlation, or Pearson over fractional ranks for the
/// Spearman kind (ties get the mean of the positions they span).
pub fn correlation(a: &[f64], b: &[f64], kind: CorrelationKind) -> Result<f64, AnalysisError> {
    check_pair(a, b)?;
    match kind {
        CorrelationKind::Pearson => pearson(a, b),
        CorrelationKind::Spearman => pearson(&fractional_ranks(a), &fractional_ranks(b)),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(AnalysisError::DegenerateVariance);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// 1-based average ranks. Values must be finite.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite rank inputs"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Gini index over non-negative values, in [0, 1 − 1/n]. Uses the sorted
/// rewriting of the pairwise mean absolute difference.
pub fn gini(values: &[f64]) -> Result<f64, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::TooShort { len: 0, needed: 1 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    if values.iter().any(|v| *v < 0.0) {
        return Err(AnalysisError::NegativeValue);
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(AnalysisError::AllZero);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let n = sorted.len() as f64;
    // Σᵢⱼ |xᵢ − xⱼ| = 2 Σ_k (2k − n − 1) x_(k) over the ascending order
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * (k + 1) as f64 - n - 1.0) * x)
        .sum();
    Ok(weighted / (n * total))
}

/// A fitted log-log rank-size line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination of the line itself.
    pub r_squared: f64,
    /// The (ln rank, ln value) pairs the line was fit on, rank-ascending.
    pub points: Vec<(f64, f64)>,
}

/// Keeps the top `top_quantile` fraction of the values, ranks them descending
/// from 1, and fits ln(value) on ln(rank) by ordinary least squares.
pub fn zipf_fit(values: &[f64], top_quantile: f64) -> Result<ZipfFit, AnalysisError> {
    if !(top_quantile > 0.0 && top_quantile <= 1.0) {
        return Err(AnalysisError::InvalidConfig(format!(
            "top quantile {top_quantile} outside (0, 1]"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    if values.iter().any(|v| *v <= 0.0) {
        return Err(AnalysisError::NonPositive);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| y.partial_cmp(x).expect("finite values"));
    let kept = ((values.len() as f64 * top_quantile).round() as usize).clamp(1, values.len());
    if kept < 3 {
        return Err(AnalysisError::TooFewPoints { kept, needed: 3 });
    }
    let points: Vec<(f64, f64)> = sorted[..kept]
        .iter()
        .enumerate()
        .map(|(r, v)| (((r + 1) as f64).ln(), v.ln()))
        .collect();
    let (slope, intercept, r_squared) = ols(&points);
    Ok(ZipfFit { slope, intercept, r_squared, points })
}

fn ols(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in points {
        let fit = intercept + slope * x;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - my) * (y - my);
    }
    let scale: f64 = points.iter().map(|(_, y)| y * y).sum();
    // constant responses have no variance to explain; the flat fit is exact
    let r_squared = if ss_tot <= f64::EPSILON * f64::EPSILON * (1.0 + scale) {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    (slope, intercept, r_squared)
}

/// Middle value (mean of the middle two for even lengths); None when empty.
pub fn median_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0x4d45_0001);
        (0..n).map(|_| rng::normal(&mut r)).collect()
    }

    /// Ranks by counting smaller elements, averaging over exact ties.
    fn brute_ranks(xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let below = xs.iter().filter(|&&y| y < x).count();
                let equal = xs.iter().filter(|&&y| y == x).count();
                below as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect()
    }

    fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
        let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
        cov / (va * vb).sqrt()
    }

    #[test]
    fn r_squared_hand_cases() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&truth, &truth).unwrap(), 1.0);
        let mean = [2.5; 4];
        assert_eq!(r_squared(&truth, &mean).unwrap(), 0.0);
        let r = r_squared(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((r - -3.0).abs() < 1e-15, "{r}");
        assert!(matches!(
            r_squared(&[1.0, 1.0], &[0.0, 2.0]),
            Err(AnalysisError::DegenerateVariance)
        ));
        assert!(matches!(
            r_squared(&[1.0], &[1.0]),
            Err(AnalysisError::TooShort { .. })
        ));
        assert!(matches!(
            r_squared(&[1.0, 2.0], &[1.0]),
            Err(AnalysisError::LengthMismatch { a: 2, b: 1 })
        ));
    }

    #[test]
    fn correlations_agree_with_brute_force_including_ties() {
        for seed in 0..4 {
            let mut a = random_vec(50, seed);
            let mut b = random_vec(50, seed + 100);
            // inject exact ties on both sides
            a[7] = a[3];
            a[19] = a[3];
            b[11] = b[2];
            let p = correlation(&a, &b, CorrelationKind::Pearson).unwrap();
            assert!((p - brute_pearson(&a, &b)).abs() < 1e-12);
            let s = correlation(&a, &b, CorrelationKind::Spearman).unwrap();
            let brute = brute_pearson(&brute_ranks(&a), &brute_ranks(&b));
            assert!((s - brute).abs() < 1e-12, "{s} vs {brute}");
        }
    }

    #[test]
    fn identity_and_monotone_transform_correlations() {
        let a = random_vec(30, 9);
        assert!((correlation(&a, &a, CorrelationKind::Pearson).unwrap() - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &a, CorrelationKind::Spearman).unwrap() - 1.0).abs() < 1e-12);
        // strictly increasing nonlinear transform keeps ranks, bends values
        let b: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        let s = correlation(&a, &b, CorrelationKind::Spearman).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
        let p = correlation(&a, &b, CorrelationKind::Pearson).unwrap();
        assert!(p < 1.0 - 1e-6, "{p}");
        assert!(matches!(
            correlation(&[1.0, 1.0, 1.0], &a[..3], CorrelationKind::Pearson),
            Err(AnalysisError::DegenerateVariance)
        ));
    }

    #[test]
    fn gini_hand_cases_and_bounds() {
        assert_eq!(gini(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(gini(&[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.75);
        assert_eq!(gini(&[5.0]).unwrap(), 0.0);
        assert!(matches!(gini(&[0.0, 0.0]), Err(AnalysisError::AllZero)));
        assert!(matches!(gini(&[1.0, -0.1]), Err(AnalysisError::NegativeValue)));
        assert!(matches!(gini(&[]), Err(AnalysisError::TooShort { .. })));
    }

    #[test]
    fn gini_matches_pairwise_brute_force() {
        for seed in 0..3 {
            let values: Vec<f64> = random_vec(200, seed + 40).iter().map(|v| v.abs()).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let mut pairwise = 0.0;
            for x in &values {
                for y in &values {
                    pairwise += (x - y).abs();
                }
            }
            let brute = pairwise / (2.0 * n * n * mean);
            let fast = gini(&values).unwrap();
            assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
            assert!(fast >= 0.0 && fast <= 1.0 - 1.0 / n);
        }
    }

    #[test]
    fn gini_is_scale_invariant() {
        let values: Vec<f64> = random_vec(60, 77).iter().map(|v| v.abs() + 0.01).collect();
        let base = gini(&values).unwrap();
        for c in [0.25, 3.0, 1e6] {
            let scaled: Vec<f64> = values.iter().map(|v| c * v).collect();
            assert!((gini(&scaled).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn zipf_recovers_exact_power_laws() {
        let exact: Vec<f64> = (1..=5).map(|r| 1.0 / r as f64).collect();
        let fit = zipf_fit(&exact, 1.0).unwrap();
        assert!((fit.slope - -1.0).abs() < 1e-9, "{}", fit.slope);
        assert!(fit.intercept.abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.points.len(), 5);

        // y_r = 3 r^{-2}: slope −2, intercept ln 3
        let steeper: Vec<f64> = (1..=40).map(|r| 3.0 * (r as f64).powi(-2)).collect();
        let fit = zipf_fit(&steeper, 1.0).unwrap();
        assert!((fit.slope - -2.0).abs() < 1e-9);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);

        let flat = zipf_fit(&[4.0; 10], 1.0).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert!((flat.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zipf_quantile_filter_and_errors() {
        let values: Vec<f64> = (1..=100).map(|r| 1.0 / r as f64).collect();
        let fit = zipf_fit(&values, 0.75).unwrap();
        assert_eq!(fit.points.len(), 75);
        // the filter keeps the largest values, so rank 1 is the maximum
        assert_eq!(fit.points[0], (1f64.ln(), 1f64.ln()));

        assert!(matches!(
            zipf_fit(&[1.0, 2.0, 3.0, 4.0], 0.5),
            Err(AnalysisError::TooFewPoints { kept: 2, needed: 3 })
        ));
        assert!(matches!(
            zipf_fit(&[1.0, 0.0, 2.0, 3.0], 1.0),
            Err(AnalysisError::NonPositive)
        ));
        assert!(matches!(
            zipf_fit(&[1.0, 2.0, 3.0], 1.5),
            Err(AnalysisError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zipf_slope_matches_the_pareto_tail_law() {
        let mut slopes = Vec::new();
        for seed in 0..20 {
            let mut r = rng::stream(seed, 0x4d45_0002);
            let samples: Vec<f64> = (0..500)
                .map(|_| {
                    let u: f64 = r.gen_range(0.0..1.0);
                    1.0 / (1.0 - u)
                })
                .collect();
            slopes.push(zipf_fit(&samples, 0.75).unwrap().slope);
        }
        let median = median_of(&slopes).unwrap();
        assert!((median - -1.0).abs() < 0.15, "median slope {median}");
    }

    #[test]
    fn median_of_handles_both_parities() {
        assert_eq!(median_of(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median_of(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median_of(&[]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn spearman_is_invariant_under_monotone_maps(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..40),
            ys in proptest::collection::vec(-50.0f64..50.0, 5..40),
        ) {
            let n = xs.len().min(ys.len());
            let (a, b) = (&xs[..n], &ys[..n]);
            prop_assume!(correlation(a, b, CorrelationKind::Spearman).is_ok());
            let s = correlation(a, b, CorrelationKind::Spearman).unwrap();
            let mapped: Vec<f64> = a.iter().map(|x| (x / 10.0).exp()).collect();
            let t = correlation(&mapped, b, CorrelationKind::Spearman).unwrap();
            prop_assert!((s - t).abs() < 1e-12);
        }

        #[test]
        fn pearson_is_invariant_under_positive_affine_maps(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..40),
            ys in proptest::collection::vec(-50.0f64..50.0, 5..40),
            scale in 0.1f64..10.0,
            shift in -20.0f64..20.0,
        ) {
            let n = xs.len().min(ys.len());
            let (a, b) = (&xs[..n], &ys[..n]);
            prop_assume!(correlation(a, b, CorrelationKind::Pearson).is_ok());
            let p = correlation(a, b, CorrelationKind::Pearson).unwrap();
            let mapped: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
            let q = correlation(&mapped, b, CorrelationKind::Pearson).unwrap();
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
