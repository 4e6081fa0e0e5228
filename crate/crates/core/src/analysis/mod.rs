//! Ensembles, comparisons against the limits, and engine diagnostics.

mod compare;
mod compensator;
mod ensemble;
mod fit;
mod occupation;
mod oracle;

pub use compare::{limit_comparison, v2_sup_norm, ComparisonError, ComponentDeviation, LimitReport};
pub use compensator::{compensator_check, compensator_check_with, CompensatorError, CompensatorReport, MIN_REPLICAS};
pub use ensemble::{
    ensemble_stats, run_ensemble, simulate_replicas, ComponentStats, EnsembleError, EnsembleStats, Method, SampleSummary,
    QUANTILE_LEVELS,
};
pub use fit::{scaling_fit, FitError, ScalingFit};
pub use occupation::{occupation_measure, OccupationError, OccupationHistogram};
pub use oracle::{
    expected_null_tv, tv_distance, uniformization_oracle, OracleBounds, OracleDistribution, OracleError,
    LEAK_TOLERANCE, MAX_ORACLE_STATES,
};

/// Sum in a fixed pairwise order, independent of how the input was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and unbiased variance, two-pass with pairwise sums.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&dev) / (n - 1.0))
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn pairwise_matches_naive(xs in proptest::collection::vec(-1e6f64..1e6, 1..300)) {
            let naive: f64 = xs.iter().sum();
            prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-6 * (1.0 + naive.abs()));
            let (_, v) = mean_variance(&xs);
            prop_assert!(v >= 0.0);
        }
    }
}
