use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("a scaling fit needs at least 3 distinct K values")]
    DegenerateDesign,
    #[error("statistic must be positive and finite, got {0} at K={1}")]
    NonPositiveStatistic(f64, f64),
}

/// Least-squares line through `(ln K, ln statistic)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_se: f64,
    pub slope_se: f64,
    pub confidence: f64,
    pub slope_ci: (f64, f64),
}

impl ScalingFit {
    pub fn ci_contains(&self, slope: f64) -> bool {
        self.slope_ci.0 <= slope && slope <= self.slope_ci.1
    }
}

pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit, FitError> {
    for &(k, s) in points {
        if !(s.is_finite() && s > 0.0) {
            return Err(FitError::NonPositiveStatistic(s, k));
        }
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).filter(|k| *k > 0.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || points.iter().any(|p| !(p.0 > 0.0 && p.0.is_finite())) {
        return Err(FitError::DegenerateDesign);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let df = n - 2.0;
    let residual_se = (ssr / df).sqrt();
    let slope_se = residual_se / sxx.sqrt();
    let confidence = 0.95;
    let t = StudentsT::new(0.0, 1.0, df).expect("df >= 1").inverse_cdf(0.5 + confidence / 2.0);
    Ok(ScalingFit {
        points: points.to_vec(),
        slope,
        intercept,
        residual_se,
        slope_se,
        confidence,
        slope_ci: (slope - t * slope_se, slope + t * slope_se),
    })
}
