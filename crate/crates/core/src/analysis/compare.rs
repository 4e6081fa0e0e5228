use serde::Serialize;
use thiserror::Error;

use super::{median, EnsembleStats};
use crate::limits::{LimitCurve, RescaledPath, ScaleKind};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComparisonError {
    #[error("statistics, paths and curve do not share one grid")]
    GridMismatch,
    #[error("expected a {wanted:?}-scaled input, found {found:?}")]
    ScaleMismatch { wanted: ScaleKind, found: ScaleKind },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDeviation {
    /// `sup_t |ensemble mean - curve|`.
    pub sup_mean_deviation: f64,
    /// `sup_t |path - curve|` for each replica, in replica order.
    pub replica_sup: Vec<f64>,
    /// Median of `replica_sup`; `None` without paths.
    pub median_sup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub scale: ScaleKind,
    /// `None` where the curve has no limit for that component.
    pub components: [Option<ComponentDeviation>; 3],
}

pub fn limit_comparison(
    stats: &EnsembleStats,
    paths: &[RescaledPath],
    curve: &dyn LimitCurve,
) -> Result<LimitReport, ComparisonError> {
    if stats.scale != curve.scale() {
        return Err(ComparisonError::ScaleMismatch {
            wanted: curve.scale(),
            found: stats.scale,
        });
    }
    if paths
        .iter()
        .any(|p| p.kind != stats.scale || p.grid != stats.grid || p.values.len() != p.grid.len())
    {
        return Err(ComparisonError::GridMismatch);
    }
    let targets: Vec<[Option<f64>; 3]> = stats.grid.iter().map(|&t| curve.components(t)).collect();
    let components = std::array::from_fn(|c| {
        if targets.iter().any(|v| v[c].is_none()) {
            return None;
        }
        let at = |i: usize| targets[i][c].expect("checked above");
        let sup_mean_deviation = stats.components[c]
            .mean
            .iter()
            .enumerate()
            .fold(0.0, |m: f64, (i, x)| m.max((x - at(i)).abs()));
        let replica_sup: Vec<f64> = paths
            .iter()
            .map(|p| p.values.iter().enumerate().fold(0.0, |m: f64, (i, v)| m.max((v[c] - at(i)).abs())))
            .collect();
        let median_sup = (!replica_sup.is_empty()).then(|| median(&replica_sup));
        Some(ComponentDeviation {
            sup_mean_deviation,
            replica_sup,
            median_sup,
        })
    });
    Ok(LimitReport {
        scale: stats.scale,
        components,
    })
}

/// `sup_t |V2(t)|` with `V2 = K^((1-gamma3)/2) / K^(gamma3-gamma2) (Z2(t) - Z2(0))`.
pub fn v2_sup_norm(path: &RescaledPath, params: &ModelParams) -> Result<f64, ComparisonError> {
    if path.kind != ScaleKind::Z {
        return Err(ComparisonError::ScaleMismatch {
            wanted: ScaleKind::Z,
            found: path.kind,
        });
    }
    let k = params.k_f64();
    let (g2, g3) = (params.gamma2(), params.gamma3());
    let factor = k.powf((1.0 - g3) / 2.0 - (g3 - g2));
    let Some(first) = path.values.first() else {
        return Ok(0.0);
    };
    let z0 = first[1];
    Ok(factor * path.values.iter().fold(0.0, |m: f64, v| m.max((v[1] - z0).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{ComponentStats, QUANTILE_LEVELS};
    use crate::limits::LimitCurveZ;

    fn curve_path(curve: &LimitCurveZ, grid: &[f64]) -> RescaledPath {
        RescaledPath {
            kind: ScaleKind::Z,
            grid: grid.to_vec(),
            values: grid
                .iter()
                .map(|&t| {
                    let [z1, z3] = curve.eval(t);
                    [z1, 1.0, z3]
                })
                .collect(),
            divisors: [1.0; 3],
        }
    }

    fn stats_of(path: &RescaledPath) -> EnsembleStats {
        let comp = |c: usize| ComponentStats {
            mean: path.values.iter().map(|v| v[c]).collect(),
            variance: vec![0.0; path.grid.len()],
            std_error: vec![0.0; path.grid.len()],
            quantiles: path.values.iter().map(|v| [v[c]; QUANTILE_LEVELS.len()]).collect(),
        };
        EnsembleStats {
            scale: path.kind,
            grid: path.grid.clone(),
            replicas: 2,
            components: [comp(0), comp(1), comp(2)],
        }
    }

    #[test]
    fn curve_against_itself() {
        let curve = LimitCurveZ::new(1.0, 0.0, 1.0, 1.0, 1.0);
        let grid: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let p = curve_path(&curve, &grid);
        let r = limit_comparison(&stats_of(&p), &[p.clone(), p.clone()], &curve).unwrap();
        assert!(r.components[1].is_none());
        for c in [0, 2] {
            let d = r.components[c].as_ref().unwrap();
            assert_eq!(d.sup_mean_deviation, 0.0);
            assert_eq!(d.median_sup, Some(0.0));
        }
    }

    #[test]
    fn mismatches() {
        let curve = LimitCurveZ::new(1.0, 0.0, 1.0, 1.0, 1.0);
        let p = curve_path(&curve, &[0.0, 1.0]);
        let q = curve_path(&curve, &[0.0, 2.0]);
        assert_eq!(limit_comparison(&stats_of(&p), &[q], &curve), Err(ComparisonError::GridMismatch));
        let y = crate::limits::LimitCurveY::new(1.0, 0.0, 1.0, 1.0);
        assert!(matches!(
            limit_comparison(&stats_of(&p), &[], &y),
            Err(ComparisonError::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn v2_norm_cases() {
        let params = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 256.0).unwrap();
        let mk = |z2: &[f64]| RescaledPath {
            kind: ScaleKind::Z,
            grid: (0..z2.len()).map(|i| i as f64).collect(),
            values: z2.iter().map(|&z| [1.0, z, 1.0]).collect(),
            divisors: [1.0; 3],
        };
        assert_eq!(v2_sup_norm(&mk(&[0.7; 5]), &params).unwrap(), 0.0);
        let up = v2_sup_norm(&mk(&[1.0, 1.2, 0.9, 1.1]), &params).unwrap();
        let flipped = v2_sup_norm(&mk(&[1.0, 0.8, 1.1, 0.9]), &params).unwrap();
        assert!((up - flipped).abs() < 1e-15);
        // K^(0.125 - 0.25) = 256^-0.125 = 0.5
        assert!((up - 0.5 * 0.2).abs() < 1e-12);
    }
}
