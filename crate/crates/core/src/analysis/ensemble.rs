use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::{mean_variance, quantile_sorted};
use crate::limits::{rescale, LimitError, RescaledPath, ScaleKind};
use crate::model::{ModelParams, PopulationState};
use crate::ssa::{simulate_exact_replica, simulate_tau_leap_replica, LeapConfig, SimulationConfig, SsaError, Trajectory};

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("an ensemble needs at least 2 replicas, got {0}")]
    TooFewReplicas(usize),
    #[error("replica {index}: {source}")]
    Replica {
        index: u64,
        #[source]
        source: SsaError,
    },
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error("paths do not share one grid and scale")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum Method {
    #[default]
    Exact,
    TauLeap(LeapConfig),
}

/// Simulates replicas `0..n` in parallel. Replica `r` uses stream `(seed, r)`
/// and the result is in replica order, so it does not depend on scheduling.
pub fn simulate_replicas(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    n_replicas: usize,
    method: Method,
) -> Result<Vec<Trajectory>, EnsembleError> {
    let runs: Vec<Result<Trajectory, SsaError>> = (0..n_replicas as u64)
        .into_par_iter()
        .map(|r| match method {
            Method::Exact => simulate_exact_replica(params, initial, config, r),
            Method::TauLeap(leap) => simulate_tau_leap_replica(params, initial, config, leap, r),
        })
        .collect();
    runs.into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|source| EnsembleError::Replica { index: i as u64, source }))
        .collect()
}

/// Mean, variance, standard error and quantiles of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub quantiles: [f64; 5],
}

impl SampleSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, variance) = mean_variance(xs);
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            n: xs.len(),
            mean,
            variance,
            std_error: (variance / xs.len() as f64).sqrt(),
            quantiles: QUANTILE_LEVELS.map(|q| quantile_sorted(&sorted, q)),
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ComponentStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_error: Vec<f64>,
    /// At [`QUANTILE_LEVELS`].
    pub quantiles: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub scale: ScaleKind,
    /// Rescaled time.
    pub grid: Vec<f64>,
    pub replicas: usize,
    pub components: [ComponentStats; 3],
}

impl EnsembleStats {
    pub fn summary(&self, component: usize, point: usize) -> SampleSummary {
        let c = &self.components[component];
        SampleSummary {
            n: self.replicas,
            mean: c.mean[point],
            variance: c.variance[point],
            std_error: c.std_error[point],
            quantiles: c.quantiles[point],
        }
    }
}

/// Per-grid-point statistics over paths sharing a grid and scale.
pub fn ensemble_stats(paths: &[RescaledPath]) -> Result<EnsembleStats, EnsembleError> {
    if paths.len() < 2 {
        return Err(EnsembleError::TooFewReplicas(paths.len()));
    }
    let first = &paths[0];
    if paths
        .iter()
        .any(|p| p.kind != first.kind || p.grid != first.grid || p.values.len() != first.grid.len())
    {
        return Err(EnsembleError::GridMismatch);
    }
    let mut components: [ComponentStats; 3] = Default::default();
    let mut column = vec![0.0; paths.len()];
    for (c, stats) in components.iter_mut().enumerate() {
        for i in 0..first.grid.len() {
            for (slot, p) in column.iter_mut().zip(paths) {
                *slot = p.values[i][c];
            }
            let s = SampleSummary::from_samples(&column);
            stats.mean.push(s.mean);
            stats.variance.push(s.variance);
            stats.std_error.push(s.std_error);
            stats.quantiles.push(s.quantiles);
        }
    }
    Ok(EnsembleStats {
        scale: first.kind,
        grid: first.grid.clone(),
        replicas: paths.len(),
        components,
    })
}

pub fn run_ensemble(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    n_replicas: usize,
    scaling: ScaleKind,
    method: Method,
) -> Result<EnsembleStats, EnsembleError> {
    if n_replicas < 2 {
        return Err(EnsembleError::TooFewReplicas(n_replicas));
    }
    if scaling.time_scale() != config.time_scale() {
        return Err(LimitError::ScaleMismatch {
            wanted: scaling,
            found: config.time_scale(),
        }
        .into());
    }
    let trajectories = simulate_replicas(params, initial, config, n_replicas, method)?;
    let paths = trajectories
        .iter()
        .map(|t| rescale(t, scaling))
        .collect::<Result<Vec<_>, _>>()?;
    ensemble_stats(&paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssa::TimeScale;

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 16.0).unwrap()
    }

    #[test]
    fn empty_population_has_zero_variance() {
        let cfg = SimulationConfig::uniform(1.0, 5, TimeScale::Unit, 1).unwrap();
        let s = run_ensemble(&params(), PopulationState::ZERO, &cfg, 2, ScaleKind::X, Method::Exact).unwrap();
        for c in &s.components {
            assert!(c.variance.iter().all(|&v| v == 0.0));
            assert!(c.mean.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_single_replica_and_wrong_scale() {
        let cfg = SimulationConfig::uniform(1.0, 5, TimeScale::Unit, 1).unwrap();
        let init = PopulationState::new(4, 0, 0);
        assert_eq!(
            run_ensemble(&params(), init, &cfg, 1, ScaleKind::X, Method::Exact),
            Err(EnsembleError::TooFewReplicas(1))
        );
        assert!(matches!(
            run_ensemble(&params(), init, &cfg, 4, ScaleKind::Z, Method::Exact),
            Err(EnsembleError::Limit(_))
        ));
    }

    #[test]
    fn replica_errors_carry_index() {
        let cfg = SimulationConfig::with_max_events(1.0, TimeScale::Unit, vec![0.0, 1.0], 1, 5).unwrap();
        let err = simulate_replicas(&params(), PopulationState::new(16, 0, 0), &cfg, 3, Method::Exact).unwrap_err();
        assert!(matches!(err, EnsembleError::Replica { index: 0, .. }));
    }

    #[test]
    fn stats_identities() {
        let cfg = SimulationConfig::uniform(1.0, 6, TimeScale::Unit, 9).unwrap();
        let s = run_ensemble(&params(), PopulationState::new(16, 0, 0), &cfg, 50, ScaleKind::X, Method::Exact).unwrap();
        for c in &s.components {
            for i in 0..s.grid.len() {
                assert!(c.variance[i] >= 0.0);
                assert_eq!(c.std_error[i], (c.variance[i] / 50.0).sqrt());
                assert!(c.quantiles[i].windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let cfg = SimulationConfig::uniform(2.0, 11, TimeScale::Unit, 3).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    run_ensemble(&params(), PopulationState::new(16, 0, 0), &cfg, 64, ScaleKind::X, Method::Exact).unwrap()
                })
        };
        let a = run(1);
        let b = run(4);
        for (x, y) in a.components.iter().zip(&b.components) {
            assert_eq!(x.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(x.variance.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.variance.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
