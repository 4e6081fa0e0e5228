//! Martingale diagnostics: every channel count minus its compensator has mean
//! zero, and so does `(N1(T) - N1(0))^2 - tau1 int_0^T N1 ds`.

use serde::Serialize;
use thiserror::Error;

use super::mean_variance;
use crate::model::{EventKind, ModelParams};
use crate::ssa::{event_counts_under, Trajectory};

pub const MIN_REPLICAS: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompensatorError {
    #[error("compensator check needs at least {MIN_REPLICAS} replicas, got {0}")]
    TooFewReplicas(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensatorReport {
    pub replicas: usize,
    /// Per channel, in [`EventKind::ALL`] order.
    pub channel_z: [f64; 5],
    pub bracket_z: f64,
}

impl CompensatorReport {
    pub fn max_abs_z(&self) -> f64 {
        self.channel_z.iter().chain([&self.bracket_z]).fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_abs_z() < threshold
    }
}

fn z_score(residuals: &[f64]) -> f64 {
    let (mean, var) = mean_variance(residuals);
    if mean == 0.0 {
        return 0.0;
    }
    mean / (var / residuals.len() as f64).sqrt()
}

pub fn compensator_check(trajectories: &[Trajectory]) -> Result<CompensatorReport, CompensatorError> {
    match trajectories.first() {
        Some(t) => compensator_check_with(trajectories, &t.params),
        None => Err(CompensatorError::TooFewReplicas(0)),
    }
}

/// Same check with compensators computed under `params` instead of the
/// parameters the trajectories were simulated with.
pub fn compensator_check_with(
    trajectories: &[Trajectory],
    params: &ModelParams,
) -> Result<CompensatorReport, CompensatorError> {
    if trajectories.len() < MIN_REPLICAS {
        return Err(CompensatorError::TooFewReplicas(trajectories.len()));
    }
    let acc: Vec<_> = trajectories.iter().map(|t| event_counts_under(t, params)).collect();
    let mut channel_z = [0.0; 5];
    for ev in EventKind::ALL {
        let i = ev.index();
        let r: Vec<f64> = acc.iter().map(|a| a.counts[i] as f64 - a.compensators[i]).collect();
        channel_z[i] = z_score(&r);
    }
    let (r1, d1) = (EventKind::Renewal1.index(), EventKind::Differentiation1.index());
    let bracket: Vec<f64> = acc
        .iter()
        .map(|a| {
            let m1 = a.counts[r1] as f64 - a.counts[d1] as f64;
            m1 * m1 - params.tau1() * a.occupation_integrals[0]
        })
        .collect();
    Ok(CompensatorReport {
        replicas: trajectories.len(),
        channel_z,
        bracket_z: z_score(&bracket),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{simulate_replicas, Method};
    use crate::model::PopulationState;
    use crate::ssa::{SimulationConfig, TimeScale};

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 16.0).unwrap()
    }

    #[test]
    fn empty_population_is_exactly_zero() {
        let cfg = SimulationConfig::uniform(1.0, 2, TimeScale::Unit, 1).unwrap();
        let t = simulate_replicas(&params(), PopulationState::ZERO, &cfg, 30, Method::Exact).unwrap();
        let r = compensator_check(&t).unwrap();
        assert_eq!(r.channel_z, [0.0; 5]);
        assert_eq!(r.bracket_z, 0.0);
    }

    #[test]
    fn needs_thirty_replicas() {
        let cfg = SimulationConfig::uniform(1.0, 2, TimeScale::Unit, 1).unwrap();
        let t = simulate_replicas(&params(), PopulationState::ZERO, &cfg, 29, Method::Exact).unwrap();
        assert_eq!(compensator_check(&t), Err(CompensatorError::TooFewReplicas(29)));
    }

    #[test]
    fn correct_engine_passes_and_fault_is_detected() {
        let p = params();
        let cfg = SimulationConfig::uniform(2.0, 2, TimeScale::Unit, 17).unwrap();
        let t = simulate_replicas(&p, PopulationState::new(16, 0, 0), &cfg, 2000, Method::Exact).unwrap();
        let r = compensator_check(&t).unwrap();
        assert!(r.passes(4.0), "{r:?}");
        let wrong = p.with_tau1(1.1).unwrap();
        let f = compensator_check_with(&t, &wrong).unwrap();
        assert!(f.channel_z[0].abs() > 4.0 && f.channel_z[1].abs() > 4.0, "{f:?}");
    }
}
