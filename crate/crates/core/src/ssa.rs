//! Exact stochastic simulation of the jump process.
//!
//! The exact engine is the direct method over the five channels. Trajectories
//! are sampled on a user grid (left limits at grid times). Per-channel event
//! counters and the exact integrals `int_0^t N_i(s) ds` are accumulated instead
//! of an event log.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    apply_event, channel_coefficients, EventError, EventKind, ModelParams, PopulationState,
};
use crate::rng::{replica_rng, SimRng};

pub const DEFAULT_MAX_EVENTS: u64 = 1 << 31;

/// How user time maps to engine (absolute) time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeScale {
    /// `t`
    Unit,
    /// `t K^gamma2`
    Gamma2,
    /// `t K^gamma3`
    Gamma3,
}

impl TimeScale {
    pub fn factor(self, params: &ModelParams) -> f64 {
        let r = params.derive_rates();
        match self {
            TimeScale::Unit => 1.0,
            TimeScale::Gamma2 => r.k_gamma2,
            TimeScale::Gamma3 => r.k_gamma3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("horizon must be finite and non-negative, got {0}")]
    BadHorizon(f64),
    #[error("sample grid must be strictly increasing")]
    GridNotIncreasing,
    #[error("grid point {0} lies outside [0, horizon]")]
    GridOutOfRange(f64),
    #[error("max_events must be positive")]
    ZeroMaxEvents,
    #[error("leap epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
}

/// Simulation window. `horizon` and `grid` are in rescaled units of `time_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    horizon: f64,
    time_scale: TimeScale,
    grid: Vec<f64>,
    seed: u64,
    max_events: u64,
}

impl SimulationConfig {
    pub fn new(
        horizon: f64,
        time_scale: TimeScale,
        grid: Vec<f64>,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        Self::with_max_events(horizon, time_scale, grid, seed, DEFAULT_MAX_EVENTS)
    }

    pub fn with_max_events(
        horizon: f64,
        time_scale: TimeScale,
        grid: Vec<f64>,
        seed: u64,
        max_events: u64,
    ) -> Result<Self, ConfigError> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(ConfigError::BadHorizon(horizon));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ConfigError::GridNotIncreasing);
        }
        if let Some(&g) = grid.iter().find(|&&g| !(0.0..=horizon).contains(&g)) {
            return Err(ConfigError::GridOutOfRange(g));
        }
        if max_events == 0 {
            return Err(ConfigError::ZeroMaxEvents);
        }
        Ok(Self {
            horizon,
            time_scale,
            grid,
            seed,
            max_events,
        })
    }

    /// `points` equally spaced grid times on `[0, horizon]` (endpoints included).
    pub fn uniform(
        horizon: f64,
        points: usize,
        time_scale: TimeScale,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        Self::new(horizon, time_scale, uniform_grid(horizon, points), seed)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn time_scale(&self) -> TimeScale {
        self.time_scale
    }
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn max_events(&self) -> u64 {
        self.max_events
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub fn uniform_grid(horizon: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![horizon],
        n => {
            let mut g: Vec<f64> = (0..n)
                .map(|i| horizon * i as f64 / (n - 1) as f64)
                .collect();
            g[n - 1] = horizon;
            g
        }
    }
}

/// Tau-leaping controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeapConfig {
    /// Relative change bound per leap (Cao–Gillespie–Petzold selection).
    pub epsilon: f64,
    /// Below this total rate the engine steps exactly.
    pub min_rate_for_leap: f64,
}

impl Default for LeapConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            min_rate_for_leap: 100.0,
        }
    }
}

/// A leap must cover at least this many expected events, otherwise the
/// engine takes a batch of exact steps. As `epsilon -> 0` the selected leap
/// shrinks below this and the leaping engine degenerates to the exact one.
const MIN_EXPECTED_EVENTS_PER_LEAP: f64 = 10.0;
const EXACT_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub params: ModelParams,
    pub initial: PopulationState,
    pub time_scale: TimeScale,
    /// Grid in rescaled time.
    pub grid: Vec<f64>,
    /// Grid in engine time.
    pub grid_absolute: Vec<f64>,
    /// `states[i]` is `N(grid_absolute[i]-)`. Shorter than `grid` if truncated.
    pub states: Vec<PopulationState>,
    /// Events per channel in [`EventKind::ALL`] order.
    pub counts: [u64; 5],
    /// `int_0^end N_i(s) ds` in engine time.
    pub occupation_integrals: [f64; 3],
    pub end_time: f64,
    pub final_state: PopulationState,
    pub events: u64,
    pub truncated: bool,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        !self.truncated && self.states.len() == self.grid.len()
    }

    /// Net mass change predicted by the channel counters.
    pub fn mass_balance(&self) -> i128 {
        let divisions: u64 = self.counts[..4].iter().sum();
        divisions as i128 - self.counts[4] as i128
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsaError {
    #[error("event budget of {limit} exhausted at engine time {time}")]
    MaxEventsExceeded {
        limit: u64,
        time: f64,
        partial: Box<Trajectory>,
    },
    #[error("channel rate overflow at state {0:?}")]
    RateOverflow(PopulationState),
    #[error(transparent)]
    Event(#[from] EventError),
}

impl From<crate::model::RateOverflow> for SsaError {
    fn from(e: crate::model::RateOverflow) -> Self {
        SsaError::RateOverflow(e.0)
    }
}

/// Exact simulation on the config's stream 0.
pub fn simulate_exact(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
) -> Result<Trajectory, SsaError> {
    simulate_exact_replica(params, initial, config, 0)
}

/// Exact simulation of replica `replica` (stream derived from `(seed, replica)`).
pub fn simulate_exact_replica(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    replica: u64,
) -> Result<Trajectory, SsaError> {
    let mut rng = replica_rng(config.seed, replica);
    simulate_exact_with(params, initial, config, &mut rng)
}

pub fn simulate_exact_with(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    rng: &mut SimRng,
) -> Result<Trajectory, SsaError> {
    let mut engine = Engine::new(params, initial, config);
    while engine.exact_step(rng)? {}
    engine.finish()
}

pub fn simulate_tau_leap(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    leap: LeapConfig,
) -> Result<Trajectory, SsaError> {
    simulate_tau_leap_replica(params, initial, config, leap, 0)
}

pub fn simulate_tau_leap_replica(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    leap: LeapConfig,
    replica: u64,
) -> Result<Trajectory, SsaError> {
    let mut rng = replica_rng(config.seed, replica);
    simulate_tau_leap_with(params, initial, config, leap, &mut rng)
}

pub fn simulate_tau_leap_with(
    params: &ModelParams,
    initial: PopulationState,
    config: &SimulationConfig,
    leap: LeapConfig,
    rng: &mut SimRng,
) -> Result<Trajectory, SsaError> {
    if !(leap.epsilon > 0.0 && leap.epsilon < 1.0) {
        // Callers validate configs; reaching this is a programming error.
        panic!("{}", ConfigError::BadEpsilon(leap.epsilon));
    }
    let mut engine = Engine::new(params, initial, config);
    'outer: loop {
        let rates = engine.rates();
        let total: f64 = rates.iter().sum();
        if total == 0.0 || total < leap.min_rate_for_leap {
            for _ in 0..EXACT_BATCH {
                if !engine.exact_step(rng)? {
                    break 'outer;
                }
            }
            continue;
        }
        let tau = leap_size(&engine.state, &rates, leap.epsilon);
        if total * tau < MIN_EXPECTED_EVENTS_PER_LEAP {
            for _ in 0..EXACT_BATCH {
                if !engine.exact_step(rng)? {
                    break 'outer;
                }
            }
            continue;
        }
        if !engine.leap_step(rng, &rates, tau)? {
            break;
        }
    }
    engine.finish()
}

/// Leap length bounding the expected relative change and spread of every
/// compartment by `epsilon` (first-order channels, so `g_i = 1`).
fn leap_size(state: &PopulationState, r: &[f64; 5], epsilon: f64) -> f64 {
    let drift = [r[0] - r[1], 2.0 * r[1] + r[2] - r[3], 2.0 * r[3] - r[4]];
    let spread = [r[0] + r[1], 4.0 * r[1] + r[2] + r[3], 4.0 * r[3] + r[4]];
    let n = state.as_f64();
    let mut tau = f64::INFINITY;
    for i in 0..3 {
        let bound = (epsilon * n[i]).max(1.0);
        if drift[i] != 0.0 {
            tau = tau.min(bound / drift[i].abs());
        }
        if spread[i] > 0.0 {
            tau = tau.min(bound * bound / spread[i]);
        }
    }
    tau
}

struct Engine<'a> {
    params: &'a ModelParams,
    coef: [f64; 5],
    state: PopulationState,
    initial: PopulationState,
    t: f64,
    horizon: f64,
    grid: &'a [f64],
    grid_abs: Vec<f64>,
    next_grid: usize,
    states: Vec<PopulationState>,
    counts: [u64; 5],
    integrals: [f64; 3],
    events: u64,
    max_events: u64,
    time_scale: TimeScale,
    truncated: bool,
}

impl<'a> Engine<'a> {
    fn new(params: &'a ModelParams, initial: PopulationState, config: &'a SimulationConfig) -> Self {
        let factor = config.time_scale.factor(params);
        let grid_abs: Vec<f64> = config.grid.iter().map(|g| g * factor).collect();
        Self {
            params,
            coef: channel_coefficients(params, &params.derive_rates()),
            state: initial,
            initial,
            t: 0.0,
            horizon: config.horizon * factor,
            grid: &config.grid,
            states: Vec::with_capacity(grid_abs.len()),
            grid_abs,
            next_grid: 0,
            counts: [0; 5],
            integrals: [0.0; 3],
            events: 0,
            max_events: config.max_events,
            time_scale: config.time_scale,
            truncated: false,
        }
    }

    #[inline]
    fn rates(&self) -> [f64; 5] {
        let n = self.state.as_f64();
        let c = &self.coef;
        [c[0] * n[0], c[1] * n[0], c[2] * n[1], c[3] * n[1], c[4] * n[2]]
    }

    /// Integrates the current state up to `t_to` and records grid points `<= t_to`.
    #[inline]
    fn advance(&mut self, t_to: f64) {
        let dt = t_to - self.t;
        let n = self.state.as_f64();
        for (acc, x) in self.integrals.iter_mut().zip(n) {
            *acc += x * dt;
        }
        self.t = t_to;
        self.record_through(t_to);
    }

    #[inline]
    fn record_through(&mut self, t: f64) {
        while self.next_grid < self.grid_abs.len() && self.grid_abs[self.next_grid] <= t {
            self.states.push(self.state);
            self.next_grid += 1;
        }
    }

    /// One direct-method step. Returns `false` once the run is over.
    #[inline]
    fn exact_step(&mut self, rng: &mut SimRng) -> Result<bool, SsaError> {
        if self.truncated {
            return Ok(false);
        }
        let rates = self.rates();
        let total = rates[0] + rates[1] + rates[2] + rates[3] + rates[4];
        if total == 0.0 {
            // absorbed at (0,0,0)
            self.advance(self.horizon);
            return Ok(false);
        }
        if !total.is_finite() {
            return Err(SsaError::RateOverflow(self.state));
        }
        let wait: f64 = Exp1.sample(rng);
        let t_next = self.t + wait / total;
        if t_next >= self.horizon {
            self.advance(self.horizon);
            return Ok(false);
        }
        if self.events >= self.max_events {
            self.truncated = true;
            return Ok(false);
        }
        self.advance(t_next);
        let event = select_channel(&rates, total, rng);
        self.state = apply_event(self.state, event)?;
        self.counts[event.index()] += 1;
        self.events += 1;
        Ok(true)
    }

    /// One Poisson leap of nominal length `tau`, clipped to the next grid
    /// point. Negative outcomes are rejected and the leap halved.
    fn leap_step(&mut self, rng: &mut SimRng, rates: &[f64; 5], tau: f64) -> Result<bool, SsaError> {
        if self.events >= self.max_events {
            self.truncated = true;
            return Ok(false);
        }
        let stop = if self.next_grid < self.grid_abs.len() {
            self.grid_abs[self.next_grid].min(self.horizon)
        } else {
            self.horizon
        };
        let mut tau = tau;
        let mut t_end = self.t + tau;
        if t_end >= stop {
            tau = stop - self.t;
            t_end = stop;
        }
        if tau <= 0.0 {
            self.record_through(self.t);
            if self.t >= self.horizon {
                return Ok(false);
            }
            return Ok(true);
        }
        loop {
            let mut fired = [0u64; 5];
            for (k, &r) in fired.iter_mut().zip(rates) {
                let lambda = r * tau;
                if lambda > 0.0 {
                    let draw: f64 = Poisson::new(lambda)
                        .map_err(|_| SsaError::RateOverflow(self.state))?
                        .sample(rng);
                    *k = draw as u64;
                }
            }
            let mut next = [0i128; 3];
            let base = self.state.as_array();
            for i in 0..3 {
                next[i] = base[i] as i128;
            }
            for (ev, &k) in EventKind::ALL.iter().zip(&fired) {
                for (slot, d) in next.iter_mut().zip(ev.delta()) {
                    *slot += d as i128 * k as i128;
                }
            }
            if next.iter().any(|&x| x < 0) {
                tau *= 0.5;
                t_end = self.t + tau;
                continue;
            }
            if next.iter().any(|&x| x > u64::MAX as i128) {
                return Err(SsaError::RateOverflow(self.state));
            }
            let n = self.state.as_f64();
            for (acc, x) in self.integrals.iter_mut().zip(n) {
                *acc += x * tau;
            }
            for (c, k) in self.counts.iter_mut().zip(fired) {
                *c += k;
            }
            self.events += fired.iter().sum::<u64>();
            self.state = PopulationState::new(next[0] as u64, next[1] as u64, next[2] as u64);
            self.t = t_end;
            self.record_through(self.t);
            return Ok(self.t < self.horizon);
        }
    }

    fn finish(self) -> Result<Trajectory, SsaError> {
        let traj = Trajectory {
            params: *self.params,
            initial: self.initial,
            time_scale: self.time_scale,
            grid: self.grid.to_vec(),
            grid_absolute: self.grid_abs,
            states: self.states,
            counts: self.counts,
            occupation_integrals: self.integrals,
            end_time: self.t,
            final_state: self.state,
            events: self.events,
            truncated: self.truncated,
        };
        if traj.truncated {
            Err(SsaError::MaxEventsExceeded {
                limit: self.max_events,
                time: traj.end_time,
                partial: Box::new(traj),
            })
        } else {
            Ok(traj)
        }
    }
}

#[inline]
fn select_channel(rates: &[f64; 5], total: f64, rng: &mut SimRng) -> EventKind {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_live = 0;
    for (i, &r) in rates.iter().enumerate() {
        if r > 0.0 {
            acc += r;
            last_live = i;
            if target < acc {
                return EventKind::ALL[i];
            }
        }
    }
    // rounding put target at the very top of the cumulative sum
    EventKind::ALL[last_live]
}

/// Counters and compensator integrands of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventAccounting {
    pub counts: [u64; 5],
    pub occupation_integrals: [f64; 3],
    /// `int_0^end rate_c(s) ds` per channel under the trajectory's own parameters.
    pub compensators: [f64; 5],
}

pub fn event_counts(trajectory: &Trajectory) -> EventAccounting {
    event_counts_under(trajectory, &trajectory.params)
}

/// Same as [`event_counts`], with compensators computed under `params`.
pub fn event_counts_under(trajectory: &Trajectory, params: &ModelParams) -> EventAccounting {
    let coef = channel_coefficients(params, &params.derive_rates());
    let mut compensators = [0.0; 5];
    for ev in EventKind::ALL {
        compensators[ev.index()] = coef[ev.index()] * trajectory.occupation_integrals[ev.source()];
    }
    EventAccounting {
        counts: trajectory.counts,
        occupation_integrals: trajectory.occupation_integrals,
        compensators,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params16() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 16.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            SimulationConfig::new(1.0, TimeScale::Unit, vec![0.0, 0.5, 0.5], 1),
            Err(ConfigError::GridNotIncreasing)
        );
        assert_eq!(
            SimulationConfig::new(1.0, TimeScale::Unit, vec![0.0, 2.0], 1),
            Err(ConfigError::GridOutOfRange(2.0))
        );
        assert_eq!(
            SimulationConfig::with_max_events(1.0, TimeScale::Unit, vec![], 1, 0),
            Err(ConfigError::ZeroMaxEvents)
        );
        assert!(SimulationConfig::new(-1.0, TimeScale::Unit, vec![], 1).is_err());
        assert_eq!(uniform_grid(2.0, 5), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn empty_population_is_absorbing() {
        let p = params16();
        let cfg = SimulationConfig::uniform(3.0, 7, TimeScale::Gamma2, 9).unwrap();
        let traj = simulate_exact(&p, PopulationState::ZERO, &cfg).unwrap();
        assert_eq!(traj.events, 0);
        assert!(traj.states.iter().all(|s| s.is_empty()));
        assert_eq!(traj.states.len(), 7);
        assert_eq!(traj.end_time, 3.0 * 4.0);
        assert_eq!(event_counts(&traj).counts, [0; 5]);
        assert_eq!(event_counts(&traj).occupation_integrals, [0.0; 3]);
    }

    #[test]
    fn deterministic_under_seed() {
        let p = params16();
        let cfg = SimulationConfig::uniform(2.0, 11, TimeScale::Unit, 42).unwrap();
        let a = simulate_exact(&p, PopulationState::new(16, 0, 0), &cfg).unwrap();
        let b = simulate_exact(&p, PopulationState::new(16, 0, 0), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_exact_replica(&p, PopulationState::new(16, 0, 0), &cfg, 1).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn bookkeeping_identities() {
        let p = params16();
        let cfg = SimulationConfig::uniform(3.0, 31, TimeScale::Unit, 5).unwrap();
        for r in 0..20 {
            let init = PopulationState::new(16, 3, 2);
            let traj = simulate_exact_replica(&p, init, &cfg, r).unwrap();
            let c = traj.counts;
            assert_eq!(
                c[0] as i128 - c[1] as i128,
                traj.final_state.n1 as i128 - init.n1 as i128
            );
            assert_eq!(
                traj.final_state.total_mass() as i128 - init.total_mass() as i128,
                traj.mass_balance()
            );
            assert_eq!(traj.events, c.iter().sum::<u64>());
            assert_eq!(traj.states[0], init);
            assert_eq!(*traj.states.last().unwrap(), traj.final_state);
            assert!(traj.occupation_integrals.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn integrals_are_monotone_in_horizon() {
        let p = params16();
        let mut prev = [0.0; 3];
        for h in [0.5, 1.0, 2.0, 4.0] {
            let cfg = SimulationConfig::uniform(h, 2, TimeScale::Unit, 77).unwrap();
            let traj = simulate_exact(&p, PopulationState::new(16, 0, 0), &cfg).unwrap();
            for (now, before) in traj.occupation_integrals.iter().zip(prev) {
                assert!(*now >= before);
            }
            prev = traj.occupation_integrals;
        }
    }

    #[test]
    fn pure_death_to_extinction() {
        let p = params16();
        let cfg = SimulationConfig::uniform(1e4, 2, TimeScale::Unit, 3).unwrap();
        let traj = simulate_exact(&p, PopulationState::new(0, 0, 40), &cfg).unwrap();
        assert_eq!(traj.final_state, PopulationState::ZERO);
        assert_eq!(event_counts(&traj).counts, [0, 0, 0, 0, 40]);
    }

    #[test]
    fn max_events_guard_returns_partial() {
        let p = params16();
        let cfg = SimulationConfig::with_max_events(5.0, TimeScale::Unit, uniform_grid(5.0, 6), 1, 10)
            .unwrap();
        match simulate_exact(&p, PopulationState::new(1000, 0, 0), &cfg) {
            Err(SsaError::MaxEventsExceeded { partial, limit, .. }) => {
                assert_eq!(limit, 10);
                assert_eq!(partial.events, 10);
                assert!(partial.truncated);
                assert!(partial.states.len() < 6);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn leap_pure_death_monotone() {
        let p = params16();
        let cfg = SimulationConfig::uniform(200.0, 201, TimeScale::Unit, 8).unwrap();
        let leap = LeapConfig {
            epsilon: 0.05,
            min_rate_for_leap: 10.0,
        };
        let traj = simulate_tau_leap(&p, PopulationState::new(0, 0, 100_000), &cfg, leap).unwrap();
        assert!(traj.states.windows(2).all(|w| w[1].n3 <= w[0].n3));
        assert!(traj.states.iter().all(|s| s.n1 == 0 && s.n2 == 0));
        assert_eq!(traj.counts[4], 100_000 - traj.final_state.n3);
        assert_eq!(traj.states.len(), 201);
    }

    #[test]
    fn leap_size_shrinks_with_epsilon() {
        let s = PopulationState::new(1000, 5000, 2000);
        let r = [500.0, 500.0, 2000.0, 3000.0, 100.0];
        let big = leap_size(&s, &r, 0.1);
        let small = leap_size(&s, &r, 1e-6);
        assert!(small < big);
        let total: f64 = r.iter().sum();
        assert!(total * small < MIN_EXPECTED_EVENTS_PER_LEAP);
    }
}
