//! Transient law of the chain on a truncated box, by uniformization.
//!
//! With `Lambda` at least the largest exit rate in the box, `P = I + Q/Lambda`
//! is stochastic and `p(t) = sum_n Pois(n; Lambda t) p(0) P^n`. Transitions that
//! leave the box are dropped; the lost mass plus the truncated Poisson tail
//! is the reported leak.

use std::collections::HashMap;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::{channel_coefficients, EventKind, ModelParams, PopulationState};

pub const LEAK_TOLERANCE: f64 = 1e-3;
pub const MAX_ORACLE_STATES: usize = 2_000_000;
const POISSON_TAIL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("truncation leak {0:e} exceeds {LEAK_TOLERANCE:e}")]
    TruncationLeakTooLarge(f64),
    #[error("box has {0} states, more than {MAX_ORACLE_STATES}")]
    TooManyStates(usize),
    #[error("initial state {0:?} lies outside the box")]
    InitialOutsideBox(PopulationState),
    #[error("time must be finite and non-negative, got {0}")]
    BadTime(f64),
}

/// Inclusive upper bounds of the box `[0, n1] x [0, n2] x [0, n3]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleBounds {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
}

impl OracleBounds {
    pub fn new(n1: u64, n2: u64, n3: u64) -> Self {
        Self { n1, n2, n3 }
    }

    pub fn state_count(&self) -> usize {
        ((self.n1 + 1) * (self.n2 + 1) * (self.n3 + 1)) as usize
    }

    pub fn index(&self, s: PopulationState) -> Option<usize> {
        if s.n1 > self.n1 || s.n2 > self.n2 || s.n3 > self.n3 {
            return None;
        }
        Some(((s.n1 * (self.n2 + 1) + s.n2) * (self.n3 + 1) + s.n3) as usize)
    }

    pub fn state(&self, index: usize) -> PopulationState {
        let i = index as u64;
        let n3 = i % (self.n3 + 1);
        let rest = i / (self.n3 + 1);
        PopulationState::new(rest / (self.n2 + 1), rest % (self.n2 + 1), n3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDistribution {
    pub bounds: OracleBounds,
    pub t: f64,
    /// Indexed by [`OracleBounds::index`].
    pub probs: Vec<f64>,
    pub leak: f64,
}

impl OracleDistribution {
    pub fn prob(&self, s: PopulationState) -> f64 {
        self.bounds.index(s).map_or(0.0, |i| self.probs[i])
    }

    pub fn total(&self) -> f64 {
        super::pairwise_sum(&self.probs)
    }

    /// States with positive probability.
    pub fn support(&self) -> impl Iterator<Item = (PopulationState, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (self.bounds.state(i), p))
    }
}

pub fn uniformization_oracle(
    params: &ModelParams,
    initial: PopulationState,
    t: f64,
    bounds: OracleBounds,
) -> Result<OracleDistribution, OracleError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(OracleError::BadTime(t));
    }
    let n = bounds.state_count();
    if n > MAX_ORACLE_STATES {
        return Err(OracleError::TooManyStates(n));
    }
    let start = bounds.index(initial).ok_or(OracleError::InitialOutsideBox(initial))?;

    let coef = channel_coefficients(params, &params.derive_rates());
    // per state: exit rate per channel and its target (usize::MAX = outside)
    let mut rates = vec![[0.0f64; 5]; n];
    let mut targets = vec![[usize::MAX; 5]; n];
    let mut lambda = 0.0f64;
    for i in 0..n {
        let s = bounds.state(i);
        let counts = s.as_array();
        let mut total = 0.0;
        for ev in EventKind::ALL {
            let c = ev.index();
            let r = coef[c] * counts[ev.source()] as f64;
            if r == 0.0 {
                continue;
            }
            rates[i][c] = r;
            total += r;
            let d = ev.delta();
            let next = [
                counts[0] as i64 + d[0],
                counts[1] as i64 + d[1],
                counts[2] as i64 + d[2],
            ];
            targets[i][c] = bounds
                .index(PopulationState::new(next[0] as u64, next[1] as u64, next[2] as u64))
                .unwrap_or(usize::MAX);
        }
        lambda = lambda.max(total);
    }

    let mut probs = vec![0.0; n];
    let mut v = vec![0.0; n];
    v[start] = 1.0;
    let m = lambda * t;
    if m == 0.0 {
        return finish(bounds, t, v);
    }
    let max_terms = (m + 20.0 * m.sqrt() + 50.0) as usize;
    let mut weight_sum = 0.0;
    let mut next = vec![0.0; n];
    for k in 0..=max_terms {
        let w = (-m + k as f64 * m.ln() - ln_gamma(k as f64 + 1.0)).exp();
        weight_sum += w;
        for (p, x) in probs.iter_mut().zip(&v) {
            *p += w * x;
        }
        if k as f64 > m && 1.0 - weight_sum < POISSON_TAIL {
            break;
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let x = v[i];
            if x == 0.0 {
                continue;
            }
            let mut stay = 1.0;
            for c in 0..5 {
                let r = rates[i][c];
                if r == 0.0 {
                    continue;
                }
                let q = r / lambda;
                stay -= q;
                // exits from the box are dropped and show up in the leak
                if targets[i][c] != usize::MAX {
                    next[targets[i][c]] += x * q;
                }
            }
            next[i] += x * stay;
        }
        std::mem::swap(&mut v, &mut next);
    }
    finish(bounds, t, probs)
}

/// The leak is whatever the box does not hold: mass that exited plus the
/// dropped Poisson tail.
fn finish(bounds: OracleBounds, t: f64, probs: Vec<f64>) -> Result<OracleDistribution, OracleError> {
    let leak = (1.0 - super::pairwise_sum(&probs)).max(0.0);
    if leak > LEAK_TOLERANCE {
        return Err(OracleError::TruncationLeakTooLarge(leak));
    }
    Ok(OracleDistribution { bounds, t, probs, leak })
}

/// Total-variation distance between the oracle and the empirical law of
/// `samples`. Mass outside the box and the oracle leak are counted in full,
/// so the value is an upper bound when the leak is nonzero.
pub fn tv_distance(oracle: &OracleDistribution, samples: &[PopulationState]) -> f64 {
    let n = samples.len() as f64;
    let mut counts: HashMap<usize, u64> = HashMap::new();
    let mut outside = 0u64;
    for s in samples {
        match oracle.bounds.index(*s) {
            Some(i) => *counts.entry(i).or_default() += 1,
            None => outside += 1,
        }
    }
    let mut diffs: Vec<f64> = oracle
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (counts.get(&i).copied().unwrap_or(0) as f64 / n - p).abs())
        .collect();
    diffs.push(outside as f64 / n + oracle.leak);
    0.5 * super::pairwise_sum(&diffs)
}

/// Expected TV distance between the oracle law and an exact sampler's
/// empirical law from `n` draws. Each state count is binomial, and
/// `E|X - np|` has the closed form `2 (k+1) C(n, k+1) p^(k+1) (1-p)^(n-k)`
/// with `k = floor(np)`.
pub fn expected_null_tv(oracle: &OracleDistribution, n: u64) -> f64 {
    let nf = n as f64;
    let terms: Vec<f64> = oracle
        .probs
        .iter()
        .map(|&p| {
            if p <= 0.0 || p >= 1.0 {
                return 0.0;
            }
            let k = (nf * p).floor();
            if k + 1.0 > nf {
                return 0.0;
            }
            let ln_choose = ln_gamma(nf + 1.0) - ln_gamma(k + 2.0) - ln_gamma(nf - k);
            let ln_mad = 2f64.ln() + (k + 1.0).ln() + ln_choose + (k + 1.0) * p.ln() + (nf - k) * (-p).ln_1p();
            ln_mad.exp() / nf
        })
        .collect();
    0.5 * super::pairwise_sum(&terms)
}
