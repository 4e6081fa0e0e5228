//! Parameters, derived rates and the jump algebra of the three-compartment process.
//!
//! Compartment 1 (stem cells) is a critical birth-death process. Compartment 2
//! (progenitors) renews with probability `p2R` and differentiates with
//! probability `p2D = 1/2 + K^-gamma2 / 2`. Compartment 3 (mature cells) only dies,
//! at per-capita rate `d3 = tau3 K^-gamma3`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("rate {name} must be strictly positive and finite, got {value}")]
    NonPositiveRate { name: &'static str, value: f64 },
    #[error("exponents must satisfy 0 < gamma2 < gamma3 < 1, got gamma2={gamma2}, gamma3={gamma3}")]
    ExponentOrderViolated { gamma2: f64, gamma3: f64 },
    #[error("scale K must be an integer >= 2, got {0}")]
    ScaleTooSmall(f64),
}

/// Validated model parameters `(tau1, tau2, tau3, gamma2, gamma3, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tau1: f64,
    tau2: f64,
    tau3: f64,
    gamma2: f64,
    gamma3: f64,
    k: u64,
}

impl ModelParams {
    /// Validates the raw tuple. `k` is taken as a real so that fractional or
    /// negative input is reported rather than silently truncated.
    pub fn new(
        tau1: f64,
        tau2: f64,
        tau3: f64,
        gamma2: f64,
        gamma3: f64,
        k: f64,
    ) -> Result<Self, ParamError> {
        Self::build(tau1, tau2, tau3, gamma2, gamma3, k, false)
    }

    /// Same as [`ModelParams::new`] but admits `K = 1`, where `p2R = 0`.
    /// Only meant for tests of the closed forms at the degenerate scale.
    pub fn new_degenerate(
        tau1: f64,
        tau2: f64,
        tau3: f64,
        gamma2: f64,
        gamma3: f64,
        k: f64,
    ) -> Result<Self, ParamError> {
        Self::build(tau1, tau2, tau3, gamma2, gamma3, k, true)
    }

    fn build(
        tau1: f64,
        tau2: f64,
        tau3: f64,
        gamma2: f64,
        gamma3: f64,
        k: f64,
        allow_unit_scale: bool,
    ) -> Result<Self, ParamError> {
        for (name, value) in [("tau1", tau1), ("tau2", tau2), ("tau3", tau3)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ParamError::NonPositiveRate { name, value });
            }
        }
        let ordered = gamma2.is_finite()
            && gamma3.is_finite()
            && 0.0 < gamma2
            && gamma2 < gamma3
            && gamma3 < 1.0;
        if !ordered {
            return Err(ParamError::ExponentOrderViolated { gamma2, gamma3 });
        }
        let min_k = if allow_unit_scale { 1.0 } else { 2.0 };
        if !(k.is_finite() && k.fract() == 0.0 && k >= min_k && k <= u32::MAX as f64) {
            return Err(ParamError::ScaleTooSmall(k));
        }
        let params = Self {
            tau1,
            tau2,
            tau3,
            gamma2,
            gamma3,
            k: k as u64,
        };
        let exps = params.fluctuation_exponents();
        assert!(
            exps.second_order_n2 > exps.third_order_n2 && exps.amplified_n3 > exps.naive_n3,
            "fluctuation exponent ordering broken for valid params"
        );
        Ok(params)
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }
    pub fn tau2(&self) -> f64 {
        self.tau2
    }
    pub fn tau3(&self) -> f64 {
        self.tau3
    }
    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }
    pub fn gamma3(&self) -> f64 {
        self.gamma3
    }
    pub fn k(&self) -> u64 {
        self.k
    }
    pub fn k_f64(&self) -> f64 {
        self.k as f64
    }

    /// Copy with `tau1` replaced. Used by fault-injection fixtures.
    pub fn with_tau1(&self, tau1: f64) -> Result<Self, ParamError> {
        Self::build(
            tau1,
            self.tau2,
            self.tau3,
            self.gamma2,
            self.gamma3,
            self.k as f64,
            self.k == 1,
        )
    }

    pub fn derive_rates(&self) -> DerivedRates {
        DerivedRates::new(self)
    }

    /// Size normalisers `(K, K^(1+gamma2), K^(1+gamma2+gamma3))`.
    pub fn size_scales(&self) -> [f64; 3] {
        let r = self.derive_rates();
        let k = self.k_f64();
        [k, k * r.k_gamma2, k * r.k_gamma2 * r.k_gamma3]
    }

    pub fn fluctuation_exponents(&self) -> FluctuationExponents {
        let (g2, g3) = (self.gamma2, self.gamma3);
        FluctuationExponents {
            second_order_n2: (1.0 + 3.0 * g2) / 2.0,
            third_order_n2: (1.0 + 2.0 * g2) / 2.0,
            amplified_n3: (1.0 + 2.0 * g2 + 3.0 * g3) / 2.0,
            naive_n3: (1.0 + g2 + g3) / 2.0,
        }
    }
}

/// Powers of `K` in front of the fluctuation terms of the N2 and N3 expansions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluctuationExponents {
    /// `(1+3 gamma2)/2`, multiplies `U2`.
    pub second_order_n2: f64,
    /// `(1+2 gamma2)/2`, multiplies the `B2` term.
    pub third_order_n2: f64,
    /// `(1+2 gamma2+3 gamma3)/2`, multiplies `V3`.
    pub amplified_n3: f64,
    /// `(1+gamma2+gamma3)/2`, the central-limit order one would naively expect.
    pub naive_n3: f64,
}

/// Quantities induced by the parameters, computed once per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedRates {
    pub p2r: f64,
    pub p2d: f64,
    pub d3: f64,
    pub k_gamma2: f64,
    pub k_gamma3: f64,
}

impl DerivedRates {
    fn new(params: &ModelParams) -> Self {
        let k = params.k_f64();
        let inv_k_gamma2 = k.powf(-params.gamma2);
        let inv_k_gamma3 = k.powf(-params.gamma3);
        let p2d = 0.5 + 0.5 * inv_k_gamma2;
        Self {
            p2r: 1.0 - p2d,
            p2d,
            d3: params.tau3 * inv_k_gamma3,
            k_gamma2: k.powf(params.gamma2),
            k_gamma3: k.powf(params.gamma3),
        }
    }
}

/// Integer population vector `(N1, N2, N3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PopulationState {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
}

impl PopulationState {
    pub const ZERO: Self = Self { n1: 0, n2: 0, n3: 0 };

    pub const fn new(n1: u64, n2: u64, n3: u64) -> Self {
        Self { n1, n2, n3 }
    }

    /// The default initial condition `(K, 0, 0)`.
    pub fn default_initial(params: &ModelParams) -> Self {
        Self::new(params.k(), 0, 0)
    }

    pub fn as_array(&self) -> [u64; 3] {
        [self.n1, self.n2, self.n3]
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.n1 as f64, self.n2 as f64, self.n3 as f64]
    }

    pub fn total_mass(&self) -> u128 {
        self.n1 as u128 + self.n2 as u128 + self.n3 as u128
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Renewal1,
    Differentiation1,
    Renewal2,
    Differentiation2,
    Death3,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Renewal1,
        EventKind::Differentiation1,
        EventKind::Renewal2,
        EventKind::Differentiation2,
        EventKind::Death3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Renewal1 => "renewal1",
            EventKind::Differentiation1 => "differentiation1",
            EventKind::Renewal2 => "renewal2",
            EventKind::Differentiation2 => "differentiation2",
            EventKind::Death3 => "death3",
        }
    }

    pub const fn delta(self) -> [i64; 3] {
        match self {
            EventKind::Renewal1 => [1, 0, 0],
            EventKind::Differentiation1 => [-1, 2, 0],
            EventKind::Renewal2 => [0, 1, 0],
            EventKind::Differentiation2 => [0, -1, 2],
            EventKind::Death3 => [0, 0, -1],
        }
    }

    /// Index of the compartment whose size drives this channel's rate.
    pub const fn source(self) -> usize {
        match self {
            EventKind::Renewal1 | EventKind::Differentiation1 => 0,
            EventKind::Renewal2 | EventKind::Differentiation2 => 1,
            EventKind::Death3 => 2,
        }
    }

    pub fn is_division(self) -> bool {
        !matches!(self, EventKind::Death3)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EventError {
    #[error("illegal event {event:?} on state {state:?}")]
    IllegalEvent {
        state: PopulationState,
        event: EventKind,
    },
    #[error("population count overflow applying {event:?} to {state:?}")]
    CountOverflow {
        state: PopulationState,
        event: EventKind,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("channel rate overflow at state {0:?}")]
pub struct RateOverflow(pub PopulationState);

/// Per-capita coefficients of the five channels, in [`EventKind::ALL`] order.
/// Channel `c` fires at rate `coefficients[c] * N[source(c)]`.
pub fn channel_coefficients(params: &ModelParams, rates: &DerivedRates) -> [f64; 5] {
    let half_tau1 = 0.5 * params.tau1();
    [
        half_tau1,
        half_tau1,
        params.tau2() * rates.p2r,
        params.tau2() * rates.p2d,
        rates.d3,
    ]
}

pub fn channel_rates(
    state: &PopulationState,
    params: &ModelParams,
    rates: &DerivedRates,
) -> Result<[f64; 5], RateOverflow> {
    let coef = channel_coefficients(params, rates);
    let n = state.as_f64();
    let out = [
        coef[0] * n[0],
        coef[1] * n[0],
        coef[2] * n[1],
        coef[3] * n[1],
        coef[4] * n[2],
    ];
    if out.iter().sum::<f64>().is_finite() {
        Ok(out)
    } else {
        Err(RateOverflow(*state))
    }
}

pub fn apply_event(state: PopulationState, event: EventKind) -> Result<PopulationState, EventError> {
    let mut counts = state.as_array();
    for (slot, d) in counts.iter_mut().zip(event.delta()) {
        let next = if d >= 0 {
            slot.checked_add(d as u64)
                .ok_or(EventError::CountOverflow { state, event })?
        } else {
            slot.checked_sub(d.unsigned_abs())
                .ok_or(EventError::IllegalEvent { state, event })?
        };
        *slot = next;
    }
    Ok(PopulationState::new(counts[0], counts[1], counts[2]))
}

/// Equilibrium levels `(n1*, n2*, n3*)` of the mean dynamics for a given `n1*`.
pub fn equilibrium_orders(params: &ModelParams, n1_star: f64) -> [f64; 3] {
    let r = params.derive_rates();
    let n2 = params.tau1() * n1_star / params.tau2() * r.k_gamma2;
    let n3 = 2.0 * r.p2d * params.tau2() * n2 / params.tau3() * r.k_gamma3;
    [n1_star, n2, n3]
}
