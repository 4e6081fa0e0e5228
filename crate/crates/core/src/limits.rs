//! Closed-form mean dynamics, deterministic limit curves and path rescaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;
use crate::ssa::{TimeScale, Trajectory};

/// Relative tolerance on `tau2 K^(gamma3-gamma2) - tau3` below which the
/// closed form for `E[N3]` is singular.
pub const RESONANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error("resonant parameters: tau2 K^(gamma3-gamma2) - tau3 = {gap} (closed form for E[N3] is singular)")]
    ResonantParameters { gap: f64 },
    #[error("initial means must be finite and non-negative")]
    NegativeMeans,
    #[error("trajectory sampled on {found:?} time scale cannot be rescaled as {wanted:?}")]
    ScaleMismatch { wanted: ScaleKind, found: TimeScale },
}

/// Expectations `t -> E[N(t)]` started from given initial means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCurve {
    m: [f64; 3],
    /// `E[N2]` equilibrium, `(tau1 m1 / tau2) K^gamma2`.
    n2_star: f64,
    /// `E[N3]` equilibrium, `(2 p2D tau1 / tau3) m1 K^(gamma2+gamma3)`.
    n3_star: f64,
    rate2: f64,
    rate3: f64,
    /// Weight of `exp(-rate2 t)` in `E[N3]/K^(1+gamma2+gamma3)`, with its sign flipped.
    pub beta_k: f64,
    scale3: f64,
}

impl MeanCurve {
    pub fn new(params: &ModelParams, initial_means: [f64; 3]) -> Result<Self, LimitError> {
        if initial_means.iter().any(|&m| !(m.is_finite() && m >= 0.0)) {
            return Err(LimitError::NegativeMeans);
        }
        let r = params.derive_rates();
        let (t1, t2, t3) = (params.tau1(), params.tau2(), params.tau3());
        let k = params.k_f64();
        let gap = t2 * r.k_gamma3 / r.k_gamma2 - t3;
        if gap.abs() < RESONANCE_TOLERANCE * t3 {
            return Err(LimitError::ResonantParameters { gap });
        }
        let [m1, m2, _] = initial_means;
        let scale2 = k * r.k_gamma2;
        let scale3 = scale2 * r.k_gamma3;
        let beta_k = 2.0 * r.p2d * t2 * (m2 / scale2 - t1 / t2 * m1 / k) / gap;
        Ok(Self {
            m: initial_means,
            n2_star: t1 * m1 / t2 * r.k_gamma2,
            n3_star: 2.0 * r.p2d * t1 / t3 * m1 / k * scale3,
            rate2: t2 / r.k_gamma2,
            rate3: t3 / r.k_gamma3,
            beta_k,
            scale3,
        })
    }

    /// Expected counts at engine time `t`.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        if t == 0.0 {
            return self.m;
        }
        let e2 = (-self.rate2 * t).exp();
        let e3 = (-self.rate3 * t).exp();
        let n2 = self.n2_star + (self.m[1] - self.n2_star) * e2;
        let level3 = self.n3_star / self.scale3;
        let n3_scaled =
            level3 - self.beta_k * e2 + (self.m[2] / self.scale3 - level3 + self.beta_k) * e3;
        [self.m[0], n2, n3_scaled * self.scale3]
    }

    pub fn equilibrium(&self) -> [f64; 3] {
        [self.m[0], self.n2_star, self.n3_star]
    }
}

pub fn mean_system(
    params: &ModelParams,
    initial_means: [f64; 3],
    t: f64,
) -> Result<[f64; 3], LimitError> {
    Ok(MeanCurve::new(params, initial_means)?.eval(t))
}

/// Which third component to use for the order-`K` limit on the unit time scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThirdComponentForm {
    /// `(tau1 tau2 / 2) t^2`, the solution of the mean equations.
    #[default]
    MeanOde,
    /// `(tau2 / 2) t^2`, as the limit is usually printed.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitXVariant {
    /// Sizes on their own scales: frozen at `(x1, 0, 0)`.
    OwnScales,
    /// Every compartment over `K`.
    AllOverK(ThirdComponentForm),
}

pub fn limit_x(params: &ModelParams, x1: f64, t: f64, variant: LimitXVariant) -> [f64; 3] {
    match variant {
        LimitXVariant::OwnScales => [x1, 0.0, 0.0],
        LimitXVariant::AllOverK(form) => {
            let (t1, t2) = (params.tau1(), params.tau2());
            let third = match form {
                ThirdComponentForm::MeanOde => 0.5 * t1 * t2 * t * t,
                ThirdComponentForm::Printed => 0.5 * t2 * t * t,
            };
            [x1, x1 * t1 * t, x1 * third]
        }
    }
}

/// Deterministic limit on the `K^gamma2` time scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitCurveY {
    pub x1: f64,
    pub x2: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Third component, which stays frozen at its initial value on this scale.
    pub x3: Option<f64>,
}

impl LimitCurveY {
    pub fn new(x1: f64, x2: f64, tau1: f64, tau2: f64) -> Self {
        Self {
            x1,
            x2,
            tau1,
            tau2,
            x3: None,
        }
    }

    pub fn with_x3(mut self, x3: f64) -> Self {
        self.x3 = Some(x3);
        self
    }

    pub fn y2_star(&self) -> f64 {
        self.tau1 * self.x1 / self.tau2
    }

    pub fn eval(&self, t: f64) -> [f64; 2] {
        limit_y(self.x1, self.x2, self.tau1, self.tau2, t)
    }
}

pub fn limit_y(x1: f64, x2: f64, tau1: f64, tau2: f64, t: f64) -> [f64; 2] {
    let star = tau1 * x1 / tau2;
    [x1, x2 * (-tau2 * t).exp() - star * (-tau2 * t).exp_m1()]
}

/// Deterministic limit on the `K^gamma3` time scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitCurveZ {
    pub x1: f64,
    pub x3: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl LimitCurveZ {
    pub fn new(x1: f64, x3: f64, tau1: f64, tau2: f64, tau3: f64) -> Self {
        Self {
            x1,
            x3,
            tau1,
            tau2,
            tau3,
        }
    }

    /// Point mass of the averaged second component.
    pub fn z2_star(&self) -> f64 {
        self.tau1 * self.x1 / self.tau2
    }

    pub fn eval(&self, t: f64) -> [f64; 2] {
        limit_z(self.x1, self.x3, self.tau1, self.tau2, self.tau3, t)
    }
}

pub fn limit_z(x1: f64, x3: f64, tau1: f64, tau2: f64, tau3: f64, t: f64) -> [f64; 2] {
    let z2_star = tau1 * x1 / tau2;
    let level = tau2 / tau3 * z2_star;
    [x1, x3 * (-tau3 * t).exp() - level * (-tau3 * t).exp_m1()]
}

/// A curve that ensemble statistics can be compared against, per component.
/// `None` means the component has no pathwise limit on that scale.
pub trait LimitCurve {
    fn components(&self, t: f64) -> [Option<f64>; 3];
    /// The rescaling the curve is a limit of.
    fn scale(&self) -> ScaleKind;
}

impl LimitCurve for LimitCurveY {
    fn scale(&self) -> ScaleKind {
        ScaleKind::Y
    }

    fn components(&self, t: f64) -> [Option<f64>; 3] {
        let [y1, y2] = self.eval(t);
        [Some(y1), Some(y2), self.x3]
    }
}

impl LimitCurve for LimitCurveZ {
    fn scale(&self) -> ScaleKind {
        ScaleKind::Z
    }

    fn components(&self, t: f64) -> [Option<f64>; 3] {
        let [z1, z3] = self.eval(t);
        [Some(z1), None, Some(z3)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    /// `X^K`: own size scales, unit time.
    X,
    /// `Y^K`: own size scales, time `t K^gamma2`.
    Y,
    /// `Z^K`: own size scales, time `t K^gamma3`.
    Z,
    /// Every compartment over `K`, unit time.
    AllOverK,
}

impl ScaleKind {
    pub fn time_scale(self) -> TimeScale {
        match self {
            ScaleKind::X | ScaleKind::AllOverK => TimeScale::Unit,
            ScaleKind::Y => TimeScale::Gamma2,
            ScaleKind::Z => TimeScale::Gamma3,
        }
    }

    /// The own-scale kind matching a time scale.
    pub fn for_time_scale(ts: TimeScale) -> Self {
        match ts {
            TimeScale::Unit => ScaleKind::X,
            TimeScale::Gamma2 => ScaleKind::Y,
            TimeScale::Gamma3 => ScaleKind::Z,
        }
    }

    pub fn divisors(self, params: &ModelParams) -> [f64; 3] {
        match self {
            ScaleKind::AllOverK => [params.k_f64(); 3],
            _ => params.size_scales(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescaledPath {
    pub kind: ScaleKind,
    /// Grid in rescaled time.
    pub grid: Vec<f64>,
    pub values: Vec<[f64; 3]>,
    pub divisors: [f64; 3],
}

impl RescaledPath {
    pub fn component(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |v| v[i])
    }

    /// Multiplies back to counts. Exact up to one rounding of each division.
    pub fn unrescale(&self) -> Vec<[f64; 3]> {
        self.values
            .iter()
            .map(|v| [v[0] * self.divisors[0], v[1] * self.divisors[1], v[2] * self.divisors[2]])
            .collect()
    }
}

pub fn rescale(trajectory: &Trajectory, kind: ScaleKind) -> Result<RescaledPath, LimitError> {
    if kind.time_scale() != trajectory.time_scale {
        return Err(LimitError::ScaleMismatch {
            wanted: kind,
            found: trajectory.time_scale,
        });
    }
    let d = kind.divisors(&trajectory.params);
    let values = trajectory
        .states
        .iter()
        .map(|s| {
            let n = s.as_f64();
            [n[0] / d[0], n[1] / d[1], n[2] / d[2]]
        })
        .collect();
    Ok(RescaledPath {
        kind,
        grid: trajectory.grid[..trajectory.states.len()].to_vec(),
        values,
        divisors: d,
    })
}
