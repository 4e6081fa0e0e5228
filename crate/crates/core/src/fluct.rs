//! Limit fluctuation processes and the second-order expansions of `N2`, `N3`.
//!
//! `U` and `V` solve two-dimensional linear SDEs of the same shape,
//!
//! ```text
//! d(first)  = sqrt(tau1 x1) dB
//! d(second) = (tau1 first - tau second) dt
//! ```
//!
//! with `tau = tau2` for `U` and `tau = tau3` for `V`. Both are sampled either
//! exactly (Gaussian transition between grid points) or by Euler–Maruyama.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limits::{LimitCurveY, LimitCurveZ};
use crate::model::ModelParams;
use crate::rng::{noise_rng, NoiseSource, SimRng};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluctError {
    #[error("grid must start at 0 and be strictly increasing")]
    BadGrid,
    #[error("step dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("x1 must be non-negative, got {0}")]
    NegativeX1(f64),
    #[error("drift matrix must be lower triangular")]
    NotLowerTriangular,
    #[error("time {0} lies outside the sampled path")]
    OutsidePath(f64),
    #[error("expansion assumes a path started at 0")]
    NonZeroInitial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    #[default]
    ExactGaussian,
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W2Mode {
    /// `sqrt(tau2 y2(t)) B2(t)` pointwise.
    #[default]
    Literal,
    /// Continuous martingale with bracket `int_0^t tau2 y2(s) ds`.
    TimeChanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    dt: f64,
    pub mode: SamplerMode,
    pub seed: u64,
    /// Replica index; noises of replica `r` come from streams derived from `(seed, r)`.
    pub replica: u64,
}

impl SdeConfig {
    pub fn new(dt: f64, mode: SamplerMode, seed: u64) -> Result<Self, FluctError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(FluctError::BadDt(dt));
        }
        Ok(Self {
            dt,
            mode,
            seed,
            replica: 0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn replica(mut self, replica: u64) -> Self {
        self.replica = replica;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SdeKind {
    U,
    W2(W2Mode),
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdePath {
    pub kind: SdeKind,
    pub mode: SamplerMode,
    pub grid: Vec<f64>,
    /// `components[c][i]` is component `c` at `grid[i]`.
    pub components: Vec<Vec<f64>>,
    /// Increments of the driving standard Brownian motion over each grid interval.
    pub brownian_increments: Vec<f64>,
}

impl SdePath {
    /// A path that is identically zero, e.g. the noise-free limit.
    pub fn zeros(kind: SdeKind, grid: Vec<f64>) -> Self {
        let n = grid.len();
        let comps = if matches!(kind, SdeKind::W2(_)) { 1 } else { 2 };
        Self {
            kind,
            mode: SamplerMode::ExactGaussian,
            components: vec![vec![0.0; n]; comps],
            brownian_increments: vec![0.0; n.saturating_sub(1)],
            grid,
        }
    }

    /// The driving Brownian motion on the grid, starting at 0.
    pub fn brownian_path(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len());
        out.push(0.0);
        let mut acc = 0.0;
        for d in &self.brownian_increments {
            acc += d;
            out.push(acc);
        }
        out
    }

    /// Linear interpolation of component `c` at time `t`.
    pub fn value_at(&self, c: usize, t: f64) -> Result<f64, FluctError> {
        let g = &self.grid;
        let last = *g.last().ok_or(FluctError::OutsidePath(t))?;
        if !(t >= g[0] && t <= last) {
            return Err(FluctError::OutsidePath(t));
        }
        let i = g.partition_point(|&x| x <= t);
        if i == g.len() {
            return Ok(self.components[c][g.len() - 1]);
        }
        let (t0, t1) = (g[i - 1], g[i]);
        let (v0, v1) = (self.components[c][i - 1], self.components[c][i]);
        Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// `dX = A X dt + b dB` with lower-triangular `A` and a single scalar noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearSde2 {
    pub drift: Mat2,
    pub noise: [f64; 2],
}

impl LinearSde2 {
    pub fn u_system(tau1: f64, tau2: f64, x1: f64) -> Self {
        Self {
            drift: [[0.0, 0.0], [tau1, -tau2]],
            noise: [(tau1 * x1).sqrt(), 0.0],
        }
    }

    pub fn v_system(tau1: f64, tau3: f64, x1: f64) -> Self {
        Self::u_system(tau1, tau3, x1)
    }

    /// `exp(A h)`.
    pub fn flow(&self, h: f64) -> Mat2 {
        let [[a, _], [c, d]] = self.drift;
        let ea = (a * h).exp();
        let ed = (d * h).exp();
        let phi21 = if a == d {
            c * h * ea
        } else {
            c * ea * -((d - a) * h).exp_m1() / (a - d)
        };
        [[ea, 0.0], [phi21, ed]]
    }
}

/// `Sigma(t) = int_0^t exp(As) b b^T exp(As)^T ds`, the solution of
/// `Sigma' = A Sigma + Sigma A^T + b b^T` from zero, for lower-triangular `A`.
///
/// Closed form via exponential moments. When the diagonal rates nearly
/// coincide (`|a - d| t < 0.1`, but not equal) the closed form cancels badly,
/// and the same integral is evaluated by Gauss–Legendre quadrature instead.
pub fn analytic_linear_covariance(drift: Mat2, noise: [f64; 2], t: f64) -> Result<Mat2, FluctError> {
    if drift[0][1] != 0.0 {
        return Err(FluctError::NotLowerTriangular);
    }
    let [[a, _], [c, d]] = drift;
    let [b1, b2] = noise;
    if a != d && ((a - d) * t).abs() < 0.1 {
        return Ok(quadrature_covariance(drift, noise, t));
    }
    // v(s) = exp(As) b as sums of coef * s^power * exp(rate s)
    let v1 = vec![Term { coef: b1, power: 0, rate: a }];
    let v2 = if a == d {
        vec![
            Term { coef: b1 * c, power: 1, rate: a },
            Term { coef: b2, power: 0, rate: d },
        ]
    } else {
        let w = b1 * c / (a - d);
        vec![
            Term { coef: w, power: 0, rate: a },
            Term { coef: b2 - w, power: 0, rate: d },
        ]
    };
    let s11 = integrate_product(&v1, &v1, t);
    let s12 = integrate_product(&v1, &v2, t);
    let s22 = integrate_product(&v2, &v2, t);
    Ok([[s11, s12], [s12, s22]])
}

fn quadrature_covariance(drift: Mat2, noise: [f64; 2], t: f64) -> Mat2 {
    let sys = LinearSde2 { drift, noise };
    let max_rate = drift[0][0].abs().max(drift[1][1].abs());
    let panels = (2.0 * max_rate * t).ceil().max(1.0) as usize;
    let h = t / panels as f64;
    let (nodes, weights) = gauss_legendre(20);
    let mut acc = [[0.0; 2]; 2];
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(&weights) {
            let v = mat_vec(&sys.flow(mid + 0.5 * h * x), noise);
            let wt = 0.5 * h * w;
            acc[0][0] += wt * v[0] * v[0];
            acc[0][1] += wt * v[0] * v[1];
            acc[1][1] += wt * v[1] * v[1];
        }
    }
    acc[1][0] = acc[0][1];
    acc
}

/// Nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

#[derive(Debug, Clone, Copy)]
struct Term {
    coef: f64,
    power: u32,
    rate: f64,
}

fn integrate_product(x: &[Term], y: &[Term], t: f64) -> f64 {
    let mut acc = 0.0;
    for p in x {
        for q in y {
            if p.coef == 0.0 || q.coef == 0.0 {
                continue;
            }
            acc += p.coef * q.coef * moment_integral(p.power + q.power, p.rate + q.rate, t);
        }
    }
    acc
}

/// `int_0^t s^m e^(lambda s) ds` for small `m`.
fn moment_integral(m: u32, lambda: f64, t: f64) -> f64 {
    if (lambda * t).abs() < 1e-3 {
        // sum_j lambda^j t^(m+j+1) / (j! (m+j+1))
        let mut term = t.powi(m as i32 + 1);
        let mut acc = 0.0;
        for j in 0..12 {
            acc += term / (m + j + 1) as f64;
            term *= lambda * t / (j + 1) as f64;
        }
        return acc;
    }
    let e = (lambda * t).exp();
    let mut prev = (lambda * t).exp_m1() / lambda;
    for k in 1..=m {
        prev = (t.powi(k as i32) * e - k as f64 * prev) / lambda;
    }
    prev
}

fn mat_mul(x: &Mat2, y: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
        }
    }
    out
}

fn transpose(x: &Mat2) -> Mat2 {
    [[x[0][0], x[1][0]], [x[0][1], x[1][1]]]
}

fn mat_vec(x: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [x[0][0] * v[0] + x[0][1] * v[1], x[1][0] * v[0] + x[1][1] * v[1]]
}

/// Lower Cholesky factor of a 2x2 covariance, tolerating singular blocks.
fn cholesky2(s: &Mat2) -> Mat2 {
    let l11 = s[0][0].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { s[1][0] / l11 } else { 0.0 };
    let l22 = (s[1][1] - l21 * l21).max(0.0).sqrt();
    [[l11, 0.0], [l21, l22]]
}

fn check_grid(grid: &[f64]) -> Result<(), FluctError> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(FluctError::BadGrid);
    }
    Ok(())
}

fn substeps(interval: f64, dt: f64) -> usize {
    ((interval / dt) - 1e-9).ceil().max(1.0) as usize
}

/// Mean and covariance at the last grid point of the law the sampler draws
/// from, propagated exactly through its step recursion.
pub fn transition_moments(
    system: &LinearSde2,
    x0: [f64; 2],
    grid: &[f64],
    mode: SamplerMode,
    dt: f64,
) -> Result<([f64; 2], Mat2), FluctError> {
    check_grid(grid)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(FluctError::BadDt(dt));
    }
    let mut mean = x0;
    let mut cov = [[0.0; 2]; 2];
    let bbt = [
        [system.noise[0] * system.noise[0], system.noise[0] * system.noise[1]],
        [system.noise[1] * system.noise[0], system.noise[1] * system.noise[1]],
    ];
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        match mode {
            SamplerMode::ExactGaussian => {
                let phi = system.flow(h);
                let q = analytic_linear_covariance(system.drift, system.noise, h)?;
                mean = mat_vec(&phi, mean);
                let prop = mat_mul(&mat_mul(&phi, &cov), &transpose(&phi));
                cov = add(prop, q);
            }
            SamplerMode::EulerMaruyama => {
                let n = substeps(h, dt);
                let hs = h / n as f64;
                let m = em_matrix(system, hs);
                for _ in 0..n {
                    mean = mat_vec(&m, mean);
                    let prop = mat_mul(&mat_mul(&m, &cov), &transpose(&m));
                    cov = add(prop, scale(bbt, hs));
                }
            }
        }
    }
    Ok((mean, cov))
}

fn add(x: Mat2, y: Mat2) -> Mat2 {
    [[x[0][0] + y[0][0], x[0][1] + y[0][1]], [x[1][0] + y[1][0], x[1][1] + y[1][1]]]
}

fn scale(x: Mat2, s: f64) -> Mat2 {
    [[x[0][0] * s, x[0][1] * s], [x[1][0] * s, x[1][1] * s]]
}

fn em_matrix(system: &LinearSde2, h: f64) -> Mat2 {
    let a = system.drift;
    [[1.0 + a[0][0] * h, a[0][1] * h], [a[1][0] * h, 1.0 + a[1][1] * h]]
}

fn sample_linear(
    system: &LinearSde2,
    x0: [f64; 2],
    grid: &[f64],
    config: &SdeConfig,
    rng: &mut SimRng,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), FluctError> {
    check_grid(grid)?;
    let mut comps = vec![Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
    let mut increments = Vec::with_capacity(grid.len().saturating_sub(1));
    let mut x = x0;
    comps[0].push(x[0]);
    comps[1].push(x[1]);
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        let db = match config.mode {
            SamplerMode::ExactGaussian => {
                let phi = system.flow(h);
                let l = cholesky2(&analytic_linear_covariance(system.drift, system.noise, h)?);
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                let m = mat_vec(&phi, x);
                x = [m[0] + l[0][0] * z1, m[1] + l[1][0] * z1 + l[1][1] * z2];
                h.sqrt() * z1
            }
            SamplerMode::EulerMaruyama => {
                let n = substeps(h, config.dt);
                let hs = h / n as f64;
                let a = system.drift;
                let mut total = 0.0;
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(rng);
                    let d = hs.sqrt() * z;
                    x = [
                        x[0] + (a[0][0] * x[0] + a[0][1] * x[1]) * hs + system.noise[0] * d,
                        x[1] + (a[1][0] * x[0] + a[1][1] * x[1]) * hs + system.noise[1] * d,
                    ];
                    total += d;
                }
                total
            }
        };
        comps[0].push(x[0]);
        comps[1].push(x[1]);
        increments.push(db);
    }
    Ok((comps, increments))
}

/// Samples `U = (U1, U2)`: `U1 = U1(0) + sqrt(tau1 x1) B1`, `U2' = tau1 U1 - tau2 U2`.
pub fn simulate_u(
    tau1: f64,
    tau2: f64,
    x1: f64,
    u0: [f64; 2],
    grid: &[f64],
    config: &SdeConfig,
) -> Result<SdePath, FluctError> {
    if !(x1 >= 0.0) {
        return Err(FluctError::NegativeX1(x1));
    }
    let mut rng = noise_rng(config.seed, config.replica, NoiseSource::B1);
    let (components, brownian_increments) =
        sample_linear(&LinearSde2::u_system(tau1, tau2, x1), u0, grid, config, &mut rng)?;
    Ok(SdePath {
        kind: SdeKind::U,
        mode: config.mode,
        grid: grid.to_vec(),
        components,
        brownian_increments,
    })
}

/// Samples `V = (V1, V3)`: `V1 = V1(0) + sqrt(tau1 x1) W1`, `V3' = tau1 V1 - tau3 V3`.
pub fn simulate_v(
    tau1: f64,
    tau3: f64,
    x1: f64,
    v0: [f64; 2],
    grid: &[f64],
    config: &SdeConfig,
) -> Result<SdePath, FluctError> {
    if !(x1 >= 0.0) {
        return Err(FluctError::NegativeX1(x1));
    }
    let mut rng = noise_rng(config.seed, config.replica, NoiseSource::W1);
    let (components, brownian_increments) =
        sample_linear(&LinearSde2::v_system(tau1, tau3, x1), v0, grid, config, &mut rng)?;
    Ok(SdePath {
        kind: SdeKind::V,
        mode: config.mode,
        grid: grid.to_vec(),
        components,
        brownian_increments,
    })
}

/// `int_a^b tau2 y2(s) ds` for `y2` started at `x2`.
fn y2_integral(tau1: f64, tau2: f64, x1: f64, x2: f64, a: f64, b: f64) -> f64 {
    let star = tau1 * x1 / tau2;
    tau2 * star * (b - a) + (x2 - star) * ((-tau2 * a).exp() - (-tau2 * b).exp())
}

/// Samples the third-order term of compartment 2, driven by `B2`.
pub fn simulate_w2(
    tau1: f64,
    tau2: f64,
    x1: f64,
    x2: f64,
    grid: &[f64],
    config: &SdeConfig,
    mode: W2Mode,
) -> Result<SdePath, FluctError> {
    check_grid(grid)?;
    if !(x1 >= 0.0) {
        return Err(FluctError::NegativeX1(x1));
    }
    let mut rng = noise_rng(config.seed, config.replica, NoiseSource::B2);
    let y = LimitCurveY::new(x1, x2, tau1, tau2);
    let mut values = Vec::with_capacity(grid.len());
    let mut increments = Vec::with_capacity(grid.len().saturating_sub(1));
    values.push(0.0);
    let (mut b, mut m) = (0.0_f64, 0.0_f64);
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let db = match (mode, config.mode) {
            (W2Mode::TimeChanged, SamplerMode::EulerMaruyama) => {
                let n = substeps(h, config.dt());
                let hs = h / n as f64;
                let mut total = 0.0;
                for j in 0..n {
                    let s = t0 + j as f64 * hs;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let d = hs.sqrt() * z;
                    m += (tau2 * y.eval(s)[1]).max(0.0).sqrt() * d;
                    total += d;
                }
                total
            }
            _ => {
                let z: f64 = StandardNormal.sample(&mut rng);
                if mode == W2Mode::TimeChanged {
                    m += y2_integral(tau1, tau2, x1, x2, t0, t1).max(0.0).sqrt() * z;
                }
                h.sqrt() * z
            }
        };
        b += db;
        increments.push(db);
        values.push(match mode {
            W2Mode::Literal => (tau2 * y.eval(t1)[1]).max(0.0).sqrt() * b,
            W2Mode::TimeChanged => m,
        });
    }
    Ok(SdePath {
        kind: SdeKind::W2(mode),
        mode: config.mode,
        grid: grid.to_vec(),
        components: vec![values],
        brownian_increments: increments,
    })
}

/// Closed-form variance of the `W2` limit at rescaled time `t`.
pub fn w2_variance(tau1: f64, tau2: f64, x1: f64, x2: f64, t: f64, mode: W2Mode) -> f64 {
    match mode {
        W2Mode::Literal => tau2 * LimitCurveY::new(x1, x2, tau1, tau2).eval(t)[1] * t,
        W2Mode::TimeChanged => y2_integral(tau1, tau2, x1, x2, 0.0, t),
    }
}

/// The three-term prediction for `N2(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct N2Expansion {
    pub total: f64,
    /// `K^(1+gamma2) y2(s)`
    pub deterministic: f64,
    /// `K^((1+3 gamma2)/2) U2(s)`
    pub second_order: f64,
    /// `K^((1+2 gamma2)/2) W2(s)`
    pub third_order: f64,
}

/// Expansion of `N2` at engine time `t`, with `s = t K^-gamma2` read off the
/// `U` and `W2` paths.
pub fn expansion_n2(
    params: &ModelParams,
    y_curve: &LimitCurveY,
    u_path: &SdePath,
    w2_path: &SdePath,
    t: f64,
) -> Result<N2Expansion, FluctError> {
    if u_path.components.iter().any(|c| c.first().is_some_and(|&v| v != 0.0)) {
        return Err(FluctError::NonZeroInitial);
    }
    let r = params.derive_rates();
    let k = params.k_f64();
    let e = params.fluctuation_exponents();
    let s = t / r.k_gamma2;
    let deterministic = k * r.k_gamma2 * y_curve.eval(s)[1];
    let second_order = k.powf(e.second_order_n2) * u_path.value_at(1, s)?;
    let third_order = k.powf(e.third_order_n2) * w2_path.value_at(0, s)?;
    Ok(N2Expansion {
        total: deterministic + second_order + third_order,
        deterministic,
        second_order,
        third_order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct N3Expansion {
    pub total: f64,
    /// `K^(1+gamma2+gamma3) z3(s)`
    pub deterministic: f64,
    /// `K^((1+2 gamma2+3 gamma3)/2) V3(s)`
    pub fluctuation: f64,
}

/// Expansion of `N3` at engine time `t`, with `s = t K^-gamma3`.
pub fn expansion_n3(
    params: &ModelParams,
    z_curve: &LimitCurveZ,
    v_path: &SdePath,
    t: f64,
) -> Result<N3Expansion, FluctError> {
    if v_path.components.iter().any(|c| c.first().is_some_and(|&v| v != 0.0)) {
        return Err(FluctError::NonZeroInitial);
    }
    let r = params.derive_rates();
    let s = t / r.k_gamma3;
    let scales = params.size_scales();
    let deterministic = scales[2] * z_curve.eval(s)[1];
    let fluctuation = params.k_f64().powf(params.fluctuation_exponents().amplified_n3) * v_path.value_at(1, s)?;
    Ok(N3Expansion {
        total: deterministic + fluctuation,
        deterministic,
        fluctuation,
    })
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::ssa::uniform_grid;

    // Frozen references (40-digit quadrature) for tau1 = tau2 = x1 = 1, zero start, t = 1.
    const COV_U1_U2_AT_1: f64 = 0.367_879_441_171_442_321_595_523_8;
    const VAR_U2_AT_1: f64 = 0.168_091_240_724_578_297_244_047_8;

    #[test]
    fn covariance_trivial_cases() {
        let a = [[0.0, 0.0], [1.0, -1.0]];
        assert_eq!(analytic_linear_covariance(a, [0.0, 0.0], 2.0).unwrap(), [[0.0; 2]; 2]);
        let s = analytic_linear_covariance([[0.0; 2]; 2], [1.5, 0.0], 3.0).unwrap();
        assert!((s[0][0] - 1.5 * 1.5 * 3.0).abs() < 1e-14);
        assert_eq!(s[0][1], 0.0);
        assert_eq!(s[1][1], 0.0);
        assert_eq!(
            analytic_linear_covariance([[0.0, 1.0], [0.0, 0.0]], [1.0, 0.0], 1.0),
            Err(FluctError::NotLowerTriangular)
        );
    }

    #[test]
    fn covariance_matches_quadrature_reference() {
        let sys = LinearSde2::u_system(1.0, 1.0, 1.0);
        let s = analytic_linear_covariance(sys.drift, sys.noise, 1.0).unwrap();
        assert!((s[0][0] - 1.0).abs() < 1e-14);
        assert!((s[0][1] - COV_U1_U2_AT_1).abs() < 1e-14);
        assert!((s[1][1] - VAR_U2_AT_1).abs() < 1e-14);
    }

    #[test]
    fn covariance_solves_lyapunov() {
        let drift = [[-0.3, 0.0], [1.7, -2.2]];
        let noise = [0.8, 0.4];
        let h = 1e-5;
        for i in 1..40 {
            let t = i as f64 * 0.1;
            let s = analytic_linear_covariance(drift, noise, t).unwrap();
            let sp = analytic_linear_covariance(drift, noise, t + h).unwrap();
            let sm = analytic_linear_covariance(drift, noise, t - h).unwrap();
            let rhs = add(
                add(mat_mul(&drift, &s), mat_mul(&s, &transpose(&drift))),
                [
                    [noise[0] * noise[0], noise[0] * noise[1]],
                    [noise[0] * noise[1], noise[1] * noise[1]],
                ],
            );
            for r in 0..2 {
                for c in 0..2 {
                    let d = (sp[r][c] - sm[r][c]) / (2.0 * h);
                    assert!((d - rhs[r][c]).abs() < 1e-7, "t={t} ({r},{c}) {d} vs {}", rhs[r][c]);
                }
            }
        }
        // equal diagonal rates take the resonant branch
        let s = analytic_linear_covariance([[-1.0, 0.0], [1.0, -1.0]], [1.0, 0.0], 2.0).unwrap();
        let close = analytic_linear_covariance([[-1.0, 0.0], [1.0, -1.0 - 1e-7]], [1.0, 0.0], 2.0).unwrap();
        assert!((s[1][1] - close[1][1]).abs() < 1e-6);
        // quadrature branch agrees with the closed form where both are accurate
        let drift = [[-1.0, 0.0], [0.7, -1.05]];
        let q = quadrature_covariance(drift, [0.9, 0.3], 1.5);
        let mut shifted = drift;
        shifted[1][1] = -1.5;
        let far_q = quadrature_covariance(shifted, [0.9, 0.3], 1.5);
        let far_c = analytic_linear_covariance(shifted, [0.9, 0.3], 1.5).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((far_q[r][c] - far_c[r][c]).abs() < 1e-14);
            }
        }
        assert_eq!(analytic_linear_covariance(drift, [0.9, 0.3], 1.5).unwrap(), q);
    }

    #[test]
    fn moment_integral_branches_agree() {
        for m in 0..3 {
            for &lambda in &[-2.0, -1e-4, 0.0, 1e-4, 0.7] {
                let t = 1.3;
                // composite Simpson as reference
                let n = 20_000;
                let h = t / n as f64;
                let f = |s: f64| s.powi(m as i32) * (lambda * s).exp();
                let mut acc = f(0.0) + f(t);
                for i in 1..n {
                    acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                let simpson = acc * h / 3.0;
                assert!((moment_integral(m, lambda, t) - simpson).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_free_u_is_deterministic() {
        let grid = uniform_grid(3.0, 31);
        let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 1).unwrap();
        let (t1, t2, u1, u2) = (1.5, 0.8, 0.4, -0.2);
        let path = simulate_u(t1, t2, 0.0, [u1, u2], &grid, &cfg).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let star = t1 * u1 / t2;
            let expect = star + (u2 - star) * (-t2 * t).exp();
            assert!((path.components[1][i] - expect).abs() < 1e-12);
            assert_eq!(path.components[0][i], u1);
        }
    }

    #[test]
    fn exact_transition_composes_to_analytic() {
        let sys = LinearSde2::u_system(1.0, 1.0, 1.0);
        let grid = uniform_grid(1.0, 101);
        let (mean, cov) = transition_moments(&sys, [0.0, 0.0], &grid, SamplerMode::ExactGaussian, 1.0).unwrap();
        let reference = analytic_linear_covariance(sys.drift, sys.noise, 1.0).unwrap();
        assert_eq!(mean, [0.0, 0.0]);
        for r in 0..2 {
            for c in 0..2 {
                assert!((cov[r][c] - reference[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_law_bias_is_first_order() {
        let sys = LinearSde2::v_system(1.0, 1.0, 1.0);
        let grid = [0.0, 1.0];
        let exact = analytic_linear_covariance(sys.drift, sys.noise, 1.0).unwrap();
        let bias = |dt: f64| {
            let (_, c) = transition_moments(&sys, [0.0, 0.0], &grid, SamplerMode::EulerMaruyama, dt).unwrap();
            (c[1][1] - exact[1][1]).abs()
        };
        let (b2, b3) = (bias(1e-2), bias(1e-3));
        assert!((b2 / b3 - 10.0).abs() < 0.5, "{b2} {b3}");
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn u_sampler_covariance_matches_reference() {
        let grid = uniform_grid(1.0, 11);
        let n = 40_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for r in 0..n {
            let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 11).unwrap().replica(r as u64);
            let p = simulate_u(1.0, 1.0, 1.0, [0.0, 0.0], &grid, &cfg).unwrap();
            a.push(p.components[0][10]);
            b.push(p.components[1][10]);
        }
        let (ma, va) = moments(&a);
        let (mb, vb) = moments(&b);
        let nf = n as f64;
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (nf - 1.0);
        // Var U1(t) = tau1 x1 t
        assert!((va - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!((vb - VAR_U2_AT_1).abs() < 3.0 * VAR_U2_AT_1 * (2.0 / nf).sqrt());
        let se_cov = ((1.0 * VAR_U2_AT_1 + COV_U1_U2_AT_1.powi(2)) / nf).sqrt();
        assert!((cov - COV_U1_U2_AT_1).abs() < 3.0 * se_cov);
    }

    #[test]
    fn v_sampler_mean_and_variance() {
        let grid = uniform_grid(1.0, 5);
        let (v1, v3) = (0.7, -0.4);
        let n = 40_000;
        let mut third = Vec::with_capacity(n);
        let mut third_zero = Vec::with_capacity(n);
        for r in 0..n {
            let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 5).unwrap().replica(r as u64);
            third.push(simulate_v(1.0, 1.0, 1.0, [v1, v3], &grid, &cfg).unwrap().components[1][4]);
            third_zero.push(simulate_v(1.0, 1.0, 1.0, [0.0, 0.0], &grid, &cfg).unwrap().components[1][4]);
        }
        let (m, _) = moments(&third);
        let expect = v1 + (v3 - v1) * (-1.0f64).exp();
        let (_, var0) = moments(&third_zero);
        let se = (VAR_U2_AT_1 / n as f64).sqrt();
        assert!((m - expect).abs() < 3.0 * se);
        assert!((var0 - VAR_U2_AT_1).abs() < 3.0 * VAR_U2_AT_1 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn w2_modes() {
        let grid = uniform_grid(1.0, 11);
        let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 3).unwrap();
        for mode in [W2Mode::Literal, W2Mode::TimeChanged] {
            let p = simulate_w2(1.0, 1.0, 1.0, 0.0, &grid, &cfg, mode).unwrap();
            assert_eq!(p.components[0][0], 0.0);
        }
        let e = (-1.0f64).exp();
        assert!((w2_variance(1.0, 1.0, 1.0, 0.0, 1.0, W2Mode::Literal) - (1.0 - e)).abs() < 1e-15);
        assert!((w2_variance(1.0, 1.0, 1.0, 0.0, 1.0, W2Mode::TimeChanged) - e).abs() < 1e-15);
        // y2 constant: the two laws coincide
        let a = w2_variance(2.0, 1.0, 1.0, 2.0, 0.6, W2Mode::Literal);
        let b = w2_variance(2.0, 1.0, 1.0, 2.0, 0.6, W2Mode::TimeChanged);
        assert!((a - b).abs() < 1e-14 && (a - 2.0 * 0.6).abs() < 1e-14);

        let n = 40_000;
        for (mode, target) in [(W2Mode::Literal, 1.0 - e), (W2Mode::TimeChanged, e)] {
            let xs: Vec<f64> = (0..n)
                .map(|r| {
                    let c = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 9).unwrap().replica(r);
                    simulate_w2(1.0, 1.0, 1.0, 0.0, &grid, &c, mode).unwrap().components[0][10]
                })
                .collect();
            let (_, v) = moments(&xs);
            assert!((v - target).abs() < 3.0 * target * (2.0 / n as f64).sqrt(), "{mode:?} {v}");
        }
    }

    #[test]
    fn linked_noises_are_independent() {
        let grid = uniform_grid(10.0, 10_001);
        let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 77).unwrap();
        let u = simulate_u(1.0, 1.0, 1.0, [0.0, 0.0], &grid, &cfg).unwrap();
        let w = simulate_w2(1.0, 1.0, 1.0, 0.0, &grid, &cfg, W2Mode::Literal).unwrap();
        let a = &u.brownian_increments;
        let b = &w.brownian_increments;
        let n = a.len() as f64;
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn expansion_edge_cases() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 1024.0).unwrap();
        let grid = uniform_grid(2.0, 21);
        let y = LimitCurveY::new(1.0, 0.0, 1.0, 1.0);
        let u0 = SdePath::zeros(SdeKind::U, grid.clone());
        let w0 = SdePath::zeros(SdeKind::W2(W2Mode::Literal), grid.clone());
        let e0 = expansion_n2(&p, &y, &u0, &w0, 0.0).unwrap();
        assert_eq!(e0.total, 0.0);
        let t = 1.0 * p.derive_rates().k_gamma2;
        let e = expansion_n2(&p, &y, &u0, &w0, t).unwrap();
        assert_eq!(e.total, e.deterministic);
        assert!((e.deterministic - 1024.0f64.powf(1.5) * (1.0 - (-1.0f64).exp())).abs() < 1e-9);

        let z = LimitCurveZ::new(1.0, 0.0, 1.0, 1.0, 1.0);
        let v0 = SdePath::zeros(SdeKind::V, grid.clone());
        assert_eq!(expansion_n3(&p, &z, &v0, 0.0).unwrap().total, 0.0);
        assert!(matches!(
            expansion_n3(&p, &z, &v0, 1e9),
            Err(FluctError::OutsidePath(_))
        ));
        let mut bad = v0.clone();
        bad.components[1][0] = 1.0;
        assert_eq!(expansion_n3(&p, &z, &bad, 0.0), Err(FluctError::NonZeroInitial));

        let q = ModelParams::new(1.0, 1.0, 1.0, 0.4, 0.6, 64.0).unwrap();
        assert!((q.fluctuation_exponents().amplified_n3 - 1.8).abs() < 1e-15);
    }

    #[test]
    fn expansion_n2_order_ratio() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 1024.0).unwrap();
        let e = p.fluctuation_exponents();
        let ratio = 1024f64.powf(e.second_order_n2) / 1024f64.powf(1.5);
        assert!((ratio - 1024f64.powf(-0.25)).abs() < 1e-15);
        assert!((ratio - 0.18).abs() < 0.01);
        // path-level: |second/first| at s=1 averages to ratio * E|U2(1)| / y2(1)
        let grid = uniform_grid(1.0, 11);
        let y = LimitCurveY::new(1.0, 0.0, 1.0, 1.0);
        let n = 4000;
        let mut acc = 0.0;
        for r in 0..n {
            let cfg = SdeConfig::new(1e-3, SamplerMode::ExactGaussian, 21).unwrap().replica(r);
            let u = simulate_u(1.0, 1.0, 1.0, [0.0, 0.0], &grid, &cfg).unwrap();
            let w = simulate_w2(1.0, 1.0, 1.0, 0.0, &grid, &cfg, W2Mode::Literal).unwrap();
            let ex = expansion_n2(&p, &y, &u, &w, p.derive_rates().k_gamma2).unwrap();
            acc += (ex.second_order / ex.deterministic).abs();
        }
        let mean_ratio = acc / n as f64;
        let predicted = ratio * (2.0 * VAR_U2_AT_1 / std::f64::consts::PI).sqrt() / (1.0 - (-1.0f64).exp());
        assert!((mean_ratio / predicted - 1.0).abs() < 0.05, "{mean_ratio} vs {predicted}");
    }
}
