use std::path::{Path, PathBuf};
use std::time::Instant;

use hemoscale::analysis::{
    compensator_check, ensemble_stats, expected_null_tv, mean_variance, median, scaling_fit, simulate_replicas,
    tv_distance, uniformization_oracle, v2_sup_norm, EnsembleError, Method, OracleBounds, QUANTILE_LEVELS,
};
use hemoscale::fluct::{
    analytic_linear_covariance, expansion_n2, expansion_n3, simulate_u, simulate_v, simulate_w2, w2_variance,
    LinearSde2, SdeConfig, SdePath,
};
use hemoscale::limits::{
    limit_x, mean_system, rescale, LimitCurveY, LimitCurveZ, LimitXVariant, ScaleKind,
};
use hemoscale::ssa::{
    simulate_exact_replica, simulate_tau_leap_replica, uniform_grid, SimulationConfig, SsaError, TimeScale, Trajectory,
};
use hemoscale::{ModelParams, PopulationState};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{ensure_dir, num, opt, write_json, write_manifest, Table};
use crate::CliError;

/// Files a command wrote, manifest last.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub summary: Value,
}

fn finish(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    files: Vec<PathBuf>,
    summary: Value,
    started: Instant,
) -> Result<CommandOutput, CliError> {
    let manifest = write_manifest(out, command, cfg, &files, summary.clone(), started.elapsed().as_secs_f64())?;
    Ok(CommandOutput {
        files,
        manifest,
        summary,
    })
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ensemble_error(e: EnsembleError) -> CliError {
    match e {
        EnsembleError::TooFewReplicas(_) => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn run_one(
    params: &ModelParams,
    initial: PopulationState,
    sim: &SimulationConfig,
    method: Method,
    replica: u64,
) -> Result<Trajectory, SsaError> {
    match method {
        Method::Exact => simulate_exact_replica(params, initial, sim, replica),
        Method::TauLeap(leap) => simulate_tau_leap_replica(params, initial, sim, leap, replica),
    }
}

const TRAJECTORY_HEADER: [&str; 8] = ["time_rescaled", "time_absolute", "n1", "n2", "n3", "x1", "x2", "x3"];

/// One trajectory per window; window `i` uses replica stream `i`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.block(&cfg.simulate, "simulate")?;
    let params = cfg.params()?;
    let initial = cfg.initial_state(&params);
    let method = block.engine.method()?;
    if block.window.is_empty() {
        return Err(CliError::Config("[simulate] needs at least one window".into()));
    }
    let sims = block
        .window
        .iter()
        .map(|w| w.grid.simulation(cfg.seed, block.engine.max_events()))
        .collect::<Result<Vec<_>, _>>()?;
    ensure_dir(out)?;
    let mut files = Vec::new();
    let mut windows = Vec::new();
    for (i, (w, sim)) in block.window.iter().zip(&sims).enumerate() {
        let traj = run_one(&params, initial, sim, method, i as u64).map_err(runtime)?;
        let path = rescale(&traj, ScaleKind::for_time_scale(w.grid.scale)).map_err(runtime)?;
        let mut table = Table::create(out, &format!("{}.csv", w.name), &TRAJECTORY_HEADER)?;
        for (j, s) in traj.states.iter().enumerate() {
            let x = path.values[j];
            table.row([
                num(traj.grid[j]),
                num(traj.grid_absolute[j]),
                s.n1.to_string(),
                s.n2.to_string(),
                s.n3.to_string(),
                num(x[0]),
                num(x[1]),
                num(x[2]),
            ])?;
        }
        files.push(table.finish()?);
        windows.push(json!({
            "name": w.name,
            "replica_stream": i,
            "events": traj.events,
            "final_state": traj.final_state.as_array(),
            "final_rescaled": path.values.last(),
            "n3_cv_after_burn_in": n3_cv_after_burn_in(&traj),
        }));
    }
    finish(out, "simulate", cfg, files, json!({ "windows": windows }), started)
}

/// Coefficient of variation of `N3` over grid points at rescaled time >= 1.
pub fn n3_cv_after_burn_in(traj: &Trajectory) -> Option<f64> {
    let xs: Vec<f64> = traj
        .grid
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= 1.0)
        .map(|(_, s)| s.n3 as f64)
        .collect();
    if xs.len() < 2 {
        return None;
    }
    let (m, v) = mean_variance(&xs);
    (m > 0.0).then(|| v.sqrt() / m)
}

pub fn cmd_ensemble(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.block(&cfg.ensemble, "ensemble")?;
    let params = cfg.params()?;
    let initial = cfg.initial_state(&params);
    let sim = block.grid.simulation(cfg.seed, block.engine.max_events())?;
    let kind = block.rescale.unwrap_or(ScaleKind::for_time_scale(block.grid.scale));
    if kind.time_scale() != block.grid.scale {
        return Err(CliError::Config(format!(
            "rescale {kind:?} does not match grid scale {:?}",
            block.grid.scale
        )));
    }
    if block.replicas < 2 {
        return Err(CliError::Config("ensemble needs at least 2 replicas".into()));
    }
    let method = block.engine.method()?;
    let trajs = simulate_replicas(&params, initial, &sim, block.replicas, method).map_err(ensemble_error)?;
    let paths = trajs.iter().map(|t| rescale(t, kind)).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
    let stats = ensemble_stats(&paths).map_err(ensemble_error)?;
    ensure_dir(out)?;
    let mut table = Table::create(
        out,
        "ensemble.csv",
        &["time_rescaled", "component", "mean", "variance", "std_error", "q05", "q25", "q50", "q75", "q95"],
    )?;
    for (i, &t) in stats.grid.iter().enumerate() {
        for c in 0..3 {
            let s = stats.summary(c, i);
            let mut row = vec![num(t), (c + 1).to_string(), num(s.mean), num(s.variance), num(s.std_error)];
            row.extend(s.quantiles.iter().map(|&q| num(q)));
            table.row(row)?;
        }
    }
    let files = vec![table.finish()?];
    let events: u64 = trajs.iter().map(|t| t.events).sum();
    let summary = json!({
        "replicas": stats.replicas,
        "rescale": kind,
        "total_events": events,
        "quantile_levels": QUANTILE_LEVELS,
    });
    finish(out, "ensemble", cfg, files, summary, started)
}

pub fn cmd_limits(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.block(&cfg.limits, "limits")?;
    let params = cfg.params()?;
    let initial = cfg.initial_state(&params).as_f64();
    if block.points == 0 || !(block.horizon >= 0.0) {
        return Err(CliError::Config("limits grid needs points >= 1 and horizon >= 0".into()));
    }
    let kind = block.rescale;
    let factor = kind.time_scale().factor(&params);
    let div = kind.divisors(&params);
    let x = [initial[0] / div[0], initial[1] / div[1], initial[2] / div[2]];
    let (t1, t2, t3) = (params.tau1(), params.tau2(), params.tau3());
    let y_curve = LimitCurveY::new(x[0], x[1], t1, t2).with_x3(x[2]);
    let z_curve = LimitCurveZ::new(x[0], x[2], t1, t2, t3);
    ensure_dir(out)?;
    let mut table = Table::create(
        out,
        "limits.csv",
        &["time_rescaled", "time_absolute", "mean1", "mean2", "mean3", "limit1", "limit2", "limit3"],
    )?;
    for t in uniform_grid(block.horizon, block.points) {
        let abs = t * factor;
        let m = mean_system(&params, initial, abs).map_err(|e| CliError::Config(e.to_string()))?;
        let limit: [Option<f64>; 3] = match kind {
            ScaleKind::X => limit_x(&params, x[0], t, LimitXVariant::OwnScales).map(Some),
            ScaleKind::AllOverK => limit_x(&params, x[0], t, LimitXVariant::AllOverK(block.third_component)).map(Some),
            ScaleKind::Y => {
                let [a, b] = y_curve.eval(t);
                [Some(a), Some(b), Some(x[2])]
            }
            ScaleKind::Z => {
                let [a, c] = z_curve.eval(t);
                [Some(a), Some(z_curve.z2_star()), Some(c)]
            }
        };
        table.row([
            num(t),
            num(abs),
            num(m[0] / div[0]),
            num(m[1] / div[1]),
            num(m[2] / div[2]),
            opt(limit[0]),
            opt(limit[1]),
            opt(limit[2]),
        ])?;
    }
    let files = vec![table.finish()?];
    let summary = json!({ "rescale": kind, "divisors": div, "time_factor": factor });
    finish(out, "limits", cfg, files, summary, started)
}

fn path_rows(table: &mut Table, path: &SdePath) -> Result<(), CliError> {
    let b = path.brownian_path();
    for (i, &t) in path.grid.iter().enumerate() {
        let mut row = vec![num(t)];
        row.extend(path.components.iter().map(|c| num(c[i])));
        row.push(num(b[i]));
        table.row(row)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SdeMoments {
    process: &'static str,
    component: &'static str,
    mean: Vec<f64>,
    variance: Vec<f64>,
    reference: Vec<f64>,
}

/// Paths of `U`, `W2`, `V` (replica 0), the expansions built from them, and
/// ensemble moments against the exact Gaussian laws.
pub fn cmd_fluct(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.block(&cfg.fluct, "fluct")?;
    let params = cfg.params()?;
    if block.points < 2 || !(block.horizon > 0.0) {
        return Err(CliError::Config("fluct grid needs points >= 2 and horizon > 0".into()));
    }
    if block.replicas < 2 {
        return Err(CliError::Config("fluct needs at least 2 replicas".into()));
    }
    let grid = uniform_grid(block.horizon, block.points);
    let sde = SdeConfig::new(block.dt, block.mode, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let [x1, x2, x3] = block.limit_start;
    let (t1, t2, t3) = (params.tau1(), params.tau2(), params.tau3());
    let config_err = |e: hemoscale::fluct::FluctError| CliError::Config(e.to_string());
    let sample = |r: u64| -> Result<[SdePath; 3], CliError> {
        let c = sde.replica(r);
        Ok([
            simulate_u(t1, t2, x1, [0.0, 0.0], &grid, &c).map_err(config_err)?,
            simulate_w2(t1, t2, x1, x2, &grid, &c, block.w2_mode).map_err(config_err)?,
            simulate_v(t1, t3, x1, [0.0, 0.0], &grid, &c).map_err(config_err)?,
        ])
    };
    let [u, w2, v] = sample(0)?;
    ensure_dir(out)?;
    let mut files = Vec::new();
    for (name, path, header) in [
        ("u_path.csv", &u, vec!["time", "u1", "u2", "b1"]),
        ("w2_path.csv", &w2, vec!["time", "w2", "b2"]),
        ("v_path.csv", &v, vec!["time", "v1", "v3", "w1"]),
    ] {
        let mut table = Table::create(out, name, &header)?;
        path_rows(&mut table, path)?;
        files.push(table.finish()?);
    }

    let y = LimitCurveY::new(x1, x2, t1, t2);
    let z = LimitCurveZ::new(x1, x3, t1, t2, t3);
    let r = params.derive_rates();
    let mut table = Table::create(
        out,
        "expansion.csv",
        &[
            "time", "time_n2", "n2_total", "n2_deterministic", "n2_second_order", "n2_third_order", "time_n3",
            "n3_total", "n3_deterministic", "n3_fluctuation",
        ],
    )?;
    for &s in &grid {
        let (tn2, tn3) = (s * r.k_gamma2, s * r.k_gamma3);
        let e2 = expansion_n2(&params, &y, &u, &w2, tn2).map_err(runtime)?;
        let e3 = expansion_n3(&params, &z, &v, tn3).map_err(runtime)?;
        table.row([
            num(s),
            num(tn2),
            num(e2.total),
            num(e2.deterministic),
            num(e2.second_order),
            num(e2.third_order),
            num(tn3),
            num(e3.total),
            num(e3.deterministic),
            num(e3.fluctuation),
        ])?;
    }
    files.push(table.finish()?);

    let replicas: Vec<[SdePath; 3]> = (0..block.replicas as u64)
        .into_par_iter()
        .map(sample)
        .collect::<Result<_, _>>()?;
    let u_sys = LinearSde2::u_system(t1, t2, x1);
    let v_sys = LinearSde2::v_system(t1, t3, x1);
    let reference = |sys: &LinearSde2, c: usize, t: f64| analytic_linear_covariance(sys.drift, sys.noise, t).map(|s| s[c][c]);
    let mut moments = Vec::new();
    for (process, p_idx, component, c_idx) in
        [("U", 0, "u1", 0), ("U", 0, "u2", 1), ("W2", 1, "w2", 0), ("V", 2, "v1", 0), ("V", 2, "v3", 1)]
    {
        let mut m = SdeMoments {
            process,
            component,
            mean: Vec::new(),
            variance: Vec::new(),
            reference: Vec::new(),
        };
        for (i, &t) in grid.iter().enumerate() {
            let xs: Vec<f64> = replicas.iter().map(|r| r[p_idx].components[c_idx][i]).collect();
            let (mean, var) = mean_variance(&xs);
            m.mean.push(mean);
            m.variance.push(var);
            m.reference.push(match p_idx {
                0 => reference(&u_sys, c_idx, t).map_err(runtime)?,
                1 => w2_variance(t1, t2, x1, x2, t, block.w2_mode),
                _ => reference(&v_sys, c_idx, t).map_err(runtime)?,
            });
        }
        moments.push(m);
    }
    let mut table = Table::create(
        out,
        "sde_ensemble.csv",
        &["time", "process", "component", "mean", "variance", "reference_variance"],
    )?;
    for m in &moments {
        for (i, &t) in grid.iter().enumerate() {
            table.row([num(t), m.process.into(), m.component.into(), num(m.mean[i]), num(m.variance[i]), num(m.reference[i])])?;
        }
    }
    files.push(table.finish()?);
    let summary = json!({
        "replicas": block.replicas,
        "mode": block.mode,
        "w2_mode": block.w2_mode,
        "dt": block.dt,
        "exponents": params.fluctuation_exponents(),
    });
    finish(out, "fluct", cfg, files, summary, started)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub k: f64,
    pub seed: u64,
    pub replicas: usize,
    pub n3_mean: f64,
    pub n3_std: f64,
    pub v2_sup_median: f64,
    pub events: u64,
}

/// One sweep point: `replicas` runs from `(K, 0, 0)` on the `K^gamma3` scale.
pub fn scaling_point(
    params: &ModelParams,
    time: f64,
    points: usize,
    replicas: usize,
    seed: u64,
    method: Method,
    max_events: u64,
) -> Result<ScalingPoint, CliError> {
    let grid = uniform_grid(time, points.max(2));
    let sim = SimulationConfig::with_max_events(time, TimeScale::Gamma3, grid, seed, max_events)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let trajs = simulate_replicas(params, PopulationState::default_initial(params), &sim, replicas, method)
        .map_err(ensemble_error)?;
    let n3: Vec<f64> = trajs.iter().map(|t| t.states.last().expect("non-empty grid").n3 as f64).collect();
    let (n3_mean, var) = mean_variance(&n3);
    let sups = trajs
        .iter()
        .map(|t| v2_sup_norm(&rescale(t, ScaleKind::Z).map_err(runtime)?, params).map_err(runtime))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScalingPoint {
        k: params.k_f64(),
        seed,
        replicas,
        n3_mean,
        n3_std: var.sqrt(),
        v2_sup_median: median(&sups),
        events: trajs.iter().map(|t| t.events).sum(),
    })
}

/// Sweep over `K`; point `i` uses seed `seed + i`.
pub fn cmd_scaling_study(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.block(&cfg.scaling, "scaling")?;
    if block.replicas < 2 {
        return Err(CliError::Config("scaling needs at least 2 replicas".into()));
    }
    let method = block.engine.method()?;
    let mut points = Vec::new();
    for (i, &k) in block.ks.iter().enumerate() {
        let params = cfg.model.with_k(k).params()?;
        points.push(scaling_point(
            &params,
            block.time,
            block.points,
            block.replicas,
            cfg.seed.wrapping_add(i as u64),
            method,
            block.engine.max_events(),
        )?);
    }
    ensure_dir(out)?;
    let mut table = Table::create(
        out,
        "scaling_points.csv",
        &["k", "seed", "replicas", "n3_mean", "n3_std", "v2_sup_median", "events"],
    )?;
    for p in &points {
        table.row([
            num(p.k),
            p.seed.to_string(),
            p.replicas.to_string(),
            num(p.n3_mean),
            num(p.n3_std),
            num(p.v2_sup_median),
            p.events.to_string(),
        ])?;
    }
    let mut files = vec![table.finish()?];
    let exps = cfg.params()?.fluctuation_exponents();
    let fit = scaling_fit(&points.iter().map(|p| (p.k, p.n3_std)).collect::<Vec<_>>())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report = json!({
        "fit": fit,
        "predicted_exponent": exps.amplified_n3,
        "naive_exponent": exps.naive_n3,
        "predicted_in_ci": fit.ci_contains(exps.amplified_n3),
        "naive_excluded": !fit.ci_contains(exps.naive_n3),
    });
    files.push(write_json(&out.join("scaling_fit.json"), &report)?);
    let summary = json!({ "slope": fit.slope, "slope_ci": fit.slope_ci });
    finish(out, "scaling-study", cfg, files, summary, started)
}

/// Outcome of the bundled engine checks.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub compensator_replicas: usize,
    pub channel_z: [f64; 5],
    pub bracket_z: f64,
    pub compensator_pass: bool,
    pub oracle_replicas: usize,
    pub oracle_leak: f64,
    pub tv_distance: f64,
    pub expected_tv_exact_sampler: f64,
    pub oracle_pass: bool,
}

/// Compensator z-scores at `K = 16` and the `K = 4` uniformization
/// comparison. The distribution check passes when the measured distance is
/// within 25% of what an exact sampler would show at this replica count.
pub fn cmd_validate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let started = Instant::now();
    let block = cfg.validate.clone().unwrap_or_default();
    let p16 = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 16.0).map_err(runtime)?;
    let sim = SimulationConfig::uniform(2.0, 2, TimeScale::Unit, cfg.seed).map_err(runtime)?;
    let trajs = simulate_replicas(&p16, PopulationState::new(16, 0, 0), &sim, block.compensator_replicas, Method::Exact)
        .map_err(ensemble_error)?;
    let comp = compensator_check(&trajs).map_err(|e| CliError::Config(e.to_string()))?;
    drop(trajs);

    let p4 = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.75, 4.0).map_err(runtime)?;
    let init = PopulationState::new(4, 0, 0);
    let oracle = uniformization_oracle(&p4, init, 1.0, OracleBounds::new(30, 60, 110)).map_err(runtime)?;
    let sim = SimulationConfig::new(1.0, TimeScale::Unit, vec![1.0], cfg.seed).map_err(runtime)?;
    let finals: Vec<PopulationState> = simulate_replicas(&p4, init, &sim, block.oracle_replicas, Method::Exact)
        .map_err(ensemble_error)?
        .iter()
        .map(|t| t.states[0])
        .collect();
    let tv = tv_distance(&oracle, &finals);
    let null = expected_null_tv(&oracle, block.oracle_replicas as u64);
    let report = ValidationReport {
        compensator_replicas: block.compensator_replicas,
        channel_z: comp.channel_z,
        bracket_z: comp.bracket_z,
        compensator_pass: comp.passes(4.0),
        oracle_replicas: block.oracle_replicas,
        oracle_leak: oracle.leak,
        tv_distance: tv,
        expected_tv_exact_sampler: null,
        oracle_pass: tv <= 1.25 * null,
    };
    ensure_dir(out)?;
    let files = vec![write_json(&out.join("validate.json"), &report)?];
    let pass = report.compensator_pass && report.oracle_pass;
    let summary = serde_json::to_value(&report).map_err(runtime)?;
    let output = finish(out, "validate", cfg, files, summary, started)?;
    if !pass {
        return Err(CliError::Validation(format!(
            "max |z| = {:.2}, TV = {tv:.4} (exact-sampler expectation {null:.4})",
            comp.max_abs_z()
        )));
    }
    Ok(output)
}
