//! Euler–Maruyama simulation of the delay equation under open-loop and feedback policies.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::CostSpec;
use crate::digest::{self, Digest};
use crate::error::{Error, Result};
use crate::feedback::Selection;
use crate::hjb::ReducedValueFunction;
use crate::lifted::{LiftedVector, Model};
use crate::linalg::expm;
use crate::path::ControlPath;

const RATIO_EPS: f64 = 1e-9;

/// A solved value function together with the selection that turns its gradient into controls.
#[derive(Debug, Clone, Copy)]
pub struct Closure<'a> {
    pub vf: &'a ReducedValueFunction,
    pub sel: &'a Selection,
}

#[derive(Debug, Clone)]
pub enum Policy<'a> {
    Constant(Vec<f64>),
    /// Piecewise-constant control covering `[t0, T)`.
    OpenLoop(ControlPath),
    Feedback(Closure<'a>),
}

impl Policy<'_> {
    fn describe(&self) -> serde_json::Value {
        match self {
            Policy::Constant(u) => serde_json::json!({ "constant": u }),
            Policy::OpenLoop(p) => serde_json::json!({
                "open_loop": { "start": p.start_time(), "step": p.step(), "samples": p.to_samples() }
            }),
            Policy::Feedback(c) => serde_json::json!({
                "feedback": {
                    "model": digest::to_hex(&c.vf.model_hash),
                    "cost": digest::to_hex(&c.vf.cost_hash),
                }
            }),
        }
    }
}

/// Initial head `y0` and control history `u0` on `[t0 - d, t0)`.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub y0: Vec<f64>,
    pub u0: ControlPath,
}

impl InitialState {
    /// Constant history `u0 ≡ u` sampled at `step` up to `t0`.
    pub fn constant(model: &Model, y0: Vec<f64>, u: &[f64], t0: f64, step: f64) -> Result<Self> {
        let u0 = ControlPath::constant(t0 - model.delay(), t0, step, u)?;
        Ok(Self { y0, u0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub t0: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Each increment is the sum of this many sub-increments; runs at `dt` and `dt/2` with
    /// substeps 2 and 1 share Brownian paths.
    pub noise_substeps: usize,
    /// Keep full state and control trajectories (costs are always kept).
    pub record_paths: bool,
}

impl SimConfig {
    pub fn new(dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            t0: 0.0,
            dt,
            n_paths,
            seed,
            noise_substeps: 1,
            record_paths: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n: usize,
    pub m: usize,
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub config_hash: Digest,
    /// Shared time grid `t0, t0 + Δt, …, T`.
    pub times: Vec<f64>,
    /// `states[(p·(steps+1) + i)·n + a]`, empty unless recorded.
    pub states: Vec<f64>,
    /// `controls[(p·steps + i)·m + c]`, empty unless recorded.
    pub controls: Vec<f64>,
    pub terminal: Vec<f64>,
    pub costs: Vec<f64>,
    /// `Σ_i (hcv − hmin)Δt` along each path, when a closure was tracked.
    pub gaps: Option<Vec<f64>>,
    /// Steps whose projected head left the solver box.
    pub extrapolated_steps: usize,
    /// Feedback from a selection that is only measurable.
    pub outside_hypotheses: bool,
}

impl PathBundle {
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + i) * self.n;
        &self.states[o..o + self.n]
    }

    pub fn control(&self, path: usize, i: usize) -> &[f64] {
        let o = (path * self.steps + i) * self.m;
        &self.controls[o..o + self.m]
    }

    pub fn terminal_state(&self, path: usize) -> &[f64] {
        &self.terminal[path * self.n..(path + 1) * self.n]
    }

    /// One CSV per quantity plus `run_meta.txt` holding the hashes, seed and `extra_meta` lines.
    pub fn write_csv(&self, dir: &Path, extra_meta: &[(&str, String)]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tag = digest::to_hex(&self.config_hash);
        let mut meta = std::fs::File::create(dir.join("run_meta.txt"))?;
        for (k, v) in extra_meta {
            writeln!(meta, "{k}: {v}")?;
        }
        writeln!(meta, "run_hash: {tag}")?;
        writeln!(meta, "seed: {}", self.seed)?;
        writeln!(meta, "n_paths: {}", self.n_paths)?;
        writeln!(meta, "steps: {}", self.steps)?;
        writeln!(meta, "extrapolated_steps: {}", self.extrapolated_steps)?;
        writeln!(meta, "outside_hypotheses: {}", self.outside_hypotheses)?;

        let mut costs = csv_file(&dir.join("costs.csv"))?;
        let gap_col = if self.gaps.is_some() { ",gap" } else { "" };
        writeln!(costs, "path,seed,cost{gap_col}")?;
        for p in 0..self.n_paths {
            write!(costs, "{p},{},{}", self.seed, self.costs[p])?;
            if let Some(g) = &self.gaps {
                write!(costs, ",{}", g[p])?;
            }
            writeln!(costs)?;
        }
        costs.flush()?;

        let mut term = csv_file(&dir.join("terminal.csv"))?;
        writeln!(term, "path,{}", columns("y", self.n))?;
        for p in 0..self.n_paths {
            writeln!(term, "{p},{}", join(self.terminal_state(p)))?;
        }
        term.flush()?;

        if !self.states.is_empty() {
            let mut st = csv_file(&dir.join("states.csv"))?;
            writeln!(st, "path,step,time,{}", columns("y", self.n))?;
            for p in 0..self.n_paths {
                for i in 0..=self.steps {
                    writeln!(st, "{p},{i},{},{}", self.times[i], join(self.state(p, i)))?;
                }
            }
            st.flush()?;
            let mut ct = csv_file(&dir.join("controls.csv"))?;
            writeln!(ct, "path,step,time,{}", columns("u", self.m))?;
            for p in 0..self.n_paths {
                for i in 0..self.steps {
                    writeln!(ct, "{p},{i},{},{}", self.times[i], join(self.control(p, i)))?;
                }
            }
            ct.flush()?;
        }
        Ok(())
    }

    /// Compact little-endian dump: magic, version, config hash, seed, sizes, then the arrays.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DPATHS");
        out.push(1);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.n, self.m, self.n_paths, self.steps] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(!self.states.is_empty() as u8);
        out.push(self.gaps.is_some() as u8);
        let arrays: [&[f64]; 5] = [
            &self.times,
            &self.states,
            &self.controls,
            &self.terminal,
            &self.costs,
        ];
        for a in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(g) = &self.gaps {
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn csv_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn columns(prefix: &str, count: usize) -> String {
    (1..=count).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `∫_{-d}^0 b1(ξ) u(t + ξ) dξ` by the trapezoid rule on the delay grid.
pub fn delayed_drift(model: &Model, path: &ControlPath, t: f64) -> Result<DVector<f64>> {
    path.require_window(t - model.delay(), t)?;
    let mut acc = DVector::zeros(model.n());
    for (l, (&xi, &w)) in model.nodes().iter().zip(model.trapezoid()).enumerate() {
        let u = DVector::from_column_slice(path.value_at(t + xi)?);
        acc += &model.b1()[l] * u * w;
    }
    Ok(acc)
}

/// One Euler–Maruyama step `y + (a0 y + b0 u(t) + drift(t))Δt + σ dW`.
pub fn step(model: &Model, y: &DVector<f64>, path: &ControlPath, t: f64, dt: f64, dw: &DVector<f64>) -> Result<DVector<f64>> {
    let u = DVector::from_column_slice(path.value_at(t)?);
    let drift = model.a0() * y + model.b0() * u + delayed_drift(model, path, t)?;
    let next = y + drift * dt + model.sigma() * dw;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("state at t = {}", t + dt)));
    }
    Ok(next)
}

/// Lift `(y, ∫_{-d}^{ξ} b1(ζ) u(ζ + t − ξ) dζ)` from the stored control window.
pub fn lift_current_state(model: &Model, y: &DVector<f64>, path: &ControlPath, t: f64) -> Result<LiftedVector> {
    model.lift(y, path, t)
}

/// Number of `Δt` cells needed to cover one delay.
fn history_cells(model: &Model, dt: f64) -> usize {
    (model.delay() / dt - RATIO_EPS).ceil().max(1.0) as usize
}

/// Ring buffer at step `Δt` holding `u0` on `[t0 − ⌈d/Δt⌉Δt, t0)`, padded with the oldest sample.
pub fn initial_history(model: &Model, u0: &ControlPath, t0: f64, dt: f64) -> Result<ControlPath> {
    if u0.m() != model.m() {
        return Err(Error::DimensionMismatch {
            what: "initial control history",
            expected: model.m(),
            got: u0.m(),
        });
    }
    u0.require_window(t0 - model.delay(), t0)?;
    let cells = history_cells(model, dt);
    let mut ring = ControlPath::with_capacity(t0 - cells as f64 * dt, dt, model.m(), cells + 1)?;
    for j in (1..=cells).rev() {
        let at = (t0 - j as f64 * dt).max(u0.start_time());
        ring.push(u0.value_at(at)?)?;
    }
    Ok(ring)
}

fn check_alignment(model: &Model, dt: f64) -> Result<()> {
    let h = model.grid_step();
    let (big, small) = if h >= dt { (h, dt) } else { (dt, h) };
    let r = big / small;
    if (r - r.round()).abs() > RATIO_EPS * r.max(1.0) {
        return Err(Error::Alignment(format!(
            "simulation step {dt} and delay grid step {h} must have an integer ratio"
        )));
    }
    Ok(())
}

/// Lag (1 = most recent sample) of the ring entry covering `t − x`, before or after the push.
fn lag_for(x: f64, dt: f64, after_push: bool) -> usize {
    let c = (x / dt - RATIO_EPS).ceil().max(0.0) as usize;
    if after_push {
        c + 1
    } else {
        c.max(1)
    }
}

/// Per-step data for the feedback map: `y_proj = E y + Σ_q C_q u_{lag q}` and `G`.
struct FeedbackStep {
    tau: f64,
    exp: DMatrix<f64>,
    /// Blocks `C_q` ordered oldest lag first, each column-major.
    kernel: Vec<f64>,
    head_b: DMatrix<f64>,
}

fn feedback_tables(model: &Model, times: &[f64], horizon: f64, dt: f64) -> Result<Vec<FeedbackStep>> {
    let (n, m) = (model.n(), model.m());
    let lags = history_cells(model, dt);
    // tail of the lift produced by a unit impulse at each lag and control component
    let mut unit_tails: Vec<Vec<LiftedVector>> = Vec::with_capacity(lags);
    let zero = DVector::zeros(n);
    for q in 1..=lags {
        let mut per_c = Vec::with_capacity(m);
        for c in 0..m {
            let samples: Vec<Vec<f64>> = (0..lags)
                .map(|j| {
                    let mut v = vec![0.0; m];
                    if lags - j == q {
                        v[c] = 1.0;
                    }
                    v
                })
                .collect();
            let path = ControlPath::from_samples(-(lags as f64) * dt, dt, &samples)?;
            per_c.push(model.lift(&zero, &path, 0.0)?);
        }
        unit_tails.push(per_c);
    }
    times[..times.len() - 1]
        .iter()
        .map(|&t| {
            let tau = (horizon - t).max(0.0);
            let lag_maps = unit_tails
                .iter()
                .map(|per_c| {
                    let mut c_mat = DMatrix::zeros(n, m);
                    for (c, x) in per_c.iter().enumerate() {
                        c_mat.set_column(c, &model.projected_head(tau, x)?);
                    }
                    Ok(c_mat)
                })
                .collect::<Result<Vec<_>>>()?;
            let kernel = lag_maps.iter().rev().flat_map(|c| c.as_slice().to_vec()).collect();
            Ok(FeedbackStep {
                tau,
                exp: expm(model.a0(), tau),
                kernel,
                head_b: model.head_of_semigroup_b(tau)?,
            })
        })
        .collect()
}

/// `out (+)= M x` for a column-major `M` with `rows` rows.
fn mat_vec(mat: &[f64], rows: usize, x: &[f64], out: &mut [f64], accumulate: bool) {
    if !accumulate {
        out.fill(0.0);
    }
    if rows == 1 {
        out[0] += mat.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        return;
    }
    for (c, &xc) in x.iter().enumerate() {
        for (o, &mv) in out.iter_mut().zip(&mat[c * rows..(c + 1) * rows]) {
            *o += mv * xc;
        }
    }
}

struct PathResult {
    states: Vec<f64>,
    controls: Vec<f64>,
    terminal: Vec<f64>,
    cost: f64,
    gap: f64,
    extrapolated: usize,
}

/// Simulates `n_paths` independent paths; see [`simulate_tracked`] for the Hamiltonian gap.
pub fn simulate(model: &Model, cost: &CostSpec, policy: &Policy, init: &InitialState, cfg: &SimConfig) -> Result<PathBundle> {
    run(model, cost, policy, init, cfg, None)
}

/// As [`simulate`], also accumulating `∫ (hcv(∇^B v; u) − hmin(∇^B v)) ds` along each path
/// with left-endpoint rectangles.
pub fn simulate_tracked(
    model: &Model,
    cost: &CostSpec,
    policy: &Policy,
    init: &InitialState,
    cfg: &SimConfig,
    tracker: Closure,
) -> Result<PathBundle> {
    run(model, cost, policy, init, cfg, Some(tracker))
}

fn check_closure(model: &Model, cost: &CostSpec, c: &Closure) -> Result<()> {
    c.vf.check_model(model)?;
    c.vf.check_cost(cost)?;
    if (c.vf.horizon() - model.horizon()).abs() > 1e-12 {
        return Err(Error::InvalidArgument("value function horizon differs from the model".into()));
    }
    Ok(())
}

fn run(
    model: &Model,
    cost: &CostSpec,
    policy: &Policy,
    init: &InitialState,
    cfg: &SimConfig,
    tracker: Option<Closure>,
) -> Result<PathBundle> {
    let (n, m, k) = (model.n(), model.m(), model.k());
    let horizon = model.horizon();
    let dt = cfg.dt;
    if !(dt > 0.0) || cfg.n_paths == 0 || cfg.noise_substeps == 0 {
        return Err(Error::InvalidArgument("need dt > 0, n_paths >= 1 and noise_substeps >= 1".into()));
    }
    if init.y0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: n,
            got: init.y0.len(),
        });
    }
    check_alignment(model, dt)?;
    let span = (horizon - cfg.t0) / dt;
    if span < 0.5 || (span - span.round()).abs() > RATIO_EPS * span.max(1.0) {
        return Err(Error::Alignment(format!("(T - t0) / dt = {span} is not a positive integer")));
    }
    let steps = span.round() as usize;
    let times: Vec<f64> = (0..=steps).map(|i| cfg.t0 + i as f64 * dt).collect();

    let feedback = match policy {
        Policy::Feedback(c) => Some(*c),
        _ => None,
    };
    for c in feedback.iter().chain(tracker.iter()) {
        check_closure(model, cost, c)?;
    }
    match policy {
        Policy::Constant(u) if u.len() != m => {
            return Err(Error::DimensionMismatch {
                what: "constant control",
                expected: m,
                got: u.len(),
            })
        }
        Policy::OpenLoop(p) => {
            if p.m() != m {
                return Err(Error::DimensionMismatch {
                    what: "open-loop control",
                    expected: m,
                    got: p.m(),
                });
            }
            p.require_window(cfg.t0, horizon)?;
        }
        _ => {}
    }
    let gradient_source = feedback.or(tracker);
    let tables = match gradient_source {
        Some(_) => Some(feedback_tables(model, &times, horizon, dt)?),
        None => None,
    };
    let ring0 = initial_history(model, &init.u0, cfg.t0, dt)?;
    let cells = history_cells(model, dt);
    let hamiltonian = &cost.hamiltonian;
    let sub_scale = (dt / cfg.noise_substeps as f64).sqrt();
    // column-major n×n, n×m and n×k blocks for allocation-free stepping
    let a0 = model.a0().as_slice();
    let b0 = model.b0().as_slice();
    let sigma = model.sigma().as_slice();
    // Σ_l w_l b1(ξ_l) u(t + ξ_l) as blocks over the last `cells + 1` controls, oldest first
    let delay_kernel: Option<Vec<f64>> = (!model.b1_is_zero()).then(|| {
        let mut kern = vec![0.0; (cells + 1) * n * m];
        for (l, (&xi, &w)) in model.nodes().iter().zip(model.trapezoid()).enumerate() {
            let q = lag_for(-xi, dt, true);
            let o = (cells + 1 - q) * n * m;
            for (kv, bv) in kern[o..o + n * m].iter_mut().zip(model.b1()[l].as_slice()) {
                *kv += w * bv;
            }
        }
        kern
    });
    let history0: Vec<f64> = ring0.to_samples().concat();

    let simulate_path = |path_idx: usize| -> Result<PathResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(path_idx as u64);
        let mut history = Vec::with_capacity(history0.len() + steps * m);
        history.extend_from_slice(&history0);
        let mut y = init.y0.clone();
        let mut next = vec![0.0; n];
        let mut y_proj = vec![0.0; n];
        let mut dw = vec![0.0; k];
        let mut states = Vec::with_capacity(if cfg.record_paths { (steps + 1) * n } else { 0 });
        let mut controls = Vec::with_capacity(if cfg.record_paths { steps * m } else { 0 });
        let mut total = 0.0;
        let mut gap = 0.0;
        let mut extrapolated = 0;
        for i in 0..steps {
            let t = times[i];
            if cfg.record_paths {
                states.extend_from_slice(&y);
            }
            let p = match (&tables, gradient_source) {
                (Some(tab), Some(c)) => {
                    let fs = &tab[i];
                    mat_vec(fs.exp.as_slice(), n, &y, &mut y_proj, false);
                    mat_vec(&fs.kernel, n, &history[history.len() - cells * m..], &mut y_proj, true);
                    let (grad, clamped) = c.vf.gradient_at_head(fs.tau, &y_proj);
                    extrapolated += clamped as usize;
                    Some(fs.head_b.transpose() * grad)
                }
                _ => None,
            };
            let u = match policy {
                Policy::Constant(u) => hamiltonian.clamp(u),
                Policy::OpenLoop(path) => hamiltonian.clamp(path.value_at(t)?),
                Policy::Feedback(c) => hamiltonian.clamp(&c.sel.kind.argmin(p.as_ref().expect("gradient").as_slice())),
            };
            if let (Some(p), Some(_)) = (&p, tracker) {
                gap += (hamiltonian.hcv(p.as_slice(), &u) - hamiltonian.hmin(p.as_slice())) * dt;
            }
            total += (cost.running_cost(t, &y) + hamiltonian.ell1(&u)) * dt;
            history.extend_from_slice(&u);
            if cfg.record_paths {
                controls.extend_from_slice(&u);
            }

            for dwa in dw.iter_mut() {
                let mut s = 0.0;
                for _ in 0..cfg.noise_substeps {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s += z * sub_scale;
                }
                *dwa = s;
            }
            // next = a0 y + b0 u + Σ_l w_l b1(ξ_l) u(t + ξ_l), then the Euler update
            mat_vec(a0, n, &y, &mut next, false);
            mat_vec(b0, n, &u, &mut next, true);
            if let Some(kern) = &delay_kernel {
                mat_vec(kern, n, &history[history.len() - (cells + 1) * m..], &mut next, true);
            }
            for (nv, yv) in next.iter_mut().zip(&y) {
                *nv = yv + *nv * dt;
            }
            mat_vec(sigma, n, &dw, &mut next, true);
            std::mem::swap(&mut y, &mut next);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("path {path_idx} at t = {}", times[i + 1])));
            }
        }
        if cfg.record_paths {
            states.extend_from_slice(&y);
        }
        total += cost.terminal.eval(&y);
        Ok(PathResult {
            states,
            controls,
            terminal: y,
            cost: total,
            gap,
            extrapolated,
        })
    };

    let results: Vec<PathResult> = (0..cfg.n_paths)
        .into_par_iter()
        .map(simulate_path)
        .collect::<Result<Vec<_>>>()?;

    let config_hash = digest::hash_json(&serde_json::json!({
        "model": model.params(),
        "cost": cost,
        "policy": policy.describe(),
        "y0": init.y0,
        "u0": { "start": init.u0.start_time(), "step": init.u0.step(), "samples": init.u0.to_samples() },
        "sim": cfg,
        "tracked": tracker.map(|c| digest::to_hex(&c.vf.model_hash)),
    }));
    let mut bundle = PathBundle {
        n,
        m,
        n_paths: cfg.n_paths,
        steps,
        seed: cfg.seed,
        config_hash,
        times,
        states: Vec::new(),
        controls: Vec::new(),
        terminal: Vec::with_capacity(cfg.n_paths * n),
        costs: Vec::with_capacity(cfg.n_paths),
        gaps: tracker.map(|_| Vec::with_capacity(cfg.n_paths)),
        extrapolated_steps: 0,
        outside_hypotheses: feedback.is_some_and(|c| c.sel.outside_hypotheses()),
    };
    for r in results {
        bundle.states.extend(r.states);
        bundle.controls.extend(r.controls);
        bundle.terminal.extend(r.terminal);
        bundle.costs.push(r.cost);
        if let Some(g) = bundle.gaps.as_mut() {
            g.push(r.gap);
        }
        bundle.extrapolated_steps += r.extrapolated;
    }
    Ok(bundle)
}
