//! Backward Volterra recursion for the reduced value function `f(τ, y)`, where `τ` is
//! the time to go and `y` the head of the state propagated to the horizon, so that
//! `v(t, x) = f(T - t, (e^{(T-t)A} x)_0)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostSpec, Growth};
use crate::digest::{self, Digest};
use crate::error::{Error, Result};
use crate::gaussian::{self, Covariance, QuadratureRule, StandardNodes};
use crate::lifted::{LiftedVector, Model};
use crate::linalg::expm;

/// Tensor grids are limited to this many axes.
pub const MAX_DIM: usize = 8;
/// Default cap on `sup|∇^B f|` under the unconstrained quadratic Hamiltonian.
pub const DEFAULT_GRADIENT_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSpec {
    /// Node count per axis.
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub lo: Option<Vec<f64>>,
    #[serde(default)]
    pub hi: Option<Vec<f64>>,
    /// Box center when bounds are not given (defaults to the origin).
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    /// Half-width of the default box in marginal standard deviations of `Q_T`.
    #[serde(default = "default_width_sd")]
    pub width_sd: f64,
}

fn default_width_sd() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverGrids {
    pub tau_levels: usize,
    pub spatial: SpatialSpec,
    pub quadrature: QuadratureRule,
    #[serde(default)]
    pub gradient_cap: Option<f64>,
}

impl SolverGrids {
    pub fn new(tau_levels: usize, nodes: Vec<usize>, quadrature: QuadratureRule) -> Self {
        Self {
            tau_levels,
            spatial: SpatialSpec {
                nodes,
                lo: None,
                hi: None,
                center: None,
                width_sd: default_width_sd(),
            },
            quadrature,
            gradient_cap: None,
        }
    }

    pub fn with_box(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.spatial.lo = Some(lo);
        self.spatial.hi = Some(hi);
        self
    }

    pub fn with_center(mut self, center: Vec<f64>) -> Self {
        self.spatial.center = Some(center);
        self
    }

    /// Concrete box: user bounds, or center ± `width_sd` marginal deviations of `Q_T`.
    pub fn resolve_grid(&self, model: &Model) -> Result<TensorGrid> {
        let n = model.n();
        let s = &self.spatial;
        if n > MAX_DIM {
            return Err(Error::config("grids.spatial", format!("tensor grids support n <= {MAX_DIM}")));
        }
        if s.nodes.len() != n || s.nodes.iter().any(|&c| c < 3) {
            return Err(Error::config(
                "grids.spatial.nodes",
                format!("need {n} axis counts, each at least 3"),
            ));
        }
        let (lo, hi) = match (&s.lo, &s.hi) {
            (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            (None, None) => {
                let center = s.center.clone().unwrap_or_else(|| vec![0.0; n]);
                if center.len() != n {
                    return Err(Error::config("grids.spatial.center", format!("expected {n} entries")));
                }
                let q = gaussian::covariance(model, model.horizon())?.q;
                let lo = (0..n).map(|i| center[i] - s.width_sd * q[(i, i)].sqrt().max(1e-6)).collect();
                let hi = (0..n).map(|i| center[i] + s.width_sd * q[(i, i)].sqrt().max(1e-6)).collect();
                (lo, hi)
            }
            _ => return Err(Error::config("grids.spatial", "give both lo and hi or neither")),
        };
        if lo.len() != n || hi.len() != n || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::config("grids.spatial.lo/hi", format!("need {n} entries with lo < hi")));
        }
        Ok(TensorGrid {
            lo,
            hi,
            nodes: s.nodes.clone(),
        })
    }
}

/// Uniform tensor grid, row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl TensorGrid {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
    }

    fn stride(&self, axis: usize) -> usize {
        self.nodes[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        let mut rem = flat;
        for a in (0..self.dim()).rev() {
            out[a] = rem % self.nodes[a];
            rem /= self.nodes[a];
        }
        out
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + i as f64 * self.step(a))
            .collect()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(a, v)| *v >= self.lo[a] && *v <= self.hi[a])
    }

    /// Per-axis `(lower node, fraction)`; coordinates outside the box are clamped.
    fn locate(&self, y: &[f64], cell: &mut [(usize, f64); MAX_DIM]) -> bool {
        let mut clamped = false;
        for a in 0..self.dim() {
            let mut x = (y[a] - self.lo[a]) / self.step(a);
            let top = (self.nodes[a] - 1) as f64;
            if !(x >= 0.0) {
                clamped |= x < -1e-12;
                x = 0.0;
            } else if x > top {
                clamped |= x > top + 1e-12;
                x = top;
            }
            let lo = (x.floor() as usize).min(self.nodes[a] - 2);
            cell[a] = (lo, x - lo as f64);
        }
        clamped
    }

    /// Calls `visit(flat index, weight)` for each multilinear corner; returns the clamp flag.
    fn for_corners(&self, y: &[f64], mut visit: impl FnMut(usize, f64)) -> bool {
        let mut cell = [(0usize, 0.0f64); MAX_DIM];
        let clamped = self.locate(y, &mut cell);
        let n = self.dim();
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0;
            for (a, &(lo, frac)) in cell.iter().enumerate().take(n) {
                let up = (mask >> a) & 1 == 1;
                w *= if up { frac } else { 1.0 - frac };
                idx += (lo + up as usize) * self.stride(a);
            }
            if w != 0.0 {
                visit(idx, w);
            }
        }
        clamped
    }

    pub fn interp(&self, table: &[f64], y: &[f64]) -> (f64, bool) {
        let mut acc = 0.0;
        let clamped = self.for_corners(y, |i, w| acc += w * table[i]);
        (acc, clamped)
    }

    /// Interpolates a table with `out.len()` components per node.
    pub fn interp_vec(&self, table: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        let c = out.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        self.for_corners(y, |i, w| {
            for (k, o) in out.iter_mut().enumerate() {
                *o += w * table[i * c + k];
            }
        })
    }

    /// Central differences inside, one-sided differences on the faces.
    pub fn gradient_table(&self, values: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; values.len() * n];
        for p in 0..values.len() {
            let idx = self.multi_index(p);
            for a in 0..n {
                let s = self.stride(a);
                let h = self.step(a);
                let g = if idx[a] == 0 {
                    (values[p + s] - values[p]) / h
                } else if idx[a] == self.nodes[a] - 1 {
                    (values[p] - values[p - s]) / h
                } else {
                    (values[p + s] - values[p - s]) / (2.0 * h)
                };
                out[p * n + a] = g;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveFlags {
    /// Terminal cost is differentiable, so the B-gradient exists at `τ = 0`.
    pub terminal_smooth: bool,
    /// Unconstrained quadratic Hamiltonian (not globally Lipschitz).
    pub lipschitz_warning: bool,
    /// The reduced recursion represents the running cost exactly.
    pub running_cost_exact: bool,
    pub polynomial_growth: bool,
}

impl SolveFlags {
    pub fn to_byte(self) -> u8 {
        (self.terminal_smooth as u8)
            | (self.lipschitz_warning as u8) << 1
            | (self.running_cost_exact as u8) << 2
            | (self.polynomial_growth as u8) << 3
    }

    pub fn from_byte(b: u8) -> Self {
        Self {
            terminal_smooth: b & 1 != 0,
            lipschitz_warning: b & 2 != 0,
            running_cost_exact: b & 4 != 0,
            polynomial_growth: b & 8 != 0,
        }
    }
}

/// Tabulated `f(τ_j, y)`, `∇f(τ_j, y)` and `G(τ_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedValueFunction {
    pub n: usize,
    pub m: usize,
    pub tau: Vec<f64>,
    pub grid: TensorGrid,
    /// `values[j·P + p]`.
    pub values: Vec<f64>,
    /// `gradients[(j·P + p)·n + a]`.
    pub gradients: Vec<f64>,
    /// `head_b[j·n·m + r·m + c]`.
    pub head_b: Vec<f64>,
    pub model_hash: Digest,
    pub cost_hash: Digest,
    pub flags: SolveFlags,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEval {
    pub value: f64,
    /// The head left the spatial box and was clamped.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub sup_value: f64,
    pub value_bound: f64,
    /// `sup_y |G(τ_j)ᵀ ∇f(τ_j, y)|` per level.
    pub sup_grad_b: Vec<f64>,
}

impl ReducedValueFunction {
    pub fn levels(&self) -> usize {
        self.tau.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.tau.last().expect("non-empty tau grid")
    }

    pub fn level_values(&self, j: usize) -> &[f64] {
        let p = self.grid.len();
        &self.values[j * p..(j + 1) * p]
    }

    pub fn level_gradients(&self, j: usize) -> &[f64] {
        let p = self.grid.len() * self.n;
        &self.gradients[j * p..(j + 1) * p]
    }

    pub fn level_head_b(&self, j: usize) -> DMatrix<f64> {
        let s = self.n * self.m;
        DMatrix::from_row_slice(self.n, self.m, &self.head_b[j * s..(j + 1) * s])
    }

    /// `(j, weight of level j+1)` for linear interpolation in `τ`.
    fn bracket(&self, tau: f64) -> (usize, f64) {
        let k = self.tau.len() - 1;
        if tau <= 0.0 {
            return (0, 0.0);
        }
        if tau >= self.tau[k] {
            return (k - 1, 1.0);
        }
        let j = self.tau.partition_point(|&t| t <= tau).saturating_sub(1).min(k - 1);
        (j, (tau - self.tau[j]) / (self.tau[j + 1] - self.tau[j]))
    }

    /// `f(τ, y)` with linear interpolation in `τ` and multilinear in `y`.
    pub fn value_at_head(&self, tau: f64, y: &[f64]) -> ValueEval {
        let (j, w) = self.bracket(tau);
        let (a, c0) = self.grid.interp(self.level_values(j), y);
        let value = if w == 0.0 {
            a
        } else {
            let (b, _) = self.grid.interp(self.level_values(j + 1), y);
            (1.0 - w) * a + w * b
        };
        ValueEval {
            value,
            extrapolated: c0,
        }
    }

    /// `∇f(τ, y)` interpolated from the gradient tables.
    pub fn gradient_at_head(&self, tau: f64, y: &[f64]) -> (DVector<f64>, bool) {
        let (j, w) = self.bracket(tau);
        let mut a = vec![0.0; self.n];
        let clamped = self.grid.interp_vec(self.level_gradients(j), y, &mut a);
        if w != 0.0 {
            let mut b = vec![0.0; self.n];
            self.grid.interp_vec(self.level_gradients(j + 1), y, &mut b);
            for (x, z) in a.iter_mut().zip(b) {
                *x = (1.0 - w) * *x + w * z;
            }
        }
        (DVector::from_vec(a), clamped)
    }

    /// `sup_y |G(τ_j)ᵀ ∇f(τ_j, y)|` per level.
    pub fn sup_grad_b(&self) -> Vec<f64> {
        (0..self.levels())
            .map(|j| {
                let g = self.level_head_b(j);
                self.level_gradients(j)
                    .chunks(self.n)
                    .map(|grad| (g.transpose() * DVector::from_column_slice(grad)).amax())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Errors unless the tables were solved for this model.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let h = digest::hash_json(model.params());
        if h != self.model_hash {
            return Err(Error::HashMismatch {
                what: "model",
                expected: digest::to_hex(&self.model_hash),
                found: digest::to_hex(&h),
            });
        }
        Ok(())
    }

    pub fn check_cost(&self, cost: &CostSpec) -> Result<()> {
        let h = digest::hash_json(cost);
        if h != self.cost_hash {
            return Err(Error::HashMismatch {
                what: "cost",
                expected: digest::to_hex(&self.cost_hash),
                found: digest::to_hex(&h),
            });
        }
        Ok(())
    }
}

fn time_to_go(vf: &ReducedValueFunction, t: f64) -> Result<f64> {
    let horizon = vf.horizon();
    if !(t >= -1e-12 && t <= horizon + 1e-12) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, {horizon}]")));
    }
    Ok((horizon - t).clamp(0.0, horizon))
}

/// `v(t, x) = f(T - t, (e^{(T-t)A} x)_0)`.
pub fn eval_value(vf: &ReducedValueFunction, model: &Model, t: f64, x: &LiftedVector) -> Result<ValueEval> {
    let tau = time_to_go(vf, t)?;
    let y = model.projected_head(tau, x)?;
    Ok(vf.value_at_head(tau, y.as_slice()))
}

/// `∇^B v(t, x) = G(T - t)ᵀ ∇f(T - t, y)`.
pub fn eval_grad_b(vf: &ReducedValueFunction, model: &Model, t: f64, x: &LiftedVector) -> Result<DVector<f64>> {
    let tau = time_to_go(vf, t)?;
    if tau == 0.0 && !vf.flags.terminal_smooth {
        return Err(Error::BoundaryDerivative);
    }
    let y = model.projected_head(tau, x)?;
    let g = model.head_of_semigroup_b(tau)?;
    let (grad, _) = vf.gradient_at_head(tau, y.as_slice());
    Ok(g.transpose() * grad)
}

/// Graded time-to-go mesh `τ_j = T (j/K)²`.
pub fn graded_mesh(horizon: f64, levels: usize) -> Vec<f64> {
    (0..=levels)
        .map(|j| horizon * (j as f64 / levels as f64).powi(2))
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[(u - k)^+]` for `u ~ N(mu, sd²)`.
fn call(mu: f64, sd: f64, k: f64) -> f64 {
    let z = (mu - k) / sd;
    (mu - k) * normal_cdf(z) + sd * normal_pdf(z)
}

/// `E[(k - u)^+]` for `u ~ N(mu, sd²)`.
fn put(mu: f64, sd: f64, k: f64) -> f64 {
    let z = (k - mu) / sd;
    (k - mu) * normal_cdf(z) + sd * normal_pdf(z)
}

/// `E[hat(u)]`, `hat(u) = (1 - |u|)^+`, `u ~ N(mu, sd²)`.
fn hat_mean(mu: f64, sd: f64) -> f64 {
    (call(mu, sd, -1.0) - 2.0 * call(mu, sd, 0.0) + call(mu, sd, 1.0)).max(0.0)
}

/// Lower end node: the clamped interpolant equals the end value below the box.
fn low_end_mean(mu: f64, sd: f64) -> f64 {
    (put(mu, sd, 1.0) - put(mu, sd, 0.0)).max(0.0)
}

fn high_end_mean(mu: f64, sd: f64) -> f64 {
    (call(mu, sd, -1.0) - call(mu, sd, 0.0)).max(0.0)
}

/// Weights `w_q` with `E[I_h(y + s ξ)] = Σ_q w_q h_q` along one axis, where `I_h` is the
/// clamped piecewise-linear interpolant; `mu` is `y` in index units and `sd = s / step`.
fn axis_weights(count: usize, mu: f64, sd: f64, out: &mut [f64]) {
    for (q, w) in out.iter_mut().enumerate().take(count) {
        let m = mu - q as f64;
        *w = if q == 0 {
            low_end_mean(m, sd)
        } else if q == count - 1 {
            high_end_mean(m, sd)
        } else {
            hat_mean(m, sd)
        };
    }
}

/// Row-major `count × count` smoothing matrix for grid nodes, built from the
/// translation-invariant interior kernel.
fn axis_matrix(count: usize, sd: f64) -> Vec<f64> {
    let kernel: Vec<f64> = (0..count).map(|d| hat_mean(d as f64, sd)).collect();
    let mut w = vec![0.0; count * count];
    for p in 0..count {
        let row = &mut w[p * count..(p + 1) * count];
        for (q, v) in row.iter_mut().enumerate().take(count - 1).skip(1) {
            *v = kernel[p.abs_diff(q)];
        }
        row[0] = low_end_mean(p as f64, sd);
        row[count - 1] = high_end_mean(p as f64 - (count - 1) as f64, sd);
    }
    w
}

fn smooth_axis(grid: &TensorGrid, table: &[f64], axis: usize, w: &[f64]) -> Vec<f64> {
    let count = grid.nodes[axis];
    let stride = grid.stride(axis);
    (0..table.len())
        .map(|p| {
            let ia = (p / stride) % count;
            let base = p - ia * stride;
            let row = &w[ia * count..(ia + 1) * count];
            row.iter().enumerate().map(|(q, wq)| wq * table[base + q * stride]).sum()
        })
        .collect()
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    (0..m.nrows()).all(|r| (0..m.ncols()).all(|c| r == c || m[(r, c)].abs() <= 1e-13 * scale))
}

#[derive(Debug, Clone, Copy, Default)]
struct Sups {
    terminal: f64,
    running: f64,
}

impl Sups {
    fn merge(self, o: Sups) -> Sups {
        Sups {
            terminal: self.terminal.max(o.terminal),
            running: self.running.max(o.running),
        }
    }
}

/// Gaussian factors of level `j`.
struct LevelFactors {
    terminal: DMatrix<f64>,
    /// `e^{τ_i a0} chol(Q(τ_j - τ_i))` for `i < j`.
    lag: Vec<DMatrix<f64>>,
    diagonal: bool,
}

/// Shared, immutable data of the recursion.
struct Recursion<'a> {
    model: &'a Model,
    cost: &'a CostSpec,
    nodes: &'a StandardNodes,
    grid: &'a TensorGrid,
    tau: &'a [f64],
    /// `e^{-τ_i a0}`, to evaluate a state-dependent running cost.
    back: Vec<DMatrix<f64>>,
    /// Nodal terminal values, smoothed exactly instead of by quadrature when the terminal
    /// cost is not differentiable (Gauss-Hermite is piecewise constant across a jump).
    terminal_table: Option<Vec<f64>>,
}

impl<'a> Recursion<'a> {
    fn new(model: &'a Model, cost: &'a CostSpec, nodes: &'a StandardNodes, grid: &'a TensorGrid, tau: &'a [f64]) -> Self {
        let back = tau.iter().map(|&t| expm(model.a0(), -t)).collect();
        let terminal_table = (!cost.terminal.is_differentiable())
            .then(|| (0..grid.len()).map(|p| cost.terminal.eval(&grid.point(p))).collect());
        Self {
            model,
            cost,
            nodes,
            grid,
            tau,
            back,
            terminal_table,
        }
    }

    /// `E[I_table(y + L ξ)]` for diagonal `L`, exact for the clamped multilinear interpolant.
    fn interpolant_mean(&self, table: &[f64], factor: &DMatrix<f64>, y: &[f64]) -> f64 {
        let weights: Vec<Vec<f64>> = (0..self.grid.dim())
            .map(|a| {
                let count = self.grid.nodes[a];
                let step = self.grid.step(a);
                let mut w = vec![0.0; count];
                axis_weights(count, (y[a] - self.grid.lo[a]) / step, factor[(a, a)].abs() / step, &mut w);
                w
            })
            .collect();
        (0..self.grid.len())
            .map(|p| {
                let idx = self.grid.multi_index(p);
                table[p] * weights.iter().zip(&idx).map(|(w, &i)| w[i]).product::<f64>()
            })
            .sum()
    }

    fn factors(&self, j: usize) -> Result<LevelFactors> {
        let terminal = gaussian::covariance(self.model, self.tau[j])?.chol;
        let mut lag = Vec::with_capacity(j);
        for &ti in &self.tau[..j] {
            let cov: Covariance = gaussian::covariance(self.model, self.tau[j] - ti)?;
            lag.push(expm(self.model.a0(), ti) * cov.chol);
        }
        let diagonal = lag.iter().all(is_diagonal);
        Ok(LevelFactors { terminal, lag, diagonal })
    }

    /// `H_min(G(τ_i)ᵀ ∇f(τ_i, ·))` at the grid nodes.
    fn hamiltonian_table(&self, gradients: &[f64], head_b: &DMatrix<f64>) -> Vec<f64> {
        let n = self.model.n();
        let m = self.model.m();
        let mut p = vec![0.0; m];
        gradients
            .chunks(n)
            .map(|g| {
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc = (0..n).map(|r| head_b[(r, c)] * g[r]).sum();
                }
                self.cost.hamiltonian.hmin(&p)
            })
            .collect()
    }

    /// Exactly smoothed nodal terminal values at every node, when that path applies.
    fn terminal_part_grid(&self, f: &LevelFactors) -> Option<Vec<f64>> {
        let table = self.terminal_table.as_ref().filter(|_| is_diagonal(&f.terminal))?;
        let mut t = table.clone();
        for a in 0..self.grid.dim() {
            let sd = f.terminal[(a, a)].abs() / self.grid.step(a);
            t = smooth_axis(self.grid, &t, a, &axis_matrix(self.grid.nodes[a], sd));
        }
        Some(t)
    }

    /// Terminal expectation plus the running-cost part of the Volterra sum at `y`;
    /// `smoothed_terminal` is the precomputed terminal part when available.
    fn gaussian_part(&self, j: usize, f: &LevelFactors, y: &[f64], smoothed_terminal: Option<f64>) -> Result<(f64, Sups)> {
        let n = self.model.n();
        let mut sups = Sups::default();
        let terminal = &self.cost.terminal;
        let mut acc = match (&self.terminal_table, smoothed_terminal) {
            (Some(table), Some(v)) => {
                sups.terminal = table.iter().fold(0.0, |a, v| a.max(v.abs()));
                v
            }
            (Some(table), None) if is_diagonal(&f.terminal) => {
                sups.terminal = table.iter().fold(0.0, |a, v| a.max(v.abs()));
                self.interpolant_mean(table, &f.terminal, y)
            }
            _ => gaussian::expect(self.nodes, &f.terminal, y, |z| {
                let v = terminal.eval(z);
                sups.terminal = sups.terminal.max(v.abs());
                v
            })?,
        };
        let horizon = self.model.horizon();
        let running = &self.cost.running;
        let state_free = running.is_state_independent();
        let mut x0 = vec![0.0; n];
        for i in 0..j {
            let calendar = horizon - self.tau[i];
            let e = if state_free {
                running.eval(calendar, y)
            } else {
                let back = &self.back[i];
                gaussian::expect(self.nodes, &f.lag[i], y, |z| {
                    for (r, xr) in x0.iter_mut().enumerate() {
                        *xr = (0..n).map(|c| back[(r, c)] * z[c]).sum();
                    }
                    running.eval(calendar, &x0)
                })?
            };
            sups.running = sups.running.max(e.abs());
            acc += (self.tau[i + 1] - self.tau[i]) * e;
        }
        Ok((acc, sups))
    }

    /// `Σ_i Δτ_i E[I_{h_i}(y + L_i ξ)]` at one point.
    fn hamiltonian_part_point(&self, j: usize, f: &LevelFactors, tables: &[Vec<f64>], y: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (lag, table)) in f.lag.iter().zip(tables).enumerate().take(j) {
            let e = if f.diagonal {
                self.interpolant_mean(table, lag, y)
            } else {
                gaussian::expect(self.nodes, lag, y, |z| self.grid.interp(table, z).0)?
            };
            acc += (self.tau[i + 1] - self.tau[i]) * e;
        }
        Ok(acc)
    }

    /// The same sum at every grid node.
    fn hamiltonian_part_grid(&self, j: usize, f: &LevelFactors, tables: &[Vec<f64>]) -> Result<Vec<f64>> {
        let points = self.grid.len();
        let parts: Vec<Vec<f64>> = if f.diagonal {
            (0..j)
                .into_par_iter()
                .map(|i| {
                    let mut t = tables[i].clone();
                    for a in 0..self.grid.dim() {
                        let sd = f.lag[i][(a, a)].abs() / self.grid.step(a);
                        t = smooth_axis(self.grid, &t, a, &axis_matrix(self.grid.nodes[a], sd));
                    }
                    t
                })
                .collect()
        } else {
            (0..j)
                .into_par_iter()
                .map(|i| {
                    (0..points)
                        .map(|p| {
                            gaussian::expect(self.nodes, &f.lag[i], &self.grid.point(p), |z| {
                                self.grid.interp(&tables[i], z).0
                            })
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?
        };
        let mut acc = vec![0.0; points];
        for (i, part) in parts.iter().enumerate() {
            let w = self.tau[i + 1] - self.tau[i];
            for (a, v) in acc.iter_mut().zip(part) {
                *a += w * v;
            }
        }
        Ok(acc)
    }
}

fn validate_inputs(model: &Model, cost: &CostSpec, grids: &SolverGrids) -> Result<()> {
    cost.validate(model.n(), model.m())?;
    if grids.tau_levels < 1 {
        return Err(Error::config("grids.tau_levels", "must be at least 1"));
    }
    grids.quadrature.validate()?;
    if let Some(cap) = grids.gradient_cap {
        if !(cap > 0.0) {
            return Err(Error::config("grids.gradient_cap", "must be positive"));
        }
    }
    Ok(())
}

pub fn solve(model: &Model, cost: &CostSpec, grids: &SolverGrids) -> Result<ReducedValueFunction> {
    solve_with_report(model, cost, grids).map(|(vf, _)| vf)
}

/// Runs the recursion level by level; work inside a level is parallel.
pub fn solve_with_report(
    model: &Model,
    cost: &CostSpec,
    grids: &SolverGrids,
) -> Result<(ReducedValueFunction, SolveReport)> {
    validate_inputs(model, cost, grids)?;
    let horizon = model.horizon();
    let k = grids.tau_levels;
    let tau = graded_mesh(horizon, k);
    model.check_structure_hypotheses(&tau[1..])?.into_result()?;
    gaussian::covariance(model, tau[1])?.require_invertible()?;

    let grid = grids.resolve_grid(model)?;
    let nodes = grids.quadrature.nodes(model.n())?;
    let n = model.n();
    let m = model.m();
    let points = grid.len();
    let head_b: Vec<DMatrix<f64>> = tau
        .iter()
        .map(|&t| model.head_of_semigroup_b(t))
        .collect::<Result<_>>()?;
    let cap = grids.gradient_cap.unwrap_or(DEFAULT_GRADIENT_CAP);
    let rec = Recursion::new(model, cost, &nodes, &grid, &tau);

    let mut values = Vec::with_capacity((k + 1) * points);
    let mut gradients = Vec::with_capacity((k + 1) * points * n);
    let terminal: Vec<f64> = (0..points).map(|p| cost.terminal.eval(&grid.point(p))).collect();
    if let Some(p) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("terminal cost at y = {:?}", grid.point(p))));
    }
    let mut sup_value = terminal.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut value_bound = 2.0 * sup_value;
    let grad0 = grid.gradient_table(&terminal);
    let mut tables = vec![rec.hamiltonian_table(&grad0, &head_b[0])];
    let mut sup_hmin = tables[0].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    gradients.extend(grad0);
    values.extend(terminal);

    for j in 1..=k {
        let factors = rec.factors(j)?;
        let smoothed = rec.terminal_part_grid(&factors);
        let gauss: Vec<(f64, Sups)> = (0..points)
            .into_par_iter()
            .map(|p| rec.gaussian_part(j, &factors, &grid.point(p), smoothed.as_ref().map(|t| t[p])))
            .collect::<Result<_>>()?;
        let ham = rec.hamiltonian_part_grid(j, &factors, &tables)?;
        let mut sups = Sups::default();
        let mut row = Vec::with_capacity(points);
        for (p, ((g, s), h)) in gauss.into_iter().zip(ham).enumerate() {
            let v = g + h;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("f at tau = {}, y = {:?}", tau[j], grid.point(p))));
            }
            row.push(v);
            sups = sups.merge(s);
        }
        let grad_row = grid.gradient_table(&row);
        let sup_row = row.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let bound = 2.0 * (sups.terminal + tau[j] * (sups.running + sup_hmin));
        sup_value = sup_value.max(sup_row);
        value_bound = value_bound.max(bound);
        if sup_row > bound * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Divergence(format!(
                "sup|f| = {sup_row:.6e} exceeds a priori bound {bound:.6e} at tau = {}",
                tau[j]
            )));
        }
        if cost.hamiltonian.lipschitz_warning() {
            let g = &head_b[j];
            let observed = grad_row
                .chunks(n)
                .map(|gr| (g.transpose() * DVector::from_column_slice(gr)).amax())
                .fold(0.0, f64::max);
            if observed > cap {
                return Err(Error::GradientCap {
                    observed,
                    cap,
                    tau: tau[j],
                });
            }
        }
        let table = rec.hamiltonian_table(&grad_row, &head_b[j]);
        sup_hmin = table.iter().fold(sup_hmin, |a, v| a.max(v.abs()));
        tables.push(table);
        values.extend(row);
        gradients.extend(grad_row);
    }

    let flags = SolveFlags {
        terminal_smooth: cost.terminal.is_differentiable(),
        lipschitz_warning: cost.hamiltonian.lipschitz_warning(),
        running_cost_exact: model.b1_is_zero() || cost.running.is_state_independent(),
        polynomial_growth: matches!(cost.growth, Growth::Polynomial { .. }),
    };
    let vf = ReducedValueFunction {
        n,
        m,
        tau: tau.clone(),
        grid: grid.clone(),
        values,
        gradients,
        head_b: head_b
            .iter()
            .flat_map(|g| (0..n).flat_map(move |r| (0..m).map(move |c| g[(r, c)])))
            .collect(),
        model_hash: digest::hash_json(model.params()),
        cost_hash: digest::hash_json(cost),
        flags,
    };
    let report = SolveReport {
        sup_value,
        value_bound,
        sup_grad_b: vf.sup_grad_b(),
    };
    Ok((vf, report))
}

/// Re-evaluates the recursion at level `j` for an arbitrary head `y`, using the stored
/// lower levels. Measures the interpolation error of the tables.
pub fn direct_value(
    vf: &ReducedValueFunction,
    model: &Model,
    cost: &CostSpec,
    rule: &QuadratureRule,
    j: usize,
    y: &[f64],
) -> Result<f64> {
    if j == 0 {
        return Ok(cost.terminal.eval(y));
    }
    let nodes = rule.nodes(model.n())?;
    let rec = Recursion::new(model, cost, &nodes, &vf.grid, &vf.tau);
    let tables: Vec<Vec<f64>> = (0..j)
        .map(|i| rec.hamiltonian_table(vf.level_gradients(i), &vf.level_head_b(i)))
        .collect();
    let factors = rec.factors(j)?;
    let (g, _) = rec.gaussian_part(j, &factors, y, None)?;
    Ok(g + rec.hamiltonian_part_point(j, &factors, &tables, y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{HamiltonianKind, RunningCost, SpatialFn};
    use crate::lifted::ModelParams;

    fn model() -> Model {
        Model::new(ModelParams::scalar(-0.3, 0.5, 0.6, |_| 1.0, 0.5, 1.0, 21)).unwrap()
    }

    fn zero_control() -> HamiltonianKind {
        HamiltonianKind::FiniteSet {
            controls: vec![vec![0.0]],
            costs: vec![0.0],
        }
    }

    #[test]
    fn tensor_grid_interpolation_is_exact_on_bilinear() {
        let grid = TensorGrid {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 2.0],
            nodes: vec![5, 9],
        };
        let f = |y: &[f64]| 1.0 + 2.0 * y[0] - y[1] + 0.5 * y[0] * y[1];
        let table: Vec<f64> = (0..grid.len()).map(|p| f(&grid.point(p))).collect();
        let (v, c) = grid.interp(&table, &[0.33, 1.27]);
        assert!((v - f(&[0.33, 1.27])).abs() < 1e-13);
        assert!(!c);
        let (v, c) = grid.interp(&table, &[3.0, 1.0]);
        assert!((v - f(&[1.0, 1.0])).abs() < 1e-13);
        assert!(c);
    }

    #[test]
    fn graded_mesh_shape() {
        let t = graded_mesh(2.0, 4);
        assert_eq!(t, vec![0.0, 0.125, 0.5, 1.125, 2.0]);
    }

    #[test]
    fn constants_are_fixed_points() {
        let m = model();
        let cost = CostSpec {
            terminal: SpatialFn::Constant { value: 1.7 },
            running: RunningCost::zero(),
            hamiltonian: zero_control(),
            growth: Growth::Bounded,
        };
        let grids = SolverGrids::new(8, vec![21], QuadratureRule::gauss_hermite(10));
        let vf = solve(&m, &cost, &grids).unwrap();
        assert!(vf.values.iter().all(|v| (v - 1.7).abs() < 1e-13));
    }

    #[test]
    fn pure_ou_when_control_is_trivial() {
        let m = model();
        let phi = SpatialFn::Cosine {
            freq: vec![1.3],
            amplitude: 1.0,
            phase: 0.2,
        };
        let cost = CostSpec {
            terminal: phi.clone(),
            running: RunningCost::zero(),
            hamiltonian: zero_control(),
            growth: Growth::Bounded,
        };
        let rule = QuadratureRule::gauss_hermite(16);
        let grids = SolverGrids::new(6, vec![31], rule);
        let vf = solve(&m, &cost, &grids).unwrap();
        for j in [0, 3, 6] {
            for p in [0, 10, 30] {
                let y = vf.grid.point(p);
                let direct = gaussian::ou_apply(&m, vf.tau[j], |z| phi.eval(z), &y, &rule).unwrap();
                assert!((vf.level_values(j)[p] - direct).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn additive_running_cost_shifts_by_tau() {
        let m = model();
        let mut cost = CostSpec {
            terminal: SpatialFn::GaussianWell {
                center: vec![0.5],
                width: 0.5,
                depth: 1.0,
                offset: 1.0,
            },
            running: RunningCost::zero(),
            hamiltonian: HamiltonianKind::QuadraticBox {
                theta: 1.0,
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            growth: Growth::Bounded,
        };
        let grids = SolverGrids::new(10, vec![41], QuadratureRule::gauss_hermite(12));
        let base = solve(&m, &cost, &grids).unwrap();
        cost.running.spatial = SpatialFn::Constant { value: 0.4 };
        let shifted = solve(&m, &cost, &grids).unwrap();
        for j in 0..base.levels() {
            for (a, b) in base.level_values(j).iter().zip(shifted.level_values(j)) {
                assert!((b - a - 0.4 * base.tau[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refuses_failed_structure() {
        let p = ModelParams::from_matrices(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            |_| DMatrix::zeros(2, 1),
            1.0,
            1.0,
            11,
        );
        let m = Model::new(p).unwrap();
        let cost = CostSpec {
            terminal: SpatialFn::Constant { value: 0.0 },
            running: RunningCost::zero(),
            hamiltonian: zero_control(),
            growth: Growth::Bounded,
        };
        let grids = SolverGrids::new(4, vec![5, 5], QuadratureRule::gauss_hermite(4));
        assert!(matches!(solve(&m, &cost, &grids), Err(Error::StructureHypotheses { .. })));
    }

    #[test]
    fn gradient_cap_escalates() {
        let m = Model::new(ModelParams::scalar(0.0, 1.0, 1.0, |_| 0.0, 0.5, 1.0, 11)).unwrap();
        let cost = CostSpec {
            terminal: SpatialFn::Quadratic {
                matrix: vec![vec![50.0]],
                center: None,
                offset: 0.0,
            },
            running: RunningCost::zero(),
            hamiltonian: HamiltonianKind::QuadraticUnconstrained { theta: 1.0, m: 1 },
            growth: Growth::Polynomial { degree: 2 },
        };
        let mut grids = SolverGrids::new(4, vec![41], QuadratureRule::gauss_hermite(8));
        grids.gradient_cap = Some(10.0);
        assert!(matches!(solve(&m, &cost, &grids), Err(Error::GradientCap { .. })));
    }

    #[test]
    fn flags_roundtrip() {
        for b in 0..16u8 {
            assert_eq!(SolveFlags::from_byte(b).to_byte(), b);
        }
    }
}
