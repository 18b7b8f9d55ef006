//! The delay equation lifted to the product space `R^n × L²([-d,0]; R^n)`.
//!
//! Tails live on a uniform grid of `M+1` nodes over `[-d, 0]` and are integrated with
//! the trapezoid rule. Operators whose output has a jump inside the window (the shift in
//! `e^{tA}`, the splice in `e^{tA*}`) place a one-node correction next to the jump so
//! that trapezoid inner products against continuous functions keep second-order
//! accuracy; the raw node values there are therefore not point samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, expm};
use crate::path::ControlPath;

/// Normalized residual below which an image inclusion is accepted.
pub const STRUCTURE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

/// Raw, serializable model data. Matrices are nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub a0: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    /// Row `l` is `b1(-d + l·h)` flattened row-major (`n·m` entries).
    pub b1_samples: Vec<Vec<f64>>,
    pub d: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub delay_grid_points: usize,
}

impl ModelParams {
    /// Builds parameters from dense matrices, sampling `b1` on `points` nodes.
    pub fn from_matrices(
        a0: DMatrix<f64>,
        b0: DMatrix<f64>,
        sigma: DMatrix<f64>,
        b1: impl Fn(f64) -> DMatrix<f64>,
        d: f64,
        horizon: f64,
        points: usize,
    ) -> Self {
        let n = a0.nrows();
        let m = b0.ncols();
        let k = sigma.ncols();
        let h = if points > 1 { d / (points - 1) as f64 } else { d };
        let b1_samples = (0..points)
            .map(|l| {
                let s = -d + l as f64 * h;
                let b = b1(s);
                let mut row = Vec::with_capacity(n * m);
                for i in 0..b.nrows() {
                    for j in 0..b.ncols() {
                        row.push(b[(i, j)]);
                    }
                }
                row
            })
            .collect();
        Self {
            dims: Dims { n, m, k },
            a0: linalg::matrix_to_rows(&a0),
            b0: linalg::matrix_to_rows(&b0),
            sigma: linalg::matrix_to_rows(&sigma),
            b1_samples,
            d,
            horizon,
            delay_grid_points: points,
        }
    }

    /// Scalar model (`n = m = k = 1`) with a sampled density.
    pub fn scalar(a0: f64, b0: f64, sigma: f64, b1: impl Fn(f64) -> f64, d: f64, horizon: f64, points: usize) -> Self {
        Self::from_matrices(
            DMatrix::from_element(1, 1, a0),
            DMatrix::from_element(1, 1, b0),
            DMatrix::from_element(1, 1, sigma),
            |s| DMatrix::from_element(1, 1, b1(s)),
            d,
            horizon,
            points,
        )
    }
}

/// An element `(head, tail)` of the lifted state space.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedVector {
    pub head: DVector<f64>,
    pub tail: Vec<DVector<f64>>,
}

impl LiftedVector {
    pub fn zeros(n: usize, points: usize) -> Self {
        Self {
            head: DVector::zeros(n),
            tail: vec![DVector::zeros(n); points],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            head: &self.head * c,
            tail: self.tail.iter().map(|v| v * c).collect(),
        }
    }

    pub fn axpy(&self, c: f64, other: &LiftedVector) -> Self {
        Self {
            head: &self.head + &other.head * c,
            tail: self.tail.iter().zip(&other.tail).map(|(a, b)| a + b * c).collect(),
        }
    }
}

/// Validated model with precomputed delay-grid data.
#[derive(Debug, Clone)]
pub struct Model {
    params: ModelParams,
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    sigma: DMatrix<f64>,
    b1: Vec<DMatrix<f64>>,
    nodes: Vec<f64>,
    h: f64,
    weights: Vec<f64>,
    /// `e^{ξ_l a0}` at every delay node.
    exp_nodes: Vec<DMatrix<f64>>,
    b1_is_zero: bool,
}

/// One abscissa of the cut trapezoid rule on `[-min(t,d), 0]`.
struct CutTerm {
    weight: f64,
    lo: usize,
    frac: f64,
    /// `e^{(t+s) a0}` at the abscissa.
    exp: DMatrix<f64>,
}

impl Model {
    pub fn new(params: ModelParams) -> Result<Self> {
        let Dims { n, m, k } = params.dims;
        if n == 0 || m == 0 || k == 0 {
            return Err(Error::InvalidModel("dimensions n, m, k must be positive".into()));
        }
        if !(params.d > 0.0) || !params.d.is_finite() {
            return Err(Error::InvalidModel(format!("delay d must be positive, got {}", params.d)));
        }
        if !(params.horizon > 0.0) || !params.horizon.is_finite() {
            return Err(Error::InvalidModel(format!("horizon T must be positive, got {}", params.horizon)));
        }
        let points = params.delay_grid_points;
        if points < 3 {
            return Err(Error::InvalidModel(format!(
                "delay grid needs at least 3 nodes (M >= 2), got {points}"
            )));
        }
        if params.b1_samples.len() != points {
            return Err(Error::InvalidModel(format!(
                "b1 sample table has {} rows, delay_grid_points is {points}",
                params.b1_samples.len()
            )));
        }
        let bad = |what: &str, r: usize, c: usize| Error::InvalidModel(format!("{what} must be {r}x{c}"));
        let a0 = linalg::matrix_from_rows(&params.a0, n, n).ok_or_else(|| bad("a0", n, n))?;
        let b0 = linalg::matrix_from_rows(&params.b0, n, m).ok_or_else(|| bad("b0", n, m))?;
        let sigma = linalg::matrix_from_rows(&params.sigma, n, k).ok_or_else(|| bad("sigma", n, k))?;
        let mut b1 = Vec::with_capacity(points);
        for (l, row) in params.b1_samples.iter().enumerate() {
            if row.len() != n * m {
                return Err(Error::InvalidModel(format!(
                    "b1 sample row {l} has {} entries, expected {}",
                    row.len(),
                    n * m
                )));
            }
            b1.push(DMatrix::from_row_slice(n, m, row));
        }
        let finite = linalg::all_finite(&a0)
            && linalg::all_finite(&b0)
            && linalg::all_finite(&sigma)
            && b1.iter().all(linalg::all_finite);
        if !finite {
            return Err(Error::InvalidModel("all matrices must be finite".into()));
        }
        let h = params.d / (points - 1) as f64;
        let nodes: Vec<f64> = (0..points).map(|l| -params.d + l as f64 * h).collect();
        let weights = linalg::trapezoid_weights(points, h);
        let exp_nodes = nodes.iter().map(|&s| expm(&a0, s)).collect();
        let b1_is_zero = b1.iter().all(|b| b.iter().all(|v| *v == 0.0));
        Ok(Self {
            params,
            a0,
            b0,
            sigma,
            b1,
            nodes,
            h,
            weights,
            exp_nodes,
            b1_is_zero,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn n(&self) -> usize {
        self.params.dims.n
    }
    pub fn m(&self) -> usize {
        self.params.dims.m
    }
    pub fn k(&self) -> usize {
        self.params.dims.k
    }
    pub fn delay(&self) -> f64 {
        self.params.d
    }
    pub fn horizon(&self) -> f64 {
        self.params.horizon
    }
    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }
    pub fn b0(&self) -> &DMatrix<f64> {
        &self.b0
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn b1(&self) -> &[DMatrix<f64>] {
        &self.b1
    }
    pub fn b1_is_zero(&self) -> bool {
        self.b1_is_zero
    }
    /// Delay-grid nodes `-d = ξ_0 < … < ξ_M = 0`.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn grid_step(&self) -> f64 {
        self.h
    }
    pub fn points(&self) -> usize {
        self.nodes.len()
    }
    pub fn trapezoid(&self) -> &[f64] {
        &self.weights
    }
    /// Precomputed `e^{ξ_l a0}`.
    pub fn exp_at_node(&self, l: usize) -> &DMatrix<f64> {
        &self.exp_nodes[l]
    }

    pub fn zero_vector(&self) -> LiftedVector {
        LiftedVector::zeros(self.n(), self.points())
    }

    /// `⟨x, z⟩ = x0·z0 + ∫ x1·z1` with the trapezoid rule.
    pub fn inner(&self, x: &LiftedVector, z: &LiftedVector) -> f64 {
        x.head.dot(&z.head)
            + self
                .weights
                .iter()
                .zip(x.tail.iter().zip(&z.tail))
                .map(|(w, (a, b))| w * a.dot(b))
                .sum::<f64>()
    }

    pub fn norm(&self, x: &LiftedVector) -> f64 {
        self.inner(x, x).sqrt()
    }

    fn check_vector(&self, x: &LiftedVector) -> Result<()> {
        if x.head.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "lifted head",
                expected: self.n(),
                got: x.head.len(),
            });
        }
        if x.tail.len() != self.points() {
            return Err(Error::DimensionMismatch {
                what: "lifted tail nodes",
                expected: self.points(),
                got: x.tail.len(),
            });
        }
        if let Some(bad) = x.tail.iter().find(|v| v.len() != self.n()) {
            return Err(Error::DimensionMismatch {
                what: "lifted tail entry",
                expected: self.n(),
                got: bad.len(),
            });
        }
        Ok(())
    }

    fn check_time(t: f64) -> Result<()> {
        if t < 0.0 || t.is_nan() {
            Err(Error::NegativeTime(t))
        } else {
            Ok(())
        }
    }

    /// Grid cell `(lo, frac)` for a point of `[-d, 0]`.
    fn locate(&self, s: f64) -> (usize, f64) {
        let mm = self.points() - 1;
        let x = ((s + self.params.d) / self.h).clamp(0.0, mm as f64);
        let lo = (x.floor() as usize).min(mm - 1);
        (lo, x - lo as f64)
    }

    fn interp_vec(tail: &[DVector<f64>], lo: usize, frac: f64) -> DVector<f64> {
        if frac == 0.0 {
            tail[lo].clone()
        } else {
            &tail[lo] * (1.0 - frac) + &tail[lo + 1] * frac
        }
    }

    fn interp_mat(tail: &[DMatrix<f64>], lo: usize, frac: f64) -> DMatrix<f64> {
        if frac == 0.0 {
            tail[lo].clone()
        } else {
            &tail[lo] * (1.0 - frac) + &tail[lo + 1] * frac
        }
    }

    /// Node tolerance used to decide whether a breakpoint sits on a grid node.
    fn node_eps(&self) -> f64 {
        1e-10 * self.h
    }

    /// Trapezoid rule for `∫_{-min(t,d)}^0 e^{(t+s)a0} F(s) ds` with the cut point
    /// inserted as an extra abscissa.
    fn cut_terms(&self, t: f64) -> Vec<CutTerm> {
        let d = self.params.d;
        let et = expm(&self.a0, t);
        let mm = self.points() - 1;
        if t >= d - self.node_eps() {
            return (0..=mm)
                .map(|l| CutTerm {
                    weight: self.weights[l],
                    lo: l.min(mm - 1),
                    frac: if l == mm { 1.0 } else { 0.0 },
                    exp: &et * &self.exp_nodes[l],
                })
                .collect();
        }
        let c = -t;
        // first node at or right of the cut
        let first = self.nodes.iter().position(|&s| s >= c - self.node_eps()).unwrap_or(mm);
        let on_node = (self.nodes[first] - c).abs() <= self.node_eps();
        let mut abscissae: Vec<(f64, usize, f64, DMatrix<f64>)> = Vec::new();
        if !on_node {
            let (lo, frac) = self.locate(c);
            abscissae.push((c, lo, frac, DMatrix::identity(self.n(), self.n())));
        }
        for l in first..=mm {
            let (lo, frac) = if l == mm { (mm - 1, 1.0) } else { (l, 0.0) };
            abscissae.push((self.nodes[l], lo, frac, &et * &self.exp_nodes[l]));
        }
        let count = abscissae.len();
        if count == 1 {
            // t below the node tolerance: the integral is empty
            return Vec::new();
        }
        let mut weights = vec![0.0; count];
        for j in 0..count - 1 {
            let len = abscissae[j + 1].0 - abscissae[j].0;
            weights[j] += 0.5 * len;
            weights[j + 1] += 0.5 * len;
        }
        abscissae
            .into_iter()
            .zip(weights)
            .map(|((_, lo, frac, exp), weight)| CutTerm { weight, lo, frac, exp })
            .collect()
    }

    fn cut_integral_vec(&self, t: f64, tail: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.n());
        for term in self.cut_terms(t) {
            let v = Self::interp_vec(tail, term.lo, term.frac);
            acc += term.exp * v * term.weight;
        }
        acc
    }

    fn cut_integral_mat(&self, t: f64, tail: &[DMatrix<f64>]) -> DMatrix<f64> {
        let cols = tail.first().map(|m| m.ncols()).unwrap_or(0);
        let mut acc = DMatrix::zeros(self.n(), cols);
        for term in self.cut_terms(t) {
            let v = Self::interp_mat(tail, term.lo, term.frac);
            acc += term.exp * v * term.weight;
        }
        acc
    }

    /// Adds the one-node correction for a jump `right - left` located at `jump_at`.
    fn correct_jump(&self, tail: &mut [DVector<f64>], jump_at: f64, jump: &DVector<f64>) {
        let mm = self.points() - 1;
        let eps = self.node_eps();
        if jump_at <= self.nodes[0] + eps || jump_at > self.nodes[mm] + eps {
            return;
        }
        let b = self.nodes.iter().position(|&s| s >= jump_at - eps).unwrap_or(mm).max(1);
        let a = b - 1;
        let theta = ((jump_at - self.nodes[a]) / self.h).clamp(0.0, 1.0);
        // avoid the end nodes, whose half weights would amplify the correction
        let target = if a == 0 {
            b
        } else if b == mm || theta < 0.5 {
            a
        } else {
            b
        };
        let w = self.weights[target];
        tail[target] += jump * (self.h * (0.5 - theta) / w);
    }

    /// Head of `e^{tA} x` without building the shifted tail.
    pub fn projected_head(&self, t: f64, x: &LiftedVector) -> Result<DVector<f64>> {
        Self::check_time(t)?;
        self.check_vector(x)?;
        Ok(expm(&self.a0, t) * &x.head + self.cut_integral_vec(t, &x.tail))
    }

    /// `e^{tA} x`.
    pub fn apply_semigroup(&self, t: f64, x: &LiftedVector) -> Result<LiftedVector> {
        Self::check_time(t)?;
        self.check_vector(x)?;
        if t == 0.0 {
            return Ok(x.clone());
        }
        let head = expm(&self.a0, t) * &x.head + self.cut_integral_vec(t, &x.tail);
        let d = self.params.d;
        let eps = self.node_eps();
        let mut tail: Vec<DVector<f64>> = self
            .nodes
            .iter()
            .map(|&xi| {
                let src = xi - t;
                if src >= -d - eps {
                    let (lo, frac) = self.locate(src);
                    Self::interp_vec(&x.tail, lo, frac)
                } else {
                    DVector::zeros(self.n())
                }
            })
            .collect();
        if t < d {
            self.correct_jump(&mut tail, -d + t, &x.tail[0]);
        }
        Ok(LiftedVector { head, tail })
    }

    /// `e^{tA*} z`.
    pub fn apply_semigroup_adjoint(&self, t: f64, z: &LiftedVector) -> Result<LiftedVector> {
        Self::check_time(t)?;
        self.check_vector(z)?;
        if t == 0.0 {
            return Ok(z.clone());
        }
        let at = self.a0.transpose();
        let et = expm(&at, t);
        let head = &et * &z.head;
        let eps = self.node_eps();
        let mut tail: Vec<DVector<f64>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(l, &xi)| {
                if xi >= -t - eps {
                    // e^{(ξ+t) a0ᵀ} = e^{t a0ᵀ} e^{ξ a0ᵀ}
                    &et * self.exp_nodes[l].transpose() * &z.head
                } else {
                    let (lo, frac) = self.locate(xi + t);
                    Self::interp_vec(&z.tail, lo, frac)
                }
            })
            .collect();
        if t < self.params.d {
            let jump = &z.head - &z.tail[self.points() - 1];
            self.correct_jump(&mut tail, -t, &jump);
        }
        Ok(LiftedVector { head, tail })
    }

    /// `(N - A)^{-1} y`, integrating the exponential kernels exactly against the
    /// piecewise-linear tail.
    pub fn apply_resolvent(&self, big_n: f64, y: &LiftedVector) -> Result<LiftedVector> {
        self.check_vector(y)?;
        if !(big_n > 0.0) || !big_n.is_finite() {
            return Err(Error::IllPosedResolvent(format!("N must be positive, got {big_n}")));
        }
        let n = self.n();
        let shifted = DMatrix::identity(n, n) * big_n - &self.a0;
        let lu = shifted.clone().lu();
        if !lu.is_invertible() || linalg::spd_condition(&(shifted.transpose() * &shifted)).is_infinite() {
            return Err(Error::IllPosedResolvent(format!("N - a0 is singular for N = {big_n}")));
        }
        let mm = self.points() - 1;
        let h = self.h;
        let mut integral = DVector::zeros(n);
        for p in 0..mm {
            for i in 0..n {
                integral[i] +=
                    linalg::exp_weighted_cell(big_n, self.nodes[p], h, 0.0, y.tail[p][i], y.tail[p + 1][i]);
            }
        }
        let rhs = &y.head + integral;
        let head = lu.solve(&rhs).ok_or_else(|| Error::IllPosedResolvent("solve failed".into()))?;
        let decay = (-big_n * h).exp();
        let mut tail = Vec::with_capacity(mm + 1);
        let mut running = DVector::zeros(n);
        tail.push(running.clone());
        for l in 1..=mm {
            let mut next = &running * decay;
            for i in 0..n {
                next[i] += linalg::exp_weighted_cell(
                    big_n,
                    self.nodes[l - 1],
                    h,
                    self.nodes[l],
                    y.tail[l - 1][i],
                    y.tail[l][i],
                );
            }
            running = next;
            tail.push(running.clone());
        }
        Ok(LiftedVector { head, tail })
    }

    /// `B u = (b0 u, b1(·) u)`.
    pub fn apply_b(&self, u: &DVector<f64>) -> Result<LiftedVector> {
        if u.len() != self.m() {
            return Err(Error::DimensionMismatch {
                what: "control",
                expected: self.m(),
                got: u.len(),
            });
        }
        Ok(LiftedVector {
            head: &self.b0 * u,
            tail: self.b1.iter().map(|b| b * u).collect(),
        })
    }

    /// `B* x = b0ᵀ x0 + ∫ b1(ξ)ᵀ x1(ξ) dξ`.
    pub fn apply_bstar(&self, x: &LiftedVector) -> Result<DVector<f64>> {
        self.check_vector(x)?;
        let mut out = self.b0.transpose() * &x.head;
        for ((w, b), v) in self.weights.iter().zip(&self.b1).zip(&x.tail) {
            out += b.transpose() * v * *w;
        }
        Ok(out)
    }

    /// `G w = (σ w, 0)`.
    pub fn apply_g(&self, w: &DVector<f64>) -> Result<LiftedVector> {
        if w.len() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "noise",
                expected: self.k(),
                got: w.len(),
            });
        }
        let mut out = self.zero_vector();
        out.head = &self.sigma * w;
        Ok(out)
    }

    /// `(e^{tA} B)_0 = e^{t a0} b0 + ∫_{-min(t,d)}^0 e^{(t+s)a0} b1(s) ds`.
    pub fn head_of_semigroup_b(&self, t: f64) -> Result<DMatrix<f64>> {
        Self::check_time(t)?;
        Ok(expm(&self.a0, t) * &self.b0 + self.cut_integral_mat(t, &self.b1))
    }

    /// Lift of the current state: head `y`, tail `∫_{-d}^{ξ} b1(ζ) u(ζ + t - ξ) dζ`.
    pub fn lift(&self, y: &DVector<f64>, path: &ControlPath, t: f64) -> Result<LiftedVector> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.n(),
                got: y.len(),
            });
        }
        if path.m() != self.m() {
            return Err(Error::DimensionMismatch {
                what: "control path",
                expected: self.m(),
                got: path.m(),
            });
        }
        path.require_window(t - self.params.d, t)?;
        let h = self.h;
        let mut tail = Vec::with_capacity(self.points());
        for l in 0..self.points() {
            let mut acc = DVector::zeros(self.n());
            for p in 0..=l {
                if l == 0 {
                    break;
                }
                let w = if p == 0 || p == l { 0.5 * h } else { h };
                let at = t + self.nodes[p] - self.nodes[l];
                let u = DVector::from_column_slice(path.value_at(at)?);
                acc += &self.b1[p] * u * w;
            }
            tail.push(acc);
        }
        Ok(LiftedVector { head: y.clone(), tail })
    }

    /// Initial datum `(y0, ∫_{-d}^{ξ} b1(ζ) u0(ζ - ξ) dζ)` from a history on `[-d, 0)`.
    pub fn lift_initial_datum(&self, y0: &DVector<f64>, u0: &ControlPath) -> Result<LiftedVector> {
        self.lift(y0, u0, u0.end_time())
    }

    /// Tests the image inclusions that make the Ornstein-Uhlenbeck semigroup smooth along
    /// the control directions.
    pub fn check_structure_hypotheses(&self, t_samples: &[f64]) -> Result<StructureReport> {
        let n = self.n();
        let proj = DMatrix::identity(n, n) - &self.sigma * linalg::pseudo_inverse(&self.sigma);
        let residual = |m: &DMatrix<f64>| {
            let norm = m.norm();
            if norm <= 1e-300 {
                0.0
            } else {
                (&proj * m).norm() / norm.max(1e-14)
            }
        };
        let b1_residual = self.b1.iter().map(residual).fold(0.0, f64::max);
        let mut samples = Vec::with_capacity(t_samples.len());
        for &t in t_samples {
            Self::check_time(t)?;
            let reg = residual(&(expm(&self.a0, t) * &self.b0)).max(b1_residual);
            let bis = residual(&self.head_of_semigroup_b(t)?);
            samples.push(StructureSample {
                t,
                regular_residual: reg,
                combined_residual: bis,
            });
        }
        let max_reg = samples.iter().map(|s| s.regular_residual).fold(b1_residual, f64::max);
        let max_bis = samples.iter().map(|s| s.combined_residual).fold(0.0, f64::max);
        Ok(StructureReport {
            samples,
            b1_residual,
            max_regular_residual: max_reg,
            max_combined_residual: max_bis,
            regular_holds: max_reg <= STRUCTURE_TOLERANCE,
            combined_holds: max_bis <= STRUCTURE_TOLERANCE,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureSample {
    pub t: f64,
    /// `Im e^{t a0} b0 ⊆ Im σ` residual (also covering every `b1(s)`).
    pub regular_residual: f64,
    /// `Im (e^{tA}B)_0 ⊆ Im σ` residual.
    pub combined_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub samples: Vec<StructureSample>,
    pub b1_residual: f64,
    pub max_regular_residual: f64,
    pub max_combined_residual: f64,
    pub regular_holds: bool,
    pub combined_holds: bool,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.regular_holds || self.combined_holds
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::StructureHypotheses {
                regular: self.max_regular_residual,
                combined: self.max_combined_residual,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(a0: f64, b0: f64, b1: f64, d: f64, points: usize) -> Model {
        Model::new(ModelParams::scalar(a0, b0, 1.0, |_| b1, d, 1.0, points)).unwrap()
    }

    fn with_tail(model: &Model, head: f64, f: impl Fn(f64) -> f64) -> LiftedVector {
        LiftedVector {
            head: DVector::from_element(1, head),
            tail: model.nodes().iter().map(|&s| DVector::from_element(1, f(s))).collect(),
        }
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = ModelParams::scalar(0.0, 1.0, 1.0, |_| 1.0, 1.0, 1.0, 11);
        p.d = 0.0;
        assert!(Model::new(p.clone()).is_err());
        p.d = 1.0;
        p.delay_grid_points = 2;
        assert!(Model::new(p.clone()).is_err());
        p.delay_grid_points = 11;
        p.a0 = vec![vec![f64::NAN]];
        assert!(Model::new(p).is_err());
    }

    #[test]
    fn semigroup_identity_and_trivial_cases() {
        let model = scalar(0.0, 1.0, 1.0, 1.0, 101);
        let x = with_tail(&model, 0.7, |s| (3.0 * s).sin());
        assert_eq!(model.apply_semigroup(0.0, &x).unwrap(), x);

        let x = with_tail(&model, 1.0, |_| 0.0);
        let y = model.apply_semigroup(0.3, &x).unwrap();
        assert_abs_diff_eq!(y.head[0], 1.0, epsilon = 1e-14);
        assert!(y.tail.iter().all(|v| v[0] == 0.0));

        let x = with_tail(&model, 0.0, |_| 1.0);
        let y = model.apply_semigroup(0.3, &x).unwrap();
        assert_abs_diff_eq!(y.head[0], 0.3, epsilon = 1e-12);
        for (s, v) in model.nodes().iter().zip(&y.tail) {
            // the node at the jump carries the midpoint value
            if (s + 0.7).abs() < 1e-9 {
                assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
            } else if *s > -0.7 {
                assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
            } else {
                assert_eq!(v[0], 0.0);
            }
        }
        assert!(model.apply_semigroup(-0.1, &x).is_err());
    }

    #[test]
    fn adjoint_trivial_case() {
        let model = scalar(0.0, 1.0, 1.0, 1.0, 101);
        let z = with_tail(&model, 1.0, |_| 0.0);
        assert_eq!(model.apply_semigroup_adjoint(0.0, &z).unwrap(), z);
        let y = model.apply_semigroup_adjoint(0.2, &z).unwrap();
        assert_abs_diff_eq!(y.head[0], 1.0, epsilon = 1e-14);
        for (s, v) in model.nodes().iter().zip(&y.tail) {
            if (s + 0.2).abs() < 1e-9 {
                assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
            } else if *s > -0.2 {
                assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
            } else {
                assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn resolvent_trivial_cases() {
        let model = scalar(0.0, 1.0, 1.0, 1.0, 51);
        let zero = model.zero_vector();
        let r = model.apply_resolvent(1.0, &zero).unwrap();
        assert_eq!(model.norm(&r), 0.0);
        let x = with_tail(&model, 1.0, |_| 0.0);
        let r = model.apply_resolvent(1.0, &x).unwrap();
        assert_abs_diff_eq!(r.head[0], 1.0, epsilon = 1e-14);
        assert!(r.tail.iter().all(|v| v[0] == 0.0));
        assert!(model.apply_resolvent(0.0, &x).is_err());
        // N coinciding with an eigenvalue of a0
        let model = scalar(2.0, 1.0, 1.0, 1.0, 51);
        assert!(matches!(model.apply_resolvent(2.0, &x), Err(Error::IllPosedResolvent(_))));
    }

    #[test]
    fn b_operators() {
        let model = scalar(0.0, 1.0, 2.0, 1.0, 21);
        let bu = model.apply_b(&DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(bu.head[0], 3.0);
        assert!(bu.tail.iter().all(|v| v[0] == 6.0));
        let x = with_tail(&model, 0.4, |_| 0.0);
        assert_abs_diff_eq!(model.apply_bstar(&x).unwrap()[0], 0.4, epsilon = 1e-15);
        assert!(model.apply_b(&DVector::zeros(2)).is_err());
        let g = model.apply_g(&DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(g.head[0], 2.0);
    }

    #[test]
    fn head_of_semigroup_b_cases() {
        let model = scalar(0.0, 1.0, 1.0, 1.0, 101);
        assert_abs_diff_eq!(model.head_of_semigroup_b(0.0).unwrap()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(model.head_of_semigroup_b(0.5).unwrap()[(0, 0)], 1.5, epsilon = 1e-12);
        // off-grid cut point
        assert_abs_diff_eq!(model.head_of_semigroup_b(0.123).unwrap()[(0, 0)], 1.123, epsilon = 1e-12);
        assert_abs_diff_eq!(model.head_of_semigroup_b(3.0).unwrap()[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn lift_cases() {
        let model = scalar(0.0, 1.0, 1.0, 1.0, 101);
        let h = model.grid_step();
        let y0 = DVector::from_element(1, 0.3);
        let zero = ControlPath::constant(-1.0, 0.0, h, &[0.0]).unwrap();
        let x = model.lift_initial_datum(&y0, &zero).unwrap();
        assert_eq!(x.head[0], 0.3);
        assert!(x.tail.iter().all(|v| v[0] == 0.0));

        let ones = ControlPath::constant(-1.0, 0.0, h, &[1.0]).unwrap();
        let x = model.lift_initial_datum(&y0, &ones).unwrap();
        for (s, v) in model.nodes().iter().zip(&x.tail) {
            assert_abs_diff_eq!(v[0], s + 1.0, epsilon = 1e-12);
        }

        let short = ControlPath::constant(-0.5, 0.0, h, &[1.0]).unwrap();
        assert!(matches!(
            model.lift_initial_datum(&y0, &short),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn lift_linear_history_is_second_order() {
        // oracle: ∫_{-d}^{ξ} (ζ - ξ) dζ = -(ξ + d)²/2
        let mut errs = Vec::new();
        for &points in &[51usize, 101, 201] {
            let model = scalar(0.0, 1.0, 1.0, 1.0, points);
            let h = model.grid_step();
            let u0 = ControlPath::from_fn(-1.0, 0.0, h, |s| vec![s]).unwrap();
            let x = model.lift_initial_datum(&DVector::zeros(1), &u0).unwrap();
            let err = model
                .nodes()
                .iter()
                .zip(&x.tail)
                .map(|(s, v)| (v[0] + (s + 1.0).powi(2) / 2.0).abs())
                .fold(0.0, f64::max);
            errs.push((h, err));
        }
        for (h, e) in &errs {
            assert!(*e <= 1.0 * h * h, "h = {h}: err {e}");
        }
        assert!(errs[0].1 / errs[2].1 > 10.0);
    }

    #[test]
    fn structure_examples() {
        let t_samples = [0.1, 0.5, 1.0];
        let model = scalar(-0.3, 1.0, 1.0, 1.0, 21);
        let rep = model.check_structure_hypotheses(&t_samples).unwrap();
        assert!(rep.regular_holds && rep.combined_holds);
        assert_eq!(rep.max_regular_residual, 0.0);

        let sigma = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let a0 = DMatrix::zeros(2, 2);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let p = ModelParams::from_matrices(a0.clone(), b0, sigma.clone(), |_| DMatrix::zeros(2, 1), 1.0, 1.0, 11);
        let rep = Model::new(p).unwrap().check_structure_hypotheses(&t_samples).unwrap();
        assert!(!rep.regular_holds);
        assert_abs_diff_eq!(rep.max_regular_residual, 1.0, epsilon = 1e-12);
        assert!(!rep.passed());

        let b0 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let p = ModelParams::from_matrices(
            a0,
            b0,
            sigma,
            |s| DMatrix::from_row_slice(2, 1, &[(2.0 * s).cos() + s, 0.0]),
            1.0,
            1.0,
            11,
        );
        let rep = Model::new(p).unwrap().check_structure_hypotheses(&t_samples).unwrap();
        assert!(rep.regular_holds && rep.combined_holds);
    }
}
