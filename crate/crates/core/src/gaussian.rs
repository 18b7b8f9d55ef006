//! Covariance of the uncontrolled head, Gaussian expectations realizing the
//! Ornstein-Uhlenbeck semigroup on functions of the head, and the B-gradient estimator.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::Model;
use crate::linalg;

/// Largest accepted condition number of the covariance when it has to be inverted.
pub const MAX_CONDITION: f64 = 1e12;
/// Stopping rule for step doubling in the covariance integrator.
const COV_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub t: f64,
    pub q: DMatrix<f64>,
    /// Lower factor of `q` (plus `floor·I` when `floor_used`).
    pub chol: DMatrix<f64>,
    pub floor_used: bool,
}

impl Covariance {
    pub fn condition(&self) -> f64 {
        linalg::spd_condition(&self.q)
    }

    /// Errors with `SingularSmoothing` when `q` cannot be inverted reliably.
    pub fn require_invertible(&self) -> Result<()> {
        let condition = if self.t > 0.0 { self.condition() } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularSmoothing { t: self.t, condition });
        }
        Ok(())
    }
}

fn rk4_lyapunov(a: &DMatrix<f64>, ss: &DMatrix<f64>, t: f64, steps: usize) -> DMatrix<f64> {
    let rhs = |q: &DMatrix<f64>| a * q + q * a.transpose() + ss;
    let dt = t / steps as f64;
    let mut q = DMatrix::zeros(a.nrows(), a.ncols());
    for _ in 0..steps {
        let k1 = rhs(&q);
        let k2 = rhs(&(&q + &k1 * (0.5 * dt)));
        let k3 = rhs(&(&q + &k2 * (0.5 * dt)));
        let k4 = rhs(&(&q + &k3 * dt));
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    q
}

/// `Q_t = ∫_0^t e^{s a0} σσᵀ e^{s a0ᵀ} ds` via the Lyapunov ODE.
pub fn covariance(model: &Model, t: f64) -> Result<Covariance> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    let n = model.n();
    if t == 0.0 {
        return Ok(Covariance {
            t,
            q: DMatrix::zeros(n, n),
            chol: DMatrix::zeros(n, n),
            floor_used: false,
        });
    }
    let a = model.a0();
    let ss = model.sigma() * model.sigma().transpose();
    let mut steps = ((t * a.norm() * 4.0).ceil() as usize).max(8);
    let mut q = rk4_lyapunov(a, &ss, t, steps);
    loop {
        steps *= 2;
        let finer = rk4_lyapunov(a, &ss, t, steps);
        let diff = (&finer - &q).amax();
        q = finer;
        if diff <= COV_TOLERANCE * q.amax().max(f64::MIN_POSITIVE) || steps >= 1 << 20 {
            break;
        }
    }
    let q = linalg::symmetrize(&q);
    if !linalg::all_finite(&q) {
        return Err(Error::NonFinite(format!("covariance at t = {t}")));
    }
    let (chol, floor_used) = match q.clone().cholesky() {
        Some(c) => (c.l(), false),
        None => {
            let floor = 1e-12 * q.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
            let floored = &q + DMatrix::identity(n, n) * floor;
            let c = floored
                .cholesky()
                .ok_or_else(|| Error::NonFinite(format!("covariance at t = {t} is indefinite")))?;
            (c.l(), true)
        }
    };
    Ok(Covariance {
        t,
        q,
        chol,
        floor_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum QuadratureScheme {
    GaussHermite { order: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    #[serde(flatten)]
    pub scheme: QuadratureScheme,
    /// Assert the smoothing bound on every B-gradient evaluation.
    #[serde(default)]
    pub debug_checks: bool,
}

impl QuadratureRule {
    pub fn gauss_hermite(order: usize) -> Self {
        Self {
            scheme: QuadratureScheme::GaussHermite { order },
            debug_checks: false,
        }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            scheme: QuadratureScheme::MonteCarlo { samples, seed },
            debug_checks: false,
        }
    }

    /// Tensor Gauss-Hermite of order 20 up to dimension 3, antithetic Monte Carlo above.
    pub fn default_for(n: usize) -> Self {
        if n <= 3 {
            Self::gauss_hermite(20)
        } else {
            Self::monte_carlo(20_000, 0)
        }
    }

    pub fn with_debug_checks(mut self, on: bool) -> Self {
        self.debug_checks = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            QuadratureScheme::GaussHermite { order } if order < 3 => Err(Error::InvalidArgument(format!(
                "Gauss-Hermite order must be at least 3, got {order}"
            ))),
            QuadratureScheme::MonteCarlo { samples, .. } if samples < 1000 => Err(Error::InvalidArgument(format!(
                "Monte-Carlo sample count must be at least 1000, got {samples}"
            ))),
            _ => Ok(()),
        }
    }

    /// Standard-normal nodes and weights in dimension `n`.
    pub fn nodes(&self, n: usize) -> Result<StandardNodes> {
        self.validate()?;
        match self.scheme {
            QuadratureScheme::GaussHermite { order } => {
                let (x, w) = gauss_hermite_1d(order);
                let count = order.pow(n as u32);
                let mut points = Vec::with_capacity(count * n);
                let mut weights = Vec::with_capacity(count);
                let mut idx = vec![0usize; n];
                for _ in 0..count {
                    let mut wt = 1.0;
                    for &i in &idx {
                        points.push(x[i]);
                        wt *= w[i];
                    }
                    weights.push(wt);
                    for slot in idx.iter_mut() {
                        *slot += 1;
                        if *slot < order {
                            break;
                        }
                        *slot = 0;
                    }
                }
                Ok(StandardNodes { dim: n, points, weights })
            }
            QuadratureScheme::MonteCarlo { samples, seed } => {
                let pairs = samples.div_ceil(2);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut points = Vec::with_capacity(2 * pairs * n);
                for _ in 0..pairs {
                    let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    points.extend(xi.iter());
                    points.extend(xi.iter().map(|v| -v));
                }
                let w = 1.0 / (2 * pairs) as f64;
                Ok(StandardNodes {
                    dim: n,
                    points,
                    weights: vec![w; 2 * pairs],
                })
            }
        }
    }
}

/// Nodes `ξ_j` and weights `w_j` with `Σ w_j g(ξ_j) ≈ E g(ξ)`, `ξ ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardNodes {
    pub dim: usize,
    /// Flat, node-major.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StandardNodes {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    /// Nodes mapped through `z = y + L ξ`, flat and node-major.
    pub fn mapped(&self, chol: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut out = Vec::with_capacity(self.points.len());
        for j in 0..self.len() {
            let xi = self.point(j);
            for r in 0..n {
                let mut acc = y[r];
                for c in 0..=r.min(n - 1) {
                    acc += chol[(r, c)] * xi[c];
                }
                out.push(acc);
            }
        }
        out
    }
}

/// Probabilists' Gauss-Hermite rule (weight `e^{-x²/2}/√(2π)`) by Golub-Welsch.
pub fn gauss_hermite_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(order, order);
    for i in 1..order {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver noise
    let mut x = vec![0.0; order];
    let mut w = vec![0.0; order];
    for i in 0..order {
        let j = order - 1 - i;
        x[i] = 0.5 * (pairs[i].0 - pairs[j].0);
        w[i] = 0.5 * (pairs[i].1 + pairs[j].1);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (x, w)
}

fn eval_checked(f: &mut impl FnMut(&[f64]) -> f64, z: &[f64]) -> Result<f64> {
    let v = f(z);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v} at {z:?}")))
    }
}

/// `E f(y + L ξ)`.
pub fn expect(nodes: &StandardNodes, chol: &DMatrix<f64>, y: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    let n = nodes.dim;
    let mut z = vec![0.0; n];
    let mut acc = 0.0;
    for j in 0..nodes.len() {
        let xi = nodes.point(j);
        for r in 0..n {
            z[r] = y[r] + (0..=r).map(|c| chol[(r, c)] * xi[c]).sum::<f64>();
        }
        acc += nodes.weights[j] * eval_checked(&mut f, &z)?;
    }
    Ok(acc)
}

/// `(E f(y + L ξ) ξ, max_j |f(y + L ξ_j)|)`.
pub fn expect_score(
    nodes: &StandardNodes,
    chol: &DMatrix<f64>,
    y: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<(DVector<f64>, f64)> {
    let n = nodes.dim;
    let mut z = vec![0.0; n];
    let mut acc = DVector::zeros(n);
    let mut sup = 0.0_f64;
    for j in 0..nodes.len() {
        let xi = nodes.point(j);
        for r in 0..n {
            z[r] = y[r] + (0..=r).map(|c| chol[(r, c)] * xi[c]).sum::<f64>();
        }
        let v = eval_checked(&mut f, &z)?;
        sup = sup.max(v.abs());
        for r in 0..n {
            acc[r] += nodes.weights[j] * v * xi[r];
        }
    }
    Ok((acc, sup))
}

fn check_point(model: &Model, y: &[f64]) -> Result<()> {
    if y.len() != model.n() {
        return Err(Error::DimensionMismatch {
            what: "head point",
            expected: model.n(),
            got: y.len(),
        });
    }
    Ok(())
}

/// `R_t[φ](x) = E φ̄(y + z)`, `z ~ N(0, Q_t)`, where `y` is the head of `e^{tA}x`.
pub fn ou_apply(model: &Model, t: f64, fbar: impl Fn(&[f64]) -> f64, y: &[f64], rule: &QuadratureRule) -> Result<f64> {
    check_point(model, y)?;
    if t == 0.0 {
        let mut fbar = fbar;
        return eval_checked(&mut fbar, y);
    }
    let cov = covariance(model, t)?;
    let nodes = rule.nodes(model.n())?;
    expect(&nodes, &cov.chol, y, fbar)
}

/// B-gradient of `x ↦ R_t[φ](x)` at a state whose propagated head is `y`.
pub fn ou_grad_b(
    model: &Model,
    t: f64,
    fbar: impl Fn(&[f64]) -> f64,
    y: &[f64],
    rule: &QuadratureRule,
) -> Result<DVector<f64>> {
    check_point(model, y)?;
    let cov = covariance(model, t)?;
    cov.require_invertible()?;
    let g = model.head_of_semigroup_b(t)?;
    let nodes = rule.nodes(model.n())?;
    grad_b_with(&cov, &g, &nodes, y, fbar, rule.debug_checks)
}

/// B-gradient from precomputed covariance and `G(t)`.
pub fn grad_b_with(
    cov: &Covariance,
    g: &DMatrix<f64>,
    nodes: &StandardNodes,
    y: &[f64],
    fbar: impl Fn(&[f64]) -> f64,
    debug_checks: bool,
) -> Result<DVector<f64>> {
    let (score, sup) = expect_score(nodes, &cov.chol, y, fbar)?;
    // L^{-1} G, column k is the whitened control direction
    let whitened = cov
        .chol
        .solve_lower_triangular(g)
        .ok_or(Error::SingularSmoothing {
            t: cov.t,
            condition: f64::INFINITY,
        })?;
    let grad = whitened.transpose() * &score;
    if debug_checks {
        for k in 0..grad.len() {
            let bound = sup * whitened.column(k).norm();
            if grad[k].abs() > bound * (1.0 + 1e-8) + 1e-12 {
                return Err(Error::BoundViolation {
                    observed: grad[k].abs(),
                    bound,
                });
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateProbe {
    /// `(t, sup_k |∇^B R_t[φ]_k|)`.
    pub samples: Vec<(f64, f64)>,
    /// Least-squares slope in log-log coordinates; `None` when degenerate.
    pub slope: Option<f64>,
    pub degenerate: bool,
}

/// Fits the small-time growth rate of the B-gradient at the head point `y`.
pub fn gradb_rate_probe(
    model: &Model,
    fbar: impl Fn(&[f64]) -> f64,
    y: &[f64],
    t_grid: &[f64],
    rule: &QuadratureRule,
) -> Result<RateProbe> {
    check_point(model, y)?;
    let nodes = rule.nodes(model.n())?;
    let mut samples = Vec::with_capacity(t_grid.len());
    let mut degenerate = t_grid.len() < 2;
    for &t in t_grid {
        let cov = covariance(model, t)?;
        cov.require_invertible()?;
        let g = model.head_of_semigroup_b(t)?;
        let grad = grad_b_with(&cov, &g, &nodes, y, &fbar, rule.debug_checks)?;
        // compare against the smoothing bound to separate a zero derivative from noise
        let (_, sup) = expect_score(&nodes, &cov.chol, y, &fbar)?;
        let whitened = cov.chol.solve_lower_triangular(&g).unwrap_or(g);
        let bound = sup * whitened.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let value = grad.amax();
        if !(value > 1e-10 * bound) {
            degenerate = true;
        }
        samples.push((t, value));
    }
    let slope = if degenerate {
        None
    } else {
        let pts: Vec<(f64, f64)> = samples.iter().map(|(t, v)| (t.ln(), v.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    };
    Ok(RateProbe {
        samples,
        slope,
        degenerate,
    })
}
