//! Terminal and running costs, control cost and the Hamiltonians they induce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar function of the head `y ∈ R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialFn {
    Constant {
        value: f64,
    },
    /// `coeffs·y + offset`
    Linear {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `(y - center)ᵀ matrix (y - center) + offset`
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        offset: f64,
    },
    /// `offset - depth·exp(-|y - center|² / (2 width²))`
    GaussianWell {
        center: Vec<f64>,
        width: f64,
        depth: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `amplitude·tanh((direction·y - shift) / width)`
    SmoothStep {
        direction: Vec<f64>,
        #[serde(default)]
        shift: f64,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `Σ_i amplitude·cos(freq_i y_i + phase)`
    Cosine {
        freq: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amplitude·sign(direction·y - shift)`, with `sign(0) = 0`
    Step {
        direction: Vec<f64>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SpatialFn {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            SpatialFn::Constant { value } => *value,
            SpatialFn::Linear { coeffs, offset } => dot(coeffs, y) + offset,
            SpatialFn::Quadratic { matrix, center, offset } => {
                let n = y.len();
                let mut acc = *offset;
                for i in 0..n {
                    let di = y[i] - center.as_ref().map_or(0.0, |c| c[i]);
                    for j in 0..n {
                        let dj = y[j] - center.as_ref().map_or(0.0, |c| c[j]);
                        acc += di * matrix[i][j] * dj;
                    }
                }
                acc
            }
            SpatialFn::GaussianWell {
                center,
                width,
                depth,
                offset,
            } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                offset - depth * (-r2 / (2.0 * width * width)).exp()
            }
            SpatialFn::SmoothStep {
                direction,
                shift,
                width,
                amplitude,
            } => amplitude * ((dot(direction, y) - shift) / width).tanh(),
            SpatialFn::Cosine { freq, amplitude, phase } => freq
                .iter()
                .zip(y)
                .map(|(w, v)| amplitude * (w * v + phase).cos())
                .sum(),
            SpatialFn::Step {
                direction,
                shift,
                amplitude,
            } => {
                let s = dot(direction, y) - shift;
                if s > 0.0 {
                    *amplitude
                } else if s < 0.0 {
                    -amplitude
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact gradient, `None` where the function is not differentiable.
    pub fn gradient(&self, y: &[f64]) -> Option<Vec<f64>> {
        let n = y.len();
        match self {
            SpatialFn::Constant { .. } => Some(vec![0.0; n]),
            SpatialFn::Linear { coeffs, .. } => Some(coeffs.clone()),
            SpatialFn::Quadratic { matrix, center, .. } => {
                let d: Vec<f64> = (0..n).map(|i| y[i] - center.as_ref().map_or(0.0, |c| c[i])).collect();
                Some(
                    (0..n)
                        .map(|i| (0..n).map(|j| (matrix[i][j] + matrix[j][i]) * d[j]).sum())
                        .collect(),
                )
            }
            SpatialFn::GaussianWell {
                center, width, depth, ..
            } => {
                let w2 = width * width;
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                let e = depth * (-r2 / (2.0 * w2)).exp();
                Some(y.iter().zip(center).map(|(a, c)| e * (a - c) / w2).collect())
            }
            SpatialFn::SmoothStep {
                direction,
                shift,
                width,
                amplitude,
            } => {
                let th = ((dot(direction, y) - shift) / width).tanh();
                let s = amplitude * (1.0 - th * th) / width;
                Some(direction.iter().map(|d| s * d).collect())
            }
            SpatialFn::Cosine { freq, amplitude, phase } => Some(
                freq.iter()
                    .zip(y)
                    .map(|(w, v)| -amplitude * w * (w * v + phase).sin())
                    .collect(),
            ),
            SpatialFn::Step { direction, shift, .. } => {
                if dot(direction, y) == *shift {
                    None
                } else {
                    Some(vec![0.0; n])
                }
            }
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, SpatialFn::Step { .. })
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            SpatialFn::Linear { coeffs, .. } => coeffs.iter().all(|c| *c == 0.0),
            SpatialFn::Quadratic { matrix, .. } => matrix.iter().flatten().all(|c| *c == 0.0),
            _ => true,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            SpatialFn::Constant { .. } => true,
            SpatialFn::Linear { coeffs, .. } => coeffs.iter().all(|c| *c == 0.0),
            SpatialFn::Quadratic { matrix, .. } => matrix.iter().flatten().all(|c| *c == 0.0),
            SpatialFn::GaussianWell { depth, .. } => *depth == 0.0,
            SpatialFn::SmoothStep { amplitude, .. }
            | SpatialFn::Cosine { amplitude, .. }
            | SpatialFn::Step { amplitude, .. } => *amplitude == 0.0,
        }
    }

    /// Polynomial degree for unbounded kinds, 0 otherwise.
    pub fn growth_degree(&self) -> u32 {
        if self.is_bounded() {
            0
        } else {
            match self {
                SpatialFn::Linear { .. } => 1,
                _ => 2,
            }
        }
    }

    pub fn validate(&self, n: usize, key: &str) -> Result<()> {
        let len_ok = |v: &Vec<f64>, what: &str| -> Result<()> {
            if v.len() != n {
                Err(Error::config(
                    format!("{key}.{what}"),
                    format!("expected {n} entries, got {}", v.len()),
                ))
            } else {
                Ok(())
            }
        };
        let positive = |v: f64, what: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{key}.{what}"), format!("must be positive, got {v}")))
            }
        };
        match self {
            SpatialFn::Constant { .. } => Ok(()),
            SpatialFn::Linear { coeffs, .. } => len_ok(coeffs, "coeffs"),
            SpatialFn::Quadratic { matrix, center, .. } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::config(format!("{key}.matrix"), format!("must be {n}x{n}")));
                }
                if let Some(c) = center {
                    len_ok(c, "center")?;
                }
                Ok(())
            }
            SpatialFn::GaussianWell { center, width, .. } => {
                len_ok(center, "center")?;
                positive(*width, "width")
            }
            SpatialFn::SmoothStep { direction, width, .. } => {
                len_ok(direction, "direction")?;
                positive(*width, "width")
            }
            SpatialFn::Cosine { freq, .. } => len_ok(freq, "freq"),
            SpatialFn::Step { direction, .. } => len_ok(direction, "direction"),
        }
    }
}

/// Time profile added to the spatial part of the running cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    #[default]
    Zero,
    /// `mean + amplitude·cos(frequency·t)`
    Harmonic {
        mean: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Zero => 0.0,
            TimeProfile::Harmonic {
                mean,
                amplitude,
                frequency,
            } => mean + amplitude * (frequency * t).cos(),
        }
    }

    /// `sup_t |profile(t)|`.
    pub fn sup(&self) -> f64 {
        match self {
            TimeProfile::Zero => 0.0,
            TimeProfile::Harmonic { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }
}

/// Running state cost `ℓ̄0(t, y) = spatial(y) + time(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningCost {
    pub spatial: SpatialFn,
    #[serde(default)]
    pub time: TimeProfile,
}

impl RunningCost {
    pub fn zero() -> Self {
        Self {
            spatial: SpatialFn::Constant { value: 0.0 },
            time: TimeProfile::Zero,
        }
    }

    pub fn eval(&self, t: f64, y: &[f64]) -> f64 {
        self.spatial.eval(y) + self.time.eval(t)
    }

    pub fn is_state_independent(&self) -> bool {
        self.spatial.is_constant()
    }
}

impl Default for RunningCost {
    fn default() -> Self {
        Self::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HamiltonianKind {
    /// `ℓ1(u) = θ|u|²/2` on the box `[lo, hi]`.
    QuadraticBox { theta: f64, lo: Vec<f64>, hi: Vec<f64> },
    /// `ℓ1(u) = θ|u|²/2` on `R^m`.
    QuadraticUnconstrained { theta: f64, m: usize },
    /// Finitely many controls `u_j` with costs `ℓ1(u_j)`.
    FiniteSet { controls: Vec<Vec<f64>>, costs: Vec<f64> },
}

impl HamiltonianKind {
    pub fn control_dim(&self) -> usize {
        match self {
            HamiltonianKind::QuadraticBox { lo, .. } => lo.len(),
            HamiltonianKind::QuadraticUnconstrained { m, .. } => *m,
            HamiltonianKind::FiniteSet { controls, .. } => controls.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let key = "cost.hamiltonian";
        match self {
            HamiltonianKind::QuadraticBox { theta, lo, hi } => {
                if !(*theta > 0.0) {
                    return Err(Error::config(format!("{key}.theta"), "must be positive"));
                }
                if lo.len() != m || hi.len() != m {
                    return Err(Error::config(format!("{key}.lo/hi"), format!("expected {m} entries")));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(Error::config(format!("{key}.lo/hi"), "need finite lo <= hi"));
                }
            }
            HamiltonianKind::QuadraticUnconstrained { theta, m: mm } => {
                if !(*theta > 0.0) {
                    return Err(Error::config(format!("{key}.theta"), "must be positive"));
                }
                if *mm != m {
                    return Err(Error::config(format!("{key}.m"), format!("expected {m}")));
                }
            }
            HamiltonianKind::FiniteSet { controls, costs } => {
                if controls.is_empty() {
                    return Err(Error::config(format!("{key}.controls"), "need at least one control"));
                }
                if controls.iter().any(|u| u.len() != m) {
                    return Err(Error::config(format!("{key}.controls"), format!("every control needs {m} entries")));
                }
                if costs.len() != controls.len() {
                    return Err(Error::config(format!("{key}.costs"), "one cost per control"));
                }
            }
        }
        Ok(())
    }

    /// Control cost `ℓ1(u)`. For finite sets `u` must be one of the candidates.
    pub fn ell1(&self, u: &[f64]) -> f64 {
        match self {
            HamiltonianKind::QuadraticBox { theta, .. } | HamiltonianKind::QuadraticUnconstrained { theta, .. } => {
                0.5 * theta * u.iter().map(|v| v * v).sum::<f64>()
            }
            HamiltonianKind::FiniteSet { controls, costs } => controls
                .iter()
                .position(|c| c.as_slice() == u)
                .map_or(f64::INFINITY, |j| costs[j]),
        }
    }

    /// Current-value Hamiltonian `⟨p, u⟩ + ℓ1(u)`.
    pub fn hcv(&self, p: &[f64], u: &[f64]) -> f64 {
        dot(p, u) + self.ell1(u)
    }

    /// Minimizer of `hcv(p, ·)` over `U`; lowest index wins ties for finite sets.
    pub fn argmin(&self, p: &[f64]) -> Vec<f64> {
        match self {
            HamiltonianKind::QuadraticBox { theta, lo, hi } => p
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(pi, (l, h))| (-pi / theta).clamp(*l, *h))
                .collect(),
            HamiltonianKind::QuadraticUnconstrained { theta, .. } => p.iter().map(|pi| -pi / theta).collect(),
            HamiltonianKind::FiniteSet { controls, costs } => {
                let mut best = 0;
                let mut best_val = f64::INFINITY;
                for (j, (u, c)) in controls.iter().zip(costs).enumerate() {
                    let v = dot(p, u) + c;
                    if v < best_val {
                        best = j;
                        best_val = v;
                    }
                }
                controls[best].clone()
            }
        }
    }

    /// `H_min(p) = inf_{u ∈ U} hcv(p, u)`.
    pub fn hmin(&self, p: &[f64]) -> f64 {
        match self {
            HamiltonianKind::QuadraticUnconstrained { theta, .. } => -p.iter().map(|v| v * v).sum::<f64>() / (2.0 * theta),
            HamiltonianKind::FiniteSet { controls, costs } => controls
                .iter()
                .zip(costs)
                .map(|(u, c)| dot(p, u) + c)
                .fold(f64::INFINITY, f64::min),
            HamiltonianKind::QuadraticBox { .. } => {
                let u = self.argmin(p);
                self.hcv(p, &u)
            }
        }
    }

    /// Global Lipschitz constant of `H_min`, absent when it is only locally Lipschitz.
    pub fn hmin_lipschitz(&self) -> Option<f64> {
        match self {
            HamiltonianKind::QuadraticBox { lo, hi, .. } => {
                Some(lo.iter().zip(hi).map(|(l, h)| l.abs().max(h.abs()).powi(2)).sum::<f64>().sqrt())
            }
            HamiltonianKind::QuadraticUnconstrained { .. } => None,
            HamiltonianKind::FiniteSet { controls, .. } => Some(
                controls
                    .iter()
                    .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
            ),
        }
    }

    /// Projection onto `U`: box clip, identity, or nearest candidate.
    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        match self {
            HamiltonianKind::QuadraticBox { lo, hi, .. } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect(),
            HamiltonianKind::QuadraticUnconstrained { .. } => u.to_vec(),
            HamiltonianKind::FiniteSet { controls, .. } => {
                let dist = |c: &Vec<f64>| c.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                controls
                    .iter()
                    .fold((f64::INFINITY, &controls[0]), |acc, c| {
                        let d = dist(c);
                        if d < acc.0 {
                            (d, c)
                        } else {
                            acc
                        }
                    })
                    .1
                    .clone()
            }
        }
    }

    /// The unconstrained quadratic Hamiltonian is not globally Lipschitz.
    pub fn lipschitz_warning(&self) -> bool {
        matches!(self, HamiltonianKind::QuadraticUnconstrained { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Growth {
    #[default]
    Bounded,
    Polynomial {
        degree: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub terminal: SpatialFn,
    #[serde(default)]
    pub running: RunningCost,
    pub hamiltonian: HamiltonianKind,
    #[serde(default)]
    pub growth: Growth,
}

impl CostSpec {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        self.terminal.validate(n, "cost.terminal")?;
        self.running.spatial.validate(n, "cost.running.spatial")?;
        self.hamiltonian.validate(m)?;
        let degree = self.terminal.growth_degree().max(self.running.spatial.growth_degree());
        match self.growth {
            Growth::Bounded if degree > 0 => Err(Error::config(
                "cost.growth",
                format!("data grow polynomially (degree {degree}); declare growth = polynomial"),
            )),
            Growth::Polynomial { degree: declared } if declared < degree => Err(Error::config(
                "cost.growth.degree",
                format!("declared {declared}, data need at least {degree}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn running_cost(&self, t: f64, y: &[f64]) -> f64 {
        self.running.eval(t, y)
    }
}
