#![allow(dead_code)]

use ctrldelay::linalg::expm;
use ctrldelay::{LiftedVector, Model, ModelParams, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shift-and-resample error of the semigroup law, per unit grid step.
pub const SEMIGROUP_C: f64 = 2.0;
/// Adjoint duality defect, per squared grid step.
pub const DUALITY_C: f64 = 20.0;
pub const HEAD_B_REL: f64 = 1e-10;
/// `B`/`B*` pairing; both sides use the same trapezoid sums.
pub const CONTROL_ADJOINT_REL: f64 = 1e-12;

pub const CLOSED_FORM_REL: f64 = 1e-8;
pub const QUADRATURE_REL: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const SLOPE_RANGE: (f64, f64) = (-0.6, -0.4);

/// Delay-grid nodes used by the randomized operator checks (200 cells).
pub const POINTS: usize = 201;

/// Random model with smooth delay density; `a0` is shifted to be stable.
pub fn random_model(n: usize, m: usize, k: usize, d: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let a0 = mat(n, n) - DMatrix::identity(n, n) * 0.5;
    let b0 = mat(n, m);
    let sigma = mat(n, k) + DMatrix::identity(n, k) * 1.5;
    let amp = mat(n, m);
    let freq = 1.0 + 2.0 * rng.random::<f64>();
    let params = ModelParams::from_matrices(a0, b0, sigma, |s| &amp * (freq * s).cos(), d, 1.0, POINTS);
    Model::new(params).expect("random model")
}

/// Lifted vector with a random head and a tail made of a few Fourier modes.
pub fn fourier_vector(model: &Model, seed: u64) -> LiftedVector {
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let modes: Vec<[f64; 4]> = (0..n)
        .map(|_| [0.0; 4].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let d = model.delay();
    let tail = model
        .nodes()
        .iter()
        .map(|&s| {
            let w = std::f64::consts::PI * s / d;
            DVector::from_fn(n, |i, _| {
                let c = modes[i];
                c[0] + c[1] * w.sin() + c[2] * (2.0 * w).cos() + c[3] * (3.0 * w).sin()
            })
        })
        .collect();
    LiftedVector { head, tail }
}

/// `|head| + ∫|tail|`, the norm the shift-and-resample error is measured in.
pub fn l1_distance(model: &Model, x: &LiftedVector, z: &LiftedVector) -> f64 {
    let head = (&x.head - &z.head).norm();
    let tail: f64 = model
        .trapezoid()
        .iter()
        .zip(x.tail.iter().zip(&z.tail))
        .map(|(w, (a, b))| w * (a - b).norm())
        .sum();
    head + tail
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn matrix_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> ctrldelay::RunConfig {
    ctrldelay::RunConfig::load(&config_path(name)).expect("bundled config")
}

/// Random model whose drift is made stable by a Gershgorin shift.
pub fn stable_model(n: usize, seed: u64) -> Model {
    let base = random_model(n, n, n, 0.5, seed);
    let a = base.a0().clone();
    let shift = (0..n).map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) + 0.1;
    let a0 = a - DMatrix::identity(n, n) * shift;
    let b1 = base.b1()[0].clone();
    let params = ModelParams::from_matrices(a0, base.b0().clone(), base.sigma().clone(), |_| b1.clone(), 0.5, 1.0, POINTS);
    Model::new(params).unwrap()
}

/// Composite Simpson on `∫_0^t e^{s a0} σσᵀ e^{s a0ᵀ} ds`.
pub fn covariance_by_quadrature(model: &Model, t: f64, intervals: usize) -> DMatrix<f64> {
    let n = model.n();
    let ss = model.sigma() * model.sigma().transpose();
    let h = t / intervals as f64;
    let mut acc = DMatrix::zeros(n, n);
    for i in 0..=intervals {
        let e = expm(model.a0(), i as f64 * h);
        let w = if i == 0 || i == intervals {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += &e * &ss * e.transpose() * w;
    }
    acc * (h / 3.0)
}

pub fn smooth_bounded(y: &[f64]) -> f64 {
    y.iter().enumerate().map(|(i, v)| ((1.0 + 0.3 * i as f64) * v).cos()).sum()
}

pub fn rule_for(n: usize) -> QuadratureRule {
    QuadratureRule::gauss_hermite(if n == 1 { 40 } else { 20 })
}
