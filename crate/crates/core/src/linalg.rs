//! Small dense-matrix helpers shared by the operator, kernel and solver modules.

use nalgebra::{DMatrix, DVector};

/// `e^{t a}` for a square matrix.
pub fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    if t == 0.0 {
        return DMatrix::identity(a.nrows(), a.ncols());
    }
    (a * t).exp()
}

/// Trapezoid weights for `count` uniformly spaced nodes with spacing `h`.
pub fn trapezoid_weights(count: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; count];
    if count > 0 {
        w[0] = 0.5 * h;
        w[count - 1] = 0.5 * h;
    }
    if count == 1 {
        w[0] = 0.0;
    }
    w
}

/// Moore-Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = 1e-12 * smax.max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps)
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Symmetric part `(m + mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Spectral condition number of a symmetric positive matrix.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min)
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `∫_a^{a+h} e^{rate (s - anchor)} f(s) ds` for `f` linear on the cell with end
/// values `fa`, `fb`. Exact for piecewise-linear data, stable for large `rate·h`.
pub fn exp_weighted_cell(rate: f64, a: f64, h: f64, anchor: f64, fa: f64, fb: f64) -> f64 {
    let b = a + h;
    if (rate * h).abs() < 1e-3 {
        // three-point Gauss-Legendre on a near-polynomial integrand
        const X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mid = 0.5 * (a + b);
        let half = 0.5 * h;
        return X
            .iter()
            .zip(W.iter())
            .map(|(x, w)| {
                let s = mid + half * x;
                let lam = (s - a) / h;
                w * (rate * (s - anchor)).exp() * (fa + lam * (fb - fa))
            })
            .sum::<f64>()
            * half;
    }
    let ea = (rate * (a - anchor)).exp();
    let eb = (rate * (b - anchor)).exp();
    let zeroth = (eb - ea) / rate;
    let first = h * eb / rate - (eb - ea) / (rate * rate);
    fa * zeroth + (fb - fa) / h * first
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Row-major nested rows into a dense matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Option<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
