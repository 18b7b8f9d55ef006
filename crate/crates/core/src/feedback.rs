//! Argmin selection of the current-value Hamiltonian and the feedback map built on it.

use nalgebra::DVector;

use crate::cost::HamiltonianKind;
use crate::error::Result;
use crate::hjb::{self, ReducedValueFunction};
use crate::lifted::{LiftedVector, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub kind: HamiltonianKind,
    /// Global Lipschitz constant of the selection; absent for finite sets.
    pub lipschitz_constant: Option<f64>,
}

impl Selection {
    pub fn new(kind: HamiltonianKind) -> Self {
        let lipschitz_constant = match &kind {
            HamiltonianKind::QuadraticBox { theta, .. } | HamiltonianKind::QuadraticUnconstrained { theta, .. } => {
                Some(1.0 / theta)
            }
            HamiltonianKind::FiniteSet { .. } => None,
        };
        Self {
            kind,
            lipschitz_constant,
        }
    }

    /// Closed-loop well-posedness is not covered when the selection is only measurable.
    pub fn outside_hypotheses(&self) -> bool {
        self.lipschitz_constant.is_none()
    }
}

/// `γ(p) ∈ argmin_{u ∈ U} ⟨p, u⟩ + ℓ1(u)`.
pub fn gamma(sel: &Selection, p: &[f64]) -> Vec<f64> {
    sel.kind.argmin(p)
}

/// `Ψ(s, x) = γ(∇^B v(s, x))`.
pub fn psi(vf: &ReducedValueFunction, model: &Model, sel: &Selection, s: f64, x: &LiftedVector) -> Result<Vec<f64>> {
    let p: DVector<f64> = hjb::eval_grad_b(vf, model, s, x)?;
    Ok(gamma(sel, p.as_slice()))
}
