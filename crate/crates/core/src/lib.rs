//! Optimal control of stochastic systems with distributed delay in the control, solved through
//! the lifted (product-space) formulation and its finite-dimensional reduction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod feedback;
pub mod gaussian;
pub mod hjb;
pub mod io;
pub mod lifted;
pub mod linalg;
pub mod path;
pub mod simulator;

pub use cost::{CostSpec, Growth, HamiltonianKind, RunningCost, SpatialFn, TimeProfile};
pub use error::{Error, Result};
pub use evaluation::{CostEstimate, IdentityResidual, RiccatiSolution, VerificationReport};
pub use feedback::Selection;
pub use gaussian::{Covariance, QuadratureRule, QuadratureScheme};
pub use hjb::{ReducedValueFunction, SolveFlags, SolverGrids, TensorGrid};
pub use io::RunConfig;
pub use lifted::{Dims, LiftedVector, Model, ModelParams, StructureReport};
pub use path::ControlPath;
pub use simulator::{Closure, InitialState, PathBundle, Policy, SimConfig};
