//! Self-similar reduction of the cylindrical Euler-Poisson system closed with
//! a Chaplygin equation of state.
//!
//! The crate is organized along the pipeline it implements:
//!
//! - [`model`]: the equation of state, the three admissible similarity-exponent
//!   variants, and reconstruction of physical fields from shape functions.
//! - [`reduction`]: the reduced shape-function ODE system, evaluated by solving
//!   a 2x2 linear system for (f', g') with critical-point detection.
//! - [`integrator`]: adaptive embedded Runge-Kutta integration of the reduced
//!   system over the similarity variable, with a fixed-step Euler oracle mode,
//!   event-terminated runs, and expansion/collapse classification.
//! - [`verifier`]: independent correctness checks. ODE residuals from
//!   finite-difference derivatives of a solution table, finite-difference PDE
//!   residuals of the original system on a reconstructed (r, t) grid, exact
//!   rational balance-relation checks, and convergence-order estimation.

pub mod integrator;
pub mod model;
pub mod reduction;
pub mod verifier;

pub use integrator::{
    classify, integrate, sweep, Classification, ClassifyError, IntegrationConfig, Mode, Sampling,
    SetupError, SolutionRow, SolutionTable, Termination,
};
pub use model::{
    exact_rational, ChaplyginEos, ModelError, PhysicalPoint, Rational, ShapeState,
    SimilarityExponents, VariantId,
};
pub use reduction::{
    derivatives, equation_defects, linear_system, DerivativeResult, EquationDefects, LinearSystem,
    MomentumForm, ReductionError, ShapeDerivatives,
};
pub use verifier::{
    check_balance, convergence_order, ode_residuals, pde_residuals, BalanceRelation,
    BalanceStatus, EquationResiduals, GridSpec, ResidualReport, VerifierError,
};
