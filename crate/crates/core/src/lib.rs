//! Finite-element solver for coupled transient electroquasistatic-thermal
//! (EQST) field problems on 2D triangular meshes, planar or axisymmetric,
//! with nonlinear field-grading materials.
//!
//! The crate solves the forward problem (electric scalar potential coupled
//! to heat conduction through Joule losses) with multi-rate implicit Euler
//! time stepping, and computes parameter sensitivities of quantities of
//! interest by three routes:
//!
//! * the adjoint variable method (one backward-in-time solve per QoI),
//! * the direct sensitivity method (one linearized transient solve per
//!   parameter),
//! * central finite differences (two full forward solves per parameter).
//!
//! The adjoint and direct routes are exact derivatives of the same fully
//! discrete system, so they agree to solver precision; this duality is the
//! backbone of the test suite.

pub mod adjoint;
pub mod assembly;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod materials;
pub mod mesh;
pub mod qoi;
pub mod sensitivity;

pub use adjoint::{adjoint_step_operators, solve_adjoint, AdjointSolution};
pub use assembly::{apply_dirichlet, DirichletBc, LoadVector, QuadRule, SparseOperator};
pub use error::CoreError;
pub use forward::{
    joule_power_density, solve_stationary, solve_transient, step_eqs, step_heat,
    switching_impulse, Discretization, ElectricBc, Scenario, SolverConfig, ThermalBc, TimeConfig,
    TimeGrids, TransientSolution, Waveform,
};
pub use materials::{FgmParams, MaterialModel, MaterialState, ParamField, RegionMaterial};
pub use mesh::{GeometrySpec, Mesh, MeshMode, Rectangle};
pub use qoi::{evaluate_qoi, qoi_partial_p, qoi_rhs, Qoi, QoiKind};
pub use sensitivity::{
    avm_sensitivity, dsm_sensitivity, fd_sensitivity, initial_condition_derivatives, normalize,
    ParameterHandle, SensitivityEntry, SensitivityMethod,
};
