//! Error type shared by all solver stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("mesh parse error at line {line}: {message}")]
    MeshParse { line: usize, message: String },

    #[error("material error: {0}")]
    Material(String),

    #[error("assembly error on element {element}: {message}")]
    Assembly { element: usize, message: String },

    #[error("boundary condition error: {0}")]
    BoundaryCondition(String),

    #[error("linear solve failed: {0}")]
    Linear(String),

    #[error("Newton iteration diverged after {iterations} iterations; residual history: {history:?}")]
    NewtonDiverged { iterations: usize, history: Vec<f64> },

    #[error("coupling iteration did not converge at macro step {macro_step} (update {update:.3e} > tol {tol:.3e})")]
    CouplingDiverged {
        macro_step: usize,
        update: f64,
        tol: f64,
    },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("quantity of interest error: {0}")]
    Qoi(String),

    #[error("sensitivity error: {0}")]
    Sensitivity(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
