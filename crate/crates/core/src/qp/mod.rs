//! Quadratic programming: a dense dual active-set solver and the multiple-shooting QP layer
//! built on top of it by condensing.

mod dense;
mod structured;

pub use dense::{
    kkt_residuals_dense, solve_dense, DenseQp, DenseSolution, KktResiduals, QpSettings, QpStatus,
};
pub use structured::{
    kkt_residuals, load_qp_dump, save_qp_dump, solve, QpProblem, QpSolution, QpStage, QpTerminal,
};
