//! Learning-based nonlinear MPC for a simulated kart.
//!
//! Gaussian-process models of the lateral and yaw accelerations are trained from driving logs,
//! reduced with Subset-of-Data selection and online nearest-neighbour local models, and used as
//! the prediction model of a spatial-domain multiple-shooting controller solved with one
//! Gauss-Newton SQP iteration per control step.

pub mod dynamics;
pub mod error;
pub mod gp;
pub mod ocp;
pub mod pipeline;
pub mod plant;
pub mod qp;
pub mod reduce;
pub mod sim;
pub mod sqp;
pub mod track;

pub use error::{Error, Result};

pub(crate) use gp::scaled_sq_dist as gp_kernel_dist;
