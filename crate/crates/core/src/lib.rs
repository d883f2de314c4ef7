//! Optimal steady-state control of LTI plants: a PI-type controller that
//! drives the plant to the minimizer of a convex steady-state cost despite an
//! unknown constant disturbance, together with tools to certify it, to
//! synthesize a dynamic stabilizer when PI tuning fails, and to check the
//! result against an independent optimizer.

// `!(x < y)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod controller;
pub mod error;
pub mod kkt;
pub mod linalg;
pub mod lmi;
pub mod objective;
pub mod oracle;
pub mod plant;
pub mod scenario;
pub mod sdp;
pub mod serde_mat;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
