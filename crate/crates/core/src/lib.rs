//! Neural-ODE classifiers and controllers with certified forward invariance.
//!
//! The pieces fit together as follows: a [`network::DynamicsNet`] proposes a
//! vector field on the probability simplex, [`qp::solve_cbf_qp`] filters it so
//! trajectories never leave the simplex, [`train`] shapes the field so a
//! Lyapunov potential decreases, and [`verify`] certifies the result on a
//! deterministic grid of [`sampling`] points.

// `!(a < b)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod model;
pub mod network;
pub mod ode;
pub mod qp;
pub mod sampling;
pub mod simplex;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
