//! Hybrid iLQR trajectory optimization and model predictive control for
//! hybrid dynamical systems with guards and resets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cost;
pub mod hybrid;
pub mod integrate;
pub mod io;
pub mod mpc;
pub mod simulator;
pub mod solver;
pub mod systems;
pub mod verify;
