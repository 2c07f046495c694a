//! Bidirectional-thrust quadrotor toolkit.
//!
//! The crate is organized along the control pipeline:
//!
//! * [`so3`] quaternion algebra, Hopf projection and base charts
//! * [`actuator`] asymmetric steady-state thrust model and transient motor dynamics
//! * [`sim`] rigid-body dynamics, mixer and fixed-step integration
//! * [`hfca`] Hopf-fibration position/attitude controller with chart switching
//! * [`allocation`] box-constrained control allocation by projected gradient descent
//! * [`trajectory`] constant, step-posture, minimum-snap and circular references
//! * [`policy`] observations, MLP policy head, action interpretation and delay
//! * [`ppo`] cost function, GAE, clipped-surrogate updates and batched training
//! * [`eval`] rollouts, metrics and method comparison

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actuator;
pub mod allocation;
pub mod config;
pub mod env;
pub mod eval;
pub mod hfca;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod sim;
pub mod so3;
pub mod trajectory;

pub use config::Config;
pub use so3::{Quat, UnitVector3};
