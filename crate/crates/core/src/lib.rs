//! Optimal investment and consumption for a power-utility investor holding
//! defaultable stocks whose prices and default intensities depend on a
//! stochastic factor.
//!
//! The value function is written through the dual problem as
//!
//! ```text
//! V(x, y, z) = (x^p / p) * g(T, y, z)^(1 - p),   g = f^beta
//! ```
//!
//! where `f(., ., z)` solves a semi-linear parabolic PDE for each default
//! state `z` in {0,1}^n, coupled to the states with one more default through
//! its source term. The crate solves that recursive system on a 1-D factor
//! grid ([`pde`]), recovers the feedback controls ([`strategy`]), and checks
//! the result against closed forms ([`oracle`]) and Monte Carlo ([`sim`]).
//!
//! Data parallelism (paths, same-cardinality states, grid nodes) goes through
//! [`exec::Execution`]; with the `parallel` feature disabled every parallel
//! request runs sequentially.

// `!(x > a)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dual;
pub mod error;
pub mod exec;
pub mod io;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod pde;
pub mod sim;
pub mod strategy;

pub use error::{Error, Result};
pub use exec::Execution;
pub use lattice::DefaultState;
pub use model::{load_preset, validate_spec, ModelSpec, Preset, ValidationReport};
pub use pde::{solve_recursive_system, GridSpec, SystemSolution};
