//! Nonlocal-gradient optimal control toolkit.
//!
//! Discretizes truncated-Riesz nonlocal gradient operators on uniform
//! Cartesian grids, solves the associated p-Laplacian state and
//! box-constrained control problems, and runs the localization sweeps
//! (fractional order toward 1, horizon toward 0) against classical local
//! reference solvers.
//!
//! The crate is organized around a small set of value types: a
//! [`kernel::KernelSpec`] describes the interaction kernel, a
//! [`grid::Grid`] the computational domain with its collar layers, and
//! assembled operators ([`operators::NonlocalGradientOp`],
//! [`operators::LocalCellOp`], [`operators::LocalCentralOp`]) provide the
//! discrete gradient maps used by the energy, state-solver and
//! control-solver modules. The `config` and `runner` modules back the
//! `nlctl` command line front end.

pub mod config;
pub mod control;
pub mod energy;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod localization;
pub mod operators;
pub mod quad;
pub mod runner;
pub mod state;

pub use error::Error;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
