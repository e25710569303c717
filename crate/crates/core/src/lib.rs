//! Non-exchangeable mean-field linear-quadratic control on a discretized
//! label continuum: triangular Riccati solver, particle simulation, adjoint
//! ansatz checks, and a continuation FBSDE solver used as an independent oracle.

pub mod error;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod paths;
pub mod hamiltonian;
pub mod riccati;
pub mod simulate;
pub mod adjoint;
pub mod verify;
pub mod fbsde;
pub mod cli;

pub use error::{Error, Result};
