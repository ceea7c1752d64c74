//! Initial value PDE solver that evolves the parameters of a small neural
//! network through the ODE `M(θ) θ' = F(θ)`.
//!
//! The Gram matrix `M` is never formed: products with it are two passes over a
//! cached forward evaluation (a JVP followed by a VJP), systems are solved by
//! conjugate gradients with a randomized Nyström preconditioner, and the ODE is
//! integrated by embedded Runge-Kutta pairs with periodic refits of the network
//! to itself.

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod fd;
pub mod fitting;
pub mod io;
pub mod linops;
pub mod network;
pub mod pde;
pub mod run;

pub use error::{Error, Result};
