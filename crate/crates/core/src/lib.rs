//! Backward Euler finite element simulator for the Doyle–Fuller–Newman
//! lithium-ion cell model.

pub mod analysis;
pub mod assembly;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod microsolver;
pub mod params;
pub mod quadrature;
pub mod solvers;
pub mod timeloop;

pub use error::{DomainError, Error, Result};
