//! Stabilised continuous finite elements for linear scalar transport.

pub mod basis;
pub mod error;
pub mod mesh;
pub mod projections;
pub mod quadrature;
pub mod space;
pub mod sparse;
pub mod stabilization;
pub mod time_integration;
pub mod transport;
pub mod weights;

pub use error::{Error, Result};
