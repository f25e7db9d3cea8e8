//! Experiment runner for the stabilised transport solver.

pub mod config;
pub mod experiments;
pub mod inequalities;
pub mod vtk;
