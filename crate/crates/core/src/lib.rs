//! Hypernetwork-generated convolutional evolution operators for PDE trajectories.

pub mod eval;
pub mod hypernet;
pub mod integrator;
pub mod operator;
pub mod parallel;
pub mod pdegen;
pub mod tensor;
pub mod train;
