//! Numerical laboratory for linear Volterra equations `u = f + a * Au` with
//! resolvent families, Yosida approximants and stochastic convolutions.

pub mod convolution;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod noise;
pub mod operator;
pub mod resolvent;
pub mod runner;
pub mod volterra;

pub use error::{Error, Result};
pub use grid::{Grid, GridFunction};
pub use kernel::{Kernel, ProductWeights};
pub use operator::{OperatorModel, OperatorSpec, Vector};
