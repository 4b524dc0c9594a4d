//! Spatial birth-and-death (BDLP) model toolkit.
//!
//! * [`kernels`]: dispersal and competition densities on R^d and the torus.
//! * [`harmonic`]: K-transform, Lebesgue–Poisson integration and Monte-Carlo
//!   application of the generator, its symbol and adjoint.
//! * [`simulator`]: exact event-driven simulation on a periodic box.
//! * [`estimators`]: density and pair-correlation estimates from snapshots.
//! * [`moments`]: first/second correlation-function solvers and analytic bounds.
//! * [`analysis`]: parameter-condition checks and operator-inequality verdicts.

pub mod analysis;
pub mod estimators;
pub mod harmonic;
pub mod kernels;
pub mod moments;
pub mod rng;
pub mod simulator;
mod special;

pub use kernels::{Kernel, KernelError, KernelFamily, KernelSpec, ModelParams, SpaceSpec};
