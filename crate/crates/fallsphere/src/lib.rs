//! Spectral fluid–structure solver for a rigid sphere falling in a
//! Navier–Stokes liquid: steady free falls, their linear stability, Hopf
//! bifurcation to time-periodic motion, and the lateral-oscillation test.
//!
//! Module map:
//! - [`discretization`]: shell geometry, solenoidal basis, transforms, tractions;
//! - [`spaces`]: mass-weighted and dissipation inner products, projection, lifts;
//! - [`steady`]: steady free fall, continuation in the Galilei number;
//! - [`linop`]: linearized operators, resolvent, eigenvalues near the imaginary axis;
//! - [`periodic`]: auxiliary problems, resistance matrices, time-periodic solves;
//! - [`hopf`]: bordered Newton engine for bifurcating periodic branches;
//! - [`motion`]: direction of the centre-of-mass oscillation at onset;
//! - [`driver`]: configuration, pipeline stages and output files.

pub mod discretization;
pub mod error;
pub mod forms;
pub mod linalg;
pub mod linop;
pub mod numerics;
pub mod periodic;
pub mod spaces;
pub mod steady;
pub mod hopf;
pub mod motion;
pub mod driver;

pub use error::{Error, Result};
