//! Operator-self-similar symmetric α-stable random fields.
//!
//! Building blocks, bottom-up:
//! - [`linops`]: matrix exponentials and powers `r^A`, operator classes.
//! - [`polar`]: radial part and direction of a point under a scaling operator.
//! - [`homog`]: homogeneous kernels and their diagnostics.
//! - [`stable`]: symmetric stable samplers, random measures on cells, ECF.
//! - [`integral`]: quadrature grids and discretized stochastic integrals.
//! - [`fields`]: the moving-average and harmonizable field constructions.
//! - [`verify`]: Monte Carlo and deterministic verification routines.

pub mod error;
pub mod linops;
pub mod polar;
pub mod homog;
pub mod stable;
pub mod integral;
pub mod fields;
pub mod verify;

pub use error::{Error, Result};
pub use linops::{classify, mat_exp, mat_pow, op_norm, scalar_pow, Operator, OperatorClass};
pub use polar::{decompose, radial_norm, tau, Polar, PolarCoords, TauCache};
pub use homog::KernelSpec;
pub use stable::{StableSpec, StreamKey};
pub use integral::{Grid, MatrixField, QuadratureSpec, ShellRange};
pub use fields::{FieldSample, FieldSpec, Variant};
pub use verify::{EcfReport, EcfRow};
