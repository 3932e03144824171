//! Worked biochemical models expressed through response kernels.
//!
//! Each submodule pairs a closed-form kernel route with an independent
//! reference route (direct ODE integration or quadrature) so results can be
//! cross-validated rather than trusted from a single derivation.

pub mod adaptation;
pub mod ffl;
pub mod nonlinear;
pub mod polymer;
pub mod proofreading;
