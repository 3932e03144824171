//! Reduction of linear chemical reaction networks to renewal-type
//! Volterra integral systems, and the numerical toolkit around them.
//!
//! Starting point: a reaction network with generator `A` (columns sum to
//! zero, `dn/dt = A n`) and a partition of its states into compartments.
//! The crate computes, for each compartment pair, the matrix response
//! kernels that close the dynamics on compartment-level fluxes alone:
//!
//! * [`network`] — generators, partitions, block decomposition,
//!   entrance-point metadata, detailed-balance certification;
//! * [`kernel`] — propagation kernels `G`, return-time kernels `K`,
//!   forcing from initial data, and the one-entrance scalar reduction
//!   `Phi`, `k`;
//! * [`renewal`] — the Volterra march for both vector and scalar systems,
//!   an independent ODE reference, and equivalence checks;
//! * [`spe`] — the equivalent age-structured transport picture: exhaustion
//!   rates from kernels and back, a first-order transport solve, history
//!   forcing, and cross-validation against the renewal solution;
//! * [`analysis`] — Markovianity tests, spectral kernel forms under
//!   detailed balance, complete-monotonicity and mixture diagnostics,
//!   long-time asymptotics via the kernel transfer matrix;
//! * [`phasetype`] — weak approximation of kernels by shared-rate Erlang
//!   mixtures, realization as explicit chain networks, structural
//!   verification, and the bounded-Lipschitz distance;
//! * [`models`] — worked nonlinear and driven systems built on the kernel
//!   machinery (kinetic proofreading, polymer growth fronts, adaptive
//!   signaling, feed-forward loops, delayed aggregation);
//! * [`io`] — JSON and tab-separated table formats for everything above.
//!
//! Numerical backbone: Gregory-corrected product-trapezoid Volterra
//! marching (third order on smooth kernels), scaling-and-squaring matrix
//! exponentials with a sparse action variant for chain blocks, and explicit
//! error-reporting — suspicious results come back as warnings or typed
//! errors, never silently clamped.

pub mod analysis;
pub mod error;
pub mod expm;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod models;
pub mod network;
pub mod numeric;
pub mod phasetype;
pub mod renewal;
pub mod spe;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use kernel::{
    compute_forcing, compute_kernels, reduce_entrances, reduce_one_entrance, KernelSet,
    ScalarKernelSet,
};
pub use network::{
    detect_detailed_balance, CompartmentSystem, RateEntry, ReactionNetwork,
};
pub use renewal::{
    equivalence_check, ode_reference, solve_renewal, solve_renewal_scalar, RenewalSolution,
};
pub use spe::{
    kernels_from_rates, rates_from_kernels, solve_spe, spe_rfe_equivalence, AgeRates,
    HistoryAtom, HistoryMeasure,
};
