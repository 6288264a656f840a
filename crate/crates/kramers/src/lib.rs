//! Simulation and analysis toolkit for Langevin-Kramers dynamics in a spatial
//! temperature gradient, with matrix-valued drag and magnetic-type coupling.
//!
//! The crate covers both dynamical regimes of the model
//!
//! ```text
//! dq = (1/m) u dt,      du_i = (-(1/m) gt_{ik} u^k + F_i) dt + sigma_{ir} dW^r,
//! ```
//!
//! (underdamped, with `gt = gamma - H` the drag minus the magnetic 2-form and
//! `F = -dpsi/dt - grad V + F_ext`) and its small-mass limit
//!
//! ```text
//! dq = gt^{-1} F dt + S dt + gt^{-1} sigma dW,
//! ```
//!
//! (overdamped, with `S` the convention-dependent noise-induced drift), and
//! provides:
//!
//! * [`matrixfun`] — dense small-matrix calculus: exponentials, the rank-6
//!   triple-exponential integral tensor, generalized multilinear Lyapunov
//!   solves, and the scalar-weighted exponential integrals entering the
//!   entropy-anomaly kernels;
//! * [`cellproblem`] — exact solution and verification of the cell problem
//!   for multilinear inhomogeneities, plus Gaussian moment utilities;
//! * [`system`] — closed-form field families (temperature, drag, potentials,
//!   vector potential, external force) with analytic derivatives, strict JSON
//!   configuration, structural validation, and time reversal;
//! * [`simulate`] — exact-OU splitting for the stiff underdamped system,
//!   Euler-Maruyama and Heun steppers for the overdamped system, and
//!   deterministic, mergeable Monte Carlo ensembles;
//! * [`entropy`] — pathwise entropy-production ledgers for both regimes,
//!   closed-form limit and anomaly evaluators, and homogenization
//!   observables.
//!
//! All public operations are pure functions or act on immutable shared
//! state; ensembles parallelize over paths with per-path RNG streams and a
//! deterministic merge order, so results are independent of worker count.

pub mod cellproblem;
pub mod entropy;
pub mod error;
pub mod matrixfun;
pub mod simulate;
pub mod system;

pub use error::{Error, Result};
