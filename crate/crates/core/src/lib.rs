//! Probabilistic power flow accelerated by a physics-guided neural network.
//!
//! The crate trains a dense feed-forward network to map bus power
//! injections directly to the AC power-flow solution (voltage magnitudes
//! and angles), so that Monte-Carlo probabilistic power flow can replace
//! thousands of Newton-Raphson solves with one batched matrix pipeline.
//! Training can embed the network's outputs in the branch-flow equations
//! and penalize flow mismatch, which guides learning with grid physics;
//! a variance-balanced weight initialization keeps signal magnitudes
//! stable through deep stacks of layers.
//!
//! Modules:
//! - [`grid`]: case files, per-unit model, admittance matrix.
//! - [`flows`]: branch flows through series admittances and their exact
//!   sensitivities.
//! - [`powerflow`]: full-Newton polar solver (label oracle and benchmark).
//! - [`linsolve`]: dense and sparse linear steps for the Newton correction.
//! - [`sampling`]: uncertainty specs, reproducible sampling, dataset
//!   assembly and normalization.
//! - [`nn`]: network storage, initialization schemes, forward evaluation,
//!   model files.
//! - [`training`]: losses (standard and physics-penalized), hand-derived
//!   backpropagation with the mode matrix M0-M6, RMSProp, training loop.
//! - [`metrics`]: accuracy indexes over held-out data.
//! - [`ppf`]: end-to-end probabilistic power flow, statistics, comparison
//!   harness, speed benchmark, report export.

mod binio;
pub mod error;
pub mod flows;
pub mod grid;
pub mod linsolve;
pub mod metrics;
pub mod nn;
pub mod powerflow;
pub mod ppf;
pub mod sampling;
pub mod training;
