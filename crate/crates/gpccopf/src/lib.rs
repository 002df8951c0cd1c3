//! Chance-constrained AC optimal power flow with Gaussian-process surrogates.
//!
//! The pipeline, end to end:
//!
//! 1. [`grid`] loads a JSON case file (buses, branches, generators, loads,
//!    renewable units) and builds the bus admittance matrix.
//! 2. [`powerflow`] solves the nonlinear AC power-flow equations by
//!    Newton-Raphson, plus the linear DC approximation.
//! 3. [`dataset`] samples correlated injection scenarios, runs a power flow
//!    per scenario and assembles standardized input/output tables.
//! 4. [`gp`] fits one squared-exponential-ARD Gaussian process per output
//!    column by maximum marginal likelihood (dense or sparse variational).
//! 5. [`propagate`] pushes a Gaussian input distribution through a trained
//!    posterior: first/second-order Taylor expansions or exact moment
//!    matching.
//! 6. [`nlp`] is a self-contained primal-dual interior-point solver for
//!    smooth constrained minimization.
//! 7. [`ccopf`] assembles the chance-constrained dispatch problem (full-GP
//!    or hybrid linear+residual-GP constraint models) and solves it.
//! 8. [`validate`] checks any solution by Monte Carlo against the true AC
//!    power flow: empirical violation rates, margins and regression metrics.
//!
//! All quantities are per-unit on the case's MVA base unless a name says
//! otherwise. Everything is deterministic given the seeds in the relevant
//! config structs.

pub mod ccopf;
pub mod dataset;
pub mod gp;
pub mod grid;
pub mod nlp;
pub mod powerflow;
pub mod propagate;
pub mod validate;
