//! Federated time-series forecasting with trajectory-condensed synthetic data.
//!
//! The crate simulates a cross-device federation of univariate forecasters
//! and augments the usual round loop with two server-built synthetic
//! datasets: one condensed from client model trajectories and mixed into
//! local training, one condensed from the global-model trajectory and used
//! to refine the aggregated model after each round.
//!
//! Start from the `examples/` directory for runnable tours of each layer,
//! or from [`experiment::run_experiment`] for the end-to-end round loop.

pub mod cli;
pub mod condense;
pub mod data;
pub mod experiment;
pub mod flcore;
pub mod logging;
pub mod models;
pub mod numcore;
pub mod rng;
