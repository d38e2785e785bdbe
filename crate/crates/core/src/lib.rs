//! Distributed Bayesian matrix factorization.
//!
//! Latent user/item factors (plus per-user and per-item biases) are sampled
//! with bias-corrected stochastic-gradient Langevin dynamics. The rating
//! matrix is cut into blocks, blocks that share no users and no items are
//! grouped, and a parameter server drives one or more Markov chains across
//! the groups. A full Gibbs sampler for the Gaussian-Wishart BPMF model and
//! a plain SGD optimizer are included as baselines.
//!
//! Module map:
//!
//! - [`model`]: ratings, chain state, likelihood scores, gradient estimators
//!   and the minibatch bias correctors.
//! - [`samplers`]: Langevin / SGD update rules, precision Gibbs draws and the
//!   step-size schedule.
//! - [`partition`]: block splits, orthogonal groups and the cyclic scheduler.
//! - [`cluster`]: parameter server, workers, transports and sample storage.
//! - [`gibbs`]: the Gaussian-Wishart BPMF Gibbs sampler.
//! - [`data`]: rating ingestion, train/test splits and synthetic data.
//! - [`eval`]: RMSE, posterior predictive averaging, relative improvement.
//! - [`experiment`]: config-driven runner and metrics output used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gibbs;
pub mod model;
pub mod partition;
pub mod samplers;

pub use error::{Error, Result};
pub use model::{ChainState, FactorMatrix, ModelConfig, RatingTuple, RatingsBlock};
