//! Constrained Bayesian optimization built around the constrained knowledge
//! gradient (c-KG) acquisition function.
//!
//! The library models each performance index of a noisy black-box problem
//! with an independent Gaussian process, scores candidate batches by the
//! expected improvement of the best feasible posterior mean times the joint
//! feasibility probability, and maximizes that score by multi-start
//! stochastic gradient ascent driven by an unbiased IPA + likelihood-ratio
//! gradient estimator. A benchmark harness with seeded, replicable runs lives
//! in the companion `bench` binary crate.

pub mod acquisition;
pub mod domain;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod gp;
pub mod gradient;
pub mod hyper;
pub mod kernel;
pub mod linalg;
pub mod problems;
pub mod seeding;
pub mod solvers;
pub mod special;

pub use domain::Domain;
pub use error::{CkgError, Result};
pub use gp::{fit_posterior, FantasyOperator, GpPosterior, GpPrior, MeanSpec, TrainingSet};
pub use kernel::KernelSpec;
