//! In-context learning of noisy linear regression.
//!
//! The crate is organised bottom-up:
//!
//! - [`tasks`]: task distributions (finite pretraining sets and the Gaussian
//!   ideal distribution) and regression-sequence sampling.
//! - [`oracles`]: exact Bayesian posterior-mean estimators (dMMSE, Ridge,
//!   smoothed dMMSE) plus a brute-force posterior used to certify them.
//! - [`model`]: a decoder-only transformer with hand-written backward pass.
//! - [`train`]: Adam with decoupled weight decay and a triangle LR schedule.
//! - [`eval`]: Monte Carlo losses, the Δ divergence, interpolation paths and
//!   threshold detection.
//! - [`harness`]: configs, sweeps, the results store and plot-data export.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Reductions are
//! always performed in a fixed order so results do not depend on the thread
//! count.

pub mod eval;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod par;
pub mod rng;
pub mod stats;
pub mod tasks;
pub mod train;

pub use rng::RngHandle;

use thiserror::Error;

/// Umbrella error for operations that span several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Task(#[from] tasks::TaskError),
    #[error(transparent)]
    Oracle(#[from] oracles::OracleError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

impl Error {
    /// True when the failure is a non-finite numerical value rather than bad
    /// input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Model(e) => e.is_numerical(),
            Error::Train(e) => e.is_numerical(),
            Error::Oracle(oracles::OracleError::NonFinite(_)) => true,
            Error::Harness(e) => e.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
