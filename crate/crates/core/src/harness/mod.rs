//! Experiment configuration, single-run orchestration, sweeps, the results
//! store and plot-data export.

mod config;
mod export;
mod run;
mod store;
mod sweep;

use thiserror::Error;

use crate::eval::EvalError;
use crate::model::ModelError;
use crate::oracles::OracleError;
use crate::tasks::TaskError;
use crate::train::TrainError;

pub use config::{snr_matched_sigma2, ArchConfig, EvalConfig, ExperimentConfig, TaskCount};
pub use export::{export_plot_data, ExportSummary, FigurePreset};
pub use run::{experiment_rng, pretrain_distribution, run_experiment, RunOptions, RunSummary, DELTA, INTERP_LOSS, LOSS, MSE_K, TRAIN_LOSS};
pub use store::{ResultsStore, RunEntry, RunRecord, RunState, RunStatus, StoreManifest, CSV_HEADER, MANIFEST_FILE};
pub use sweep::{
    delta_curves, plan_sweep, run_sweep, threshold_from_store, CurveGroup, SweepAxis, SweepManifest, SweepRun,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run {run_id} already exists with config hash {existing}, requested {requested}")]
    RunConflict { run_id: String, existing: String, requested: String },
    #[error("sweep {0:?} already exists with a different definition")]
    DuplicateSweep(String),
    #[error("duplicate record: {0}")]
    DuplicateRecord(String),
    #[error("non-finite record: {0}")]
    NonFiniteRecord(String),
    #[error("no candidate learning rate was stable: {0}")]
    NoStableLr(String),
    #[error("results store: {0}")]
    Store(String),
    #[error("no data for export: {0}")]
    MissingData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl HarnessError {
    /// Non-finite values anywhere in the pipeline.
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::NonFiniteRecord(_) | HarnessError::NoStableLr(_) => true,
            HarnessError::Oracle(OracleError::NonFinite(_)) => true,
            HarnessError::Model(e) => e.is_numerical(),
            HarnessError::Train(e) => e.is_numerical(),
            HarnessError::Eval(e) => e.is_numerical(),
            _ => false,
        }
    }

    /// Bad configuration or invocation, as opposed to runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::RunConflict { .. } | HarnessError::DuplicateSweep(_)
        ) || matches!(self, HarnessError::Train(TrainError::BadConfig(_)))
            || matches!(self, HarnessError::Model(ModelError::BadConfig(_)))
    }
}
