//! Append-only results store: one CSV per run under `runs/` plus a JSON
//! manifest indexing runs and sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const CSV_HEADER: &str =
    "run_id,estimator,distribution,M,D,sigma2,B,N,weight_decay,d_embed,metric,k_or_alpha,value,stderr,step,timestamp";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One persisted measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub estimator: String,
    pub distribution: String,
    #[serde(rename = "M")]
    pub m: String,
    #[serde(rename = "D")]
    pub d: usize,
    pub sigma2: f64,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "N")]
    pub n: u64,
    pub weight_decay: f64,
    pub d_embed: usize,
    pub metric: String,
    /// Context position `1..K`, `agg`, or an interpolation weight.
    pub k_or_alpha: String,
    pub value: f64,
    pub stderr: f64,
    /// Training step of the checkpoint; 0 for oracle estimators.
    pub step: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

impl RunRecord {
    fn key(&self) -> (String, String, String, String, String, u64) {
        (
            self.run_id.clone(),
            self.estimator.clone(),
            self.distribution.clone(),
            self.metric.clone(),
            self.k_or_alpha.clone(),
            self.step,
        )
    }

    fn check(&self) -> Result<(), HarnessError> {
        if !self.value.is_finite() || !(self.stderr >= 0.0 && self.stderr.is_finite()) {
            return Err(HarnessError::NonFiniteRecord(format!(
                "{} {} {} {}: value {} stderr {}",
                self.run_id, self.estimator, self.metric, self.k_or_alpha, self.value, self.stderr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    /// Oracle-only evaluation finished; training has not run.
    OraclesDone,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub config_hash: String,
    pub status: RunStatus,
    /// CSV path relative to the store root.
    pub csv: String,
    pub records: usize,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub runs: BTreeMap<String, RunEntry>,
    /// Sweep name → manifest path relative to the store root.
    pub sweeps: BTreeMap<String, String>,
}

/// What [`ResultsStore::begin_run`] found for a run id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunState {
    Fresh,
    /// Registered but not complete; training resumes from its checkpoints.
    Resume,
    /// Already complete with the same configuration; nothing to do.
    Complete,
}

#[derive(Debug)]
pub struct ResultsStore {
    root: PathBuf,
    manifest: StoreManifest,
}

impl ResultsStore {
    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(root.join("runs"))?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| HarnessError::Store(format!("{}: {e}", path.display())))?
        } else {
            StoreManifest::default()
        };
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    /// Working directory of a run (checkpoints, training metrics).
    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn csv_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.csv"))
    }

    fn save_manifest(&self) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Registers a run, or reports that it already exists. A run id already
    /// bound to a different configuration is rejected.
    pub fn begin_run(
        &mut self,
        run_id: &str,
        config_hash: &str,
        config: serde_json::Value,
    ) -> Result<RunState, HarnessError> {
        if let Some(e) = self.manifest.runs.get(run_id) {
            if e.config_hash != config_hash {
                return Err(HarnessError::RunConflict {
                    run_id: run_id.to_string(),
                    existing: e.config_hash.clone(),
                    requested: config_hash.to_string(),
                });
            }
            return Ok(if e.status == RunStatus::Complete { RunState::Complete } else { RunState::Resume });
        }
        self.manifest.runs.insert(
            run_id.to_string(),
            RunEntry {
                config_hash: config_hash.to_string(),
                status: RunStatus::Running,
                csv: format!("runs/{run_id}.csv"),
                records: 0,
                config,
            },
        );
        self.save_manifest()?;
        Ok(RunState::Fresh)
    }

    pub fn set_status(&mut self, run_id: &str, status: RunStatus) -> Result<(), HarnessError> {
        let e = self.entry_mut(run_id)?;
        e.status = status;
        self.save_manifest()
    }

    fn entry_mut(&mut self, run_id: &str) -> Result<&mut RunEntry, HarnessError> {
        self.manifest.runs.get_mut(run_id).ok_or_else(|| HarnessError::Store(format!("unknown run {run_id:?}")))
    }

    /// Adds rows to a run's CSV. Every row must be finite, belong to the run
    /// and be new under the key (run, estimator, distribution, metric, k, step).
    pub fn append(&mut self, run_id: &str, rows: &[RunRecord]) -> Result<(), HarnessError> {
        self.entry_mut(run_id)?;
        let mut existing = self.records(run_id)?;
        let mut seen: HashSet<_> = existing.iter().map(RunRecord::key).collect();
        for r in rows {
            r.check()?;
            if r.run_id != run_id {
                return Err(HarnessError::Store(format!("record for {} appended to {run_id}", r.run_id)));
            }
            if !seen.insert(r.key()) {
                return Err(HarnessError::DuplicateRecord(format!(
                    "{} {} {} {} {} step {}",
                    r.run_id, r.estimator, r.distribution, r.metric, r.k_or_alpha, r.step
                )));
            }
        }
        existing.extend_from_slice(rows);
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for r in &existing {
            w.serialize(r)?;
        }
        let mut bytes = w.into_inner().map_err(|e| HarnessError::Store(e.to_string()))?;
        if existing.is_empty() {
            bytes = format!("{CSV_HEADER}\n").into_bytes();
        }
        write_atomic(&self.csv_path(run_id), &bytes)?;
        self.entry_mut(run_id)?.records = existing.len();
        self.save_manifest()
    }

    pub fn records(&self, run_id: &str) -> Result<Vec<RunRecord>, HarnessError> {
        let path = self.csv_path(run_id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(&path)?;
        let mut out = Vec::new();
        for row in r.deserialize() {
            out.push(row?);
        }
        Ok(out)
    }

    /// Rows of every registered run, in run-id order.
    pub fn all_records(&self) -> Result<Vec<RunRecord>, HarnessError> {
        let mut out = Vec::new();
        for id in self.manifest.runs.keys() {
            out.extend(self.records(id)?);
        }
        Ok(out)
    }

    pub fn register_sweep(&mut self, name: &str, rel_path: &str) -> Result<(), HarnessError> {
        self.manifest.sweeps.insert(name.to_string(), rel_path.to_string());
        self.save_manifest()
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
