use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, Precision};
use crate::train::TrainConfig;

use super::HarnessError;

/// Number of pretraining tasks: a positive count, or `"infinite"` for
/// pretraining directly on the Gaussian task distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawCount", into = "RawCount")]
pub enum TaskCount {
    Finite(usize),
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawCount {
    N(usize),
    S(String),
}

impl TryFrom<RawCount> for TaskCount {
    type Error = String;

    fn try_from(r: RawCount) -> Result<Self, String> {
        match r {
            RawCount::N(0) => Err("M must be positive".into()),
            RawCount::N(n) => Ok(TaskCount::Finite(n)),
            RawCount::S(s) if s == "infinite" => Ok(TaskCount::Infinite),
            RawCount::S(s) => Err(format!("M must be a positive integer or \"infinite\", got {s:?}")),
        }
    }
}

impl From<TaskCount> for RawCount {
    fn from(c: TaskCount) -> Self {
        match c {
            TaskCount::Finite(n) => RawCount::N(n),
            TaskCount::Infinite => RawCount::S("infinite".into()),
        }
    }
}

impl fmt::Display for TaskCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskCount::Finite(n) => write!(f, "{n}"),
            TaskCount::Infinite => f.write_str("infinite"),
        }
    }
}

impl std::str::FromStr for TaskCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "infinite" {
            return Ok(TaskCount::Infinite);
        }
        let n: usize = s.parse().map_err(|_| format!("M must be a positive integer or \"infinite\", got {s:?}"))?;
        TaskCount::try_from(RawCount::N(n))
    }
}

/// Transformer shape; `d_task` and `max_pairs` come from the experiment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub precision: Precision,
}

impl ArchConfig {
    pub fn base() -> Self {
        Self { n_layers: 8, d_embed: 128, n_heads: 2, precision: Precision::Fp32 }
    }

    pub fn desk() -> Self {
        Self { n_layers: 4, d_embed: 64, n_heads: 2, precision: Precision::Fp32 }
    }

    pub fn wide() -> Self {
        Self { n_layers: 12, d_embed: 256, n_heads: 4, precision: Precision::Fp32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sequences per (predictor, distribution) point.
    pub n_sequences: usize,
    /// Interpolation grid; empty disables interpolation.
    pub alpha_grid: Vec<f64>,
    /// Task pairs per interpolation curve; 0 disables interpolation.
    pub n_pairs: usize,
    pub n_sequences_per_point: usize,
    /// Also evaluate the smoothed dMMSE estimator.
    pub smmse: bool,
    /// Fixed smoothing variance; searched on the ideal distribution when absent.
    pub smmse_eps2: Option<f64>,
    pub smmse_search_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_sequences: crate::eval::DEFAULT_EVAL_SEQUENCES,
            alpha_grid: crate::eval::alpha_grid(21),
            n_pairs: 64,
            n_sequences_per_point: 256,
            smmse: false,
            smmse_eps2: None,
            smmse_search_sequences: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to a digest of the configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub d_task: usize,
    /// Context length `K`.
    pub k: usize,
    pub sigma2: f64,
    pub m: TaskCount,
    pub model: ArchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Peak LRs to probe; the largest stable one is used. With a single entry
    /// no probe is run. Empty means `train.peak_lr`.
    #[serde(default)]
    pub lr_candidates: Vec<f64>,
    #[serde(default = "default_probe_steps")]
    pub lr_probe_steps: u64,
}

fn default_probe_steps() -> u64 {
    5_000
}

/// Noise variance holding the signal-to-noise ratio of the dimension sweep
/// fixed: `σ²(D) = sqrt(D/32)`, which reproduces 0.5, 0.707, 0.866 and 1.0 at
/// `D = 8, 16, 24, 32`.
pub fn snr_matched_sigma2(d: usize) -> f64 {
    (d as f64 / 32.0).sqrt()
}

impl ExperimentConfig {
    /// Paper-scale defaults: `D=8`, `K=16`, `σ²=0.25`, 8-layer model,
    /// `B=256`, `N=500K`, LR chosen from {1e-4, 3e-4, 1e-3}.
    pub fn base(m: TaskCount) -> Self {
        Self {
            run_id: None,
            d_task: 8,
            k: 16,
            sigma2: 0.25,
            m,
            model: ArchConfig::base(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            master_seed: 0,
            out_dir: PathBuf::from("results"),
            lr_candidates: vec![1e-4, 3e-4, 1e-3],
            lr_probe_steps: default_probe_steps(),
        }
    }

    /// Workstation scale: 4 layers, 64-wide, 2 heads, `B=64`, `N=50K`, fixed LR 1e-3.
    pub fn desk(m: TaskCount) -> Self {
        let mut c = Self::base(m);
        c.model = ArchConfig::desk();
        c.train.batch_size = 64;
        c.train.n_steps = 50_000;
        c.train.peak_lr = 1e-3;
        c.lr_candidates = vec![1e-3];
        c
    }

    /// Dimension sweep: `K = 2D`, SNR-matched noise, 12-layer 256-wide model, LR 1e-4.
    pub fn dimsweep(d: usize, m: TaskCount) -> Self {
        let mut c = Self::base(m);
        c.d_task = d;
        c.k = 2 * d;
        c.sigma2 = snr_matched_sigma2(d);
        c.model = ArchConfig::wide();
        c.train.peak_lr = 1e-4;
        c.lr_candidates = vec![1e-4];
        c
    }

    /// Minutes-scale run for checking the plumbing end to end.
    pub fn smoke(m: TaskCount) -> Self {
        let mut c = Self::desk(m);
        c.train.n_steps = 200;
        c.train.checkpoint_every = 100;
        c.eval = EvalConfig {
            n_sequences: 256,
            alpha_grid: crate::eval::alpha_grid(5),
            n_pairs: 4,
            n_sequences_per_point: 32,
            ..EvalConfig::default()
        };
        c
    }

    pub fn preset(name: &str, m: TaskCount) -> Result<Self, HarnessError> {
        match name {
            "base" => Ok(Self::base(m)),
            "desk" => Ok(Self::desk(m)),
            "dimsweep" => Ok(Self::dimsweep(8, m)),
            "smoke" => Ok(Self::smoke(m)),
            other => Err(HarnessError::Config(format!("unknown preset {other:?} (base, desk, dimsweep, smoke)"))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_embed: self.model.d_embed,
            n_heads: self.model.n_heads,
            d_task: self.d_task,
            max_pairs: self.k,
            precision: self.model.precision,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.d_task == 0 || self.k == 0 {
            return bad("d_task and k must be positive".into());
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        self.model_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.eval.n_sequences < 2 || self.eval.n_sequences_per_point < 2 {
            return bad("evaluation needs at least 2 sequences per point".into());
        }
        if self.eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha_grid entries must lie in [0, 1]".into());
        }
        if let Some(e) = self.eval.smmse_eps2 {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("smmse_eps2 must be positive, got {e}"));
            }
        }
        if self.lr_candidates.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lr_candidates must be positive".into());
        }
        if self.lr_candidates.len() > 1 && self.lr_probe_steps == 0 {
            return bad("lr_probe_steps must be positive".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.=".contains(c)) {
                return bad(format!("run_id {id:?} may only contain letters, digits and -_.="));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON with `run_id` and `out_dir` blanked, so
    /// that where results are stored does not change a run's identity.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.run_id = None;
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serialises"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved_run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", &self.config_hash()[..12]))
    }

    /// Peak LR when no probe is needed.
    pub fn fixed_lr(&self) -> Option<f64> {
        match self.lr_candidates.as_slice() {
            [] => Some(self.train.peak_lr),
            [one] => Some(*one),
            _ => None,
        }
    }
}
