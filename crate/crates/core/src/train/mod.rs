//! Pretraining loop: fresh batches every step, Adam with decoupled weight
//! decay, a triangle learning-rate schedule, periodic metrics and resumable
//! checkpoints.

mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Scalar;
use crate::model::{
    forward_backward, init_params, latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig,
    ModelError, ModelParams, TokenBatch,
};
use crate::rng::RngHandle;
use crate::tasks::{sample_batch, RegressionSequence, TaskDistribution, TaskError};

pub use optim::{adam_step, global_norm, lr_at_step, OptimizerState, ProbeResult};

pub const METRICS_HEADER: &str = "step,loss,lr,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";

/// Histograms of task draws are kept only for pretraining sets up to this size.
pub const HISTOGRAM_MAX_TASKS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("step {step} is outside the schedule of {n_steps} steps")]
    StepOutOfRange { step: u64, n_steps: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite activation at step {step}: {source}")]
    NonFiniteActivation { step: u64, source: ModelError },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteActivation { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: u64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            n_steps: 500_000,
            peak_lr: 1e-3,
            warmup_frac: 0.5,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 25_000,
            grad_clip: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.batch_size == 0 || self.n_steps == 0 {
            return bad("batch_size and n_steps must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac <= 1.0) {
            return bad(format!("warmup_frac must lie in (0, 1], got {}", self.warmup_frac));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricRow {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &MetricRow) -> bool {
        self.step == other.step && self.loss.to_bits() == other.loss.to_bits() && self.lr.to_bits() == other.lr.to_bits()
    }
}

/// Mean squared error over all `(sequence, k)` pairs and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[RegressionSequence],
) -> Result<(f64, ModelParams<T>), ModelError> {
    let tokens = TokenBatch::<T>::from_sequences(batch, params.config())?;
    let k = tokens.n_pairs();
    let denom = (batch.len() * k) as f64;
    let (sum, grads) = forward_backward(params, &tokens, |first, preds| {
        let mut sq = 0.0;
        let mut dpred = Vec::with_capacity(preds.len());
        for (i, p) in preds.iter().enumerate() {
            let y = batch[first + i / k].ys()[i % k];
            let r = p.f64() - y;
            sq += r * r;
            dpred.push(T::of(2.0 * r / denom));
        }
        (sq, dpred)
    })?;
    Ok((sum / denom, grads))
}

/// Where a run keeps its metrics and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    /// No files are written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir` when one exists.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Print each logged row to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Rows logged during this call plus, after a resume, the earlier rows.
    pub metrics: Vec<MetricRow>,
    /// Loss of every step run in this call, indexed from `first_step`.
    pub step_losses: Vec<f64>,
    pub first_step: u64,
    pub steps_completed: u64,
    /// Sequences drawn over the whole run, including before a resume.
    pub sequences_seen: u64,
    /// Draw counts per pretraining task, when the set is small enough to track.
    pub task_histogram: Option<Vec<u64>>,
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ResumeExtra {
    train: TrainConfig,
    sigma2: f64,
    sequences_seen: u64,
    task_histogram: Option<Vec<u64>>,
}

/// Trains from scratch (or from the latest checkpoint when `io.resume`).
///
/// Parameters are initialised from `rng.split("init")`; step `t` draws its
/// batch from `rng.split("data")`, so the trajectory is a pure function of
/// the master seed and the configs.
pub fn train<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dist: &TaskDistribution,
    sigma2: f64,
    rng: &RngHandle,
    io: &TrainIo,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    model.validate()?;
    if dist.dim() != model.d_task {
        return Err(TrainError::BadConfig(format!("task dimension {} vs model d_task {}", dist.dim(), model.d_task)));
    }
    let track = dist.num_tasks().filter(|m| *m <= HISTOGRAM_MAX_TASKS);
    let mut data_rng = rng.split("data");
    let mut params: ModelParams<T> = init_params(model, &mut rng.split("init"))?;
    let mut opt = OptimizerState::new(&params);
    let mut histogram = track.map(|m| vec![0u64; m]);
    let mut sequences_seen = 0u64;
    let mut start = 0u64;
    let mut metrics = Vec::new();

    if io.resume {
        if let Some(dir) = &io.out_dir {
            if let Some(path) = latest_checkpoint(&dir.join("checkpoints"))? {
                let ck: Checkpoint<T> = load_checkpoint(&path)?;
                let extra: ResumeExtra = serde_json::from_value(ck.extra.clone())
                    .map_err(|e| TrainError::Resume(format!("checkpoint metadata: {e}")))?;
                if ck.params.config() != model || extra.train != *cfg || extra.sigma2 != sigma2 {
                    return Err(TrainError::Resume("checkpoint was written by a different configuration".into()));
                }
                if ck.master_seed != rng.master_seed() {
                    return Err(TrainError::Resume("checkpoint was written with a different seed".into()));
                }
                let pos = ck.rng.ok_or_else(|| TrainError::Resume("checkpoint lacks an RNG position".into()))?;
                data_rng.restore(pos);
                opt = OptimizerState::from_blob(
                    ck.moments.ok_or_else(|| TrainError::Resume("checkpoint lacks optimizer state".into()))?,
                );
                params = ck.params;
                start = ck.step;
                sequences_seen = extra.sequences_seen;
                if track.is_some() {
                    histogram = extra.task_histogram;
                }
                metrics = read_metrics(&dir.join(METRICS_FILE))?.into_iter().filter(|r| r.step < start).collect();
            }
        }
    }

    let mut log = match &io.out_dir {
        Some(dir) => Some(MetricsWriter::create(&dir.join(METRICS_FILE), &metrics)?),
        None => None,
    };

    let clock = Instant::now();
    let stop = io.stop_after.unwrap_or(cfg.n_steps).min(cfg.n_steps);
    let mut step_losses = Vec::with_capacity(stop.saturating_sub(start) as usize);
    let mut last_checkpoint = None;
    for step in start..stop {
        let lr = lr_at_step(step, cfg)?;
        let batch = sample_batch(dist, cfg.batch_size, model.max_pairs, sigma2, &mut data_rng)?;
        sequences_seen += batch.len() as u64;
        if let Some(h) = histogram.as_mut() {
            for s in &batch {
                if let Some(i) = s.task_index() {
                    h[i] += 1;
                }
            }
        }
        let (loss, grads) = loss_and_grad(&params, &batch).map_err(|e| match e {
            ModelError::NonFinite { .. } => TrainError::NonFiniteActivation { step, source: e },
            e => TrainError::Model(e),
        })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        step_losses.push(loss);
        if step % cfg.log_every == 0 {
            let row = MetricRow { step, loss, lr, wall_ms: clock.elapsed().as_millis() as u64 };
            if io.verbose {
                eprintln!("step {:>8} loss {:.6} lr {:.3e} {:>8} ms", row.step, row.loss, row.lr, row.wall_ms);
            }
            if let Some(w) = log.as_mut() {
                w.push(&row)?;
            }
            metrics.push(row);
        }
        adam_step(&mut params, &grads, &mut opt, lr, cfg);
        let done = step + 1;
        if let Some(dir) = &io.out_dir {
            if done % cfg.checkpoint_every == 0 || done == stop {
                let extra = ResumeExtra {
                    train: cfg.clone(),
                    sigma2,
                    sequences_seen,
                    task_histogram: histogram.clone(),
                };
                let ck = Checkpoint {
                    params: params.clone(),
                    moments: Some(opt.to_blob()),
                    step: done,
                    master_seed: rng.master_seed(),
                    rng: Some(data_rng.position()),
                    extra: serde_json::to_value(extra).expect("metadata serialises"),
                };
                last_checkpoint = Some(save_checkpoint(&dir.join("checkpoints"), &ck)?);
            }
        }
    }

    Ok(TrainOutcome {
        params,
        optimizer: opt,
        metrics,
        step_losses,
        first_step: start,
        steps_completed: stop.max(start),
        sequences_seen,
        task_histogram: histogram,
        last_checkpoint,
    })
}

struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    /// Rewrites the log with `kept` rows so a resumed run does not duplicate
    /// steps logged after its checkpoint.
    fn create(path: &Path, kept: &[MetricRow]) -> Result<Self, TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        for r in kept {
            writeln!(file, "{},{},{},{}", r.step, r.loss, r.lr, r.wall_ms)?;
        }
        file.flush()?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file })
    }

    fn push(&mut self, r: &MetricRow) -> Result<(), TrainError> {
        writeln!(self.file, "{},{},{},{}", r.step, r.loss, r.lr, r.wall_ms)?;
        self.file.flush()?;
        Ok(())
    }
}

/// Parses a metrics log written by [`train`]. A missing file is empty.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<MetricRow> {
            Some(MetricRow {
                step: f.first()?.parse().ok()?,
                loss: f.get(1)?.parse().ok()?,
                lr: f.get(2)?.parse().ok()?,
                wall_ms: f.get(3)?.parse().ok()?,
            })
        };
        out.push(parse().ok_or_else(|| TrainError::Resume(format!("malformed metrics row {line:?}")))?);
    }
    Ok(out)
}

/// Short runs at each candidate peak LR, each with the schedule compressed to
/// `probe_steps`. A probe is stable when every loss is finite and no step
/// loss exceeds `10×` the lowest loss seen before it.
pub fn probe_learning_rates<T: Scalar>(
    model: &ModelConfig,
    base: &TrainConfig,
    candidates: &[f64],
    probe_steps: u64,
    dist: &TaskDistribution,
    sigma2: f64,
    rng: &RngHandle,
) -> Result<(Vec<ProbeResult>, Option<f64>), TrainError> {
    let mut results = Vec::with_capacity(candidates.len());
    for &lr in candidates {
        let cfg = TrainConfig { peak_lr: lr, n_steps: probe_steps, ..base.clone() };
        let r = match train::<T>(model, &cfg, dist, sigma2, &rng.split("lr-probe"), &TrainIo::default()) {
            Ok(out) => {
                let mut min = f64::INFINITY;
                let mut spike = None;
                for (i, l) in out.step_losses.iter().enumerate() {
                    if *l > 10.0 * min {
                        spike = Some(i);
                        break;
                    }
                    min = min.min(*l);
                }
                ProbeResult {
                    peak_lr: lr,
                    stable: spike.is_none(),
                    reason: spike.map(|s| format!("loss spike above 10x running minimum at step {s}")),
                    final_loss: out.step_losses.last().copied(),
                }
            }
            Err(e) if e.is_numerical() => {
                ProbeResult { peak_lr: lr, stable: false, reason: Some(e.to_string()), final_loss: None }
            }
            Err(e) => return Err(e),
        };
        results.push(r);
    }
    let best = results.iter().filter(|r| r.stable).map(|r| r.peak_lr).fold(None, |a: Option<f64>, b| {
        Some(a.map_or(b, |a| a.max(b)))
    });
    Ok((results, best))
}
