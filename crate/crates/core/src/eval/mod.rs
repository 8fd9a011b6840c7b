//! Monte Carlo evaluation: normalized losses, the prediction divergence Δ,
//! losses along task-interpolation paths, and crossover detection.
//!
//! Every estimate is built from per-sequence values so that two predictors
//! evaluated on one [`EvalSet`] can be compared with paired standard errors.

mod threshold;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Scalar;
use crate::model::{predict, AnyParams, ModelError, ModelParams, TokenBatch};
use crate::oracles::{dmmse_sequence, ridge_sequence, smmse_sequence, OracleError};
use crate::par;
use crate::rng::RngHandle;
use crate::stats::{mean_stderr, MeanStderr};
use crate::tasks::{sample_batch, RegressionSequence, Task, TaskDistribution, TaskError, TaskSet};

pub use threshold::{find_threshold, CurvePoint, Threshold};

/// Default number of evaluation sequences per (predictor, distribution) point.
pub const DEFAULT_EVAL_SEQUENCES: usize = 1 << 12;

/// Sequences per transformer inference call; bounds activation memory.
const PREDICT_BLOCK: usize = 1024;

/// Interpolated tasks whose convex combination is shorter than this are rejected.
pub const MIN_INTERPOLATION_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 evaluation sequences, got {0}")]
    TooFewSequences(usize),
    #[error("predictor expects dimension {expected}, data has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("interpolation needs a task set with at least 2 tasks")]
    NeedsTwoTasks,
    #[error("requested {requested} distinct task pairs but only {available} exist")]
    TooManyPairs { requested: usize, available: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("convex combination of the task pair has norm {0:e}, too small to normalise")]
    DegenerateInterpolation(f64),
    #[error("could not find {0} non-degenerate task pairs")]
    PairsExhausted(usize),
    #[error("curves must share one strictly ascending grid: {0}")]
    BadCurves(String),
    #[error("non-finite prediction from {0}")]
    NonFinite(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

impl EvalError {
    pub fn is_numerical(&self) -> bool {
        match self {
            EvalError::NonFinite(_) => true,
            EvalError::Oracle(OracleError::NonFinite(_)) => true,
            EvalError::Model(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// Which task distribution an evaluation set was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistTag {
    Pretrain,
    True,
}

impl DistTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DistTag::Pretrain => "pretrain",
            DistTag::True => "true",
        }
    }
}

impl std::fmt::Display for DistTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anything that maps a sequence to one prediction per position.
#[derive(Clone, Debug)]
pub enum Predictor {
    /// Trained transformer, run at its stored precision.
    Transformer(Arc<AnyParams>),
    Dmmse(TaskDistribution),
    Ridge,
    Smmse { tasks: TaskDistribution, eps2: f64 },
    /// Predicts 0 everywhere.
    Zero,
}

impl Predictor {
    pub fn transformer_from_checkpoint(manifest: &Path) -> Result<Self, EvalError> {
        Ok(Predictor::Transformer(Arc::new(AnyParams::load(manifest)?)))
    }

    pub fn transformer<T: Scalar>(params: &ModelParams<T>) -> Self {
        let any = if T::DTYPE == "f32" {
            AnyParams::F32(params.cast())
        } else {
            AnyParams::F64(params.cast())
        };
        Predictor::Transformer(Arc::new(any))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Predictor::Transformer(_) => "PT",
            Predictor::Dmmse(_) => "dMMSE",
            Predictor::Ridge => "Ridge",
            Predictor::Smmse { .. } => "sMMSE",
            Predictor::Zero => "Zero",
        }
    }

    fn check_dim(&self, dim: usize) -> Result<(), EvalError> {
        let expected = match self {
            Predictor::Transformer(p) => Some(p.config().d_task),
            Predictor::Dmmse(t) | Predictor::Smmse { tasks: t, .. } => Some(t.dim()),
            Predictor::Ridge | Predictor::Zero => None,
        };
        match expected {
            Some(e) if e != dim => Err(EvalError::DimMismatch { expected: e, got: dim }),
            _ => Ok(()),
        }
    }

    /// Row-major `n × K` predictions, up-cast to `f64`.
    pub fn predict(&self, seqs: &[RegressionSequence], sigma2: f64) -> Result<Vec<f64>, EvalError> {
        let Some(first) = seqs.first() else { return Ok(Vec::new()) };
        self.check_dim(first.dim())?;
        let out = match self {
            Predictor::Transformer(p) => match p.as_ref() {
                AnyParams::F32(p) => transformer_predict(p, seqs)?,
                AnyParams::F64(p) => transformer_predict(p, seqs)?,
            },
            Predictor::Dmmse(t) => flatten(par::map_slice(seqs, |s| dmmse_sequence(s, t, sigma2)))?,
            Predictor::Ridge => flatten(par::map_slice(seqs, |s| ridge_sequence(s, sigma2)))?,
            Predictor::Smmse { tasks, eps2 } => {
                flatten(par::map_slice(seqs, |s| smmse_sequence(s, tasks, sigma2, *eps2)))?
            }
            Predictor::Zero => vec![0.0; seqs.iter().map(|s| s.len()).sum()],
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(self.label().to_string()));
        }
        Ok(out)
    }
}

fn flatten(rows: Vec<Result<Vec<f64>, OracleError>>) -> Result<Vec<f64>, EvalError> {
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn transformer_predict<T: Scalar>(p: &ModelParams<T>, seqs: &[RegressionSequence]) -> Result<Vec<f64>, EvalError> {
    let mut out = Vec::with_capacity(seqs.len() * seqs[0].len());
    for block in seqs.chunks(PREDICT_BLOCK) {
        let tokens = TokenBatch::<T>::from_sequences(block, p.config())?;
        out.extend(predict(p, &tokens)?.into_iter().map(|v| v.f64()));
    }
    Ok(out)
}

/// A fixed sample of sequences shared by every predictor evaluated on it.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub seqs: Vec<RegressionSequence>,
    pub distribution: DistTag,
    pub sigma2: f64,
    pub k: usize,
    pub dim: usize,
    pub master_seed: u64,
    pub stream: String,
}

impl EvalSet {
    pub fn sample(
        dist: &TaskDistribution,
        tag: DistTag,
        n_sequences: usize,
        k: usize,
        sigma2: f64,
        rng: &mut RngHandle,
    ) -> Result<Self, EvalError> {
        if n_sequences < 2 {
            return Err(EvalError::TooFewSequences(n_sequences));
        }
        let stream = rng.label().to_string();
        let seqs = sample_batch(dist, n_sequences, k, sigma2, rng)?;
        Ok(Self { seqs, distribution: tag, sigma2, k, dim: dist.dim(), master_seed: rng.master_seed(), stream })
    }

    /// Wraps hand-built sequences (all of one length and dimension).
    pub fn from_sequences(seqs: Vec<RegressionSequence>, tag: DistTag, sigma2: f64) -> Result<Self, EvalError> {
        let first = seqs.first().ok_or(EvalError::TooFewSequences(0))?;
        let (k, dim) = (first.len(), first.dim());
        if let Some(s) = seqs.iter().find(|s| s.len() != k || s.dim() != dim) {
            return Err(EvalError::DimMismatch { expected: dim, got: s.dim() });
        }
        Ok(Self { seqs, distribution: tag, sigma2, k, dim, master_seed: 0, stream: String::new() })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn predict(&self, p: &Predictor) -> Result<Vec<f64>, EvalError> {
        p.predict(&self.seqs, self.sigma2)
    }
}

/// Loss of one predictor on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub distribution: DistTag,
    /// Mean squared error at each position `k = 1..K` (not divided by `D`).
    pub per_k_mse: Vec<f64>,
    pub per_k_stderr: Vec<f64>,
    /// Normalized loss `L/D`: mean over `k` of `per_k_mse`, divided by `D`.
    pub loss: f64,
    pub stderr: f64,
    pub n_sequences: usize,
    pub dim: usize,
    pub master_seed: u64,
    pub stream: String,
    /// Each sequence's `(1/K)·Σ_k (ŷ_k − y_k)² / D`, for paired comparisons.
    #[serde(skip)]
    pub per_sequence: Vec<f64>,
}

/// Builds a report from predictions already computed on `set`.
pub fn report_from_predictions(label: &str, preds: &[f64], set: &EvalSet) -> EvalReport {
    let (n, k, d) = (set.len(), set.k, set.dim as f64);
    assert_eq!(preds.len(), n * k, "predictions do not match the evaluation set");
    let mut per_k: Vec<Vec<f64>> = vec![Vec::with_capacity(n); k];
    let mut per_sequence = Vec::with_capacity(n);
    for (s, seq) in set.seqs.iter().enumerate() {
        let mut tot = 0.0;
        for (j, y) in seq.ys().iter().enumerate() {
            let e = (preds[s * k + j] - y).powi(2);
            per_k[j].push(e);
            tot += e;
        }
        per_sequence.push(tot / k as f64 / d);
    }
    let ks: Vec<MeanStderr> = per_k.iter().map(|v| mean_stderr(v)).collect();
    let agg = mean_stderr(&per_sequence);
    EvalReport {
        predictor: label.to_string(),
        distribution: set.distribution,
        per_k_mse: ks.iter().map(|m| m.mean).collect(),
        per_k_stderr: ks.iter().map(|m| m.stderr).collect(),
        loss: agg.mean,
        stderr: agg.stderr,
        n_sequences: n,
        dim: set.dim,
        master_seed: set.master_seed,
        stream: set.stream.clone(),
        per_sequence,
    }
}

pub fn evaluate(pred: &Predictor, set: &EvalSet) -> Result<EvalReport, EvalError> {
    let p = set.predict(pred)?;
    Ok(report_from_predictions(pred.label(), &p, set))
}

/// Draws `n_sequences` fresh sequences from `dist` and evaluates `pred`.
/// Calling again with an identically positioned `rng` reproduces the same
/// sequences, so separate calls form common-random-number comparisons.
pub fn eval_loss(
    pred: &Predictor,
    dist: &TaskDistribution,
    tag: DistTag,
    n_sequences: usize,
    k: usize,
    sigma2: f64,
    rng: &mut RngHandle,
) -> Result<EvalReport, EvalError> {
    let set = EvalSet::sample(dist, tag, n_sequences, k, sigma2, rng)?;
    evaluate(pred, &set)
}

/// Paired difference `a − b` of two reports from one evaluation set.
pub fn paired_loss_diff(a: &EvalReport, b: &EvalReport) -> MeanStderr {
    crate::stats::paired_diff(&a.per_sequence, &b.per_sequence)
}

/// Per-sequence `(1/(K·D))·Σ_k (a_k − b_k)²`.
pub fn delta_per_sequence(a: &[f64], b: &[f64], k: usize, dim: usize) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "prediction tables differ in size");
    let norm = (k * dim) as f64;
    a.chunks_exact(k).zip(b.chunks_exact(k)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / norm).collect()
}

/// Δ between two predictors on a shared evaluation set, with its stderr.
pub fn eval_delta(a: &Predictor, b: &Predictor, set: &EvalSet) -> Result<MeanStderr, EvalError> {
    let pa = set.predict(a)?;
    let pb = set.predict(b)?;
    Ok(mean_stderr(&delta_per_sequence(&pa, &pb, set.k, set.dim)))
}

/// Norm-fixed interpolation: the direction of `α·w_i + (1−α)·w_j` rescaled to
/// the average of the endpoint norms.
pub fn interpolate_tasks(wi: &Task, wj: &Task, alpha: f64) -> Result<Task, EvalError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvalError::BadAlpha(alpha));
    }
    if wi.dim() != wj.dim() {
        return Err(EvalError::DimMismatch { expected: wi.dim(), got: wj.dim() });
    }
    let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v: Vec<f64> = wi.w().iter().zip(wj.w()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    let nv = norm(&v);
    if nv <= MIN_INTERPOLATION_NORM {
        return Err(EvalError::DegenerateInterpolation(nv));
    }
    let target = (norm(wi.w()) + norm(wj.w())) / 2.0;
    let scale = target / nv;
    Ok(Task::new(v.into_iter().map(|x| x * scale).collect())?)
}

/// One `(α, predictor)` cell of an interpolation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub alpha: f64,
    pub predictor: String,
    /// `L/D` averaged over pairs.
    pub loss: f64,
    /// Standard error across pairs.
    pub stderr: f64,
    /// Per-pair `L/D`, aligned across rows for paired comparisons.
    #[serde(skip)]
    pub per_pair: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationCurve {
    pub rows: Vec<InterpolationRow>,
    pub pairs: Vec<(usize, usize)>,
    /// Pairs drawn but discarded as degenerate or already used.
    pub resampled: usize,
}

impl InterpolationCurve {
    pub fn row(&self, predictor: &str, alpha: f64) -> Option<&InterpolationRow> {
        self.rows.iter().find(|r| r.predictor == predictor && r.alpha == alpha)
    }
}

/// Losses along norm-fixed paths between `n_pairs` distinct task pairs.
///
/// Pairs are sampled without replacement. For each pair one set of inputs and
/// noise draws is reused at every `α` and for every predictor.
#[allow(clippy::too_many_arguments)]
pub fn eval_interpolation(
    preds: &[Predictor],
    tasks: &TaskSet,
    n_pairs: usize,
    alpha_grid: &[f64],
    n_sequences: usize,
    k: usize,
    sigma2: f64,
    rng: &mut RngHandle,
) -> Result<InterpolationCurve, EvalError> {
    let m = tasks.len();
    if m < 2 {
        return Err(EvalError::NeedsTwoTasks);
    }
    if n_sequences < 2 {
        return Err(EvalError::TooFewSequences(n_sequences));
    }
    if let Some(a) = alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(EvalError::BadAlpha(*a));
    }
    let available = m * (m - 1) / 2;
    if n_pairs > available {
        return Err(EvalError::TooManyPairs { requested: n_pairs, available });
    }
    let mut pair_rng = rng.split("pairs");
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n_pairs);
    let mut resampled = 0;
    let budget = 100 * n_pairs + 1000;
    while pairs.len() < n_pairs {
        if resampled > budget {
            return Err(EvalError::PairsExhausted(n_pairs));
        }
        let i = pair_rng.index(m);
        let j = pair_rng.index(m);
        let key = (i.min(j), i.max(j));
        let degenerate = i == j
            || alpha_grid.iter().any(|a| interpolate_tasks(&tasks.task(i), &tasks.task(j), *a).is_err());
        if degenerate || pairs.iter().any(|p| (p.0.min(p.1), p.0.max(p.1)) == key) {
            resampled += 1;
            continue;
        }
        pairs.push((i, j));
    }

    let d = tasks.dim();
    let base = rng.split("paths");
    // losses[pair][alpha][predictor]
    let losses: Vec<Result<Vec<Vec<f64>>, EvalError>> = par::map_range(pairs.len(), |p| {
        let (i, j) = pairs[p];
        let mut r = base.substream(p as u64);
        let mut xs = vec![0.0; n_sequences * k * d];
        r.fill_normal(&mut xs);
        let sd = sigma2.sqrt();
        let noise: Vec<f64> = (0..n_sequences * k).map(|_| sd * r.normal()).collect();
        let mut out = Vec::with_capacity(alpha_grid.len());
        for &alpha in alpha_grid {
            let w = interpolate_tasks(&tasks.task(i), &tasks.task(j), alpha)?;
            let seqs: Vec<RegressionSequence> = (0..n_sequences)
                .map(|s| {
                    RegressionSequence::from_parts(
                        w.clone(),
                        xs[s * k * d..(s + 1) * k * d].to_vec(),
                        noise[s * k..(s + 1) * k].to_vec(),
                    )
                })
                .collect::<Result<_, _>>()?;
            let set = EvalSet::from_sequences(seqs, DistTag::Pretrain, sigma2)?;
            let mut cell = Vec::with_capacity(preds.len());
            for pr in preds {
                cell.push(evaluate(pr, &set)?.loss);
            }
            out.push(cell);
        }
        Ok(out)
    });
    let losses: Vec<Vec<Vec<f64>>> = losses.into_iter().collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(alpha_grid.len() * preds.len());
    for (ai, &alpha) in alpha_grid.iter().enumerate() {
        for (pi, pr) in preds.iter().enumerate() {
            let per_pair: Vec<f64> = losses.iter().map(|l| l[ai][pi]).collect();
            let ms = mean_stderr(&per_pair);
            rows.push(InterpolationRow {
                alpha,
                predictor: pr.label().to_string(),
                loss: ms.mean,
                stderr: ms.stderr,
                per_pair,
            });
        }
    }
    Ok(InterpolationCurve { rows, pairs, resampled })
}

/// `n` evenly spaced points covering `[0, 1]`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}
