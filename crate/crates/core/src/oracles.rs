//! Bayesian posterior-mean estimators for in-context linear regression.
//!
//! Under a task prior `p(w)` and Gaussian observation noise the loss-optimal
//! prediction for `y_k` given the context `S_k` is `E[w | S_k]ᵀ x_k`. This
//! module computes that posterior mean for three priors:
//!
//! - the uniform prior over a finite task set (dMMSE), a softmax-weighted
//!   mixture of the stored tasks;
//! - the standard Gaussian prior (Ridge), `(XᵀX + σ²I)⁻¹Xᵀy`;
//! - a mixture of isotropic Gaussians of variance `ε²` centred on the task
//!   set (smoothed dMMSE, sMMSE).
//!
//! All mixture weights are computed in log space with a max shift. Large task
//! sets are processed in fixed-size chunks whose partial sums are combined by
//! a pairwise tree, so results are identical for any thread count.
//!
//! [`brute_force_posterior`] integrates the posterior directly (finite sum or
//! self-normalised importance sampling) and serves as an independent witness
//! for the closed forms.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{gemm, Op};
use crate::par;
use crate::rng::RngHandle;
use crate::stats::{mean_stderr, softmax};
use crate::tasks::{dot, sample_batch, RegressionSequence, TaskDistribution, TaskSet};

/// Tasks per chunk when accumulating mixture weights over large sets.
pub const TASK_CHUNK: usize = 4096;

/// Samples per importance-sampling block; each block has its own substream.
const IS_BLOCK: usize = 1 << 14;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("estimator requires a finite pretraining task set")]
    NeedsFiniteSet,
    #[error("noise variance must be positive, got {0}")]
    BadNoise(f64),
    #[error("smoothing variance must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("normal matrix XᵀX + σ²I is singular")]
    Singular,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("brute-force posterior supports D <= 4, got {0}")]
    DimTooLarge(usize),
    #[error("importance-sampling budget {0} is too small to report a standard error")]
    BudgetTooSmall(usize),
    #[error("epsilon grid must be nonempty and strictly ascending")]
    BadGrid,
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
}

/// The first `k - 1` pairs of a sequence plus the query input `x_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleContext {
    dim: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    x_query: Vec<f64>,
    sigma2: f64,
}

impl OracleContext {
    /// `xs` is row-major `(k-1) × D`.
    pub fn new(dim: usize, xs: Vec<f64>, ys: Vec<f64>, x_query: Vec<f64>, sigma2: f64) -> Result<Self, OracleError> {
        if x_query.len() != dim {
            return Err(OracleError::DimMismatch { expected: dim, got: x_query.len() });
        }
        if xs.len() != ys.len() * dim {
            return Err(OracleError::DimMismatch { expected: ys.len() * dim, got: xs.len() });
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(OracleError::BadNoise(sigma2));
        }
        Ok(Self { dim, xs, ys, x_query, sigma2 })
    }

    /// Context `S_k` of a sequence, with 1-based `k`.
    pub fn from_sequence(seq: &RegressionSequence, k: usize, sigma2: f64) -> Result<Self, OracleError> {
        assert!(k >= 1 && k <= seq.len(), "k = {k} outside 1..={}", seq.len());
        let d = seq.dim();
        Self::new(d, seq.xs()[..(k - 1) * d].to_vec(), seq.ys()[..k - 1].to_vec(), seq.x(k - 1).to_vec(), sigma2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of in-context examples, `k - 1`.
    pub fn n_examples(&self) -> usize {
        self.ys.len()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn x_query(&self) -> &[f64] {
        &self.x_query
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    fn x(&self, j: usize) -> &[f64] {
        &self.xs[j * self.dim..(j + 1) * self.dim]
    }

    fn log_likelihood(&self, w: &[f64]) -> f64 {
        let sse: f64 = (0..self.n_examples()).map(|j| (self.ys[j] - dot(w, self.x(j))).powi(2)).sum();
        -sse / (2.0 * self.sigma2)
    }
}

/// Posterior-mean coefficients and the implied prediction `ŵᵀx_query`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorPrediction {
    pub w_hat: Vec<f64>,
    pub y_hat: f64,
}

impl EstimatorPrediction {
    fn new(w_hat: Vec<f64>, x_query: &[f64]) -> Self {
        let y_hat = dot(&w_hat, x_query);
        Self { w_hat, y_hat }
    }
}

fn require_positive_noise(sigma2: f64) -> Result<(), OracleError> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(OracleError::BadNoise(sigma2))
    }
}

fn require_set(dist: &TaskDistribution, dim: usize) -> Result<&TaskSet, OracleError> {
    let set = dist.task_set().ok_or(OracleError::NeedsFiniteSet)?;
    if set.dim() != dim {
        return Err(OracleError::DimMismatch { expected: dim, got: set.dim() });
    }
    Ok(set)
}

/// Partial softmax accumulator: `sum exp(l_i - max)` and `sum exp(l_i - max)·v_i`.
#[derive(Clone, Debug)]
struct Partial {
    max: f64,
    norm: f64,
    acc: Vec<f64>,
}

impl Partial {
    fn from_logits(logits: &[f64], values: impl Fn(usize) -> Vec<f64>, width: usize) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let mut acc = vec![0.0; width];
        for (i, l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            norm += e;
            for (a, v) in acc.iter_mut().zip(values(i)) {
                *a += e * v;
            }
        }
        Self { max, norm, acc }
    }

    fn combine(a: Partial, b: Partial) -> Partial {
        let max = a.max.max(b.max);
        let sa = if a.norm == 0.0 { 0.0 } else { (a.max - max).exp() };
        let sb = if b.norm == 0.0 { 0.0 } else { (b.max - max).exp() };
        let acc = a.acc.iter().zip(&b.acc).map(|(x, y)| x * sa + y * sb).collect();
        Partial { max, norm: a.norm * sa + b.norm * sb, acc }
    }

    fn mean(&self) -> Result<Vec<f64>, OracleError> {
        if !(self.max.is_finite() && self.norm > 0.0 && self.norm.is_finite()) {
            return Err(OracleError::NonFinite("mixture weights"));
        }
        Ok(self.acc.iter().map(|a| a / self.norm).collect())
    }
}

/// Softmax-weighted mean of the task rows, with per-row log-weights from `logit`.
fn weighted_task_mean(set: &TaskSet, logit: impl Fn(&[f64]) -> f64 + Sync) -> Result<Vec<f64>, OracleError> {
    let d = set.dim();
    let partials = par::map_chunks(set.as_slice(), TASK_CHUNK * d, |_, rows| {
        let logits: Vec<f64> = rows.chunks_exact(d).map(&logit).collect();
        Partial::from_logits(&logits, |i| rows[i * d..(i + 1) * d].to_vec(), d)
    });
    par::tree_reduce(partials, Partial::combine).expect("task set is nonempty").mean()
}

/// Posterior mean under the uniform prior over a finite task set.
pub fn dmmse_predict(ctx: &OracleContext, tasks: &TaskDistribution) -> Result<EstimatorPrediction, OracleError> {
    let set = require_set(tasks, ctx.dim)?;
    require_positive_noise(ctx.sigma2)?;
    let w_hat = if ctx.n_examples() == 0 {
        set.mean()
    } else {
        weighted_task_mean(set, |w| ctx.log_likelihood(w))?
    };
    Ok(EstimatorPrediction::new(w_hat, &ctx.x_query))
}

/// The dMMSE mixture weights over every task (for diagnostics and tests).
pub fn dmmse_weights(ctx: &OracleContext, tasks: &TaskDistribution) -> Result<Vec<f64>, OracleError> {
    let set = require_set(tasks, ctx.dim)?;
    require_positive_noise(ctx.sigma2)?;
    let logits: Vec<f64> = (0..set.len()).map(|i| ctx.log_likelihood(set.row(i))).collect();
    Ok(softmax(&logits))
}

/// dMMSE predictions `ŷ_1 … ŷ_K` for a whole sequence in one pass.
///
/// Uses `ŷ_k = Σ_i β_ik (w_iᵀx_k)`, with the projections `W Xᵀ` computed by one
/// gemm per task chunk and residual sums accumulated along the sequence.
pub fn dmmse_sequence(seq: &RegressionSequence, tasks: &TaskDistribution, sigma2: f64) -> Result<Vec<f64>, OracleError> {
    let d = seq.dim();
    let set = require_set(tasks, d)?;
    require_positive_noise(sigma2)?;
    let kk = seq.len();
    let ys = seq.ys();
    let inv = 1.0 / (2.0 * sigma2);
    let partials = par::map_chunks(set.as_slice(), TASK_CHUNK * d, |_, rows| {
        let m = rows.len() / d;
        let mut proj = vec![0.0; m * kk];
        gemm(Op::N, Op::T, m, d, kk, rows, seq.xs(), 0.0, &mut proj);
        let mut logits = vec![0.0; m * kk];
        for i in 0..m {
            let mut sse = 0.0;
            for k in 0..kk {
                logits[k * m + i] = -sse * inv;
                sse += (ys[k] - proj[i * kk + k]).powi(2);
            }
        }
        (0..kk)
            .map(|k| {
                let l = &logits[k * m..(k + 1) * m];
                Partial::from_logits(l, |i| vec![proj[i * kk + k]], 1)
            })
            .collect::<Vec<_>>()
    });
    let per_k = par::tree_reduce(partials, |a, b| a.into_iter().zip(b).map(|(x, y)| Partial::combine(x, y)).collect())
        .expect("task set is nonempty");
    per_k.iter().map(|p| p.mean().map(|v| v[0])).collect()
}

fn cholesky(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, OracleError> {
    m.cholesky().ok_or(OracleError::Singular)
}

/// Gram matrix `XᵀX` and `Xᵀy` of a context.
fn normal_equations(dim: usize, xs: &[f64], ys: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let mut g = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for (x, y) in xs.chunks_exact(dim).zip(ys) {
        for r in 0..dim {
            b[r] += x[r] * y;
            for c in 0..dim {
                g[(r, c)] += x[r] * x[c];
            }
        }
    }
    (g, b)
}

fn ridge_solve(g: &DMatrix<f64>, b: &DVector<f64>, sigma2: f64) -> Result<Vec<f64>, OracleError> {
    let mut a = g.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    let w = cholesky(a)?.solve(b);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::NonFinite("ridge solution"));
    }
    Ok(w.as_slice().to_vec())
}

/// Posterior mean under `N(0, I_D)`: ridge regression with parameter `σ²`.
///
/// With `σ² = 0` this is least squares and fails with [`OracleError::Singular`]
/// when `XᵀX` is not positive definite.
pub fn ridge_predict(ctx: &OracleContext) -> Result<EstimatorPrediction, OracleError> {
    if ctx.n_examples() == 0 {
        return Ok(EstimatorPrediction::new(vec![0.0; ctx.dim], &ctx.x_query));
    }
    let (g, b) = normal_equations(ctx.dim, &ctx.xs, &ctx.ys);
    let w = ridge_solve(&g, &b, ctx.sigma2)?;
    Ok(EstimatorPrediction::new(w, &ctx.x_query))
}

/// Ridge predictions for a whole sequence, updating `XᵀX` incrementally.
pub fn ridge_sequence(seq: &RegressionSequence, sigma2: f64) -> Result<Vec<f64>, OracleError> {
    let d = seq.dim();
    let mut g = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut out = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        if k == 0 {
            out.push(0.0);
        } else {
            let w = ridge_solve(&g, &b, sigma2)?;
            out.push(dot(&w, seq.x(k)));
        }
        let (x, y) = (seq.x(k), seq.ys()[k]);
        for r in 0..d {
            b[r] += x[r] * y;
            for c in 0..d {
                g[(r, c)] += x[r] * x[c];
            }
        }
    }
    Ok(out)
}

/// Factorisation shared by every mixture centre for one sMMSE context.
///
/// With `G = XᵀX/σ²`, `b = Xᵀy/σ²`, `A = G + I/ε²` and `J_i = w_i/ε² + b`, the
/// log-weights `β̃_i = ½ J_iᵀA⁻¹J_i − ‖w_i‖²/2ε²` and the component means
/// `A⁻¹J_i` are evaluated through the well-conditioned `Ã = ε²A = ε²G + I`:
///
/// - `β̃_i = −½ w_iᵀ S w_i + uᵀw_i + ½ε² bᵀu` with `S = Ã⁻¹G`, `u = Ã⁻¹b`;
/// - `Σ β_i A⁻¹J_i = Ã⁻¹ w̄_β + ε² u` with `w̄_β = Σ β_i w_i`.
///
/// This is the same expression with the `‖w_i‖²/ε²` terms cancelled
/// analytically, which keeps the `ε → 0` limit accurate.
struct SmoothedFactor {
    dim: usize,
    eps2: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    s: Vec<f64>,
    u: Vec<f64>,
    offset: f64,
}

impl SmoothedFactor {
    fn new(g_raw: &DMatrix<f64>, b_raw: &DVector<f64>, sigma2: f64, eps2: f64) -> Result<Self, OracleError> {
        let dim = g_raw.nrows();
        let g = g_raw / sigma2;
        let b = b_raw / sigma2;
        let a_tilde = &g * eps2 + DMatrix::identity(dim, dim);
        let chol = cholesky(a_tilde)?;
        let s_mat = chol.solve(&g);
        // S is symmetric in exact arithmetic; symmetrise to keep wᵀSw exact-order independent.
        let s_sym = (&s_mat + s_mat.transpose()) * 0.5;
        let u = chol.solve(&b);
        let offset = 0.5 * eps2 * b.dot(&u);
        let s = s_sym.transpose().as_slice().to_vec();
        Ok(Self { dim, eps2, chol, s, u: u.as_slice().to_vec(), offset })
    }

    /// Log-weights for a block of centres (row-major).
    fn logits(&self, rows: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let m = rows.len() / d;
        let mut ws = vec![0.0; m * d];
        gemm(Op::N, Op::N, m, d, d, rows, &self.s, 0.0, &mut ws);
        (0..m)
            .map(|i| {
                let w = &rows[i * d..(i + 1) * d];
                -0.5 * dot(w, &ws[i * d..(i + 1) * d]) + dot(&self.u, w) + self.offset
            })
            .collect()
    }

    fn w_hat(&self, set: &TaskSet) -> Result<Vec<f64>, OracleError> {
        let d = self.dim;
        let partials = par::map_chunks(set.as_slice(), TASK_CHUNK * d, |_, rows| {
            let logits = self.logits(rows);
            if logits.iter().any(|l| !l.is_finite()) {
                return None;
            }
            Some(Partial::from_logits(&logits, |i| rows[i * d..(i + 1) * d].to_vec(), d))
        });
        let partials: Option<Vec<Partial>> = partials.into_iter().collect();
        let partials = partials.ok_or(OracleError::NonFinite("sMMSE log-weights"))?;
        let w_bar = par::tree_reduce(partials, Partial::combine).expect("task set is nonempty").mean()?;
        let mut w = self.chol.solve(&DVector::from_vec(w_bar));
        for (wi, ui) in w.iter_mut().zip(&self.u) {
            *wi += self.eps2 * ui;
        }
        Ok(w.as_slice().to_vec())
    }
}

fn require_eps(eps2: f64) -> Result<(), OracleError> {
    if eps2 > 0.0 && eps2.is_finite() {
        Ok(())
    } else {
        Err(OracleError::BadEpsilon(eps2))
    }
}

/// Posterior mean under a mixture of `N(w_i, ε²I)` centred on the task set.
pub fn smmse_predict(ctx: &OracleContext, tasks: &TaskDistribution, eps2: f64) -> Result<EstimatorPrediction, OracleError> {
    let set = require_set(tasks, ctx.dim)?;
    require_positive_noise(ctx.sigma2)?;
    require_eps(eps2)?;
    let (g, b) = normal_equations(ctx.dim, &ctx.xs, &ctx.ys);
    let w = SmoothedFactor::new(&g, &b, ctx.sigma2, eps2)?.w_hat(set)?;
    Ok(EstimatorPrediction::new(w, &ctx.x_query))
}

/// sMMSE predictions for a whole sequence.
pub fn smmse_sequence(
    seq: &RegressionSequence,
    tasks: &TaskDistribution,
    sigma2: f64,
    eps2: f64,
) -> Result<Vec<f64>, OracleError> {
    let d = seq.dim();
    let set = require_set(tasks, d)?;
    require_positive_noise(sigma2)?;
    require_eps(eps2)?;
    let mut g = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut out = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        let w = SmoothedFactor::new(&g, &b, sigma2, eps2)?.w_hat(set)?;
        out.push(dot(&w, seq.x(k)));
        let (x, y) = (seq.x(k), seq.ys()[k]);
        for r in 0..d {
            b[r] += x[r] * y;
            for c in 0..d {
                g[(r, c)] += x[r] * x[c];
            }
        }
    }
    Ok(out)
}

/// One grid point of the smoothing search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonPoint {
    pub eps2: f64,
    /// Normalized loss `L/D` on the ideal distribution.
    pub loss: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSearch {
    pub eps2_star: f64,
    pub curve: Vec<EpsilonPoint>,
}

impl EpsilonSearch {
    pub fn best(&self) -> EpsilonPoint {
        *self.curve.iter().find(|p| p.eps2 == self.eps2_star).expect("minimizer is on the curve")
    }
}

/// Default smoothing grid: 25 log-spaced points in `[1e-3, 10]`.
pub fn default_epsilon_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 10f64.ln());
    (0..25).map(|i| (lo + (hi - lo) * i as f64 / 24.0).exp()).collect()
}

/// Monte Carlo search for the smoothing variance minimizing `L/D` on `N(0, I)`.
///
/// Every grid point is scored on the same evaluation sequences.
pub fn optimal_epsilon_search(
    tasks: &TaskDistribution,
    dim: usize,
    k: usize,
    sigma2: f64,
    grid: &[f64],
    n_eval: usize,
    rng: &mut RngHandle,
) -> Result<EpsilonSearch, OracleError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::BadGrid);
    }
    require_set(tasks, dim)?;
    let truth = TaskDistribution::gaussian(dim)?;
    let seqs = sample_batch(&truth, n_eval, k, sigma2, rng)?;
    let mut curve = Vec::with_capacity(grid.len());
    for &eps2 in grid {
        let losses: Result<Vec<f64>, OracleError> = par::map_slice(&seqs, |s| {
            let pred = smmse_sequence(s, tasks, sigma2, eps2)?;
            let se: f64 = pred.iter().zip(s.ys()).map(|(p, y)| (p - y).powi(2)).sum();
            Ok(se / (k * dim) as f64)
        })
        .into_iter()
        .collect();
        let ms = mean_stderr(&losses?);
        curve.push(EpsilonPoint { eps2, loss: ms.mean, stderr: ms.stderr });
    }
    let best = curve.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).expect("grid is nonempty");
    Ok(EpsilonSearch { eps2_star: best.eps2, curve })
}

/// Prior used by the brute-force posterior.
#[derive(Clone, Copy, Debug)]
pub enum BrutePrior<'a> {
    Finite(&'a TaskSet),
    GaussianTrue,
    GaussianMixture { centers: &'a TaskSet, eps2: f64 },
}

/// Posterior mean by direct integration, with Monte Carlo standard errors
/// (zero for the exact finite sum).
#[derive(Clone, Debug, PartialEq)]
pub struct BruteForceEstimate {
    pub prediction: EstimatorPrediction,
    pub w_stderr: Vec<f64>,
    pub y_stderr: f64,
    pub effective_samples: f64,
}

/// Largest dimension the brute-force posterior accepts.
pub const BRUTE_FORCE_MAX_DIM: usize = 4;

/// `E[w | S_k]` straight from Bayes' rule.
///
/// For a finite prior the integral is the exact finite sum of prior mass
/// times Gaussian likelihood (evaluated in linear space as a product of
/// densities, independent of the log-space closed forms). Continuous priors
/// use self-normalised importance sampling with the prior as proposal and
/// `budget` samples.
pub fn brute_force_posterior(
    ctx: &OracleContext,
    prior: BrutePrior<'_>,
    budget: usize,
    rng: &RngHandle,
) -> Result<BruteForceEstimate, OracleError> {
    let d = ctx.dim;
    if d > BRUTE_FORCE_MAX_DIM {
        return Err(OracleError::DimTooLarge(d));
    }
    require_positive_noise(ctx.sigma2)?;
    match prior {
        BrutePrior::Finite(set) => finite_posterior(ctx, set),
        BrutePrior::GaussianTrue => importance_posterior(ctx, budget, rng, |r, w| r.fill_normal(w)),
        BrutePrior::GaussianMixture { centers, eps2 } => {
            require_eps(eps2)?;
            if centers.dim() != d {
                return Err(OracleError::DimMismatch { expected: d, got: centers.dim() });
            }
            let sd = eps2.sqrt();
            importance_posterior(ctx, budget, rng, |r, w| {
                let c = centers.row(r.index(centers.len()));
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi = ci + sd * r.normal();
                }
            })
        }
    }
}

fn finite_posterior(ctx: &OracleContext, set: &TaskSet) -> Result<BruteForceEstimate, OracleError> {
    let d = ctx.dim;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * ctx.sigma2).sqrt();
    let prior_mass = 1.0 / set.len() as f64;
    let mut evidence = 0.0;
    let mut num = vec![0.0; d];
    for i in 0..set.len() {
        let w = set.row(i);
        let mut lik = prior_mass;
        for j in 0..ctx.n_examples() {
            let r = ctx.ys[j] - dot(w, ctx.x(j));
            lik *= norm * (-r * r / (2.0 * ctx.sigma2)).exp();
        }
        evidence += lik;
        for (n, wi) in num.iter_mut().zip(w) {
            *n += lik * wi;
        }
    }
    if !(evidence > 0.0 && evidence.is_finite()) {
        return Err(OracleError::NonFinite("finite-prior evidence"));
    }
    let w_hat: Vec<f64> = num.iter().map(|n| n / evidence).collect();
    Ok(BruteForceEstimate {
        prediction: EstimatorPrediction::new(w_hat, &ctx.x_query),
        w_stderr: vec![0.0; d],
        y_stderr: 0.0,
        effective_samples: f64::INFINITY,
    })
}

/// Weighted sums of one importance-sampling block, relative to its max log-weight.
#[derive(Clone, Debug)]
struct IsBlock {
    max: f64,
    s0: f64,
    s1: Vec<f64>,
    q0: f64,
    q1: Vec<f64>,
    q2: Vec<f64>,
}

impl IsBlock {
    fn combine(a: IsBlock, b: IsBlock) -> IsBlock {
        let max = a.max.max(b.max);
        let (sa, sb) = ((a.max - max).exp(), (b.max - max).exp());
        let mix = |x: &[f64], y: &[f64], fa: f64, fb: f64| x.iter().zip(y).map(|(p, q)| p * fa + q * fb).collect();
        IsBlock {
            max,
            s0: a.s0 * sa + b.s0 * sb,
            s1: mix(&a.s1, &b.s1, sa, sb),
            q0: a.q0 * sa * sa + b.q0 * sb * sb,
            q1: mix(&a.q1, &b.q1, sa * sa, sb * sb),
            q2: mix(&a.q2, &b.q2, sa * sa, sb * sb),
        }
    }
}

fn importance_posterior(
    ctx: &OracleContext,
    budget: usize,
    rng: &RngHandle,
    draw: impl Fn(&mut RngHandle, &mut [f64]) + Sync,
) -> Result<BruteForceEstimate, OracleError> {
    if budget < 2 {
        return Err(OracleError::BudgetTooSmall(budget));
    }
    let d = ctx.dim;
    // Components 0..d are w, component d is the prediction wᵀx_query.
    let width = d + 1;
    let n_blocks = budget.div_ceil(IS_BLOCK);
    let blocks = par::map_range(n_blocks, |bi| {
        let n = IS_BLOCK.min(budget - bi * IS_BLOCK);
        let mut r = rng.substream(bi as u64);
        let mut samples = vec![0.0; n * width];
        let mut logw = vec![0.0; n];
        for s in 0..n {
            let f = &mut samples[s * width..(s + 1) * width];
            draw(&mut r, &mut f[..d]);
            f[d] = dot(&f[..d], &ctx.x_query);
            logw[s] = ctx.log_likelihood(&f[..d]);
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut b = IsBlock { max, s0: 0.0, s1: vec![0.0; width], q0: 0.0, q1: vec![0.0; width], q2: vec![0.0; width] };
        for s in 0..n {
            let e = (logw[s] - max).exp();
            let e2 = e * e;
            b.s0 += e;
            b.q0 += e2;
            for c in 0..width {
                let f = samples[s * width + c];
                b.s1[c] += e * f;
                b.q1[c] += e2 * f;
                b.q2[c] += e2 * f * f;
            }
        }
        b
    });
    let tot = par::tree_reduce(blocks, IsBlock::combine).expect("at least one block");
    if !(tot.s0 > 0.0 && tot.s0.is_finite()) {
        return Err(OracleError::NonFinite("importance weights"));
    }
    let mean: Vec<f64> = tot.s1.iter().map(|s| s / tot.s0).collect();
    let stderr: Vec<f64> = (0..width)
        .map(|c| {
            let mu = mean[c];
            let var = (tot.q2[c] - 2.0 * mu * tot.q1[c] + mu * mu * tot.q0) / (tot.s0 * tot.s0);
            var.max(0.0).sqrt()
        })
        .collect();
    let w_hat = mean[..d].to_vec();
    Ok(BruteForceEstimate {
        prediction: EstimatorPrediction { w_hat, y_hat: mean[d] },
        w_stderr: stderr[..d].to_vec(),
        y_stderr: stderr[d],
        effective_samples: tot.s0 * tot.s0 / tot.q0,
    })
}
