//! Task distributions and regression-sequence sampling.

use std::sync::Arc;

use thiserror::Error;

use crate::par;
use crate::rng::RngHandle;

pub use crate::rng::RngPosition;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("task count M must be at least 1")]
    ZeroTasks,
    #[error("task dimension D must be at least 1")]
    ZeroDim,
    #[error("sequence length K must be at least 1")]
    ZeroLength,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("noise variance must be finite and nonnegative, got {0}")]
    BadNoise(f64),
    #[error("task has dimension {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("task entries must be finite")]
    NonFiniteTask,
}

/// A latent regression vector `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task(Vec<f64>);

impl Task {
    pub fn new(w: Vec<f64>) -> Result<Self, TaskError> {
        if w.is_empty() {
            return Err(TaskError::ZeroDim);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::NonFiniteTask);
        }
        Ok(Self(w))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn w(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `M` tasks stored contiguously (row `i` is `w^(i)`), so a set of `2^20`
/// tasks in `D = 8` costs exactly `M·D` reals.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    dim: usize,
    data: Vec<f64>,
}

impl TaskSet {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self, TaskError> {
        if dim == 0 {
            return Err(TaskError::ZeroDim);
        }
        if data.is_empty() {
            return Err(TaskError::ZeroTasks);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(TaskError::DimMismatch { expected: dim, got: data.len() % dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::NonFiniteTask);
        }
        Ok(Self { dim, data })
    }

    pub fn from_tasks(tasks: &[Task]) -> Result<Self, TaskError> {
        let dim = tasks.first().ok_or(TaskError::ZeroTasks)?.dim();
        let mut data = Vec::with_capacity(dim * tasks.len());
        for t in tasks {
            if t.dim() != dim {
                return Err(TaskError::DimMismatch { expected: dim, got: t.dim() });
            }
            data.extend_from_slice(t.w());
        }
        Self::from_rows(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn task(&self, i: usize) -> Task {
        Task(self.row(i).to_vec())
    }

    /// Row-major `M × D` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Either the uniform distribution over a finite task set or `N(0, I_D)`.
#[derive(Clone, Debug)]
pub enum TaskDistribution {
    FinitePretrain(Arc<TaskSet>),
    GaussianTrue { dim: usize },
}

impl TaskDistribution {
    pub fn gaussian(dim: usize) -> Result<Self, TaskError> {
        if dim == 0 {
            return Err(TaskError::ZeroDim);
        }
        Ok(Self::GaussianTrue { dim })
    }

    pub fn finite(tasks: TaskSet) -> Self {
        Self::FinitePretrain(Arc::new(tasks))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::FinitePretrain(t) => t.dim(),
            Self::GaussianTrue { dim } => *dim,
        }
    }

    /// `Some(M)` for a finite set, `None` for the Gaussian.
    pub fn num_tasks(&self) -> Option<usize> {
        match self {
            Self::FinitePretrain(t) => Some(t.len()),
            Self::GaussianTrue { .. } => None,
        }
    }

    pub fn task_set(&self) -> Option<&Arc<TaskSet>> {
        match self {
            Self::FinitePretrain(t) => Some(t),
            Self::GaussianTrue { .. } => None,
        }
    }
}

/// `K` pairs `(x_k, y_k)` generated from one task, with the noise kept so the
/// targets can be reconstructed.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSequence {
    xs: Vec<f64>,
    ys: Vec<f64>,
    noise: Vec<f64>,
    task: Task,
    task_index: Option<usize>,
}

impl RegressionSequence {
    /// Builds a sequence from explicit inputs and noise, computing the targets.
    pub fn from_parts(task: Task, xs: Vec<f64>, noise: Vec<f64>) -> Result<Self, TaskError> {
        let d = task.dim();
        let k = noise.len();
        if k == 0 {
            return Err(TaskError::ZeroLength);
        }
        if xs.len() != k * d {
            return Err(TaskError::DimMismatch { expected: k * d, got: xs.len() });
        }
        let ys = xs
            .chunks_exact(d)
            .zip(&noise)
            .map(|(x, e)| dot(task.w(), x) + e)
            .collect();
        Ok(Self { xs, ys, noise, task, task_index: None })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.task.dim()
    }

    /// Input `x_k` for 0-based `k`.
    pub fn x(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.xs[k * d..(k + 1) * d]
    }

    /// Row-major `K × D` inputs.
    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    /// Index of the task within its finite pretraining set, if any.
    pub fn task_index(&self) -> Option<usize> {
        self.task_index
    }

    /// Overwrites one pair; the target is recomputed from the stored task.
    pub fn with_pair(mut self, k: usize, x: &[f64], noise: f64) -> Self {
        let d = self.dim();
        self.xs[k * d..(k + 1) * d].copy_from_slice(x);
        self.noise[k] = noise;
        self.ys[k] = dot(self.task.w(), x) + noise;
        self
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `M` i.i.d. `N(0, I_D)` tasks.
pub fn sample_pretrain_set(rng: &mut RngHandle, m: usize, dim: usize) -> Result<TaskDistribution, TaskError> {
    if m == 0 {
        return Err(TaskError::ZeroTasks);
    }
    if dim == 0 {
        return Err(TaskError::ZeroDim);
    }
    let mut data = vec![0.0; m * dim];
    rng.fill_normal(&mut data);
    Ok(TaskDistribution::finite(TaskSet { dim, data }))
}

/// Uniform draw from a finite set, or a fresh Gaussian draw. Returns the task
/// index for finite sets.
pub fn sample_task_indexed(dist: &TaskDistribution, rng: &mut RngHandle) -> (Task, Option<usize>) {
    match dist {
        TaskDistribution::FinitePretrain(set) => {
            let i = rng.index(set.len());
            (set.task(i), Some(i))
        }
        TaskDistribution::GaussianTrue { dim } => {
            let mut w = vec![0.0; *dim];
            rng.fill_normal(&mut w);
            (Task(w), None)
        }
    }
}

pub fn sample_task(dist: &TaskDistribution, rng: &mut RngHandle) -> Task {
    sample_task_indexed(dist, rng).0
}

/// Fresh inputs `x_k ~ N(0, I_D)` and noise `ε_k ~ N(0, σ²)` for a fixed task.
pub fn sample_sequence(
    task: &Task,
    k: usize,
    sigma2: f64,
    rng: &mut RngHandle,
) -> Result<RegressionSequence, TaskError> {
    if k == 0 {
        return Err(TaskError::ZeroLength);
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(TaskError::BadNoise(sigma2));
    }
    let mut xs = vec![0.0; k * task.dim()];
    rng.fill_normal(&mut xs);
    let sd = sigma2.sqrt();
    let noise = (0..k).map(|_| sd * rng.normal()).collect();
    RegressionSequence::from_parts(task.clone(), xs, noise)
}

/// `B` independent sequences, each with its own task draw.
///
/// Sequence `i` is generated from its own substream of `rng`, so the batch is
/// identical whether it is produced serially or in parallel.
pub fn sample_batch(
    dist: &TaskDistribution,
    batch: usize,
    k: usize,
    sigma2: f64,
    rng: &mut RngHandle,
) -> Result<Vec<RegressionSequence>, TaskError> {
    if batch == 0 {
        return Err(TaskError::ZeroBatch);
    }
    let first = rng.reserve_substreams(batch as u64);
    let base = rng.clone();
    par::map_range(batch, |i| {
        let mut r = base.substream(first + i as u64);
        let (task, idx) = sample_task_indexed(dist, &mut r);
        let mut seq = sample_sequence(&task, k, sigma2, &mut r)?;
        seq.task_index = idx;
        Ok(seq)
    })
    .into_iter()
    .collect()
}

/// Sequences that all share one fixed task (used along interpolation paths).
pub fn sample_fixed_task_batch(
    task: &Task,
    batch: usize,
    k: usize,
    sigma2: f64,
    rng: &mut RngHandle,
) -> Result<Vec<RegressionSequence>, TaskError> {
    if batch == 0 {
        return Err(TaskError::ZeroBatch);
    }
    let first = rng.reserve_substreams(batch as u64);
    let base = rng.clone();
    par::map_range(batch, |i| sample_sequence(task, k, sigma2, &mut base.substream(first + i as u64)))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng() -> RngHandle {
        RngHandle::new(0, "test")
    }

    #[test]
    fn rejects_empty_shapes() {
        assert_eq!(sample_pretrain_set(&mut rng(), 0, 8).unwrap_err(), TaskError::ZeroTasks);
        assert_eq!(sample_pretrain_set(&mut rng(), 4, 0).unwrap_err(), TaskError::ZeroDim);
        let t = Task::zeros(2);
        assert_eq!(sample_sequence(&t, 0, 0.1, &mut rng()).unwrap_err(), TaskError::ZeroLength);
        assert!(matches!(sample_sequence(&t, 2, -1.0, &mut rng()), Err(TaskError::BadNoise(_))));
        let d = TaskDistribution::gaussian(2).unwrap();
        assert_eq!(sample_batch(&d, 0, 2, 0.1, &mut rng()).unwrap_err(), TaskError::ZeroBatch);
    }

    #[test]
    fn single_task_set_is_reproducible() {
        let a = sample_pretrain_set(&mut RngHandle::new(0, "task-set"), 1, 8).unwrap();
        let b = sample_pretrain_set(&mut RngHandle::new(0, "task-set"), 1, 8).unwrap();
        assert_eq!(a.task_set().unwrap().as_slice(), b.task_set().unwrap().as_slice());
        assert_eq!(a.num_tasks(), Some(1));
    }

    #[test]
    fn sixty_four_tasks_have_unit_second_moment() {
        // 512 i.i.d. N(0,1) entries: x² has mean 1 and variance 2, so the
        // sample mean of x² has stderr sqrt(2/512) = 0.0625.
        let d = sample_pretrain_set(&mut RngHandle::new(0, "task-set"), 64, 8).unwrap();
        let s = d.task_set().unwrap().as_slice();
        assert_eq!(s.len(), 512);
        let ms = s.iter().map(|v| v * v).sum::<f64>() / 512.0;
        assert!((ms - 1.0).abs() < 3.0 * (2.0f64 / 512.0).sqrt(), "mean square {ms}");
    }

    #[test]
    fn large_task_set_memory_is_m_times_d() {
        let d = sample_pretrain_set(&mut RngHandle::new(0, "task-set"), 1 << 20, 8).unwrap();
        let set = d.task_set().unwrap();
        assert_eq!(set.len(), 1 << 20);
        assert_eq!(set.as_slice().len(), (1 << 20) * 8);
    }

    #[test]
    fn singleton_distribution_always_returns_its_task() {
        let d = sample_pretrain_set(&mut rng(), 1, 3).unwrap();
        let only = d.task_set().unwrap().task(0);
        let mut r = RngHandle::new(5, "draws");
        for _ in 0..50 {
            assert_eq!(sample_task(&d, &mut r), only);
        }
    }

    #[test]
    fn uniform_draws_over_four_tasks() {
        let d = sample_pretrain_set(&mut rng(), 4, 2).unwrap();
        let mut r = RngHandle::new(1, "draws");
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_task_indexed(&d, &mut r).1.unwrap()] += 1;
        }
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn gaussian_task_shape() {
        let d = TaskDistribution::gaussian(8).unwrap();
        let t = sample_task(&d, &mut rng());
        assert_eq!(t.dim(), 8);
        assert!(t.w().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noiseless_projection() {
        let t = Task::new(vec![1.0, 0.0]).unwrap();
        let s = sample_sequence(&t, 3, 0.0, &mut rng()).unwrap();
        for k in 0..3 {
            assert_eq!(s.ys()[k], s.x(k)[0]);
        }
    }

    #[test]
    fn base_shapes() {
        let d = TaskDistribution::gaussian(8).unwrap();
        let t = sample_task(&d, &mut rng());
        let s = sample_sequence(&t, 16, 0.25, &mut rng()).unwrap();
        assert_eq!(s.len(), 16);
        assert_eq!(s.xs().len(), 16 * 8);
        assert_eq!(s.ys().len(), 16);
    }

    #[test]
    fn pure_noise_variance() {
        let t = Task::zeros(2);
        let mut r = RngHandle::new(2, "noise");
        let n = 100_000;
        let ys: Vec<f64> = (0..n).map(|_| sample_sequence(&t, 1, 1.0, &mut r).unwrap().ys()[0]).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of N(0,1) is 2/(n-1).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1) as f64).sqrt(), "var {var}");
    }

    #[test]
    fn batch_shape_and_determinism() {
        let d = sample_pretrain_set(&mut rng(), 16, 8).unwrap();
        let a = sample_batch(&d, 256, 16, 0.25, &mut RngHandle::new(9, "train-data")).unwrap();
        let b = sample_batch(&d, 256, 16, 0.25, &mut RngHandle::new(9, "train-data")).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_from_singleton() {
        let d = sample_pretrain_set(&mut rng(), 1, 4).unwrap();
        let only = d.task_set().unwrap().task(0);
        let mut r = RngHandle::new(0, "train-data");
        let a = sample_batch(&d, 1, 5, 0.25, &mut r).unwrap();
        let b = sample_batch(&d, 1, 5, 0.25, &mut r).unwrap();
        assert_eq!(a[0].task(), &only);
        assert_eq!(a[0].task_index(), Some(0));
        assert_ne!(a[0].xs(), b[0].xs(), "fresh data on every call");
    }

    #[test]
    fn chi_squared_uniformity() {
        // Pearson statistic over M = 16 cells with 10^5 draws; the 1e-4 upper
        // quantile of chi-squared(15) is 44.26.
        let d = sample_pretrain_set(&mut rng(), 16, 2).unwrap();
        let mut r = RngHandle::new(11, "draws");
        let n = 100_000;
        let mut counts = [0f64; 16];
        for _ in 0..n {
            counts[sample_task_indexed(&d, &mut r).1.unwrap()] += 1.0;
        }
        let e = n as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!(chi2 < 44.26, "chi2 = {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn targets_reconstruct_from_noise(seed in any::<u64>(), d in 1usize..6, k in 1usize..20, s2 in 0.0f64..4.0) {
            let dist = TaskDistribution::gaussian(d).unwrap();
            let mut r = RngHandle::new(seed, "prop");
            let batch = sample_batch(&dist, 3, k, s2, &mut r).unwrap();
            for s in &batch {
                for j in 0..k {
                    let resid = s.ys()[j] - dot(s.task().w(), s.x(j));
                    prop_assert!((resid - s.noise()[j]).abs() <= 1e-12 * (1.0 + s.ys()[j].abs()));
                }
            }
        }
    }
}
