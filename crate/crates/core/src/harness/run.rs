//! One experiment end to end: task set, oracle baselines, LR choice,
//! training, per-checkpoint evaluation and interpolation curves.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::eval::{delta_per_sequence, eval_interpolation, report_from_predictions, DistTag, EvalSet, Predictor};
use crate::model::{AnyParams, Precision};
use crate::oracles::{default_epsilon_grid, optimal_epsilon_search};
use crate::rng::RngHandle;
use crate::stats::mean_stderr;
use crate::tasks::{sample_pretrain_set, TaskDistribution};
use crate::train::{probe_learning_rates, read_metrics, train, TrainConfig, TrainIo, METRICS_FILE};

use super::config::{ExperimentConfig, TaskCount};
use super::store::{ResultsStore, RunRecord, RunState, RunStatus};
use super::HarnessError;

pub const LOSS: &str = "loss";
pub const MSE_K: &str = "mse_k";
pub const DELTA: &str = "delta";
pub const INTERP_LOSS: &str = "interp_loss";
pub const TRAIN_LOSS: &str = "train_loss";
const PEAK_LR: &str = "peak_lr";
const LR_PROBE_STABLE: &str = "lr_probe_stable";
const SMMSE_EPS2: &str = "smmse_eps2";
const AGG: &str = "agg";
const INTERP: &str = "interp";
/// Logged training-loss rows averaged into each checkpoint's `train_loss`.
const TRAIN_LOSS_WINDOW: usize = 10;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Evaluate the oracle estimators only; no probe, no training.
    pub oracle_only: bool,
    /// Timestamp stamped on new records; defaults to `SOURCE_DATE_EPOCH`, then the clock.
    pub timestamp: Option<i64>,
    /// Stop training after this many steps; the run stays resumable.
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub csv: PathBuf,
    /// State of the run when this call started.
    pub initial_state: RunState,
    pub records_written: usize,
    pub status: RunStatus,
    pub peak_lr: Option<f64>,
}

fn resolve_timestamp(opt: Option<i64>) -> i64 {
    opt.or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok())).unwrap_or_else(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
    })
}

/// Root random stream of an experiment; every component splits from it.
pub fn experiment_rng(cfg: &ExperimentConfig) -> RngHandle {
    RngHandle::new(cfg.master_seed, "experiment")
}

/// The pretraining distribution a run with `cfg` trains on.
pub fn pretrain_distribution(cfg: &ExperimentConfig) -> Result<TaskDistribution, HarnessError> {
    Ok(match cfg.m {
        TaskCount::Finite(m) => sample_pretrain_set(&mut experiment_rng(cfg).split("tasks"), m, cfg.d_task)?,
        TaskCount::Infinite => TaskDistribution::gaussian(cfg.d_task)?,
    })
}

/// Runs (or resumes) one experiment and appends its records to the store at
/// `cfg.out_dir`. A completed run with the same configuration is a no-op.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let mut store = ResultsStore::open(&cfg.out_dir)?;
    let run_id = cfg.resolved_run_id();
    let config_json = serde_json::to_value(cfg).expect("config serialises");
    let initial_state = store.begin_run(&run_id, &cfg.config_hash(), config_json)?;
    let status = store.manifest().runs[&run_id].status;
    let mut summary = RunSummary {
        csv: store.csv_path(&run_id),
        run_id: run_id.clone(),
        initial_state,
        records_written: 0,
        status,
        peak_lr: None,
    };
    if status == RunStatus::Complete || (opts.oracle_only && status == RunStatus::OraclesDone) {
        return Ok(summary);
    }
    let mut runner = Runner::new(cfg, opts, &run_id, &store)?;
    match runner.execute(&mut store) {
        Ok(status) => {
            store.set_status(&run_id, status)?;
            summary.status = status;
            summary.records_written = runner.written;
            summary.peak_lr = runner.peak_lr;
            Ok(summary)
        }
        Err(e) => {
            store.set_status(&run_id, RunStatus::Failed)?;
            Err(e)
        }
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    run_id: String,
    run_dir: PathBuf,
    timestamp: i64,
    root: RngHandle,
    dist: TaskDistribution,
    existing: Vec<RunRecord>,
    written: usize,
    peak_lr: Option<f64>,
}

/// Evaluation set plus cached oracle predictions on it.
struct Scored {
    set: EvalSet,
    oracle: BTreeMap<&'static str, Vec<f64>>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: &'a RunOptions, run_id: &str, store: &ResultsStore) -> Result<Self, HarnessError> {
        let root = experiment_rng(cfg);
        let dist = pretrain_distribution(cfg)?;
        Ok(Self {
            cfg,
            opts,
            run_id: run_id.to_string(),
            run_dir: store.run_dir(run_id),
            timestamp: resolve_timestamp(opts.timestamp),
            root,
            dist,
            existing: store.records(run_id)?,
            written: 0,
            peak_lr: None,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.opts.verbose {
            eprintln!("[{}] {}", self.run_id, msg.as_ref());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn rec(&self, estimator: &str, dist: &str, metric: &str, k: String, value: f64, stderr: f64, step: u64) -> RunRecord {
        RunRecord {
            run_id: self.run_id.clone(),
            estimator: estimator.to_string(),
            distribution: dist.to_string(),
            m: self.cfg.m.to_string(),
            d: self.cfg.d_task,
            sigma2: self.cfg.sigma2,
            b: self.cfg.train.batch_size,
            n: self.cfg.train.n_steps,
            weight_decay: self.cfg.train.weight_decay,
            d_embed: self.cfg.model.d_embed,
            metric: metric.to_string(),
            k_or_alpha: k,
            value,
            stderr,
            step,
            timestamp: self.timestamp,
        }
    }

    fn has(&self, f: impl Fn(&RunRecord) -> bool) -> bool {
        self.existing.iter().any(f)
    }

    fn commit(&mut self, store: &mut ResultsStore, rows: Vec<RunRecord>) -> Result<(), HarnessError> {
        if rows.is_empty() {
            return Ok(());
        }
        store.append(&self.run_id, &rows)?;
        self.written += rows.len();
        self.existing.extend(rows);
        Ok(())
    }

    fn finite_tasks(&self) -> bool {
        matches!(self.cfg.m, TaskCount::Finite(_))
    }

    fn smmse_eps2(&mut self, store: &mut ResultsStore) -> Result<Option<f64>, HarnessError> {
        if !self.cfg.eval.smmse || !self.finite_tasks() {
            return Ok(None);
        }
        if let Some(e) = self.cfg.eval.smmse_eps2 {
            return Ok(Some(e));
        }
        if let Some(r) = self.existing.iter().find(|r| r.metric == SMMSE_EPS2) {
            return Ok(Some(r.value));
        }
        self.log("searching sMMSE smoothing variance");
        let search = optimal_epsilon_search(
            &self.dist,
            self.cfg.d_task,
            self.cfg.k,
            self.cfg.sigma2,
            &default_epsilon_grid(),
            self.cfg.eval.smmse_search_sequences,
            &mut self.root.split("smmse-search"),
        )?;
        let best = search.best();
        let rows = vec![self.rec("sMMSE", DistTag::True.as_str(), SMMSE_EPS2, AGG.into(), best.eps2, 0.0, 0)];
        self.commit(store, rows)?;
        Ok(Some(best.eps2))
    }

    fn oracle_predictors(&self, eps2: Option<f64>) -> Vec<Predictor> {
        let mut out = Vec::new();
        if self.finite_tasks() {
            out.push(Predictor::Dmmse(self.dist.clone()));
        }
        out.push(Predictor::Ridge);
        if let Some(eps2) = eps2 {
            out.push(Predictor::Smmse { tasks: self.dist.clone(), eps2 });
        }
        out
    }

    /// Evaluation sets for both distributions with oracle predictions cached.
    /// With infinitely many tasks the pretraining distribution is the Gaussian
    /// itself, sampled on its own stream.
    fn score_sets(&self, oracles: &[Predictor]) -> Result<Vec<Scored>, HarnessError> {
        let gaussian = TaskDistribution::gaussian(self.cfg.d_task)?;
        let mut out = Vec::new();
        for (tag, dist) in [(DistTag::Pretrain, &self.dist), (DistTag::True, &gaussian)] {
            let mut rng = self.root.split(&format!("eval/{}", tag.as_str()));
            let set = EvalSet::sample(dist, tag, self.cfg.eval.n_sequences, self.cfg.k, self.cfg.sigma2, &mut rng)?;
            let mut oracle = BTreeMap::new();
            for p in oracles {
                self.log(format!("{} predictions on {}", p.label(), tag));
                oracle.insert(p.label(), set.predict(p)?);
            }
            out.push(Scored { set, oracle });
        }
        Ok(out)
    }

    fn loss_rows(&self, label: &str, preds: &[f64], set: &EvalSet, step: u64) -> Vec<RunRecord> {
        let rep = report_from_predictions(label, preds, set);
        let tag = set.distribution.as_str();
        let mut rows = vec![self.rec(label, tag, LOSS, AGG.into(), rep.loss, rep.stderr, step)];
        for (k, (v, s)) in rep.per_k_mse.iter().zip(&rep.per_k_stderr).enumerate() {
            rows.push(self.rec(label, tag, MSE_K, (k + 1).to_string(), *v, *s, step));
        }
        rows
    }

    fn delta_row(&self, a: (&str, &[f64]), b: (&str, &[f64]), set: &EvalSet, step: u64) -> RunRecord {
        let d = mean_stderr(&delta_per_sequence(a.1, b.1, set.k, set.dim));
        let est = format!("{}|{}", a.0, b.0);
        self.rec(&est, set.distribution.as_str(), DELTA, AGG.into(), d.mean, d.stderr, step)
    }

    fn oracle_phase(&mut self, store: &mut ResultsStore, scored: &[Scored]) -> Result<(), HarnessError> {
        if self.has(|r| r.step == 0 && r.metric == LOSS && r.estimator == "Ridge") {
            return Ok(());
        }
        let mut rows = Vec::new();
        for s in scored {
            for (label, preds) in &s.oracle {
                rows.extend(self.loss_rows(label, preds, &s.set, 0));
            }
            if let (Some(d), Some(r)) = (s.oracle.get("dMMSE"), s.oracle.get("Ridge")) {
                rows.push(self.delta_row(("dMMSE", d), ("Ridge", r), &s.set, 0));
            }
        }
        self.commit(store, rows)
    }

    fn choose_lr(&mut self, store: &mut ResultsStore) -> Result<f64, HarnessError> {
        if let Some(r) = self.existing.iter().find(|r| r.metric == PEAK_LR) {
            return Ok(r.value);
        }
        let mut rows = Vec::new();
        let lr = match self.cfg.fixed_lr() {
            Some(lr) => lr,
            None => {
                self.log(format!("probing peak LR over {:?}", self.cfg.lr_candidates));
                let model = self.cfg.model_config();
                let args = (&self.cfg.train, &self.cfg.lr_candidates[..], self.cfg.lr_probe_steps);
                let trng = self.root.split("train");
                let (results, best) = match self.cfg.model.precision {
                    Precision::Fp32 => {
                        probe_learning_rates::<f32>(&model, args.0, args.1, args.2, &self.dist, self.cfg.sigma2, &trng)?
                    }
                    Precision::Fp64 => {
                        probe_learning_rates::<f64>(&model, args.0, args.1, args.2, &self.dist, self.cfg.sigma2, &trng)?
                    }
                };
                for r in &results {
                    let v = if r.stable { 1.0 } else { 0.0 };
                    rows.push(self.rec("PT", "pretrain", LR_PROBE_STABLE, format!("{}", r.peak_lr), v, 0.0, 0));
                }
                best.ok_or_else(|| {
                    HarnessError::NoStableLr(results.iter().map(|r| format!("{}: {:?}", r.peak_lr, r.reason)).collect::<Vec<_>>().join("; "))
                })?
            }
        };
        rows.push(self.rec("PT", "pretrain", PEAK_LR, AGG.into(), lr, 0.0, 0));
        self.commit(store, rows)?;
        Ok(lr)
    }

    fn train_cfg(&self, lr: f64) -> TrainConfig {
        TrainConfig { peak_lr: lr, ..self.cfg.train.clone() }
    }

    /// Trains to completion (or `stop_after`); returns steps completed.
    fn train(&self, lr: f64) -> Result<u64, HarnessError> {
        let model = self.cfg.model_config();
        let tcfg = self.train_cfg(lr);
        let io = TrainIo {
            out_dir: Some(self.run_dir.clone()),
            resume: true,
            stop_after: self.opts.stop_after,
            verbose: self.opts.verbose,
        };
        let rng = self.root.split("train");
        let steps = match self.cfg.model.precision {
            Precision::Fp32 => train::<f32>(&model, &tcfg, &self.dist, self.cfg.sigma2, &rng, &io)?.steps_completed,
            Precision::Fp64 => train::<f64>(&model, &tcfg, &self.dist, self.cfg.sigma2, &rng, &io)?.steps_completed,
        };
        Ok(steps)
    }

    fn checkpoint_phase(&mut self, store: &mut ResultsStore, scored: &[Scored]) -> Result<Option<(u64, Predictor)>, HarnessError> {
        let metrics = read_metrics(&self.run_dir.join(METRICS_FILE))?;
        let mut last = None;
        for (step, path) in list_checkpoints(&self.run_dir.join("checkpoints"))? {
            let pt = Predictor::Transformer(std::sync::Arc::new(AnyParams::load(&path)?));
            let done = self.has(|r| r.estimator == "PT" && r.metric == LOSS && r.step == step);
            if !done {
                self.log(format!("evaluating checkpoint at step {step}"));
                let mut rows = Vec::new();
                for s in scored {
                    let preds = s.set.predict(&pt)?;
                    rows.extend(self.loss_rows("PT", &preds, &s.set, step));
                    for (label, o) in &s.oracle {
                        if *label != "sMMSE" {
                            rows.push(self.delta_row(("PT", &preds), (label, o), &s.set, step));
                        }
                    }
                }
                let window: Vec<f64> =
                    metrics.iter().filter(|r| r.step < step).rev().take(TRAIN_LOSS_WINDOW).map(|r| r.loss).collect();
                if window.len() >= 2 {
                    let m = mean_stderr(&window);
                    rows.push(self.rec("PT", "pretrain", TRAIN_LOSS, AGG.into(), m.mean, m.stderr, step));
                }
                self.commit(store, rows)?;
            }
            last = Some((step, pt));
        }
        Ok(last)
    }

    fn interpolation_phase(
        &mut self,
        store: &mut ResultsStore,
        oracles: &[Predictor],
        pt: Option<(u64, Predictor)>,
    ) -> Result<(), HarnessError> {
        let ev = &self.cfg.eval;
        let Some(tasks) = self.dist.task_set().cloned() else { return Ok(()) };
        if tasks.len() < 2 || ev.n_pairs == 0 || ev.alpha_grid.is_empty() {
            return Ok(());
        }
        let mut preds: Vec<(Predictor, u64)> = Vec::new();
        if let Some((step, p)) = pt {
            preds.push((p, step));
        }
        preds.extend(oracles.iter().map(|p| (p.clone(), 0)));
        preds.retain(|(p, step)| !self.has(|r| r.metric == INTERP_LOSS && r.estimator == p.label() && r.step == *step));
        if preds.is_empty() {
            return Ok(());
        }
        let available = tasks.len() * (tasks.len() - 1) / 2;
        let n_pairs = ev.n_pairs.min(available);
        self.log(format!("interpolation over {n_pairs} pairs"));
        let list: Vec<Predictor> = preds.iter().map(|(p, _)| p.clone()).collect();
        let curve = eval_interpolation(
            &list,
            &tasks,
            n_pairs,
            &ev.alpha_grid,
            ev.n_sequences_per_point,
            self.cfg.k,
            self.cfg.sigma2,
            &mut self.root.split("interp"),
        )?;
        let steps: HashSet<(String, u64)> = preds.iter().map(|(p, s)| (p.label().to_string(), *s)).collect();
        let mut rows = Vec::new();
        for row in &curve.rows {
            let step = steps.iter().find(|(l, _)| *l == row.predictor).map_or(0, |(_, s)| *s);
            rows.push(self.rec(&row.predictor, INTERP, INTERP_LOSS, format!("{}", row.alpha), row.loss, row.stderr, step));
        }
        self.commit(store, rows)
    }

    fn execute(&mut self, store: &mut ResultsStore) -> Result<RunStatus, HarnessError> {
        let eps2 = self.smmse_eps2(store)?;
        let oracles = self.oracle_predictors(eps2);
        let scored = self.score_sets(&oracles)?;
        self.oracle_phase(store, &scored)?;
        if self.opts.oracle_only {
            self.interpolation_phase(store, &oracles, None)?;
            return Ok(RunStatus::OraclesDone);
        }
        let lr = self.choose_lr(store)?;
        self.peak_lr = Some(lr);
        self.log(format!("training at peak LR {lr}"));
        let steps = self.train(lr)?;
        let last = self.checkpoint_phase(store, &scored)?;
        if steps < self.cfg.train.n_steps {
            return Ok(RunStatus::Running);
        }
        self.interpolation_phase(store, &oracles, last)?;
        Ok(RunStatus::Complete)
    }
}

/// Checkpoint manifests in `dir`, ascending by step.
fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, HarnessError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse().ok()) {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}
