use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use icl_core::eval::{
    alpha_grid, delta_per_sequence, eval_interpolation, report_from_predictions, DistTag, EvalError, EvalSet, Predictor,
};
use icl_core::harness::{
    experiment_rng, export_plot_data, plan_sweep, pretrain_distribution, run_experiment, run_sweep, threshold_from_store,
    CurveGroup, ExperimentConfig, FigurePreset, HarnessError, ResultsStore, RunOptions, SweepAxis, TaskCount,
};
use icl_core::model::{latest_checkpoint, ModelError};
use icl_core::stats::mean_stderr;
use icl_core::tasks::TaskDistribution;
use icl_core::train::TrainError;

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "In-context linear regression experiments")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full experiment: oracles, LR choice, training, checkpoint evaluation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after this many training steps; rerun to resume.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        stamp: Stamp,
    },
    /// Evaluate a checkpoint against the oracles and print a JSON report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint manifest; defaults to the run's latest checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Oracle estimators only (no training), written to the results store.
    OracleEval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        stamp: Stamp,
    },
    /// Losses along interpolation paths between pretraining tasks, as CSV.
    Interpolate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of evenly spaced α values in [0, 1]; defaults to the config grid.
        #[arg(long)]
        alphas: Option<usize>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One run per value of an axis, holding everything else fixed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        name: String,
        /// m, batch_size, n_steps, weight_decay, d_embed, d or constant_sequences.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; constant_sequences takes BxN pairs.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        oracle_only: bool,
        /// Record the manifest without running anything.
        #[arg(long)]
        plan_only: bool,
        #[command(flatten)]
        stamp: Stamp,
    },
    /// Crossover of Δ_True(PT, Ridge) between two curves of a store.
    Threshold {
        /// Results store.
        #[arg(long)]
        out: PathBuf,
        /// batch_size, n_steps, weight_decay, d_embed or d.
        #[arg(long, default_value = "batch_size")]
        group: CurveGroup,
        /// Restrict to the runs of these sweeps.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<String>,
    },
    /// Plot-ready CSV tables with gap reports.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// fig2 to fig7, or all.
        #[arg(long, default_value = "all")]
        preset: String,
        /// Destination directory; defaults to <out>/plots.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given: base, desk, dimsweep, smoke.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Number of pretraining tasks, or "infinite".
    #[arg(long)]
    m: Option<TaskCount>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Results store directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct Stamp {
    /// Unix timestamp written on new records (defaults to SOURCE_DATE_EPOCH, then now).
    #[arg(long)]
    timestamp: Option<i64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let m = self.m.ok_or_else(|| HarnessError::Config("--m is required without --config".into()))?;
                ExperimentConfig::preset(&self.preset, m)?
            }
        };
        if let Some(m) = self.m {
            c.m = m;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(n) = self.steps {
            c.train.n_steps = n;
        }
        if let Some(w) = self.weight_decay {
            c.train.weight_decay = w;
        }
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(id) = &self.run_id {
            c.run_id = Some(id.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

/// Export finished but some series had no data.
#[derive(Debug)]
struct MissingData(usize);

impl std::fmt::Display for MissingData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} series missing from the export; see the gap reports", self.0)
    }
}

impl std::error::Error for MissingData {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<MissingData>().is_some() {
            return 4;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if matches!(h, HarnessError::MissingData(_)) {
                return 4;
            }
            if h.is_numerical() {
                return 3;
            }
            if h.is_config() {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            if e.is_numerical() {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            if e.is_numerical() {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            if e.is_numerical() {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.cmd {
        Cmd::Train { cfg, stop_after, stamp } => {
            let c = cfg.resolve()?;
            let opts = RunOptions { oracle_only: false, timestamp: stamp.timestamp, stop_after, verbose };
            let s = run_experiment(&c, &opts)?;
            print_json(&json!({
                "run_id": s.run_id, "csv": s.csv, "status": s.status, "records_written": s.records_written, "peak_lr": s.peak_lr,
            }));
        }
        Cmd::OracleEval { cfg, stamp } => {
            let c = cfg.resolve()?;
            let opts = RunOptions { oracle_only: true, timestamp: stamp.timestamp, stop_after: None, verbose };
            let s = run_experiment(&c, &opts)?;
            print_json(&json!({"run_id": s.run_id, "csv": s.csv, "status": s.status, "records_written": s.records_written}));
        }
        Cmd::Eval { cfg, checkpoint } => {
            let c = cfg.resolve()?;
            let ck = find_checkpoint(&c, checkpoint)?;
            print_json(&eval_checkpoint(&c, &ck)?);
        }
        Cmd::Interpolate { cfg, checkpoint, alphas, csv } => {
            let c = cfg.resolve()?;
            let text = interpolate(&c, checkpoint.as_deref(), alphas)?;
            match csv {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Cmd::Sweep { cfg, name, axis, values, oracle_only, plan_only, stamp } => {
            let c = cfg.resolve()?;
            let manifest = plan_sweep(&c, &name, axis, &values)?;
            let opts = RunOptions { oracle_only, timestamp: stamp.timestamp, stop_after: None, verbose };
            let (path, runs) = run_sweep(&manifest, &c.out_dir, &opts, plan_only)?;
            let runs: Vec<_> = runs
                .iter()
                .map(|s| json!({"run_id": s.run_id, "status": s.status, "records_written": s.records_written}))
                .collect();
            print_json(&json!({"manifest": path, "runs": runs}));
        }
        Cmd::Threshold { out, group, sweep } => {
            let store = ResultsStore::open(&out)?;
            let ids = if sweep.is_empty() { None } else { Some(sweep_run_ids(&out, &sweep)?) };
            let (curves, t) = threshold_from_store(&store, group, ids.as_ref())?;
            print_json(&json!({"curves": curves, "threshold": t}));
        }
        Cmd::Export { out, preset, dest } => {
            let store = ResultsStore::open(&out)?;
            let presets: Vec<FigurePreset> = if preset == "all" {
                FigurePreset::ALL.to_vec()
            } else {
                vec![preset.parse().map_err(HarnessError::Config)?]
            };
            let dest = dest.unwrap_or_else(|| out.join("plots"));
            let mut missing = 0;
            for p in presets {
                let s = export_plot_data(&store, p, &dest)?;
                eprintln!("{}: {} rows, {} gaps -> {}", p.as_str(), s.rows, s.gaps.len(), s.csv.display());
                missing += s.gaps.iter().filter(|g| g.starts_with("missing")).count();
            }
            if missing > 0 {
                return Err(MissingData(missing).into());
            }
        }
    }
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn sweep_run_ids(out: &Path, names: &[String]) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for n in names {
        let path = out.join("sweeps").join(format!("{n}.json"));
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading sweep manifest {}", path.display()))?;
        let m: icl_core::harness::SweepManifest = serde_json::from_str(&text)?;
        ids.extend(m.runs.into_iter().map(|r| r.run_id));
    }
    Ok(ids)
}

fn find_checkpoint(c: &ExperimentConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    let dir = ResultsStore::open(&c.out_dir)?.run_dir(&c.resolved_run_id()).join("checkpoints");
    match latest_checkpoint(&dir)? {
        Some(p) => Ok(p),
        None => bail!(HarnessError::MissingData(format!("no checkpoint in {}", dir.display()))),
    }
}

fn oracles(dist: &TaskDistribution) -> Vec<Predictor> {
    let mut v = Vec::new();
    if dist.num_tasks().is_some() {
        v.push(Predictor::Dmmse(dist.clone()));
    }
    v.push(Predictor::Ridge);
    v
}

fn eval_checkpoint(c: &ExperimentConfig, ck: &Path) -> Result<serde_json::Value> {
    let pt = Predictor::transformer_from_checkpoint(ck)?;
    let dist = pretrain_distribution(c)?;
    let gaussian = TaskDistribution::gaussian(c.d_task)?;
    let root = experiment_rng(c);
    let mut out = serde_json::Map::new();
    for (tag, d) in [(DistTag::Pretrain, &dist), (DistTag::True, &gaussian)] {
        let mut rng = root.split(&format!("eval/{}", tag.as_str()));
        let set = EvalSet::sample(d, tag, c.eval.n_sequences, c.k, c.sigma2, &mut rng)?;
        let p_pt = set.predict(&pt)?;
        let mut reports = vec![report_from_predictions("PT", &p_pt, &set)];
        let mut deltas = serde_json::Map::new();
        for o in oracles(&dist) {
            let p = set.predict(&o)?;
            reports.push(report_from_predictions(o.label(), &p, &set));
            let d = mean_stderr(&delta_per_sequence(&p_pt, &p, set.k, set.dim));
            deltas.insert(format!("PT|{}", o.label()), json!({"delta": d.mean, "stderr": d.stderr}));
        }
        out.insert(tag.as_str().into(), json!({"reports": reports, "deltas": deltas}));
    }
    out.insert("checkpoint".into(), json!(ck));
    Ok(serde_json::Value::Object(out))
}

fn interpolate(c: &ExperimentConfig, checkpoint: Option<&Path>, alphas: Option<usize>) -> Result<String> {
    let dist = pretrain_distribution(c)?;
    let Some(tasks) = dist.task_set().cloned() else {
        bail!(HarnessError::Config("interpolation needs a finite task set".into()));
    };
    let mut preds = Vec::new();
    if let Some(p) = checkpoint {
        preds.push(Predictor::transformer_from_checkpoint(p)?);
    }
    preds.extend(oracles(&dist));
    let grid = alphas.map(alpha_grid).unwrap_or_else(|| c.eval.alpha_grid.clone());
    let n_pairs = c.eval.n_pairs.min(tasks.len() * (tasks.len().saturating_sub(1)) / 2);
    let curve = eval_interpolation(
        &preds,
        &tasks,
        n_pairs,
        &grid,
        c.eval.n_sequences_per_point,
        c.k,
        c.sigma2,
        &mut experiment_rng(c).split("interp"),
    )?;
    let mut text = String::from("alpha,predictor,M,loss,stderr\n");
    for r in &curve.rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.alpha, r.predictor, c.m, r.loss, r.stderr));
    }
    if curve.resampled > 0 {
        eprintln!("resampled {} degenerate task pairs", curve.resampled);
    }
    Ok(text)
}
