//! Sweeps over one configuration axis and threshold analysis of their
//! Δ-versus-M curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eval::{find_threshold, CurvePoint, Threshold};

use super::config::{snr_matched_sigma2, ExperimentConfig, TaskCount};
use super::run::{run_experiment, RunOptions, RunSummary, DELTA};
use super::store::{write_atomic, ResultsStore, RunRecord};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    M,
    BatchSize,
    NSteps,
    WeightDecay,
    DEmbed,
    /// Task dimension; also sets `K = 2D` and the SNR-matched noise.
    D,
    /// `(B, N)` pairs written `BxN`, typically at constant `B·N`.
    ConstantSequences,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::M => "m",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::NSteps => "n_steps",
            SweepAxis::WeightDecay => "weight_decay",
            SweepAxis::DEmbed => "d_embed",
            SweepAxis::D => "d",
            SweepAxis::ConstantSequences => "constant_sequences",
        }
    }

    /// Applies `value` to a copy of `base`; returns the config and the
    /// value's canonical spelling.
    fn apply(self, base: &ExperimentConfig, value: &str) -> Result<(ExperimentConfig, String), HarnessError> {
        let bad = || HarnessError::Config(format!("bad value {value:?} for sweep axis {}", self.as_str()));
        let int = |s: &str| s.trim().parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(bad);
        let mut c = base.clone();
        let canon = match self {
            SweepAxis::M => {
                c.m = value.trim().parse::<TaskCount>().map_err(HarnessError::Config)?;
                c.m.to_string()
            }
            SweepAxis::BatchSize => {
                c.train.batch_size = int(value)?;
                c.train.batch_size.to_string()
            }
            SweepAxis::NSteps => {
                c.train.n_steps = int(value)? as u64;
                c.train.n_steps.to_string()
            }
            SweepAxis::WeightDecay => {
                c.train.weight_decay = value.trim().parse::<f64>().ok().filter(|v| *v >= 0.0 && v.is_finite()).ok_or_else(bad)?;
                format!("{}", c.train.weight_decay)
            }
            SweepAxis::DEmbed => {
                c.model.d_embed = int(value)?;
                c.model.d_embed.to_string()
            }
            SweepAxis::D => {
                let d = int(value)?;
                c.d_task = d;
                c.k = 2 * d;
                c.sigma2 = snr_matched_sigma2(d);
                d.to_string()
            }
            SweepAxis::ConstantSequences => {
                let (b, n) = value.split_once(['x', ':']).ok_or_else(bad)?;
                c.train.batch_size = int(b)?;
                c.train.n_steps = int(n)? as u64;
                format!("{}x{}", c.train.batch_size, c.train.n_steps)
            }
        };
        Ok((c, canon))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "m" | "M" => SweepAxis::M,
            "batch_size" => SweepAxis::BatchSize,
            "n_steps" => SweepAxis::NSteps,
            "weight_decay" => SweepAxis::WeightDecay,
            "d_embed" => SweepAxis::DEmbed,
            "d" | "D" => SweepAxis::D,
            "constant_sequences" => SweepAxis::ConstantSequences,
            other => return Err(format!("unknown sweep axis {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    pub run_id: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub name: String,
    pub axis: SweepAxis,
    pub base_hash: String,
    pub runs: Vec<SweepRun>,
}

/// One run per value with everything else held at `base`.
pub fn plan_sweep(base: &ExperimentConfig, name: &str, axis: SweepAxis, values: &[String]) -> Result<SweepManifest, HarnessError> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(HarnessError::Config(format!("sweep name {name:?} may only contain letters, digits and -_.")));
    }
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let mut seen = BTreeSet::new();
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let (mut cfg, canon) = axis.apply(base, v)?;
        if !seen.insert(canon.clone()) {
            return Err(HarnessError::Config(format!("duplicate sweep value {canon}")));
        }
        if let Some(id) = &base.run_id {
            cfg.run_id = Some(format!("{id}.{axis}={canon}"));
        }
        cfg.validate()?;
        runs.push(SweepRun { value: canon, run_id: cfg.resolved_run_id(), config_hash: cfg.config_hash(), config: cfg });
    }
    Ok(SweepManifest { name: name.to_string(), axis, base_hash: base.config_hash(), runs })
}

/// Records the manifest under `<out_dir>/sweeps/` and runs every member
/// unless `plan_only`. Resubmitting an identical sweep resumes it; a
/// different sweep under an existing name is rejected.
pub fn run_sweep(
    manifest: &SweepManifest,
    out_dir: &std::path::Path,
    opts: &RunOptions,
    plan_only: bool,
) -> Result<(PathBuf, Vec<RunSummary>), HarnessError> {
    let mut store = ResultsStore::open(out_dir)?;
    let rel = format!("sweeps/{}.json", manifest.name);
    let path = out_dir.join(&rel);
    if path.exists() {
        let old: SweepManifest = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| HarnessError::Store(format!("{}: {e}", path.display())))?;
        if strip_out_dir(&old) != strip_out_dir(manifest) {
            return Err(HarnessError::DuplicateSweep(manifest.name.clone()));
        }
    } else {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
        write_atomic(&path, text.as_bytes())?;
        store.register_sweep(&manifest.name, &rel)?;
    }
    let mut out = Vec::new();
    if !plan_only {
        for run in &manifest.runs {
            let mut cfg = run.config.clone();
            cfg.out_dir = out_dir.to_path_buf();
            out.push(run_experiment(&cfg, opts)?);
        }
    }
    Ok((path, out))
}

fn strip_out_dir(m: &SweepManifest) -> SweepManifest {
    let mut m = m.clone();
    for r in &mut m.runs {
        r.config.out_dir = PathBuf::new();
    }
    m
}

/// Configuration field distinguishing the curves of a threshold plot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveGroup {
    BatchSize,
    NSteps,
    WeightDecay,
    DEmbed,
    D,
}

impl CurveGroup {
    fn label(self, r: &RunRecord) -> String {
        match self {
            CurveGroup::BatchSize => format!("B={}", r.b),
            CurveGroup::NSteps => format!("N={}", r.n),
            CurveGroup::WeightDecay => format!("weight_decay={}", r.weight_decay),
            CurveGroup::DEmbed => format!("d_embed={}", r.d_embed),
            CurveGroup::D => format!("D={}", r.d),
        }
    }
}

impl FromStr for CurveGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "batch_size" => CurveGroup::BatchSize,
            "n_steps" => CurveGroup::NSteps,
            "weight_decay" => CurveGroup::WeightDecay,
            "d_embed" => CurveGroup::DEmbed,
            "d" | "D" => CurveGroup::D,
            other => return Err(format!("unknown curve group {other:?}")),
        })
    }
}

/// Δ-versus-M curves for one estimator pair and distribution, one curve per
/// group value, using each run's latest step. Runs with infinite M are skipped.
pub fn delta_curves(
    records: &[RunRecord],
    group: CurveGroup,
    estimator: &str,
    distribution: &str,
) -> Result<BTreeMap<String, Vec<CurvePoint>>, HarnessError> {
    let mut latest: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == DELTA && r.estimator == estimator && r.distribution == distribution) {
        let e = latest.entry(&r.run_id).or_insert(r);
        if r.step > e.step {
            *e = r;
        }
    }
    let mut curves: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for r in latest.values() {
        let Ok(TaskCount::Finite(m)) = r.m.parse::<TaskCount>() else { continue };
        let c = curves.entry(group.label(r)).or_default();
        if c.iter().any(|p| p.m == m as f64) {
            return Err(HarnessError::Store(format!("two runs share {} and M={m}", group.label(r))));
        }
        c.push(CurvePoint { m: m as f64, value: r.value, stderr: r.stderr });
    }
    for c in curves.values_mut() {
        c.sort_by(|a, b| a.m.total_cmp(&b.m));
    }
    Ok(curves)
}

/// Crossover of Δ_True(PT, Ridge) between the two curves of `group`,
/// restricted to the task counts both curves share.
pub fn threshold_from_store(
    store: &ResultsStore,
    group: CurveGroup,
    run_ids: Option<&BTreeSet<String>>,
) -> Result<(BTreeMap<String, Vec<CurvePoint>>, Threshold), HarnessError> {
    let mut records = store.all_records()?;
    if let Some(ids) = run_ids {
        records.retain(|r| ids.contains(&r.run_id));
    }
    let mut curves = delta_curves(&records, group, "PT|Ridge", "true")?;
    if curves.len() != 2 {
        return Err(HarnessError::MissingData(format!(
            "threshold needs exactly two Δ_True(PT, Ridge) curves, found {:?}",
            curves.keys().collect::<Vec<_>>()
        )));
    }
    let grids: Vec<BTreeSet<u64>> = curves.values().map(|c| c.iter().map(|p| p.m as u64).collect()).collect();
    let shared: BTreeSet<u64> = grids[0].intersection(&grids[1]).copied().collect();
    for c in curves.values_mut() {
        c.retain(|p| shared.contains(&(p.m as u64)));
    }
    if shared.is_empty() {
        return Err(HarnessError::MissingData("the two curves share no task counts".into()));
    }
    let t = find_threshold(&curves)?;
    Ok((curves, t))
}
