//! Tidy per-figure CSV tables with an explicit report of missing series.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::TaskCount;
use super::run::{DELTA, INTERP_LOSS, LOSS};
use super::store::{write_atomic, ResultsStore, RunRecord};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FigurePreset {
    /// Loss and Δ versus M, one curve per batch size.
    Fig2,
    /// Δ versus M, one curve per training length.
    Fig3,
    /// Loss along interpolation paths.
    Fig4,
    /// Δ versus task dimension and M.
    Fig5,
    /// Δ versus M under weight decay and model width.
    Fig6,
    /// Loss on the ideal distribution including smoothed dMMSE.
    Fig7,
}

impl FigurePreset {
    pub const ALL: [FigurePreset; 6] =
        [FigurePreset::Fig2, FigurePreset::Fig3, FigurePreset::Fig4, FigurePreset::Fig5, FigurePreset::Fig6, FigurePreset::Fig7];

    pub fn as_str(self) -> &'static str {
        match self {
            FigurePreset::Fig2 => "fig2",
            FigurePreset::Fig3 => "fig3",
            FigurePreset::Fig4 => "fig4",
            FigurePreset::Fig5 => "fig5",
            FigurePreset::Fig6 => "fig6",
            FigurePreset::Fig7 => "fig7",
        }
    }

    fn columns(self) -> &'static [(&'static str, &'static str)] {
        match self {
            FigurePreset::Fig2 => &[
                ("M", "number of pretraining tasks"),
                ("B", "batch size"),
                ("N", "training steps"),
                ("estimator", "predictor, or a|b for the divergence between two"),
                ("distribution", "pretrain or true"),
                ("metric", "loss (L/D) or delta"),
                ("value", "estimate"),
                ("stderr", "Monte Carlo standard error"),
            ],
            FigurePreset::Fig3 => &[
                ("M", "number of pretraining tasks"),
                ("N", "training steps"),
                ("B", "batch size"),
                ("estimator", "predictor pair a|b"),
                ("distribution", "pretrain or true"),
                ("value", "delta"),
                ("stderr", "Monte Carlo standard error"),
            ],
            FigurePreset::Fig4 => &[
                ("alpha", "interpolation weight"),
                ("predictor", "PT, dMMSE, Ridge or sMMSE"),
                ("M", "number of pretraining tasks"),
                ("loss", "L/D averaged over task pairs"),
                ("stderr", "standard error across pairs"),
            ],
            FigurePreset::Fig5 => &[
                ("D", "task dimension"),
                ("M", "number of pretraining tasks"),
                ("estimator", "predictor pair a|b"),
                ("distribution", "pretrain or true"),
                ("value", "delta"),
                ("stderr", "Monte Carlo standard error"),
            ],
            FigurePreset::Fig6 => &[
                ("M", "number of pretraining tasks"),
                ("weight_decay", "decoupled weight decay"),
                ("d_embed", "embedding width"),
                ("estimator", "predictor pair a|b"),
                ("distribution", "pretrain or true"),
                ("value", "delta"),
                ("stderr", "Monte Carlo standard error"),
            ],
            FigurePreset::Fig7 => &[
                ("M", "number of pretraining tasks"),
                ("estimator", "PT, dMMSE, sMMSE or Ridge"),
                ("loss", "L/D on the ideal distribution"),
                ("stderr", "Monte Carlo standard error"),
            ],
        }
    }

    /// Required series as (estimator, distribution, metric).
    fn series(self) -> Vec<(String, &'static str, &'static str)> {
        let cross = |ests: &[&str], dists: &[&'static str], metric: &'static str| {
            let mut v = Vec::new();
            for e in ests {
                for d in dists {
                    v.push((e.to_string(), *d, metric));
                }
            }
            v
        };
        let both = ["pretrain", "true"];
        match self {
            FigurePreset::Fig2 => {
                let mut v = cross(&["PT", "dMMSE", "Ridge"], &both, LOSS);
                v.extend(cross(&["PT|dMMSE", "PT|Ridge"], &both, DELTA));
                v.extend(cross(&["dMMSE|Ridge"], &["true"], DELTA));
                v
            }
            FigurePreset::Fig3 | FigurePreset::Fig6 => cross(&["PT|dMMSE", "PT|Ridge"], &both, DELTA),
            FigurePreset::Fig4 => cross(&["PT", "dMMSE", "Ridge"], &["interp"], INTERP_LOSS),
            FigurePreset::Fig5 => cross(&["PT|dMMSE", "PT|Ridge", "dMMSE|Ridge"], &["true"], DELTA),
            FigurePreset::Fig7 => cross(&["PT", "dMMSE", "sMMSE", "Ridge"], &["true"], LOSS),
        }
    }

    fn row(self, r: &RunRecord) -> Vec<String> {
        let f = |x: f64| format!("{x}");
        match self {
            FigurePreset::Fig2 => vec![
                r.m.clone(),
                r.b.to_string(),
                r.n.to_string(),
                r.estimator.clone(),
                r.distribution.clone(),
                r.metric.clone(),
                f(r.value),
                f(r.stderr),
            ],
            FigurePreset::Fig3 => vec![
                r.m.clone(),
                r.n.to_string(),
                r.b.to_string(),
                r.estimator.clone(),
                r.distribution.clone(),
                f(r.value),
                f(r.stderr),
            ],
            FigurePreset::Fig4 => vec![r.k_or_alpha.clone(), r.estimator.clone(), r.m.clone(), f(r.value), f(r.stderr)],
            FigurePreset::Fig5 => {
                vec![r.d.to_string(), r.m.clone(), r.estimator.clone(), r.distribution.clone(), f(r.value), f(r.stderr)]
            }
            FigurePreset::Fig6 => vec![
                r.m.clone(),
                f(r.weight_decay),
                r.d_embed.to_string(),
                r.estimator.clone(),
                r.distribution.clone(),
                f(r.value),
                f(r.stderr),
            ],
            FigurePreset::Fig7 => vec![r.m.clone(), r.estimator.clone(), f(r.value), f(r.stderr)],
        }
    }
}

impl FromStr for FigurePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FigurePreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown figure preset {s:?} (fig2 to fig7)"))
    }
}

#[derive(Clone, Debug)]
pub struct ExportSummary {
    pub csv: PathBuf,
    pub gap_report: PathBuf,
    pub rows: usize,
    /// One line per missing series or missing task count.
    pub gaps: Vec<String>,
}

fn m_order(m: &str) -> (u8, usize) {
    match m.parse::<TaskCount>() {
        Ok(TaskCount::Finite(n)) => (0, n),
        _ => (1, 0),
    }
}

/// Writes `<preset>.csv` and `<preset>_gaps.txt` into `out`. Transformer
/// series use each run's latest checkpoint.
pub fn export_plot_data(store: &ResultsStore, preset: FigurePreset, out: &Path) -> Result<ExportSummary, HarnessError> {
    let records = store.all_records()?;
    let series = preset.series();
    let wanted: BTreeSet<(&str, &str, &str)> = series.iter().map(|(e, d, m)| (e.as_str(), *d, *m)).collect();

    // Latest step per (run, estimator, distribution, metric, k).
    let mut latest: BTreeMap<(&str, &str, &str, &str, &str), &RunRecord> = BTreeMap::new();
    for r in &records {
        if !wanted.contains(&(r.estimator.as_str(), r.distribution.as_str(), r.metric.as_str())) {
            continue;
        }
        if r.metric != INTERP_LOSS && r.k_or_alpha != "agg" {
            continue;
        }
        let key = (r.run_id.as_str(), r.estimator.as_str(), r.distribution.as_str(), r.metric.as_str(), r.k_or_alpha.as_str());
        let e = latest.entry(key).or_insert(r);
        if r.step > e.step {
            *e = r;
        }
    }
    let mut chosen: Vec<&RunRecord> = latest.into_values().collect();
    chosen.sort_by(|a, b| {
        (m_order(&a.m), a.d, a.b, a.n, &a.estimator, &a.distribution, &a.metric, a.k_or_alpha.parse::<f64>().unwrap_or(0.0).to_bits(), &a.run_id)
            .cmp(&(m_order(&b.m), b.d, b.b, b.n, &b.estimator, &b.distribution, &b.metric, b.k_or_alpha.parse::<f64>().unwrap_or(0.0).to_bits(), &b.run_id))
    });

    let mut gaps = Vec::new();
    let all_m: BTreeSet<(u8, usize, String)> = chosen.iter().map(|r| {
        let (a, b) = m_order(&r.m);
        (a, b, r.m.clone())
    }).collect();
    for (e, d, m) in &series {
        let have: BTreeSet<&str> = chosen
            .iter()
            .filter(|r| r.estimator == *e && r.distribution == *d && r.metric == *m)
            .map(|r| r.m.as_str())
            .collect();
        if have.is_empty() {
            gaps.push(format!("missing series: estimator={e} distribution={d} metric={m}"));
            continue;
        }
        let lacking: Vec<&str> = all_m.iter().map(|(_, _, s)| s.as_str()).filter(|s| !have.contains(s)).collect();
        // The discrete-prior oracle is undefined without a finite task set.
        let lacking: Vec<&str> = lacking.into_iter().filter(|s| !(e.contains("dMMSE") || e.contains("sMMSE")) || *s != "infinite").collect();
        if !lacking.is_empty() {
            gaps.push(format!("partial series: estimator={e} distribution={d} metric={m} lacks M in {{{}}}", lacking.join(", ")));
        }
    }

    let mut text = String::new();
    let name = preset.as_str();
    let _ = writeln!(text, "# {name}: one row per measurement; see {name}_gaps.txt for missing series");
    let cols = preset.columns();
    let _ = writeln!(text, "# columns: {}", cols.iter().map(|(c, d)| format!("{c} = {d}")).collect::<Vec<_>>().join("; "));
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(cols.iter().map(|(c, _)| *c))?;
    for r in &chosen {
        w.write_record(preset.row(r))?;
    }
    text.push_str(&String::from_utf8(w.into_inner().map_err(|e| HarnessError::Store(e.to_string()))?).expect("csv is utf-8"));

    let csv_path = out.join(format!("{name}.csv"));
    write_atomic(&csv_path, text.as_bytes())?;
    let gap_path = out.join(format!("{name}_gaps.txt"));
    let report = if gaps.is_empty() { "no gaps\n".to_string() } else { gaps.join("\n") + "\n" };
    write_atomic(&gap_path, report.as_bytes())?;
    Ok(ExportSummary { csv: csv_path, gap_report: gap_path, rows: chosen.len(), gaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_reports_every_series() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::open(dir.path()).unwrap();
        for p in FigurePreset::ALL {
            let s = export_plot_data(&store, p, &dir.path().join("plots")).unwrap();
            assert_eq!(s.rows, 0);
            assert_eq!(s.gaps.len(), p.series().len());
            assert!(std::fs::read_to_string(&s.gap_report).unwrap().contains("missing series"));
        }
    }

    #[test]
    fn fig4_schema() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::open(dir.path()).unwrap();
        let s = export_plot_data(&store, FigurePreset::Fig4, dir.path()).unwrap();
        let text = std::fs::read_to_string(s.csv).unwrap();
        let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header, "alpha,predictor,M,loss,stderr");
    }

    #[test]
    fn preset_names_round_trip() {
        for p in FigurePreset::ALL {
            assert_eq!(p.as_str().parse::<FigurePreset>().unwrap(), p);
        }
        assert!("fig9".parse::<FigurePreset>().is_err());
    }
}
