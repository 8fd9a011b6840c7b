//! Acceptance criteria, one test per criterion. Each prints a single
//! PASS/FAIL line to stdout (bypassing the test harness capture) before
//! asserting. Criteria 7 and 8 train desk-scale models for hours and are
//! `#[ignore]`d; run them with `cargo test --release --test acceptance -- --ignored`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use icl_core::eval::{
    delta_per_sequence, eval_interpolation, evaluate, find_threshold, report_from_predictions, CurvePoint, DistTag, EvalSet,
    Predictor, Threshold,
};
use icl_core::harness::{
    experiment_rng, run_experiment, snr_matched_sigma2, ExperimentConfig, ResultsStore, RunOptions, RunRecord, TaskCount,
};
use icl_core::model::{checkpoint_stem, init_params, ModelConfig, Precision, TokenBatch};
use icl_core::oracles::{
    brute_force_posterior, dmmse_predict, ridge_predict, smmse_predict, BrutePrior, OracleContext,
};
use icl_core::stats::{mean_stderr, paired_diff};
use icl_core::tasks::{sample_batch, sample_pretrain_set, TaskDistribution, TaskSet};
use icl_core::train::loss_and_grad;
use icl_core::RngHandle;

const D: usize = 8;
const K: usize = 16;
const SIGMA2: f64 = 0.25;
const EVAL_SEQS: usize = 1 << 12;

fn report(id: u32, name: &str, pass: bool, detail: String, started: Instant) {
    let line = format!(
        "[{}] criterion {id:>2} {name}: {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} failed: {detail}");
}

/// Context of length `k` (k − 1 examples plus the query) from a fresh sequence.
fn context(dist: &TaskDistribution, k: usize, sigma2: f64, rng: &mut RngHandle) -> OracleContext {
    let seq = sample_batch(dist, 1, k, sigma2, rng).unwrap().remove(0);
    OracleContext::from_sequence(&seq, k, sigma2).unwrap()
}

#[test]
fn c01_oracle_equivalence() {
    let t0 = Instant::now();
    let (d, m, k, sigma2, eps2) = (2, 4, 8, 0.25, 0.5);
    let root = RngHandle::new(101, "c1");
    let dist = sample_pretrain_set(&mut root.split("tasks"), m, d).unwrap();
    let set = dist.task_set().unwrap().clone();
    let mut ctx_rng = root.split("contexts");
    let mut worst_exact: f64 = 0.0;
    let (mut ridge_ok, mut smmse_ok) = (0, 0);
    for i in 0..100 {
        let ctx = context(&dist, 1 + i % k, sigma2, &mut ctx_rng);
        let exact = brute_force_posterior(&ctx, BrutePrior::Finite(&set), 0, &root).unwrap();
        let dm = dmmse_predict(&ctx, &dist).unwrap();
        worst_exact = worst_exact.max((exact.prediction.y_hat - dm.y_hat).abs());
        for (a, b) in exact.prediction.w_hat.iter().zip(&dm.w_hat) {
            worst_exact = worst_exact.max((a - b).abs());
        }
        let is = brute_force_posterior(&ctx, BrutePrior::GaussianTrue, 1_000_000, &root.split("is-ridge").substream(i as u64)).unwrap();
        let r = ridge_predict(&ctx).unwrap();
        if (is.prediction.y_hat - r.y_hat).abs() <= 3.0 * is.y_stderr {
            ridge_ok += 1;
        }
        let prior = BrutePrior::GaussianMixture { centers: &set, eps2 };
        let is = brute_force_posterior(&ctx, prior, 1_000_000, &root.split("is-smmse").substream(i as u64)).unwrap();
        let s = smmse_predict(&ctx, &dist, eps2).unwrap();
        if (is.prediction.y_hat - s.y_hat).abs() <= 3.0 * is.y_stderr {
            smmse_ok += 1;
        }
    }
    let pass = worst_exact <= 1e-12 && ridge_ok >= 95 && smmse_ok >= 95;
    report(
        1,
        "oracle equivalence",
        pass,
        format!("dMMSE max abs err {worst_exact:.2e}; Ridge within 3se on {ridge_ok}/100; sMMSE within 3se on {smmse_ok}/100"),
        t0,
    );
}

#[test]
fn c02_algebraic_identities() {
    let t0 = Instant::now();
    let root = RngHandle::new(202, "c2");
    let gaussian = TaskDistribution::gaussian(D).unwrap();
    let origin = TaskDistribution::finite(TaskSet::from_rows(D, vec![0.0; D]).unwrap());
    let mut ctx_rng = root.split("contexts");
    let mut worst_ridge: f64 = 0.0;
    for i in 0..1000 {
        let ctx = context(&gaussian, 1 + i % K, SIGMA2, &mut ctx_rng);
        let s = smmse_predict(&ctx, &origin, 1.0).unwrap();
        let r = ridge_predict(&ctx).unwrap();
        worst_ridge = worst_ridge.max((s.y_hat - r.y_hat).abs());
        for (a, b) in s.w_hat.iter().zip(&r.w_hat) {
            worst_ridge = worst_ridge.max((a - b).abs());
        }
    }
    let tasks = sample_pretrain_set(&mut root.split("tasks"), 16, D).unwrap();
    let mut worst_dmmse: f64 = 0.0;
    for i in 0..1000 {
        let ctx = context(&tasks, 1 + i % K, SIGMA2, &mut ctx_rng);
        let s = smmse_predict(&ctx, &tasks, 1e-12).unwrap();
        let dm = dmmse_predict(&ctx, &tasks).unwrap();
        worst_dmmse = worst_dmmse.max((s.y_hat - dm.y_hat).abs());
        for (a, b) in s.w_hat.iter().zip(&dm.w_hat) {
            worst_dmmse = worst_dmmse.max((a - b).abs());
        }
    }
    report(
        2,
        "algebraic identities",
        worst_ridge <= 1e-10 && worst_dmmse <= 1e-6,
        format!("sMMSE(origin, 1) vs Ridge {worst_ridge:.2e}; sMMSE(1e-12) vs dMMSE {worst_dmmse:.2e}"),
        t0,
    );
}

#[test]
fn c03_bayes_optimality_ordering() {
    let t0 = Instant::now();
    let root = RngHandle::new(303, "c3");
    let gaussian = TaskDistribution::gaussian(D).unwrap();
    let mut failures = Vec::new();
    let mut gaps = Vec::new();
    for e in 1..=10 {
        let m = 1usize << e;
        let cell = root.split(&format!("M={m}"));
        let tasks = sample_pretrain_set(&mut cell.split("tasks"), m, D).unwrap();
        let dm = Predictor::Dmmse(tasks.clone());
        let pre = EvalSet::sample(&tasks, DistTag::Pretrain, EVAL_SEQS, K, SIGMA2, &mut cell.split("pretrain")).unwrap();
        let tru = EvalSet::sample(&gaussian, DistTag::True, EVAL_SEQS, K, SIGMA2, &mut cell.split("true")).unwrap();
        let (a, b) = (evaluate(&dm, &pre).unwrap(), evaluate(&Predictor::Ridge, &pre).unwrap());
        let d_pre = paired_diff(&a.per_sequence, &b.per_sequence);
        if d_pre.mean > 3.0 * d_pre.stderr {
            failures.push(format!("M={m}: pretrain dMMSE−Ridge = {:.4} ± {:.4}", d_pre.mean, d_pre.stderr));
        }
        let (a, b) = (evaluate(&dm, &tru).unwrap(), evaluate(&Predictor::Ridge, &tru).unwrap());
        let d_true = paired_diff(&a.per_sequence, &b.per_sequence);
        if -d_true.mean > 3.0 * d_true.stderr {
            failures.push(format!("M={m}: true Ridge−dMMSE = {:.4} ± {:.4}", -d_true.mean, d_true.stderr));
        }
        gaps.push((m, d_true));
    }
    let (first, last) = (gaps[0].1, gaps[gaps.len() - 1].1);
    let se = (first.stderr.powi(2) + last.stderr.powi(2)).sqrt();
    let shrink = first.mean - last.mean;
    if shrink <= 3.0 * se {
        failures.push(format!("true gap shrink {shrink:.4} not > 3 × {se:.4}"));
    }
    report(
        3,
        "Bayes-optimality ordering",
        failures.is_empty(),
        format!(
            "true-distribution gap dMMSE−Ridge: M=2 {:.4}±{:.4}, M=1024 {:.4}±{:.4}; {}",
            first.mean,
            first.stderr,
            last.mean,
            last.stderr,
            if failures.is_empty() { "all orderings hold".into() } else { failures.join("; ") }
        ),
        t0,
    );
}

#[test]
fn c04_noise_floor_and_known_task_limits() {
    let t0 = Instant::now();
    let root = RngHandle::new(404, "c4");
    let one = sample_pretrain_set(&mut root.split("tasks"), 1, D).unwrap();
    let set = EvalSet::sample(&one, DistTag::Pretrain, EVAL_SEQS, K, SIGMA2, &mut root.split("pretrain")).unwrap();
    let rep = evaluate(&Predictor::Dmmse(one), &set).unwrap();
    let (mse16, se16) = (rep.per_k_mse[K - 1], rep.per_k_stderr[K - 1]);
    let ok_floor = (mse16 - SIGMA2).abs() <= 3.0 * se16;
    let gaussian = TaskDistribution::gaussian(D).unwrap();
    let set = EvalSet::sample(&gaussian, DistTag::True, EVAL_SEQS, K, SIGMA2, &mut root.split("true")).unwrap();
    let zero = evaluate(&Predictor::Zero, &set).unwrap();
    let expect = (D as f64 + SIGMA2) / D as f64;
    let ok_zero = (zero.loss - expect).abs() <= 3.0 * zero.stderr;
    report(
        4,
        "noise floor and known-task limits",
        ok_floor && ok_zero,
        format!(
            "dMMSE(M=1) mse@k=16 {mse16:.4}±{se16:.4} vs σ²={SIGMA2}; Zero L/D {:.4}±{:.4} vs {expect:.5}",
            zero.loss, zero.stderr
        ),
        t0,
    );
}

fn tiny_model(precision: Precision) -> ModelConfig {
    ModelConfig { n_layers: 2, d_embed: 16, n_heads: 2, d_task: 2, max_pairs: 4, precision }
}

#[test]
fn c05_gradient_exactness() {
    let t0 = Instant::now();
    let cfg = tiny_model(Precision::Fp64);
    let root = RngHandle::new(505, "c5");
    let mut p = init_params::<f64>(&cfg, &mut root.split("init")).unwrap();
    // Nonzero biases and gains so every parameter array is exercised away from its init.
    let mut jitter = root.split("jitter");
    for v in p.flat_mut() {
        *v += 0.05 * jitter.normal();
    }
    let dist = TaskDistribution::gaussian(2).unwrap();
    let batch = sample_batch(&dist, 6, 4, SIGMA2, &mut root.split("batch")).unwrap();
    let (_, g) = loss_and_grad(&p, &batch).unwrap();
    let h = 1e-4;
    let mut pick = root.split("coords");
    let (mut worst, mut worst_at, mut checked, mut arrays) = (0.0f64, String::new(), 0, 0);
    for entry in p.layout().entries() {
        arrays += 1;
        for _ in 0..10 {
            let i = entry.offset + pick.index(entry.len);
            let at = |delta: f64| {
                let mut q = p.clone();
                q.flat_mut()[i] += delta;
                loss_and_grad(&q, &batch).unwrap().0
            };
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let an = g.flat()[i];
            // Key biases have an identically zero gradient; the floor stops
            // round-off noise from being read as relative error there.
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{}]", entry.name, i - entry.offset);
            }
            checked += 1;
        }
    }
    report(
        5,
        "gradient exactness",
        worst < 1e-6,
        format!("{checked} coordinates over {arrays} arrays, max rel err {worst:.2e} at {worst_at}"),
        t0,
    );
}

#[test]
fn c06_causality() {
    let t0 = Instant::now();
    let root = RngHandle::new(606, "c6");
    let dist = TaskDistribution::gaussian(D).unwrap();
    let mut violations = 0;
    let mut checks = 0;
    for trial in 0..20u64 {
        let tr = root.substream(trial);
        let precision = if trial % 2 == 0 { Precision::Fp32 } else { Precision::Fp64 };
        let cfg = ModelConfig { n_layers: 2, d_embed: 32, n_heads: 2, d_task: D, max_pairs: K, precision };
        let seq = sample_batch(&dist, 1, K, SIGMA2, &mut tr.split("seq")).unwrap().remove(0);
        let mut noise = tr.split("perturb");
        let run = |s: &icl_core::tasks::RegressionSequence| -> Vec<f64> {
            let b = [s.clone()];
            match precision {
                Precision::Fp32 => {
                    let p = init_params::<f32>(&cfg, &mut tr.split("init")).unwrap();
                    icl_core::model::predict(&p, &TokenBatch::from_sequences(&b, &cfg).unwrap()).unwrap().iter().map(|v| *v as f64).collect()
                }
                Precision::Fp64 => {
                    let p = init_params::<f64>(&cfg, &mut tr.split("init")).unwrap();
                    icl_core::model::predict(&p, &TokenBatch::from_sequences(&b, &cfg).unwrap()).unwrap()
                }
            }
        };
        let base = run(&seq);
        for k in 0..K {
            // Perturb y_k and every later pair; predictions 0..=k must not move.
            let mut s = seq.clone().with_pair(k, seq.x(k), 5.0 * noise.normal());
            for j in k + 1..K {
                let x: Vec<f64> = (0..D).map(|_| 3.0 * noise.normal()).collect();
                s = s.with_pair(j, &x, noise.normal());
            }
            let out = run(&s);
            for i in 0..=k {
                checks += 1;
                if out[i].to_bits() != base[i].to_bits() {
                    violations += 1;
                }
            }
        }
    }
    report(
        6,
        "causality",
        violations == 0,
        format!("{checks} prediction comparisons over 20 trials, {violations} bitwise differences"),
        t0,
    );
}

fn acceptance_dir(name: &str) -> PathBuf {
    std::env::var_os("ICL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
        .join(name)
}

fn find<'a>(recs: &'a [RunRecord], est: &str, dist: &str, metric: &str, step: u64) -> &'a RunRecord {
    recs.iter()
        .find(|r| r.estimator == est && r.distribution == dist && r.metric == metric && r.k_or_alpha == "agg" && r.step == step)
        .unwrap_or_else(|| panic!("no {est} {dist} {metric} record at step {step}"))
}

fn verbose() -> bool {
    std::env::var_os("ICL_VERBOSE").is_some()
}

#[test]
#[ignore = "desk-scale training, about 45 minutes"]
fn c07_desk_training_low_diversity() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::desk(TaskCount::Finite(1));
    cfg.out_dir = acceptance_dir("c7");
    let opts = RunOptions { timestamp: Some(0), verbose: verbose(), ..RunOptions::default() };
    let s = run_experiment(&cfg, &opts).unwrap();
    let recs = ResultsStore::open(&cfg.out_dir).unwrap().records(&s.run_id).unwrap();
    let pt = find(&recs, "PT", "pretrain", "loss", cfg.train.n_steps);
    let dm = find(&recs, "dMMSE", "pretrain", "loss", 0);
    let rel = (pt.value - dm.value).abs() / dm.value;
    report(
        7,
        "desk training, M=1",
        rel <= 0.10,
        format!("PT L/D {:.4}±{:.4} vs dMMSE {:.4}±{:.4}, rel diff {:.1}%", pt.value, pt.stderr, dm.value, dm.stderr, 100.0 * rel),
        t0,
    );
}

#[test]
#[ignore = "desk-scale training, about 3 hours"]
fn c08_desk_training_infinite_diversity() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::desk(TaskCount::Infinite);
    cfg.train.n_steps = 200_000;
    cfg.train.checkpoint_every = 50_000;
    cfg.out_dir = acceptance_dir("c8");
    let opts = RunOptions { timestamp: Some(0), verbose: verbose(), ..RunOptions::default() };
    let s = run_experiment(&cfg, &opts).unwrap();
    let store = ResultsStore::open(&cfg.out_dir).unwrap();
    let recs = store.records(&s.run_id).unwrap();
    let n = cfg.train.n_steps;
    let pt = find(&recs, "PT", "true", "loss", n);
    let ridge = find(&recs, "Ridge", "true", "loss", 0);
    let rel = (pt.value - ridge.value).abs() / ridge.value;

    // Paired Δ difference on the run's own 𝒯_True evaluation set.
    let gaussian = TaskDistribution::gaussian(cfg.d_task).unwrap();
    let set = EvalSet::sample(
        &gaussian,
        DistTag::True,
        cfg.eval.n_sequences,
        cfg.k,
        cfg.sigma2,
        &mut experiment_rng(&cfg).split("eval/true"),
    )
    .unwrap();
    let ridge_p = set.predict(&Predictor::Ridge).unwrap();
    let ck = |step: u64| store.run_dir(&s.run_id).join("checkpoints").join(format!("{}.json", checkpoint_stem(step)));
    let delta_at = |step: u64| {
        let p = set.predict(&Predictor::transformer_from_checkpoint(&ck(step)).unwrap()).unwrap();
        delta_per_sequence(&p, &ridge_p, set.k, set.dim)
    };
    let (early, late) = (delta_at(n / 4), delta_at(n));
    let drop = paired_diff(&early, &late);
    let pass = rel <= 0.15 && drop.mean > 3.0 * drop.stderr;
    report(
        8,
        "desk training, M=infinite",
        pass,
        format!(
            "PT L/D {:.4} vs Ridge {:.4} (rel {:.1}%); Δ(PT,Ridge) {:.4} at 25% → {:.4} at 100%, drop {:.4}±{:.4}",
            pt.value,
            ridge.value,
            100.0 * rel,
            mean_stderr(&early).mean,
            mean_stderr(&late).mean,
            drop.mean,
            drop.stderr
        ),
        t0,
    );
}

#[test]
fn c09_interpolation_machinery() {
    let t0 = Instant::now();
    let root = RngHandle::new(909, "c9");
    let tasks = sample_pretrain_set(&mut root.split("tasks"), 32, D).unwrap();
    let set = tasks.task_set().unwrap().clone();
    let preds = [Predictor::Dmmse(tasks.clone()), Predictor::Ridge];
    let grid = icl_core::eval::alpha_grid(21);
    let curve = eval_interpolation(&preds, &set, 64, &grid, 256, K, SIGMA2, &mut root.split("interp")).unwrap();
    let row = |p: &str, a: f64| curve.row(p, a).unwrap();
    let up0 = paired_diff(&row("dMMSE", 0.5).per_pair, &row("dMMSE", 0.0).per_pair);
    let up1 = paired_diff(&row("dMMSE", 0.5).per_pair, &row("dMMSE", 1.0).per_pair);
    let ends: Vec<f64> = row("Ridge", 0.0).per_pair.iter().zip(&row("Ridge", 1.0).per_pair).map(|(a, b)| 0.5 * (a + b)).collect();
    let flat = paired_diff(&row("Ridge", 0.5).per_pair, &ends);
    let pass = up0.mean > 3.0 * up0.stderr && up1.mean > 3.0 * up1.stderr && flat.mean.abs() <= 2.0 * flat.stderr;
    report(
        9,
        "interpolation machinery",
        pass,
        format!(
            "dMMSE L(0.5)−L(0) {:.4}±{:.4}, L(0.5)−L(1) {:.4}±{:.4}; Ridge L(0.5)−mean(L(0),L(1)) {:.4}±{:.4}",
            up0.mean, up0.stderr, up1.mean, up1.stderr, flat.mean, flat.stderr
        ),
        t0,
    );
}

#[test]
fn c10_dimension_scaling() {
    let t0 = Instant::now();
    let root = RngHandle::new(1010, "c10");
    let m = 1usize << 12;
    let mut points = Vec::new();
    for d in [8usize, 16, 24] {
        let (k, sigma2) = (2 * d, snr_matched_sigma2(d));
        let cell = root.split(&format!("D={d}"));
        let tasks = sample_pretrain_set(&mut cell.split("tasks"), m, d).unwrap();
        let gaussian = TaskDistribution::gaussian(d).unwrap();
        let set = EvalSet::sample(&gaussian, DistTag::True, EVAL_SEQS, k, sigma2, &mut cell.split("true")).unwrap();
        let a = set.predict(&Predictor::Dmmse(tasks)).unwrap();
        let b = set.predict(&Predictor::Ridge).unwrap();
        points.push((d, mean_stderr(&delta_per_sequence(&a, &b, k, d))));
    }
    let mut pass = true;
    for w in points.windows(2) {
        let se = (w[0].1.stderr.powi(2) + w[1].1.stderr.powi(2)).sqrt();
        pass &= w[1].1.mean - w[0].1.mean > 3.0 * se;
    }
    let detail = points.iter().map(|(d, p)| format!("D={d}: {:.5}±{:.5}", p.mean, p.stderr)).collect::<Vec<_>>().join(", ");
    report(10, "dimension scaling of Δ_True(dMMSE, Ridge)", pass, detail, t0);
}

#[test]
fn c11_threshold_detector() {
    let t0 = Instant::now();
    let mut rng = RngHandle::new(1111, "c11");
    let mut ok = 0;
    for _ in 0..20 {
        let n = 6 + rng.index(8);
        let flip = rng.index(n - 1);
        let grid: Vec<f64> = (0..n).map(|i| 2f64.powi(i as i32 + 1)).collect();
        let base: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
        let gap = 0.05 + 0.1 * rng.uniform();
        let se = 0.01 * rng.uniform();
        let b: Vec<CurvePoint> = grid.iter().zip(&base).map(|(m, v)| CurvePoint { m: *m, value: *v, stderr: se }).collect();
        let crossing: Vec<CurvePoint> = (0..n)
            .map(|i| CurvePoint { m: grid[i], value: base[i] + if i <= flip { gap } else { -gap }, stderr: se })
            .collect();
        let parallel: Vec<CurvePoint> =
            (0..n).map(|i| CurvePoint { m: grid[i], value: base[i] + gap, stderr: se }).collect();
        let cross = find_threshold(&BTreeMap::from([("A".to_string(), crossing), ("B".to_string(), b.clone())])).unwrap();
        let par = find_threshold(&BTreeMap::from([("A".to_string(), parallel), ("B".to_string(), b.clone())])).unwrap();
        let same = find_threshold(&BTreeMap::from([("A".to_string(), b.clone()), ("B".to_string(), b)])).unwrap();
        let bracket_ok = matches!(cross, Threshold::Crossover { m_low, m_high, .. } if m_low == grid[flip] && m_high == grid[flip + 1]);
        if bracket_ok && par == Threshold::NoCrossover && same == Threshold::NoCrossover {
            ok += 1;
        }
    }
    report(11, "threshold detector", ok == 20, format!("{ok}/20 randomized fixtures correct"), t0);
}

#[test]
fn c12_determinism() {
    let t0 = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csvs = Vec::new();
    for dir in &dirs {
        let mut cfg = ExperimentConfig::base(TaskCount::Finite(2));
        cfg.eval.n_sequences = EVAL_SEQS;
        cfg.master_seed = 12;
        cfg.out_dir = dir.path().to_path_buf();
        let opts = RunOptions { oracle_only: true, timestamp: Some(1_700_000_000), ..RunOptions::default() };
        let s = run_experiment(&cfg, &opts).unwrap();
        csvs.push(std::fs::read(&s.csv).unwrap());
    }
    let same = csvs[0] == csvs[1] && !csvs[0].is_empty();
    let rows = csvs[0].iter().filter(|b| **b == b'\n').count().saturating_sub(1);
    report(12, "determinism", same, format!("two oracle-only M=2 runs, {rows} rows, byte-identical: {same}"), t0);
}

// Keeps the oracle-only harness path honest about loss normalisation.
#[test]
fn harness_loss_matches_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::base(TaskCount::Finite(4));
    cfg.eval.n_sequences = 256;
    cfg.eval.n_pairs = 0;
    cfg.out_dir = dir.path().to_path_buf();
    let s = run_experiment(&cfg, &RunOptions { oracle_only: true, timestamp: Some(0), ..RunOptions::default() }).unwrap();
    let recs = ResultsStore::open(dir.path()).unwrap().records(&s.run_id).unwrap();
    let gaussian = TaskDistribution::gaussian(D).unwrap();
    let set = EvalSet::sample(&gaussian, DistTag::True, 256, K, SIGMA2, &mut experiment_rng(&cfg).split("eval/true")).unwrap();
    let direct = report_from_predictions("Ridge", &set.predict(&Predictor::Ridge).unwrap(), &set);
    assert_eq!(find(&recs, "Ridge", "true", "loss", 0).value, direct.loss);
}
