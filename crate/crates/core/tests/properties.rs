//! Property tests for invariants that span modules.

use proptest::prelude::*;

use icl_core::eval::{delta_per_sequence, interpolate_tasks, report_from_predictions, DistTag, EvalSet};
use icl_core::harness::{ExperimentConfig, ResultsStore, RunRecord, TaskCount};
use icl_core::tasks::{RegressionSequence, Task};
use icl_core::train::{lr_at_step, TrainConfig};
use icl_core::RngHandle;

fn vec_f64(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_is_zero_on_itself_and_symmetric(k in 1usize..8, d in 1usize..6, n in 1usize..5, seed in any::<u64>()) {
        let mut r = RngHandle::new(seed, "delta");
        let a: Vec<f64> = (0..n * k).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| r.normal()).collect();
        prop_assert!(delta_per_sequence(&a, &a, k, d).iter().all(|v| *v == 0.0));
        prop_assert_eq!(delta_per_sequence(&a, &b, k, d), delta_per_sequence(&b, &a, k, d));
    }

    #[test]
    fn interpolation_fixes_the_norm(wi in vec_f64(4), wj in vec_f64(4), alpha in 0.0f64..=1.0) {
        let (ti, tj) = (Task::new(wi.clone()).unwrap(), Task::new(wj.clone()).unwrap());
        let mix: Vec<f64> = wi.iter().zip(&wj).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&mix) > 1e-6);
        let w = interpolate_tasks(&ti, &tj, alpha).unwrap();
        let want = 0.5 * (norm(&wi) + norm(&wj));
        prop_assert!((norm(w.w()) - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn loss_normalisation_audit(k in 1usize..10, d in 1usize..6, seed in any::<u64>()) {
        let mut r = RngHandle::new(seed, "audit");
        let w: Vec<f64> = (0..d).map(|_| r.normal()).collect();
        let xs: Vec<f64> = (0..k * d).map(|_| r.normal()).collect();
        let noise: Vec<f64> = (0..k).map(|_| r.normal()).collect();
        let seq = RegressionSequence::from_parts(Task::new(w).unwrap(), xs, noise).unwrap();
        let preds: Vec<f64> = (0..k).map(|_| r.normal()).collect();
        let set = EvalSet::from_sequences(vec![seq.clone(), seq], DistTag::True, 0.25).unwrap();
        let both: Vec<f64> = preds.iter().chain(&preds).copied().collect();
        let rep = report_from_predictions("x", &both, &set);
        let mean_k = rep.per_k_mse.iter().sum::<f64>() / k as f64;
        prop_assert!((rep.loss - mean_k / d as f64).abs() <= 1e-12 * rep.loss.abs().max(1.0));
    }

    #[test]
    fn schedule_single_peak_and_bounded(n in 2u64..2000, frac in 0.0f64..=1.0, peak in 1e-5f64..1e-1) {
        let cfg = TrainConfig { n_steps: n, warmup_frac: frac, peak_lr: peak, ..TrainConfig::default() };
        prop_assume!(cfg.validate().is_ok());
        let lrs: Vec<f64> = (0..n).map(|t| lr_at_step(t, &cfg).unwrap()).collect();
        prop_assert!(lrs.iter().all(|l| *l > 0.0 && *l <= peak * (1.0 + 1e-12)));
        let top = lrs.iter().cloned().fold(f64::MIN, f64::max);
        let first_top = lrs.iter().position(|l| *l == top).unwrap();
        prop_assert!(lrs[..=first_top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[first_top..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(lr_at_step(n, &cfg).is_err());
    }

    #[test]
    fn streams_are_independent_of_draw_order(seed in any::<u64>(), n in 1usize..50) {
        let root = RngHandle::new(seed, "root");
        let (mut a1, mut b1) = (root.split("a"), root.split("b"));
        let first: Vec<(f64, f64)> = (0..n).map(|_| (a1.normal(), b1.normal())).collect();
        let (mut a2, mut b2) = (root.split("a"), root.split("b"));
        let bs: Vec<f64> = (0..n).map(|_| b2.normal()).collect();
        let as_: Vec<f64> = (0..n).map(|_| a2.normal()).collect();
        for i in 0..n {
            prop_assert_eq!(first[i].0.to_bits(), as_[i].to_bits());
            prop_assert_eq!(first[i].1.to_bits(), bs[i].to_bits());
        }
    }

    #[test]
    fn config_round_trips(m in 1usize..100_000, seed in any::<u64>(), wd in 0.0f64..1.0, b in 1usize..1024, infinite in any::<bool>()) {
        let count = if infinite { TaskCount::Infinite } else { TaskCount::Finite(m) };
        let mut c = ExperimentConfig::desk(count);
        c.master_seed = seed;
        c.train.weight_decay = wd;
        c.train.batch_size = b;
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back.config_hash(), c.config_hash());
        prop_assert_eq!(back, c);
    }

    #[test]
    fn store_accepts_only_finite_records(value in prop::num::f64::ANY, stderr in prop::num::f64::ANY) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultsStore::open(dir.path()).unwrap();
        store.begin_run("r", "h", serde_json::Value::Null).unwrap();
        let rec = RunRecord {
            run_id: "r".into(), estimator: "Ridge".into(), distribution: "true".into(), m: "4".into(), d: 8,
            sigma2: 0.25, b: 64, n: 10, weight_decay: 0.0, d_embed: 64, metric: "loss".into(),
            k_or_alpha: "agg".into(), value, stderr, step: 0, timestamp: 0,
        };
        let ok = value.is_finite() && stderr.is_finite() && stderr >= 0.0;
        prop_assert_eq!(store.append("r", std::slice::from_ref(&rec)).is_ok(), ok);
        if ok {
            let back = store.records("r").unwrap();
            prop_assert_eq!(back[0].value.to_bits(), value.to_bits());
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
