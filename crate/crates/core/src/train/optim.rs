use serde::{Deserialize, Serialize};

use crate::linalg::Scalar;
use crate::model::{ModelParams, MomentBlob};

use super::{TrainConfig, TrainError};

/// Adam first and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let n = params.flat().len();
        Self { first: vec![T::zero(); n], second: vec![T::zero(); n], t: 0 }
    }

    pub fn to_blob(&self) -> MomentBlob<T> {
        MomentBlob { t: self.t, first: self.first.clone(), second: self.second.clone() }
    }

    pub fn from_blob(blob: MomentBlob<T>) -> Self {
        Self { first: blob.first, second: blob.second, t: blob.t }
    }
}

/// Triangle schedule: linear ramp to `peak_lr` at step `warmup_frac·N`, then
/// linear decay towards zero at step `N`. Step 0 gets the first ramp value
/// rather than zero so that every step moves the parameters.
pub fn lr_at_step(t: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let n = cfg.n_steps;
    if t >= n {
        return Err(TrainError::StepOutOfRange { step: t, n_steps: n });
    }
    let warm = (cfg.warmup_frac * n as f64).max(1.0);
    let t = t as f64;
    let n = n as f64;
    Ok(if t <= warm {
        cfg.peak_lr * t.max(1.0) / warm
    } else {
        cfg.peak_lr * (n - t) / (n - warm)
    })
}

/// Global L2 norm of a gradient buffer, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &[T]) -> f64 {
    grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`p ← p − lr·λ·p` before the Adam step) on the arrays flagged for decay.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    assert_eq!(params.flat().len(), grads.flat().len(), "gradient does not mirror the parameters");
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let scale = match cfg.grad_clip {
        Some(clip) => {
            let norm = global_norm(grads.flat());
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let entries = params.layout().entries().to_vec();
    let p = params.flat_mut();
    let g = grads.flat();
    for e in &entries {
        let shrink = if e.decay { lr * cfg.weight_decay } else { 0.0 };
        for i in e.offset..e.offset + e.len {
            let gi = g[i].f64() * scale;
            let m = b1 * state.first[i].f64() + (1.0 - b1) * gi;
            let v = b2 * state.second[i].f64() + (1.0 - b2) * gi * gi;
            state.first[i] = T::of(m);
            state.second[i] = T::of(v);
            let mut x = p[i].f64();
            x -= shrink * x;
            x -= lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            p[i] = T::of(x);
        }
    }
}

/// Outcome of a short stability probe at one learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub peak_lr: f64,
    pub stable: bool,
    pub reason: Option<String>,
    pub final_loss: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Precision};

    fn cfg() -> TrainConfig {
        TrainConfig { n_steps: 1000, peak_lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(lr_at_step(500, &c).unwrap(), 1e-3);
        assert_eq!(lr_at_step(250, &c).unwrap(), 0.5e-3);
        assert!((lr_at_step(999, &c).unwrap() - 1e-3 / 500.0).abs() < 1e-18);
        assert_eq!(lr_at_step(0, &c).unwrap(), 1e-3 / 500.0);
        assert!(matches!(lr_at_step(1000, &c), Err(TrainError::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_has_single_peak() {
        let c = TrainConfig { n_steps: 997, warmup_frac: 0.3, ..cfg() };
        let lrs: Vec<f64> = (0..997).map(|t| lr_at_step(t, &c).unwrap()).collect();
        let top = lrs.iter().copied().fold(0.0, f64::max);
        let apex = lrs.iter().position(|v| *v == top).unwrap();
        assert!(lrs[..=apex].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[apex..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs.iter().all(|v| *v > 0.0));
    }

    fn tiny() -> ModelParams<f64> {
        let cfg = ModelConfig { n_layers: 1, d_embed: 4, n_heads: 1, d_task: 1, max_pairs: 1, precision: Precision::Fp64 };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        for (i, v) in p.flat_mut().iter_mut().enumerate() {
            *v = 1.0 + i as f64 * 0.01;
        }
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        st.first.iter_mut().for_each(|v| *v = 0.5);
        st.second.iter_mut().for_each(|v| *v = 0.25);
        let c = TrainConfig { weight_decay: 0.0, ..cfg() };
        let mut fresh = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut fresh, 1e-2, &c);
        assert_eq!(p.flat(), before.flat());
        let mut q = before.clone();
        adam_step(&mut q, &g, &mut st, 0.0, &c);
        assert!(st.first.iter().all(|v| *v == 0.45));
        assert!(st.second.iter().all(|v| (*v - 0.25 * 0.999).abs() < 1e-15));
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.flat_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut st = OptimizerState::new(&p);
        let c = TrainConfig { weight_decay: 0.0, ..cfg() };
        let lr = 3e-3;
        adam_step(&mut p, &g, &mut st, lr, &c);
        // m̂ = 1, v̂ = 1 at t = 1.
        let expect = -lr / (1.0 + c.adam_eps);
        for (a, b) in p.flat().iter().zip(before.flat()) {
            assert!((a - b - expect).abs() < 1e-15);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn decoupled_decay_skips_excluded_arrays() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        let c = TrainConfig { weight_decay: 0.1, ..cfg() };
        let lr = 0.5;
        adam_step(&mut p, &g, &mut st, lr, &c);
        for e in p.layout().entries() {
            let a = p.array(&e.name).unwrap();
            let b = before.array(&e.name).unwrap();
            for (x, y) in a.iter().zip(b) {
                if e.decay {
                    assert!((x - y * (1.0 - lr * 0.1)).abs() < 1e-15, "{}", e.name);
                } else {
                    assert_eq!(x, y, "{}", e.name);
                }
            }
        }
    }

    #[test]
    fn global_norm_by_hand() {
        let mut g = tiny().zeros_like();
        g.flat_mut()[0] = 300.0;
        g.flat_mut()[1] = 400.0;
        assert_eq!(global_norm(g.flat()), 500.0);
    }
}
