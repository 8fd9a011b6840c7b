//! Sample means and standard errors.

/// Mean and standard error of the mean (unbiased variance).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Summarizes `xs` in index order. Panics on an empty slice.
pub fn mean_stderr(xs: &[f64]) -> MeanStderr {
    assert!(!xs.is_empty(), "mean of an empty sample");
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanStderr { mean, stderr, n }
}

/// Mean and stderr of `a[i] - b[i]` (paired samples).
pub fn paired_diff(a: &[f64], b: &[f64]) -> MeanStderr {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&d)
}

/// Numerically stable `ln(sum(exp(xs)))`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax with max shift. The result sums to one for any finite input.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_stderr_by_hand() {
        let m = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        // sample variance 5/3, stderr sqrt(5/12)
        assert!((m.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_large() {
        let v = log_sum_exp(&[1234.0, 1232.0]);
        assert!((v - (1232.0 + (2f64.exp() + 1.0).ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_extreme_inputs() {
        let p = softmax(&[-1e300, 0.0, -1e5]);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        let q = softmax(&[800.0, 800.0]);
        assert_eq!(q, vec![0.5, 0.5]);
    }
}
