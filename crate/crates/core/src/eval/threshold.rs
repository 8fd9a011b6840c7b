use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One point of a Δ-versus-M curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: f64,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    /// The sign of `first − second` flips between `m_low` and `m_high`.
    Crossover { m_low: f64, m_high: f64, first: String, second: String },
    NoCrossover,
}

/// Locates the first significant sign change of `first − second` between two
/// labelled curves on a shared ascending grid.
///
/// A grid point counts only when `|first − second|` exceeds the pooled
/// standard error `sqrt(se_a² + se_b²)`; the bracket is formed by consecutive
/// significant points of opposite sign.
pub fn find_threshold(curves: &BTreeMap<String, Vec<CurvePoint>>) -> Result<Threshold, EvalError> {
    if curves.len() != 2 {
        return Err(EvalError::BadCurves(format!("expected two curves, got {}", curves.len())));
    }
    let mut it = curves.iter();
    let (la, a) = it.next().expect("two curves");
    let (lb, b) = it.next().expect("two curves");
    if a.is_empty() || a.len() != b.len() {
        return Err(EvalError::BadCurves(format!("{la} has {} points, {lb} has {}", a.len(), b.len())));
    }
    if a.iter().zip(b).any(|(p, q)| p.m != q.m) {
        return Err(EvalError::BadCurves("grids differ".into()));
    }
    if a.windows(2).any(|w| w[0].m >= w[1].m) {
        return Err(EvalError::BadCurves("grid is not strictly ascending".into()));
    }
    if a.iter().chain(b).any(|p| !p.value.is_finite() || p.stderr.is_nan() || p.stderr < 0.0) {
        return Err(EvalError::BadCurves("non-finite value or negative stderr".into()));
    }
    let mut last: Option<(f64, f64)> = None;
    for (p, q) in a.iter().zip(b) {
        let d = p.value - q.value;
        let pooled = (p.stderr * p.stderr + q.stderr * q.stderr).sqrt();
        if d.abs() <= pooled {
            continue;
        }
        let sign = d.signum();
        if let Some((m_prev, s_prev)) = last {
            if s_prev != sign {
                return Ok(Threshold::Crossover { m_low: m_prev, m_high: p.m, first: la.clone(), second: lb.clone() });
            }
        }
        last = Some((p.m, sign));
    }
    Ok(Threshold::NoCrossover)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(ms: &[f64], vals: &[f64], se: f64) -> Vec<CurvePoint> {
        ms.iter().zip(vals).map(|(m, v)| CurvePoint { m: *m, value: *v, stderr: se }).collect()
    }

    #[test]
    fn forced_flip_between_five_and_six() {
        let ms: Vec<f64> = (0..10).map(|i| 2f64.powi(i)).collect();
        let a: Vec<f64> = (0..10).map(|i| if i <= 5 { 1.0 } else { 0.0 }).collect();
        let b = vec![0.5; 10];
        let mut c = BTreeMap::new();
        c.insert("B256".to_string(), curve(&ms, &a, 0.01));
        c.insert("B512".to_string(), curve(&ms, &b, 0.01));
        match find_threshold(&c).unwrap() {
            Threshold::Crossover { m_low, m_high, .. } => assert_eq!((m_low, m_high), (32.0, 64.0)),
            t => panic!("{t:?}"),
        }
    }

    #[test]
    fn identical_and_insignificant() {
        let ms = [1.0, 2.0, 4.0];
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), curve(&ms, &[1.0, 2.0, 3.0], 0.1));
        c.insert("b".to_string(), curve(&ms, &[1.0, 2.0, 3.0], 0.1));
        assert_eq!(find_threshold(&c).unwrap(), Threshold::NoCrossover);
        // Flip smaller than the pooled stderr.
        c.insert("b".to_string(), curve(&ms, &[1.05, 2.0, 2.95], 0.1));
        assert_eq!(find_threshold(&c).unwrap(), Threshold::NoCrossover);
    }

    #[test]
    fn rejects_mismatched_grids() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), curve(&[1.0, 2.0], &[0.0, 0.0], 0.1));
        c.insert("b".to_string(), curve(&[1.0, 3.0], &[0.0, 0.0], 0.1));
        assert!(matches!(find_threshold(&c), Err(EvalError::BadCurves(_))));
        c.insert("b".to_string(), curve(&[1.0], &[0.0], 0.1));
        assert!(find_threshold(&c).is_err());
    }
}
