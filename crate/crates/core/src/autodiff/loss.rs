use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::validation("label", format!("{y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Per-row log-loss `-y log p - (1-y) log(1-p)` of a `[B, 1]` probability node.
pub fn bce(tape: &mut Tape, p: Var, labels: &[f64]) -> Result<Var> {
    check_labels(labels)?;
    let shape = tape.shape(p).to_vec();
    if shape != [labels.len(), 1] {
        return Err(Error::shape("bce", &shape, &[labels.len(), 1]));
    }
    let pos = Arc::new(Tensor::column(labels.to_vec()));
    let neg = Arc::new(pos.map(|y| 1.0 - y));
    let pc = tape.clip(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(pc)?;
    let q = tape.scale(pc, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let a = tape.mask(log_p, pos)?;
    let b = tape.mask(log_q, neg)?;
    let s = tape.add(a, b)?;
    tape.scale(s, -1.0)
}

/// Mean log-loss over the batch, as a scalar node.
pub fn bce_mean(tape: &mut Tape, p: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::validation("batch", "is empty"));
    }
    let l = bce(tape, p, labels)?;
    tape.mean(l)
}

/// Log-loss of a single prediction, with the same clipping as [`bce`].
pub fn bce_value(p: f64, y: f64) -> Result<f64> {
    check_labels(&[y])?;
    if p.is_nan() {
        return Err(Error::validation("probability", "is NaN"));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((bce_value(0.5, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((bce_value(0.9, 0.0).unwrap() - 2.302_585_1).abs() < 1e-6);
        let near = bce_value(1.0 - 1e-7, 1.0).unwrap();
        assert!((near - 1e-7).abs() < 1e-9, "{near}");
    }

    #[test]
    fn finite_over_closed_interval() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            assert!(bce_value(p, 0.0).unwrap().is_finite());
            assert!(bce_value(p, 1.0).unwrap().is_finite());
        }
    }

    #[test]
    fn rejects_non_binary_label() {
        assert!(bce_value(0.5, 0.5).is_err());
        let mut t = Tape::new();
        let p = t.constant(Tensor::column(vec![0.5])).unwrap();
        assert!(bce(&mut t, p, &[2.0]).is_err());
    }

    #[test]
    fn tape_matches_scalar_form() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::column(vec![0.8, 0.3, 1.0, 0.0])).unwrap();
        let ys = [1.0, 0.0, 1.0, 1.0];
        let l = bce(&mut t, p, &ys).unwrap();
        for (i, (&pv, &y)) in [0.8, 0.3, 1.0, 0.0].iter().zip(&ys).enumerate() {
            assert!((t.value(l).data()[i] - bce_value(pv, y).unwrap()).abs() < 1e-12);
        }
    }
}
