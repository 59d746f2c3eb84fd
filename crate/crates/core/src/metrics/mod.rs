//! AUC, log-loss and percentage changes against the base-cold anchor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::bce_value;
use crate::error::{Error, Result};

/// Area under the ROC curve by the rank-sum (Mann-Whitney) statistic.
///
/// Tied scores share their average rank, which counts a tied
/// positive/negative pair as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::validation("label", format!("{l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("auc scores", "contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares the mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += mean_rank * pos_in_block as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean log-loss with probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("logloss", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::validation("logloss input", "is empty"));
    }
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        total += bce_value(p, f64::from(y))?;
    }
    Ok(total / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auc,
    Logloss,
}

/// `(value / anchor - 1) * 100`. Higher is better for AUC, lower for log-loss.
pub fn percentage(value: f64, anchor: f64, kind: MetricKind) -> Result<f64> {
    if !(anchor > 0.0) || !anchor.is_finite() {
        return Err(Error::validation(
            format!("{kind:?} anchor"),
            format!("{anchor} must be positive"),
        ));
    }
    Ok((value / anchor - 1.0) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cold,
    WarmA,
    WarmB,
    WarmC,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Cold, Phase::WarmA, Phase::WarmB, Phase::WarmC];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Cold => "cold",
            Phase::WarmA => "warm_a",
            Phase::WarmB => "warm_b",
            Phase::WarmC => "warm_c",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::validation("phase", format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseScores {
    pub phase: Phase,
    pub auc: f64,
    pub logloss: f64,
    /// Mean of per-ad AUCs over ads with both classes in their hold-out.
    pub per_ad_auc: Option<f64>,
}

impl PhaseScores {
    /// Scores pooled over every hold-out instance; `groups` gives the
    /// per-ad slices for the diagnostic per-ad AUC.
    pub fn compute(phase: Phase, preds: &[f64], labels: &[u8], groups: &[std::ops::Range<usize>]) -> Result<Self> {
        let per_ad: Vec<f64> = groups
            .iter()
            .filter_map(|g| auc(&preds[g.clone()], &labels[g.clone()]).ok())
            .collect();
        Ok(PhaseScores {
            phase,
            auc: auc(preds, labels)?,
            logloss: logloss(preds, labels)?,
            per_ad_auc: (!per_ad.is_empty()).then(|| per_ad.iter().sum::<f64>() / per_ad.len() as f64),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentageReport {
    pub auc_pct: f64,
    pub logloss_pct: f64,
}

impl PercentageReport {
    pub fn against(scores: &PhaseScores, anchor: &PhaseScores) -> Result<Self> {
        Ok(PercentageReport {
            auc_pct: percentage(scores.auc, anchor.auc, MetricKind::Auc)?,
            logloss_pct: percentage(scores.logloss, anchor.logloss, MetricKind::Logloss)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.3], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn logloss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(&[0.5; 4], &[1, 0, 0, 1]).unwrap() - ln2).abs() < 1e-12);
        assert!(logloss(&[1.0, 0.0], &[1, 0]).unwrap() <= 1e-6);
        assert!((logloss(&[0.8, 0.3], &[1, 0]).unwrap() - 0.28991).abs() < 1e-5);
        assert!(logloss(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn percentage_examples() {
        let p = percentage(0.72, 0.70, MetricKind::Auc).unwrap();
        assert!((p - 2.857_142_857).abs() < 1e-6, "{p}");
        assert_eq!(percentage(0.7, 0.7, MetricKind::Logloss).unwrap(), 0.0);
        assert!(percentage(0.5, 0.0, MetricKind::Auc).is_err());
    }

    #[test]
    fn phase_names_roundtrip() {
        for p in Phase::ALL {
            assert_eq!(p.as_str().parse::<Phase>().unwrap(), p);
        }
    }
}
