//! Ranking metrics over breast-level malignancy scores.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum View {
    Cc,
    Mlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

/// Malignant-class probability for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub patient_id: u64,
    pub study_id: u64,
    pub side: Side,
    pub view: View,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBreast {
    pub patient_id: u64,
    pub study_id: u64,
    pub side: Side,
    pub score_cc: f64,
    pub score_mlo: f64,
    pub label: u8,
}

impl ScoredBreast {
    pub fn score(&self) -> f64 {
        (self.score_cc + self.score_mlo) / 2.0
    }
}

/// Pairs CC and MLO scores per breast, in order of first appearance.
pub fn aggregate_views(views: &[ViewScore]) -> Result<Vec<ScoredBreast>> {
    let mut index: HashMap<(u64, u64, Side), usize> = HashMap::new();
    let mut slots: Vec<(u64, u64, Side, Option<f64>, Option<f64>, u8)> = Vec::new();
    for v in views {
        if !(0.0..=1.0).contains(&v.score) {
            return Err(Error::invalid(format!("score {} outside [0, 1]", v.score)));
        }
        let key = (v.patient_id, v.study_id, v.side);
        let i = *index.entry(key).or_insert_with(|| {
            slots.push((v.patient_id, v.study_id, v.side, None, None, v.label));
            slots.len() - 1
        });
        let slot = &mut slots[i];
        if slot.5 != v.label {
            return Err(Error::Data(format!("conflicting labels for breast {key:?}")));
        }
        let target = match v.view {
            View::Cc => &mut slot.3,
            View::Mlo => &mut slot.4,
        };
        if target.replace(v.score).is_some() {
            return Err(Error::Data(format!("duplicate {:?} view for breast {key:?}", v.view)));
        }
    }
    slots
        .into_iter()
        .map(|(patient_id, study_id, side, cc, mlo, label)| match (cc, mlo) {
            (Some(score_cc), Some(score_mlo)) => Ok(ScoredBreast { patient_id, study_id, side, score_cc, score_mlo, label }),
            _ => Err(Error::Data(format!("breast ({patient_id}, {study_id}, {side:?}) is missing a view"))),
        })
        .collect()
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney ROC-AUC: P(positive outranks negative), ties counted ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC-AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midrank sum of positives, 1-based.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision. Equal scores keep their input order.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::invalid("PR-AUC needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile 95% bootstrap interval. Single-class resamples are redrawn.
pub fn bootstrap_ci<R, F>(scores: &[f64], labels: &[u8], metric: F, n_resamples: usize, rng: &mut R) -> Result<(f64, f64)>
where
    R: Rng + ?Sized,
    F: Fn(&[f64], &[u8]) -> Result<f64>,
{
    if n_resamples < 100 {
        return Err(Error::invalid(format!("bootstrap needs at least 100 resamples, got {n_resamples}")));
    }
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("bootstrap needs both classes"));
    }
    let n = scores.len();
    let mut s = vec![0.0; n];
    let mut l = vec![0u8; n];
    let mut stats = Vec::with_capacity(n_resamples);
    while stats.len() < n_resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let p = l.iter().filter(|&&v| v == 1).count();
        if p == 0 || p == n {
            continue;
        }
        stats.push(metric(&s, &l)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile(&stats, 0.025), quantile(&stats, 0.975)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub n_breasts: usize,
    pub roc_auc: f64,
    pub roc_ci: (f64, f64),
    pub pr_auc: f64,
    pub pr_ci: (f64, f64),
}

pub fn report<R: Rng + ?Sized>(experiment: &str, breasts: &[ScoredBreast], n_resamples: usize, rng: &mut R) -> Result<MetricsReport> {
    let scores: Vec<f64> = breasts.iter().map(ScoredBreast::score).collect();
    let labels: Vec<u8> = breasts.iter().map(|b| b.label).collect();
    Ok(MetricsReport {
        experiment: experiment.to_string(),
        n_breasts: breasts.len(),
        roc_auc: roc_auc(&scores, &labels)?,
        roc_ci: bootstrap_ci(&scores, &labels, roc_auc, n_resamples, rng)?,
        pr_auc: pr_auc(&scores, &labels)?,
        pr_ci: bootstrap_ci(&scores, &labels, pr_auc, n_resamples, rng)?,
    })
}
