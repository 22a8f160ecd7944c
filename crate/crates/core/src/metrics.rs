//! Predictive and faithfulness metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{Instance, MaskPair};
use crate::error::{Result, ToeError};
use crate::streams::{EvalCache, ModelBundle};

/// One row of a suite or ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub method: String,
    pub k: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub fidelity_mae: f64,
    pub ece: f64,
    pub comprehensiveness: f64,
    pub mean_evidence: f64,
    /// Only defined for search methods.
    pub exhaustion_rate: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(ToeError::dim(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Indices sorted by descending score (stable on ties).
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ToeError::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ToeError::invalid("auroc needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision: sum over distinct thresholds of the recall increment
/// times the precision at that threshold.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(ToeError::invalid("auprc needs at least one positive"));
    }
    let idx = order_desc(scores);
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut new_tp = 0;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                new_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            ap += new_tp as f64 * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap / n_pos as f64)
}

/// Expected calibration error over `n_bins` equal-width bins; empty bins
/// are skipped. A probability of exactly 1 falls in the last bin.
pub fn ece(labels: &[bool], probs: &[f64], n_bins: usize) -> Result<f64> {
    check_lengths(labels.len(), probs.len())?;
    if n_bins == 0 {
        return Err(ToeError::invalid("ece needs at least one bin"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    for (&y, &p) in labels.iter().zip(probs) {
        if !(0.0..=1.0).contains(&p) {
            return Err(ToeError::invalid(format!("probability {p} outside [0, 1]")));
        }
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += if y { 1.0 } else { 0.0 };
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (hits[b] / c - conf[b] / c).abs()
        })
        .sum())
}

pub fn fidelity_mae(p_full: &[f64], p_masked: &[f64]) -> Result<f64> {
    check_lengths(p_full.len(), p_masked.len())?;
    if p_full.is_empty() {
        return Err(ToeError::invalid("fidelity over zero instances"));
    }
    Ok(p_full.iter().zip(p_masked).map(|(a, b)| (a - b).abs()).sum::<f64>() / p_full.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sufficiency {
    pub auroc: f64,
    pub auprc: f64,
    pub fidelity_mae: f64,
    pub p_full: Vec<f64>,
    pub p_masked: Vec<f64>,
}

/// Masked and full probabilities for every instance.
pub fn masked_probs(bundle: &ModelBundle, instances: &[&Instance], masks: &[MaskPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(instances.len(), masks.len())?;
    let pairs: Vec<(f64, f64)> = instances
        .par_iter()
        .zip(masks.par_iter())
        .map(|(inst, mask)| {
            let cache = EvalCache::build(bundle, inst)?;
            let full = cache.evaluate(bundle, &MaskPair::full_for(inst))?;
            Ok((full, cache.evaluate(bundle, mask)?))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Scores masked predictions against labels and against the full-input
/// prediction.
pub fn sufficiency_eval(bundle: &ModelBundle, instances: &[&Instance], masks: &[MaskPair]) -> Result<Sufficiency> {
    let (p_full, p_masked) = masked_probs(bundle, instances, masks)?;
    let labels: Vec<bool> = instances.iter().map(|i| i.label).collect();
    Ok(Sufficiency {
        auroc: auroc(&labels, &p_masked)?,
        auprc: auprc(&labels, &p_masked)?,
        fidelity_mae: fidelity_mae(&p_full, &p_masked)?,
        p_full,
        p_masked,
    })
}

/// Confidence in the full-input class: `p` for a positive decision and
/// `1 - p` otherwise.
pub fn class_confidence(p: f64, positive: bool) -> f64 {
    if positive {
        p
    } else {
        1.0 - p
    }
}

/// Mean drop in confidence for the full-input class when the selected
/// units are removed.
pub fn comprehensiveness(bundle: &ModelBundle, instances: &[&Instance], masks: &[MaskPair]) -> Result<f64> {
    let remainders: Vec<MaskPair> = instances
        .iter()
        .zip(masks)
        .map(|(inst, m)| m.complement(&inst.presence))
        .collect();
    let (p_full, p_rem) = masked_probs(bundle, instances, &remainders)?;
    if p_full.is_empty() {
        return Err(ToeError::invalid("comprehensiveness over zero instances"));
    }
    Ok(comprehensiveness_from_probs(&p_full, &p_rem))
}

pub fn comprehensiveness_from_probs(p_full: &[f64], p_remainder: &[f64]) -> f64 {
    p_full
        .iter()
        .zip(p_remainder)
        .map(|(&pf, &pr)| {
            let y = crate::streams::decide(pf);
            class_confidence(pf, y) - class_confidence(pr, y)
        })
        .sum::<f64>()
        / p_full.len() as f64
}
