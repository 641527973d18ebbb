//! Threshold-free detection metrics. Scores are oriented so larger means
//! more likely out-of-distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

fn validate(ind: &[f64], ood: &[f64]) -> Result<()> {
    if ind.is_empty() || ood.is_empty() {
        return Err(Error::Input("both score sets must be nonempty".into()));
    }
    if ind.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that an OOD score exceeds an in-distribution score, ties
/// counted as one half.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64> {
    validate(ind, ood)?;
    let ind = sorted(ind);
    // counted in half-units so the result is a single exact division
    let mut half_wins: u128 = 0;
    for &o in ood {
        let below = ind.partition_point(|&v| v < o) as u128;
        let at_most = ind.partition_point(|&v| v <= o) as u128;
        half_wins += 2 * below + (at_most - below);
    }
    Ok(half_wins as f64 / (2 * ind.len() as u128 * ood.len() as u128) as f64)
}

/// Number of OOD samples that must be flagged to reach `target` recall.
fn required_hits(target: f64, n_ood: usize) -> usize {
    // the slack absorbs 0.95 * 20 = 19.000000000000004
    let k = ((target - 1e-12) * n_ood as f64).ceil() as usize;
    k.clamp(1, n_ood)
}

/// Fraction of in-distribution samples flagged at the highest threshold that
/// still flags at least `target` of the OOD samples. A sample is flagged
/// when its score is at or above the threshold.
pub fn fpr_at_tpr(ind: &[f64], ood: &[f64], target: f64) -> Result<f64> {
    validate(ind, ood)?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Input(format!("target rate {target} outside (0, 1]")));
    }
    let ood_desc = {
        let mut s = sorted(ood);
        s.reverse();
        s
    };
    let tau = ood_desc[required_hits(target, ood.len()) - 1];
    let flagged = ind.iter().filter(|&&v| v >= tau).count();
    Ok(flagged as f64 / ind.len() as f64)
}

/// The threshold [`fpr_at_tpr`] settles on.
pub fn threshold_at_tpr(ood: &[f64], target: f64) -> Result<f64> {
    validate(&[0.0], ood)?;
    let mut s = sorted(ood);
    s.reverse();
    Ok(s[required_hits(target, ood.len()) - 1])
}

/// One evaluated (method, OOD set) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub ood_set: String,
    pub auroc: f64,
    pub fpr95: f64,
}

impl MetricRow {
    pub fn evaluate(method: &str, ood_set: &str, ind: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            ood_set: ood_set.to_string(),
            auroc: auroc(ind, ood)?,
            fpr95: fpr_at_tpr(ind, ood, DEFAULT_TPR)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub sets: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("cannot summarize an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Per-method mean and population std across OOD sets, in order of first
/// appearance.
pub fn summarize(rows: &[MetricRow]) -> Result<Vec<MethodSummary>> {
    if rows.is_empty() {
        return Err(Error::Input("no metric rows to summarize".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m).collect();
            let a: Vec<f64> = mine.iter().map(|r| r.auroc).collect();
            let f: Vec<f64> = mine.iter().map(|r| r.fpr95).collect();
            let (auroc_mean, auroc_std) = mean_std(&a)?;
            let (fpr95_mean, fpr95_std) = mean_std(&f)?;
            Ok(MethodSummary {
                method: m.to_string(),
                sets: mine.len(),
                auroc_mean,
                auroc_std,
                fpr95_mean,
                fpr95_std,
            })
        })
        .collect()
}
