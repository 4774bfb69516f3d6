//! Per-sample accuracy and top-k ranking utility.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{LabeledSet, Predict};

/// Fraction of positions where the two binary sequences agree.
pub fn accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::usage("accuracy of an empty split"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean of `values` grouped by the parallel `ids`.
pub fn success_rates(ids: &[&str], values: &[f64]) -> Result<BTreeMap<String, f64>> {
    if ids.len() != values.len() {
        return Err(Error::usage("ids and values differ in length"));
    }
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (id, v) in ids.iter().zip(values) {
        let e = acc.entry(id).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(id, (s, n))| (id.to_string(), s / n as f64))
        .collect())
}

/// Ids by descending rate; equal rates put the smaller id first.
pub fn rank(rates: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<(&String, f64)> = rates.iter().map(|(k, v)| (k, *v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ids.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Share of the predicted top-k that also sits in the true top-k.
pub fn utility_at_k(truth: &BTreeMap<String, f64>, predicted: &BTreeMap<String, f64>, k: usize) -> Result<f64> {
    if !truth.keys().eq(predicted.keys()) {
        return Err(Error::usage(
            "ground-truth and predicted rates cover different workflows",
        ));
    }
    if k == 0 || k > truth.len() {
        return Err(Error::usage(format!("k = {k} outside 1..={}", truth.len())));
    }
    let top: Vec<String> = rank(truth).into_iter().take(k).collect();
    let hits = rank(predicted).iter().take(k).filter(|id| top.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

pub fn default_k(workflows: usize) -> usize {
    ((0.1 * workflows as f64).ceil() as usize).max(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRate {
    pub workflow_id: String,
    pub ground_truth: f64,
    /// Mean predicted probability (or score).
    pub predicted: f64,
    /// Mean of thresholded predictions.
    pub predicted_thresholded: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Ranking by mean predicted probability.
    pub utility: f64,
    /// Ranking by mean thresholded prediction.
    pub utility_thresholded: f64,
    pub k: usize,
    pub threshold: f64,
    pub samples: usize,
    pub workflows: usize,
    pub confusion: Confusion,
    pub rates: Vec<WorkflowRate>,
}

/// Scores every labeled pair of `set` once and derives all metrics.
pub fn evaluate<P: Predict + ?Sized>(model: &P, set: &LabeledSet, k: Option<usize>) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::usage("cannot evaluate an empty split"));
    }
    let preds = model.predict_pairs(&set.all_pairs())?;
    let thr = model.threshold();
    let bit = |x: f64| if x > thr { 1.0 } else { 0.0 };
    let labels: Vec<f64> = set.samples.iter().map(|s| s.outcome).collect();
    let hard: Vec<f64> = preds.iter().map(|&p| bit(p)).collect();
    let hard_labels: Vec<f64> = labels.iter().map(|&l| bit(l)).collect();

    let mut confusion = Confusion::default();
    for (p, l) in hard.iter().zip(&hard_labels) {
        match (*p == 1.0, *l == 1.0) {
            (true, true) => confusion.true_positive += 1,
            (true, false) => confusion.false_positive += 1,
            (false, false) => confusion.true_negative += 1,
            (false, true) => confusion.false_negative += 1,
        }
    }

    let ids = set.workflow_ids();
    let truth = success_rates(&ids, &labels)?;
    let soft = success_rates(&ids, &preds)?;
    let thresholded = success_rates(&ids, &hard)?;
    let k = k.unwrap_or_else(|| default_k(truth.len()));
    let rates = truth
        .iter()
        .map(|(id, gt)| WorkflowRate {
            workflow_id: id.clone(),
            ground_truth: *gt,
            predicted: soft[id],
            predicted_thresholded: thresholded[id],
        })
        .collect();
    Ok(EvalReport {
        accuracy: accuracy(&hard, &hard_labels)?,
        utility: utility_at_k(&truth, &soft, k)?,
        utility_thresholded: utility_at_k(&truth, &thresholded, k)?,
        k,
        threshold: thr,
        samples: set.len(),
        workflows: truth.len(),
        confusion,
        rates,
    })
}

pub fn report_table(r: &EvalReport) -> String {
    let c = &r.confusion;
    let mut out = String::new();
    let _ = writeln!(out, "samples              {}", r.samples);
    let _ = writeln!(out, "workflows            {}", r.workflows);
    let _ = writeln!(out, "accuracy             {:.4}", r.accuracy);
    let _ = writeln!(out, "utility@{:<4}         {:.4}", r.k, r.utility);
    let _ = writeln!(out, "utility@{:<4} (hard)  {:.4}", r.k, r.utility_thresholded);
    let _ = writeln!(
        out,
        "confusion            tp {} fp {} tn {} fn {}",
        c.true_positive, c.false_positive, c.true_negative, c.false_negative
    );
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
