//! Frame-level metrics: accuracy at 0.5, mean average precision and
//! macro-F1, with a per-class breakdown.

use std::fs;
use std::path::Path;

use mvweak_core::{CoreError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMetrics {
    pub class: usize,
    /// `None` when the class has no positive label.
    pub ap: Option<f64>,
    pub f1: f64,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// `detection`, `recognition` or `bag`.
    pub task: String,
    pub accuracy: f64,
    /// Mean AP over classes with at least one positive; `None` if there are none.
    pub map: Option<f64>,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes left out of the mAP mean because they have no positives.
    pub undefined_ap: Vec<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))?)
    }

    /// Plain-text table for terminals.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "task {}\naccuracy {:.4}\nmAP {}\nmacro-F1 {:.4}\nclass  positives  AP         F1\n",
            self.task,
            self.accuracy,
            fmt(self.map),
            self.macro_f1
        );
        for c in &self.per_class {
            s += &format!("{:<6} {:<10} {:<10} {:.4}\n", c.class, c.positives, fmt(c.ap), c.f1);
        }
        s
    }
}

/// Precision-recall points, one per distinct score from high to low, with
/// precision replaced by its running maximum from the right. Tied scores
/// enter the curve together. Empty without positives.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    assert_eq!(scores.len(), labels.len(), "pr_curve lengths");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    points
}

/// Average precision by all-points interpolation: the area under
/// [`pr_curve`] taken over its recall steps. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let points = pr_curve(scores, labels);
    if points.is_empty() {
        return None;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in points {
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Metrics for a row-major `rows x classes` score matrix against binary labels.
pub fn evaluate_matrix(task: &str, scores: &[f64], labels: &[u8], classes: usize) -> Result<MetricsReport> {
    if classes == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(classes) || scores.is_empty() {
        return Err(TrainError::Data(format!(
            "score/label shapes differ: {} scores, {} labels, {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(TrainError::Data(format!("non-finite score {v}")));
    }
    let rows = scores.len() / classes;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= THRESHOLD) == (l == 1))
        .count();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let col: Vec<f64> = (0..rows).map(|r| scores[r * classes + c]).collect();
        let lab: Vec<bool> = (0..rows).map(|r| labels[r * classes + c] == 1).collect();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&s, &l) in col.iter().zip(&lab) {
            match (s >= THRESHOLD, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        per_class.push(ClassMetrics {
            class: c,
            ap: average_precision(&col, &lab),
            f1: f1(tp, fp, fn_),
            positives: lab.iter().filter(|&&l| l).count(),
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    Ok(MetricsReport {
        task: task.to_string(),
        accuracy: correct as f64 / scores.len() as f64,
        map: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        undefined_ap: per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.class).collect(),
        per_class,
    })
}

/// Metrics over per-sequence `T x C` score and target matrices, pooled
/// over every frame of every sequence.
pub fn evaluate_frames(task: &str, scores: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<MetricsReport> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(TrainError::Data(format!("{} score matrices for {} targets", scores.len(), targets.len())));
    }
    let classes = *targets[0].shape().last().unwrap_or(&0);
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (a, b) in scores.iter().zip(targets) {
        if a.shape() != b.shape() || b.shape().last() != Some(&classes) {
            return Err(TrainError::Data(format!("scores {:?} vs targets {:?}", a.shape(), b.shape())));
        }
        s.extend(a.data().iter().map(|&v| v as f64));
        l.extend(b.data().iter().map(|&v| (v >= 0.5) as u8));
    }
    evaluate_matrix(task, &s, &l, classes)
}

/// Quadratic-time reference for [`average_precision`]: every threshold is
/// evaluated by a full pass over the scores, and interpolated precision is
/// the maximum over all thresholds with at least that recall.
pub mod reference {
    pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let curve: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&th| {
                let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && l).count();
                let pred = scores.iter().filter(|&&s| s >= th).count();
                (tp as f64 / positives as f64, tp as f64 / pred as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &curve {
            let p = curve.iter().filter(|(r2, _)| *r2 >= r).map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        Some(ap)
    }
}
