//! Accuracy, NLL, binned ECE and the continual summary statistics.
//!
//! ECE bins are right-closed, `((b-1)/B, b/B]`, with a confidence of exactly
//! 0 placed in the first bin. Task averages are unweighted over tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax;
use crate::stream::{ClassId, TaskId};

pub const DEFAULT_BINS: usize = 10;
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStat>,
}

impl ReliabilityBins {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

fn edge(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Zero-based bin of `confidence` under right-closed bins.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let mut b = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    // Rounding in the product can land one bin off; settle against the edges.
    while b > 0 && confidence <= edge(b, bins) {
        b -= 1;
    }
    while b + 1 < bins && confidence > edge(b + 1, bins) {
        b += 1;
    }
    b
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if confidences.is_empty() || confidences.len() != correct.len() {
        return Err(Error::InvalidInput(format!(
            "ece needs equal non-empty inputs, got {} confidences and {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("bin count must be at least 1".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!("confidence {c} outside [0, 1]")));
        }
        let b = bin_index(c, bins);
        counts[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let mut stats = Vec::with_capacity(bins);
    for b in 0..bins {
        if counts[b] == 0 {
            stats.push(BinStat {
                count: 0,
                mean_confidence: None,
                accuracy: None,
            });
            continue;
        }
        let m = counts[b] as f64;
        let conf = conf_sum[b] / m;
        let acc = hits[b] as f64 / m;
        total += (m / n) * (acc - conf).abs();
        stats.push(BinStat {
            count: counts[b],
            mean_confidence: Some(conf),
            accuracy: Some(acc),
        });
    }
    Ok((
        total,
        ReliabilityBins {
            edges: (0..=bins).map(|i| edge(i, bins)).collect(),
            bins: stats,
        },
    ))
}

/// Mean of `-ln max(p_i[y_i], 1e-12)`.
pub fn nll(probs: &[Vec<f64>], labels: &[ClassId]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "nll needs equal non-empty inputs, got {} vectors and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("probability vector sums to {sum}")));
        }
        let py = *p
            .get(y.index())
            .ok_or_else(|| Error::InvalidInput(format!("label {y} outside vector of length {}", p.len())))?;
        total -= py.max(PROBABILITY_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: TaskId,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub n: usize,
    pub mean_confidence: f64,
    pub bins: ReliabilityBins,
}

pub fn task_metrics(probs: &[Vec<f64>], labels: &[ClassId], task_id: TaskId, bins: usize) -> Result<TaskMetrics> {
    let nll = nll(probs, labels)?;
    let mut confidences = Vec::with_capacity(probs.len());
    let mut correct = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(labels) {
        let k = argmax(p);
        confidences.push(p[k]);
        correct.push(k == y.index());
    }
    let (ece, bins) = ece(&confidences, &correct, bins)?;
    let n = probs.len();
    Ok(TaskMetrics {
        task_id,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n as f64,
        nll,
        ece,
        n,
        mean_confidence: confidences.iter().sum::<f64>() / n as f64,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub task_id: TaskId,
    pub pre: TaskMetrics,
    pub post: TaskMetrics,
}

impl TaskPair {
    pub fn delta_ece(&self) -> f64 {
        self.post.ece - self.pre.ece
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method_name: String,
    pub per_task: Vec<TaskPair>,
    pub avg_acc: f64,
    pub avg_nll: f64,
    pub aece: f64,
    pub avg_acc_pre: f64,
    pub avg_nll_pre: f64,
    pub aece_pre: f64,
    pub delta_lece: f64,
    pub max_delta_ece: f64,
    /// Task attaining `max_delta_ece`; the smallest id when several do.
    pub max_delta_task: TaskId,
}

pub fn continual_report(pre: &[TaskMetrics], post: &[TaskMetrics], method: &str) -> Result<CalibrationReport> {
    if pre.is_empty() || pre.len() != post.len() {
        return Err(Error::InvalidInput(format!(
            "report needs aligned non-empty task lists, got {} and {}",
            pre.len(),
            post.len()
        )));
    }
    let mut per_task = Vec::with_capacity(pre.len());
    for (a, b) in pre.iter().zip(post) {
        if a.task_id != b.task_id {
            return Err(Error::InvalidInput(format!(
                "pre task {} aligned with post task {}",
                a.task_id, b.task_id
            )));
        }
        per_task.push(TaskPair {
            task_id: a.task_id,
            pre: a.clone(),
            post: b.clone(),
        });
    }
    per_task.sort_by_key(|p| p.task_id);
    if per_task.windows(2).any(|w| w[0].task_id == w[1].task_id) {
        return Err(Error::InvalidInput("duplicate task id in report".into()));
    }

    let k = per_task.len() as f64;
    let mean = |f: &dyn Fn(&TaskPair) -> f64| per_task.iter().map(f).sum::<f64>() / k;
    let last = per_task.last().expect("non-empty");
    let mut max_delta_ece = f64::NEG_INFINITY;
    let mut max_delta_task = 0;
    for p in &per_task {
        if p.delta_ece() > max_delta_ece {
            max_delta_ece = p.delta_ece();
            max_delta_task = p.task_id;
        }
    }
    Ok(CalibrationReport {
        method_name: method.to_string(),
        avg_acc: mean(&|p| p.post.accuracy),
        avg_nll: mean(&|p| p.post.nll),
        aece: mean(&|p| p.post.ece),
        avg_acc_pre: mean(&|p| p.pre.accuracy),
        avg_nll_pre: mean(&|p| p.pre.nll),
        aece_pre: mean(&|p| p.pre.ece),
        delta_lece: last.delta_ece(),
        max_delta_ece,
        max_delta_task,
        per_task,
    })
}
