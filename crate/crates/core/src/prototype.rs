//! Class prototypes and per-class distance scores.
//!
//! Each class is summarised by the mean of its penultimate-layer embeddings.
//! Buffer classes are scored by their smallest cosine distance to any class
//! of the current task, then min-max normalised over the buffer so the
//! closest class sits at 0 and the farthest at 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine, squared_norm};
use crate::stream::{CalibrationBuffer, ClassId, SampleRecord, TaskDump};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    pub mean_embedding: Vec<f64>,
    pub support: usize,
}

impl ClassPrototype {
    pub fn dim(&self) -> usize {
        self.mean_embedding.len()
    }
}

/// Componentwise mean embedding of samples that all share one label.
pub fn compute_prototype<'a, I>(samples: I) -> Result<ClassPrototype>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut iter = samples.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidInput("cannot build a prototype from zero samples".into()))?;
    let class_id = first.label;
    let mut sum = first.embedding.clone();
    let mut support = 1usize;
    for s in iter {
        if s.label != class_id {
            return Err(Error::InvalidInput(format!(
                "prototype samples mix labels {class_id} and {}",
                s.label
            )));
        }
        if s.embedding.len() != sum.len() {
            return Err(Error::InvalidInput(format!(
                "sample {} has embedding length {}, expected {}",
                s.sample_id,
                s.embedding.len(),
                sum.len()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(&s.embedding) {
            *acc += v;
        }
        support += 1;
    }
    let n = support as f64;
    let mean_embedding: Vec<f64> = sum.into_iter().map(|v| v / n).collect();
    if !mean_embedding.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!("class {class_id}: non-finite prototype")));
    }
    if squared_norm(&mean_embedding) == 0.0 {
        return Err(Error::DegeneratePrototype(class_id));
    }
    Ok(ClassPrototype {
        class_id,
        mean_embedding,
        support,
    })
}

/// Prototypes of the current task's classes from its validation split.
pub fn current_task_prototypes(dump: &TaskDump) -> Result<Vec<ClassPrototype>> {
    dump.class_set()
        .iter()
        .map(|&c| {
            compute_prototype(dump.val_of_class(c)).map_err(|e| match e {
                Error::InvalidInput(_) => Error::Data(format!(
                    "task {}: class {c} has no validation records",
                    dump.task_id()
                )),
                other => other,
            })
        })
        .collect()
}

/// Prototypes of every buffer class, computed from buffer records only.
pub fn buffer_prototypes(buffer: &CalibrationBuffer) -> Result<Vec<ClassPrototype>> {
    buffer
        .classes()
        .map(|c| compute_prototype(buffer.class_view(c)?))
        .collect()
}

/// Cosine similarities between current-task (rows) and buffer (columns)
/// prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<ClassId>,
    pub cols: Vec<ClassId>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }
}

pub fn similarity_matrix(current: &[ClassPrototype], buffer: &[ClassPrototype]) -> Result<SimilarityMatrix> {
    if current.is_empty() || buffer.is_empty() {
        return Err(Error::InvalidInput(
            "similarity matrix needs at least one current and one buffer prototype".into(),
        ));
    }
    let dim = current[0].dim();
    if let Some(p) = current.iter().chain(buffer).find(|p| p.dim() != dim) {
        return Err(Error::InvalidInput(format!(
            "prototype of class {} has dimension {}, expected {dim}",
            p.class_id,
            p.dim()
        )));
    }
    let values = current
        .iter()
        .map(|c| {
            buffer
                .iter()
                .map(|b| cosine(&c.mean_embedding, &b.mean_embedding))
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        rows: current.iter().map(|p| p.class_id).collect(),
        cols: buffer.iter().map(|p| p.class_id).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub raw: f64,
    pub normalized: f64,
}

/// Normalised distance score per buffer class plus the prototypes used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceScoreTable {
    pub scores: BTreeMap<ClassId, f64>,
    pub raw_scores: BTreeMap<ClassId, f64>,
    pub prototypes: BTreeMap<ClassId, ClassPrototype>,
}

impl DistanceScoreTable {
    pub fn score(&self, class: ClassId) -> Result<f64> {
        self.scores.get(&class).copied().ok_or(Error::MissingClass(class))
    }

    /// The `{class_id: {raw, normalized}}` audit view.
    pub fn audit(&self) -> BTreeMap<ClassId, ScorePair> {
        self.scores
            .iter()
            .map(|(&c, &normalized)| {
                (
                    c,
                    ScorePair {
                        raw: self.raw_scores[&c],
                        normalized,
                    },
                )
            })
            .collect()
    }
}

/// Minimum cosine distance of each buffer class to the current classes,
/// min-max normalised over the buffer.
///
/// When all raw scores coincide every normalised score is 0, which reduces
/// the temperature model to its base temperature.
pub fn assign_distance_scores(sim: &SimilarityMatrix, buffer: &[ClassPrototype]) -> Result<DistanceScoreTable> {
    if sim.cols.len() != buffer.len() || sim.cols.iter().zip(buffer).any(|(c, p)| *c != p.class_id) {
        return Err(Error::InvalidInput(
            "similarity columns do not match the buffer prototypes".into(),
        ));
    }
    let raw: Vec<f64> = (0..sim.cols.len())
        .map(|j| {
            (0..sim.rows.len())
                .map(|i| 1.0 - sim.get(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;

    let mut scores = BTreeMap::new();
    let mut raw_scores = BTreeMap::new();
    let mut prototypes = BTreeMap::new();
    for ((&class, &r), proto) in sim.cols.iter().zip(&raw).zip(buffer) {
        let normalized = if range > 0.0 { ((r - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        scores.insert(class, normalized);
        raw_scores.insert(class, r);
        prototypes.insert(class, proto.clone());
    }
    Ok(DistanceScoreTable {
        scores,
        raw_scores,
        prototypes,
    })
}

/// Prototypes, similarity and scores for one task in a single call.
pub fn score_buffer_classes(current: &TaskDump, buffer: &CalibrationBuffer) -> Result<DistanceScoreTable> {
    let current_protos = current_task_prototypes(current)?;
    let buffer_protos = buffer_prototypes(buffer)?;
    let sim = similarity_matrix(&current_protos, &buffer_protos)?;
    assign_distance_scores(&sim, &buffer_protos)
}

/// Pairs every buffer record with the score of its class.
pub fn score_buffer_records<'a>(
    buffer: &'a CalibrationBuffer,
    table: &DistanceScoreTable,
) -> Result<Vec<(&'a SampleRecord, f64)>> {
    let mut out = Vec::with_capacity(buffer.len());
    for class in buffer.classes() {
        let score = table.score(class)?;
        out.extend(buffer.class_view(class)?.iter().map(|r| (r, score)));
    }
    Ok(out)
}
