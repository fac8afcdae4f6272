//! Synthetic class-incremental streams with known calibration ground truth.
//!
//! Every class owns a unit-norm mean; embeddings are the mean of their
//! source class plus isotropic Gaussian noise. Within a task, labels follow
//! `softmax(alpha_t * cos(x, mu_c))` over the task's classes, and a per-task
//! fraction of labels is redrawn uniformly to mimic forgetting. The
//! calibrated logits are the log of the resulting label distribution, so
//! labels are exactly calibrated under `softmax(z_cal)`. Emitted logits are
//! `m_t * (z_cal + offset)`, making `m_t` the optimal recalibration
//! temperature of task `t`.
//!
//! Classes of earlier tasks receive calibrated logits far below the task's
//! own classes. The constant offset is invisible to softmax but keeps every
//! emitted logit well above the zeros used to pad older records.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine, squared_norm};
use crate::stream::{self, ClassId, SampleRecord, Split, Stream, TaskDump, TaskId};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Added to every calibrated logit before scaling.
const LOGIT_OFFSET: f64 = 60.0;
/// Gap between the task's own classes and earlier classes in `z_cal`.
const OLD_CLASS_GAP: f64 = 40.0;
const MAX_MEAN_DRAWS: usize = 20_000;

fn default_target_confidence() -> f64 {
    0.8
}

fn default_min_mean_distance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class_val: usize,
    pub samples_per_class_test: usize,
    pub embedding_dim: usize,
    /// Smallest distance between class means divided by the noise scale.
    pub cluster_separation: f64,
    pub true_temperature_per_task: Vec<f64>,
    pub forgetting_noise_per_task: Vec<f64>,
    pub seed: u64,
    /// Median top-class probability of each task's calibrated validation logits.
    #[serde(default = "default_target_confidence")]
    pub target_median_confidence: f64,
    /// Required Euclidean distance between any two unit-norm class means.
    #[serde(default = "default_min_mean_distance")]
    pub min_mean_distance: f64,
    #[serde(default)]
    pub stream_id: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            classes_per_task: 2,
            samples_per_class_val: 500,
            samples_per_class_test: 500,
            embedding_dim: 16,
            cluster_separation: 6.0,
            true_temperature_per_task: vec![1.0; 3],
            forgetting_noise_per_task: vec![0.0; 3],
            seed: 0,
            target_median_confidence: default_target_confidence(),
            min_mean_distance: default_min_mean_distance(),
            stream_id: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_tasks == 0 {
            return bad("n_tasks must be at least 1".into());
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be at least 2".into());
        }
        if self.samples_per_class_val == 0 {
            return bad("samples_per_class_val must be at least 1".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1".into());
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad(format!("cluster_separation must be positive, got {}", self.cluster_separation));
        }
        if self.true_temperature_per_task.len() != self.n_tasks {
            return bad(format!(
                "true_temperature_per_task has {} entries for {} tasks",
                self.true_temperature_per_task.len(),
                self.n_tasks
            ));
        }
        if self.forgetting_noise_per_task.len() != self.n_tasks {
            return bad(format!(
                "forgetting_noise_per_task has {} entries for {} tasks",
                self.forgetting_noise_per_task.len(),
                self.n_tasks
            ));
        }
        if let Some(m) = self.true_temperature_per_task.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return bad(format!("true temperatures must be positive, got {m}"));
        }
        if let Some(f) = self.forgetting_noise_per_task.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return bad(format!("forgetting noise must lie in [0, 1), got {f}"));
        }
        let floor = 1.0 / self.classes_per_task as f64;
        if !(self.target_median_confidence > floor && self.target_median_confidence < 1.0) {
            return bad(format!(
                "target_median_confidence must lie in ({floor}, 1), got {}",
                self.target_median_confidence
            ));
        }
        if !(self.min_mean_distance > 0.0 && self.min_mean_distance < 2.0) {
            return bad(format!("min_mean_distance must lie in (0, 2), got {}", self.min_mean_distance));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    pub fn stream_id(&self) -> String {
        self.stream_id.clone().unwrap_or_else(|| format!("synth-{}", self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_means: BTreeMap<ClassId, Vec<f64>>,
    pub per_task_temperature: Vec<f64>,
    /// Realised share of records whose label was redrawn, per task.
    pub corrupted_fraction: Vec<f64>,
    /// Per-task similarity scale of the calibrated logits.
    pub alpha: Vec<f64>,
    pub sigma: f64,
    pub min_mean_distance: f64,
    pub logit_offset: f64,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = squared_norm(&v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn sample_class_means(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes());
    while means.len() < config.num_classes() {
        let mut placed = false;
        for _ in 0..MAX_MEAN_DRAWS {
            let candidate = unit_vector(rng, config.embedding_dim);
            if means.iter().all(|m| distance(m, &candidate) >= config.min_mean_distance) {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place {} class means at pairwise distance {} in {} dimensions; \
                 increase embedding_dim",
                config.num_classes(),
                config.min_mean_distance,
                config.embedding_dim
            )));
        }
    }
    Ok(means)
}

struct Draft {
    task: usize,
    source: usize,
    split: Split,
    index: usize,
    embedding: Vec<f64>,
    uniforms: [f64; 3],
}

fn softmax_of(values: &[f64], scale: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (scale * (v - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scale at which the median top-class probability hits `target`.
fn solve_alpha(task_cosines: &[Vec<f64>], target: f64) -> Result<f64> {
    let median_conf = |alpha: f64| {
        let mut tops: Vec<f64> = task_cosines
            .iter()
            .map(|c| softmax_of(c, alpha).into_iter().fold(0.0, f64::max))
            .collect();
        median(&mut tops)
    };
    let (mut lo, mut hi) = (1e-6f64, 1e6f64);
    if median_conf(hi) < target {
        return Err(Error::Infeasible(format!(
            "validation embeddings are too ambiguous to reach median confidence {target}"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if median_conf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

fn task_classes(task: usize, per_task: usize) -> std::ops::Range<usize> {
    task * per_task..(task + 1) * per_task
}

/// Generates the full stream and the parameters that produced it.
pub fn generate_stream(config: &SynthConfig) -> Result<(Stream, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means = sample_class_means(&mut rng, config)?;
    let realised_min = (0..means.len())
        .flat_map(|i| ((i + 1)..means.len()).map(move |j| (i, j)))
        .map(|(i, j)| distance(&means[i], &means[j]))
        .fold(f64::INFINITY, f64::min);
    let realised_min = if realised_min.is_finite() { realised_min } else { config.min_mean_distance };
    let sigma = realised_min / config.cluster_separation;

    let cpt = config.classes_per_task;
    let mut drafts = Vec::new();
    for task in 0..config.n_tasks {
        for source in task_classes(task, cpt) {
            for (split, n) in [(Split::Val, config.samples_per_class_val), (Split::Test, config.samples_per_class_test)] {
                for index in 0..n {
                    let embedding = means[source]
                        .iter()
                        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<f64>>();
                    let uniforms = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                    drafts.push(Draft {
                        task,
                        source,
                        split,
                        index,
                        embedding,
                        uniforms,
                    });
                }
            }
        }
    }
    if drafts.iter().any(|d| squared_norm(&d.embedding) == 0.0) {
        return Err(Error::Infeasible("drew a zero embedding; change the seed".into()));
    }

    let own_cosines = |d: &Draft| -> Vec<f64> {
        task_classes(d.task, cpt).map(|c| cosine(&d.embedding, &means[c])).collect()
    };
    let alpha = (0..config.n_tasks)
        .map(|task| {
            let val: Vec<Vec<f64>> = drafts
                .iter()
                .filter(|d| d.task == task && d.split == Split::Val)
                .map(own_cosines)
                .collect();
            solve_alpha(&val, config.target_median_confidence)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut per_task_records: Vec<Vec<SampleRecord>> = vec![Vec::new(); config.n_tasks];
    let mut corrupted = vec![0usize; config.n_tasks];
    for d in &drafts {
        let m = config.true_temperature_per_task[d.task];
        let f = config.forgetting_noise_per_task[d.task];
        let classes = task_classes(d.task, cpt);
        let a = alpha[d.task];
        let p0 = softmax_of(&own_cosines(d), a);

        let [u_label, u_flip, u_redraw] = d.uniforms;
        let mut slot = p0.len() - 1;
        let mut acc = 0.0;
        for (k, p) in p0.iter().enumerate() {
            acc += p;
            if u_label < acc {
                slot = k;
                break;
            }
        }
        if u_flip < f {
            slot = ((u_redraw * cpt as f64) as usize).min(cpt - 1);
            corrupted[d.task] += 1;
        }

        let width = (d.task + 1) * cpt;
        let mut logits = Vec::with_capacity(width);
        for c in 0..width {
            let z_cal = if classes.contains(&c) {
                let q = (1.0 - f) * p0[c - classes.start] + f / cpt as f64;
                q.ln()
            } else {
                -OLD_CLASS_GAP + a * (cosine(&d.embedding, &means[c]) - 1.0)
            };
            logits.push(m * (z_cal + LOGIT_OFFSET));
        }
        let split = match d.split {
            Split::Val => "val",
            Split::Test => "test",
        };
        per_task_records[d.task].push(SampleRecord {
            sample_id: format!("t{:03}-s{:04}-{split}-{:06}", d.task, d.source, d.index),
            task_id: d.task as TaskId,
            split: d.split,
            label: ClassId(classes.start + slot),
            logits,
            embedding: d.embedding.clone(),
        });
    }

    let mut dumps = Vec::with_capacity(config.n_tasks);
    let mut corrupted_fraction = Vec::with_capacity(config.n_tasks);
    for (task, mut records) in per_task_records.into_iter().enumerate() {
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        corrupted_fraction.push(corrupted[task] as f64 / records.len() as f64);
        dumps.push(TaskDump::new(
            task as TaskId,
            task_classes(task, cpt).map(ClassId).collect(),
            (task + 1) * cpt,
            config.embedding_dim,
            records,
        )?);
    }
    let stream = Stream::new(config.stream_id(), config.embedding_dim, dumps)?;
    let truth = GroundTruth {
        class_means: means.into_iter().enumerate().map(|(c, m)| (ClassId(c), m)).collect(),
        per_task_temperature: config.true_temperature_per_task.clone(),
        corrupted_fraction,
        alpha,
        sigma,
        min_mean_distance: realised_min,
        logit_offset: LOGIT_OFFSET,
    };
    Ok((stream, truth))
}

/// Writes the stream in dump format plus `ground_truth.json`.
pub fn write_stream(stream: &Stream, truth: &GroundTruth, dir: &Path) -> Result<()> {
    stream::write_stream(stream, dir)?;
    let mut text = serde_json::to_string_pretty(truth)?;
    text.push('\n');
    stream::write_atomic(&dir.join(GROUND_TRUTH_FILE), text.as_bytes())
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Index of the class whose samples `sample_id` was drawn around.
pub fn source_class(sample_id: &str) -> Option<ClassId> {
    let rest = sample_id.split('-').nth(1)?;
    rest.strip_prefix('s')?.parse().ok().map(ClassId)
}
