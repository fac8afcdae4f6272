//! Class-incremental stream data model.
//!
//! A stream is a directory holding `manifest.json` and one JSONL file per
//! task. Each task dump carries the validation and test records produced by
//! the classifier right after that task was learned, with logits as wide as
//! the number of classes seen so far.
//!
//! The [`CalibrationBuffer`] accumulates a seeded random subset of every
//! task's validation split, keyed by class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TaskId = u32;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub task_id: TaskId,
    pub split: Split,
    pub label: ClassId,
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl SampleRecord {
    /// Logits zero-padded on the right to `width`.
    ///
    /// Records from earlier tasks have narrower heads; padding keeps class
    /// indices aligned and never changes the argmax over the original classes
    /// as long as those logits are positive (the synthetic generator
    /// guarantees this, real exports usually hold it approximately).
    pub fn padded_logits(&self, width: usize) -> Vec<f64> {
        debug_assert!(width >= self.logits.len());
        let mut z = Vec::with_capacity(width);
        z.extend_from_slice(&self.logits);
        z.resize(width, 0.0);
        z
    }
}

/// One line of a task file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    split: Split,
    label: usize,
    logits: Vec<f64>,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task_id: TaskId,
    pub class_set: Vec<ClassId>,
    pub logit_width: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub stream_id: String,
    pub embedding_dim: usize,
    pub tasks: Vec<TaskEntry>,
}

/// All records of one task, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDump {
    task_id: TaskId,
    class_set: Vec<ClassId>,
    logit_width: usize,
    val: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
}

impl TaskDump {
    /// Builds a dump, checking every record against the task header.
    ///
    /// Records keep their relative order within each split.
    pub fn new(
        task_id: TaskId,
        class_set: Vec<ClassId>,
        logit_width: usize,
        embedding_dim: usize,
        records: Vec<SampleRecord>,
    ) -> Result<Self> {
        if class_set.is_empty() {
            return Err(Error::Schema(format!("task {task_id}: empty class set")));
        }
        let unique: BTreeSet<_> = class_set.iter().collect();
        if unique.len() != class_set.len() {
            return Err(Error::Schema(format!(
                "task {task_id}: duplicate class ids in class set"
            )));
        }
        if let Some(c) = class_set.iter().find(|c| c.index() >= logit_width) {
            return Err(Error::Schema(format!(
                "task {task_id}: class {c} does not fit logit width {logit_width}"
            )));
        }
        if embedding_dim == 0 {
            return Err(Error::Schema("embedding dimension must be positive".into()));
        }

        let mut ids = BTreeSet::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for record in records {
            validate_record(&record, task_id, logit_width, embedding_dim)?;
            if !ids.insert(record.sample_id.clone()) {
                return Err(Error::Schema(format!(
                    "task {task_id}: duplicate sample id {}",
                    record.sample_id
                )));
            }
            match record.split {
                Split::Val => val.push(record),
                Split::Test => test.push(record),
            }
        }

        Ok(Self {
            task_id,
            class_set,
            logit_width,
            val,
            test,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn class_set(&self) -> &[ClassId] {
        &self.class_set
    }

    pub fn logit_width(&self) -> usize {
        self.logit_width
    }

    pub fn val(&self) -> &[SampleRecord] {
        &self.val
    }

    pub fn test(&self) -> &[SampleRecord] {
        &self.test
    }

    pub fn len(&self) -> usize {
        self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validation records labelled `class`, in dump order.
    pub fn val_of_class(&self, class: ClassId) -> impl Iterator<Item = &SampleRecord> {
        self.val.iter().filter(move |r| r.label == class)
    }

    /// Both splits merged in canonical (sample id) order.
    pub fn canonical_records(&self) -> Vec<&SampleRecord> {
        let mut all: Vec<&SampleRecord> = self.val.iter().chain(&self.test).collect();
        all.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        all
    }
}

fn validate_record(
    record: &SampleRecord,
    task_id: TaskId,
    logit_width: usize,
    embedding_dim: usize,
) -> Result<()> {
    let id = &record.sample_id;
    if record.task_id != task_id {
        return Err(Error::Schema(format!(
            "sample {id}: task id {} does not match dump task {task_id}",
            record.task_id
        )));
    }
    if record.logits.len() != logit_width {
        return Err(Error::Schema(format!(
            "sample {id}: logits length {} but logit_width is {logit_width}",
            record.logits.len()
        )));
    }
    if record.embedding.len() != embedding_dim {
        return Err(Error::Schema(format!(
            "sample {id}: embedding length {} but embedding_dim is {embedding_dim}",
            record.embedding.len()
        )));
    }
    if record.label.index() >= logit_width {
        return Err(Error::Schema(format!(
            "sample {id}: label {} outside logit width {logit_width}",
            record.label
        )));
    }
    if record.logits.iter().chain(&record.embedding).any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("sample {id}: non-finite value")));
    }
    Ok(())
}

/// A fully ingested stream: tasks in order with disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    stream_id: String,
    embedding_dim: usize,
    tasks: Vec<TaskDump>,
}

impl Stream {
    pub fn new(stream_id: impl Into<String>, embedding_dim: usize, tasks: Vec<TaskDump>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut last: Option<(TaskId, usize)> = None;
        for dump in &tasks {
            if let Some((prev_id, prev_width)) = last {
                if dump.task_id <= prev_id {
                    return Err(Error::Consistency(format!(
                        "task {} listed after task {prev_id}",
                        dump.task_id
                    )));
                }
                if dump.logit_width < prev_width {
                    return Err(Error::Consistency(format!(
                        "task {}: logit width shrinks from {prev_width} to {}",
                        dump.task_id, dump.logit_width
                    )));
                }
            }
            for &c in &dump.class_set {
                if !seen.insert(c) {
                    return Err(Error::Consistency(format!(
                        "task {}: class {c} already belongs to an earlier task",
                        dump.task_id
                    )));
                }
            }
            if let Some(r) = dump.val.iter().chain(&dump.test).find(|r| r.embedding.len() != embedding_dim) {
                return Err(Error::Schema(format!(
                    "sample {}: embedding length differs from stream dimension {embedding_dim}",
                    r.sample_id
                )));
            }
            last = Some((dump.task_id, dump.logit_width));
        }
        Ok(Self {
            stream_id: stream_id.into(),
            embedding_dim,
            tasks,
        })
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn tasks(&self) -> &[TaskDump] {
        &self.tasks
    }

    pub fn task(&self, task_id: TaskId) -> Option<&TaskDump> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

pub fn task_file_name(task_id: TaskId) -> String {
    format!("task_{task_id:03}.jsonl")
}

pub fn read_manifest(dir: &Path) -> Result<StreamManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Parses and validates one task file against its manifest entry.
pub fn ingest_task_dump(path: &Path, entry: &TaskEntry, embedding_dim: usize) -> Result<TaskDump> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| {
            let message = e.to_string();
            // serde_json refuses overflowing literals such as 1e999; those are
            // non-finite values rather than a broken line.
            if message.contains("number out of range") {
                Error::Data(format!("{}:{line_no}: non-finite value", path.display()))
            } else {
                Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                }
            }
        })?;
        records.push(SampleRecord {
            sample_id: parsed.id,
            task_id: entry.task_id,
            split: parsed.split,
            label: ClassId(parsed.label),
            logits: parsed.logits,
            embedding: parsed.embedding,
        });
    }
    TaskDump::new(
        entry.task_id,
        entry.class_set.clone(),
        entry.logit_width,
        embedding_dim,
        records,
    )
}

/// Reads a whole stream directory.
///
/// Task files are parsed concurrently; cross-task checks run afterwards in
/// manifest order.
pub fn ingest_stream(dir: &Path) -> Result<Stream> {
    let manifest = read_manifest(dir)?;
    let dumps: Vec<Result<TaskDump>> = std::thread::scope(|scope| {
        let handles: Vec<_> = manifest
            .tasks
            .iter()
            .map(|entry| {
                let path = dir.join(&entry.file);
                let dim = manifest.embedding_dim;
                scope.spawn(move || ingest_task_dump(&path, entry, dim))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ingestion thread panicked"))
            .collect()
    });
    let dumps = dumps.into_iter().collect::<Result<Vec<_>>>()?;
    Stream::new(manifest.stream_id, manifest.embedding_dim, dumps)
}

pub fn manifest_for(stream: &Stream) -> StreamManifest {
    StreamManifest {
        stream_id: stream.stream_id.clone(),
        embedding_dim: stream.embedding_dim,
        tasks: stream
            .tasks
            .iter()
            .map(|t| TaskEntry {
                task_id: t.task_id,
                class_set: t.class_set.clone(),
                logit_width: t.logit_width,
                file: task_file_name(t.task_id),
            })
            .collect(),
    }
}

/// Serializes one dump as canonical JSONL (records sorted by sample id).
pub fn task_dump_jsonl(dump: &TaskDump) -> Result<String> {
    let mut out = String::new();
    for record in dump.canonical_records() {
        let line = RecordLine {
            id: record.sample_id.clone(),
            split: record.split,
            label: record.label.index(),
            logits: record.logits.clone(),
            embedding: record.embedding.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes manifest and task files into `dir`, creating it if needed.
pub fn write_stream(stream: &Stream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_for(stream);
    for (dump, entry) in stream.tasks.iter().zip(&manifest.tasks) {
        let body = task_dump_jsonl(dump)?;
        write_atomic(&dir.join(&entry.file), body.as_bytes())?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Number of records reserved from `available`: `ceil(fraction * available)`.
///
/// A relative slack of 1e-9 absorbs products such as `0.3 * 10` that land a
/// hair above an integer.
pub fn reserve_count(fraction: f64, available: usize) -> usize {
    let exact = fraction * available as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    k.clamp(1, available)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the selection of one class in one task.
///
/// Derived from the stream seed alone, so adding or removing a class never
/// changes which records another class keeps.
pub fn selection_seed(stream_seed: u64, task_id: TaskId, class: ClassId) -> u64 {
    let a = splitmix64(stream_seed);
    let b = splitmix64(a ^ u64::from(task_id));
    splitmix64(b ^ (class.index() as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Reserved validation records across tasks, keyed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBuffer {
    entries: BTreeMap<ClassId, Vec<SampleRecord>>,
    reserve_fraction: f64,
    rng_seed: u64,
    tasks: Vec<TaskId>,
}

impl CalibrationBuffer {
    pub fn new(reserve_fraction: f64, rng_seed: u64) -> Result<Self> {
        if !(reserve_fraction > 0.0 && reserve_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "reserve fraction must lie in (0, 1], got {reserve_fraction}"
            )));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            reserve_fraction,
            rng_seed,
            tasks: Vec::new(),
        })
    }

    /// Returns a new buffer with `dump`'s reserved validation records added.
    ///
    /// For each class of the task, `ceil(fraction * n)` of its `n` validation
    /// records are drawn without replacement and stored in dump order.
    pub fn update(&self, dump: &TaskDump) -> Result<Self> {
        if self.tasks.contains(&dump.task_id) {
            return Err(Error::Consistency(format!(
                "task {} already added to the calibration buffer",
                dump.task_id
            )));
        }
        if let Some(&last) = self.tasks.last() {
            if dump.task_id < last {
                return Err(Error::Consistency(format!(
                    "task {} arrives after task {last}; buffer updates must follow task order",
                    dump.task_id
                )));
            }
        }

        let mut next = self.clone();
        for &class in &dump.class_set {
            if next.entries.contains_key(&class) {
                return Err(Error::Consistency(format!(
                    "class {class} of task {} is already in the buffer",
                    dump.task_id
                )));
            }
            let pool: Vec<&SampleRecord> = dump.val_of_class(class).collect();
            if pool.is_empty() {
                return Err(Error::Data(format!(
                    "task {}: class {class} has no validation records",
                    dump.task_id
                )));
            }
            let k = reserve_count(self.reserve_fraction, pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(selection_seed(self.rng_seed, dump.task_id, class));
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            picked.sort_unstable();
            let stored = picked.into_iter().map(|i| pool[i].clone()).collect();
            next.entries.insert(class, stored);
        }
        next.tasks.push(dump.task_id);
        Ok(next)
    }

    /// Stored records of `class`, in insertion order.
    pub fn class_view(&self, class: ClassId) -> Result<&[SampleRecord]> {
        self.entries
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingClass(class))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn reserve_fraction(&self) -> f64 {
        self.reserve_fraction
    }

    /// All stored records, grouped by ascending class id.
    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.entries.values().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, split: Split, label: usize, width: usize) -> SampleRecord {
        SampleRecord {
            sample_id: id.to_string(),
            task_id: 0,
            split,
            label: ClassId(label),
            logits: vec![0.5; width],
            embedding: vec![1.0, 0.0],
        }
    }

    fn two_class_dump(task_id: TaskId, classes: [usize; 2], per_class_val: usize) -> TaskDump {
        let width = classes[1] + 1;
        let mut records = Vec::new();
        for &c in &classes {
            for i in 0..per_class_val {
                let mut r = record(&format!("t{task_id}-c{c}-v{i:03}"), Split::Val, c, width);
                r.task_id = task_id;
                records.push(r);
            }
            let mut r = record(&format!("t{task_id}-c{c}-test"), Split::Test, c, width);
            r.task_id = task_id;
            records.push(r);
        }
        TaskDump::new(task_id, classes.iter().map(|&c| ClassId(c)).collect(), width, 2, records).unwrap()
    }

    #[test]
    fn logit_width_mismatch_is_schema_error() {
        let err = TaskDump::new(0, vec![ClassId(0), ClassId(1)], 2, 2, vec![record("a", Split::Val, 0, 3)])
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn non_finite_logit_is_data_error() {
        let mut r = record("a", Split::Val, 0, 2);
        r.logits[1] = f64::NAN;
        let err = TaskDump::new(0, vec![ClassId(0), ClassId(1)], 2, 2, vec![r]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn overlapping_class_sets_are_rejected() {
        let a = two_class_dump(0, [0, 1], 2);
        let dup = two_class_dump(1, [1, 2], 2);
        let err = Stream::new("s", 2, vec![a, dup]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn reserve_count_uses_ceiling() {
        assert_eq!(reserve_count(1.0, 20), 20);
        assert_eq!(reserve_count(0.5, 20), 10);
        assert_eq!(reserve_count(0.3, 10), 3);
        assert_eq!(reserve_count(0.01, 7), 1);
        assert_eq!(reserve_count(0.51, 3), 2);
    }

    #[test]
    fn full_fraction_stores_every_val_record() {
        let dump = two_class_dump(0, [0, 1], 20);
        let buffer = CalibrationBuffer::new(1.0, 3).unwrap().update(&dump).unwrap();
        assert_eq!(buffer.class_view(ClassId(0)).unwrap().len(), 20);
        assert!(buffer.records().all(|r| r.split == Split::Val));
    }

    #[test]
    fn half_fraction_stores_exactly_half() {
        let dump = two_class_dump(0, [0, 1], 20);
        let buffer = CalibrationBuffer::new(0.5, 3).unwrap().update(&dump).unwrap();
        assert_eq!(buffer.class_view(ClassId(1)).unwrap().len(), 10);
    }

    #[test]
    fn selection_is_seeded() {
        let dump = two_class_dump(0, [0, 1], 20);
        let ids = |seed| {
            CalibrationBuffer::new(0.3, seed)
                .unwrap()
                .update(&dump)
                .unwrap()
                .records()
                .map(|r| r.sample_id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(11), ids(11));
        assert_ne!(ids(11), ids(12));
    }

    #[test]
    fn duplicate_task_is_rejected() {
        let dump = two_class_dump(0, [0, 1], 4);
        let buffer = CalibrationBuffer::new(1.0, 0).unwrap().update(&dump).unwrap();
        assert!(matches!(buffer.update(&dump), Err(Error::Consistency(_))));
    }

    #[test]
    fn class_without_val_records_is_named() {
        let records = vec![record("a", Split::Val, 0, 2), record("b", Split::Test, 1, 2)];
        let dump = TaskDump::new(0, vec![ClassId(0), ClassId(1)], 2, 2, records).unwrap();
        let err = CalibrationBuffer::new(1.0, 0).unwrap().update(&dump).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn class_view_of_unknown_class_fails() {
        let buffer = CalibrationBuffer::new(1.0, 0).unwrap();
        assert!(matches!(buffer.class_view(ClassId(4)), Err(Error::MissingClass(_))));
    }

    #[test]
    fn views_keep_task_boundaries() {
        let first = two_class_dump(0, [0, 1], 5);
        let second = two_class_dump(1, [2, 3], 5);
        let buffer = CalibrationBuffer::new(1.0, 9)
            .unwrap()
            .update(&first)
            .unwrap()
            .update(&second)
            .unwrap();
        assert_eq!(buffer.num_classes(), 4);
        let view = buffer.class_view(ClassId(1)).unwrap();
        assert_eq!(view.len(), 5);
        assert!(view.iter().all(|r| r.task_id == 0 && r.label == ClassId(1)));
    }

    #[test]
    fn padding_extends_with_zeros() {
        let r = record("a", Split::Val, 0, 2);
        assert_eq!(r.padded_logits(4), vec![0.5, 0.5, 0.0, 0.0]);
    }
}
