//! The per-task calibration loop and its on-disk outputs.
//!
//! After each task the buffer is updated and the selected method is refitted;
//! then every test split seen so far is evaluated before and after
//! calibration. The end-of-stream evaluation is the headline result; earlier
//! evaluations are kept as labelled intermediate stages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrators::{
    fit_dats, fit_single_temperature, DatsModel, FitConfig, FitDiagnostics, FitSource, ScalarLoss,
    ScalarTemperatureModel,
};
use crate::error::{Error, Result};
use crate::math::softmax_scaled;
use crate::metrics::{continual_report, task_metrics, CalibrationReport, TaskMetrics, DEFAULT_BINS};
use crate::prototype::{
    assign_distance_scores, buffer_prototypes, current_task_prototypes, score_buffer_records, similarity_matrix,
    ClassPrototype, DistanceScoreTable, ScorePair,
};
use crate::stream::{write_atomic, CalibrationBuffer, ClassId, SampleRecord, Split, Stream, TaskDump, TaskId};
use crate::testtime::{calibrate_test_set, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uncalibrated,
    Ts,
    Rc,
    Dats,
    PerTaskOracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Uncalibrated,
        Method::Ts,
        Method::Rc,
        Method::Dats,
        Method::PerTaskOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Uncalibrated => "uncalibrated",
            Method::Ts => "ts",
            Method::Rc => "rc",
            Method::Dats => "dats",
            Method::PerTaskOracle => "per_task_oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub method: Method,
    pub threshold: f64,
    pub reserve_fraction: f64,
    pub bins: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub baseline_loss: ScalarLoss,
    /// Fit and evaluate after every task, not only at the end.
    pub intermediate: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            method: Method::Dats,
            threshold: DEFAULT_THRESHOLD,
            reserve_fraction: 0.5,
            bins: DEFAULT_BINS,
            seed: 0,
            fit: FitConfig::default(),
            baseline_loss: ScalarLoss::Nll,
            intermediate: true,
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidInput(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if !(self.reserve_fraction > 0.0 && self.reserve_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "reserve_fraction {} outside (0, 1]",
                self.reserve_fraction
            )));
        }
        if self.bins == 0 {
            return Err(Error::InvalidInput("bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// The temperature applied to one task's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureTrace {
    pub task_id: TaskId,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative_classes: Option<Vec<ClassId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_test: Option<f64>,
}

impl TemperatureTrace {
    fn scalar(task_id: TaskId, temperature: f64) -> Self {
        Self {
            task_id,
            temperature,
            representative_classes: None,
            coverage: None,
            d_test: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLabel {
    Intermediate,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub after_task: TaskId,
    pub label: StageLabel,
    /// Absent when no test split seen so far has records.
    pub report: Option<CalibrationReport>,
    pub temperatures: Vec<TemperatureTrace>,
    pub fits: Vec<FitDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stream_id: String,
    pub method: Method,
    pub threshold: f64,
    pub reserve_fraction: f64,
    pub bins: usize,
    pub seed: u64,
    pub report: CalibrationReport,
    pub temperatures: Vec<TemperatureTrace>,
    pub stages: Vec<StageReport>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Identity,
    Scalar(ScalarTemperatureModel),
    PerTask(BTreeMap<TaskId, ScalarTemperatureModel>),
    Dats(DatsModel),
}

/// Calibrated probabilities of one test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub task_id: TaskId,
    pub label: ClassId,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub report: RunReport,
    pub model: FittedModel,
    pub distances: Option<DistanceScoreTable>,
    pub outputs: Vec<OutputRecord>,
}

fn padded(records: &[SampleRecord], width: usize) -> (Vec<Vec<f64>>, Vec<ClassId>) {
    records.iter().map(|r| (r.padded_logits(width), r.label)).unzip()
}

struct Evaluation {
    report: Option<CalibrationReport>,
    temperatures: Vec<TemperatureTrace>,
    outputs: Vec<OutputRecord>,
}

/// Evaluates each non-empty test split with the probabilities `post` returns.
fn evaluate_tasks<F>(
    tasks: &[TaskDump],
    width: usize,
    bins: usize,
    method: &str,
    keep_outputs: bool,
    mut post: F,
) -> Result<Evaluation>
where
    F: FnMut(&TaskDump) -> Result<(Vec<Vec<f64>>, TemperatureTrace)>,
{
    let mut pre_metrics: Vec<TaskMetrics> = Vec::new();
    let mut post_metrics: Vec<TaskMetrics> = Vec::new();
    let mut temperatures = Vec::new();
    let mut outputs = Vec::new();
    for dump in tasks.iter().filter(|d| !d.test().is_empty()) {
        let test = dump.test();
        let labels: Vec<ClassId> = test.iter().map(|r| r.label).collect();
        let pre: Vec<Vec<f64>> = test.iter().map(|r| softmax_scaled(&r.padded_logits(width), 1.0)).collect();
        let (post_probs, trace) = post(dump)?;
        let stage = Error::at(dump.task_id(), "metrics");
        pre_metrics.push(task_metrics(&pre, &labels, dump.task_id(), bins).map_err(stage)?);
        post_metrics.push(task_metrics(&post_probs, &labels, dump.task_id(), bins).map_err(stage)?);
        temperatures.push(trace);
        if keep_outputs {
            outputs.extend(test.iter().zip(pre).zip(post_probs).map(|((r, pre), post)| OutputRecord {
                id: r.sample_id.clone(),
                task_id: dump.task_id(),
                label: r.label,
                pre,
                post,
            }));
        }
    }
    let report = if pre_metrics.is_empty() {
        None
    } else {
        Some(continual_report(&pre_metrics, &post_metrics, method)?)
    };
    Ok(Evaluation {
        report,
        temperatures,
        outputs,
    })
}

fn scalar_post(dump: &TaskDump, width: usize, temperature: f64) -> (Vec<Vec<f64>>, TemperatureTrace) {
    let probs = dump
        .test()
        .iter()
        .map(|r| softmax_scaled(&r.padded_logits(width), temperature))
        .collect();
    (probs, TemperatureTrace::scalar(dump.task_id(), temperature))
}

/// Test-time DATS calibration of every non-empty test split in `tasks`.
pub fn evaluate_dats(
    tasks: &[TaskDump],
    model: &DatsModel,
    table: &DistanceScoreTable,
    threshold: f64,
    width: usize,
    bins: usize,
    keep_outputs: bool,
) -> Result<(Option<CalibrationReport>, Vec<TemperatureTrace>, Vec<OutputRecord>)> {
    let eval = evaluate_tasks(tasks, width, bins, Method::Dats.as_str(), keep_outputs, |dump| {
        let (cal, probs) = calibrate_test_set(dump.test(), model, table, threshold, width)
            .map_err(Error::at(dump.task_id(), "test_time"))?;
        let trace = TemperatureTrace {
            task_id: dump.task_id(),
            temperature: cal.temperature,
            representative_classes: Some(cal.representative.classes),
            coverage: Some(cal.representative.coverage_achieved),
            d_test: Some(cal.d_test),
        };
        Ok((probs, trace))
    })?;
    Ok((eval.report, eval.temperatures, eval.outputs))
}

struct StageFit {
    model: FittedModel,
    distances: Option<DistanceScoreTable>,
    fits: Vec<(String, FitDiagnostics)>,
}

fn fit_stage(
    seen: &[TaskDump],
    buffer: &CalibrationBuffer,
    width: usize,
    options: &PipelineOptions,
) -> Result<StageFit> {
    let current = seen.last().expect("at least one task");
    let t = current.task_id();
    let fit_err = Error::at(t, "fit");
    let scalar = |records: &[SampleRecord], source: FitSource| {
        let (z, y) = padded(records, width);
        fit_single_temperature(&z, &y, source, options.baseline_loss, &options.fit)
    };
    Ok(match options.method {
        Method::Uncalibrated => StageFit {
            model: FittedModel::Identity,
            distances: None,
            fits: Vec::new(),
        },
        Method::Ts => {
            let (m, d) = scalar(current.val(), FitSource::CurrentVal).map_err(fit_err)?;
            StageFit {
                model: FittedModel::Scalar(m),
                distances: None,
                fits: vec![(format!("task {t} current validation"), d)],
            }
        }
        Method::Rc => {
            let records: Vec<SampleRecord> = buffer.records().cloned().collect();
            let (m, d) = scalar(&records, FitSource::CalibrationBuffer).map_err(fit_err)?;
            StageFit {
                model: FittedModel::Scalar(m),
                distances: None,
                fits: vec![(format!("task {t} calibration buffer"), d)],
            }
        }
        Method::PerTaskOracle => {
            let mut models = BTreeMap::new();
            let mut fits = Vec::new();
            for dump in seen {
                let (m, d) = scalar(dump.val(), FitSource::PerTaskOracle)
                    .map_err(Error::at(t, "fit"))?;
                models.insert(dump.task_id(), m);
                fits.push((format!("task {t} oracle for task {}", dump.task_id()), d));
            }
            StageFit {
                model: FittedModel::PerTask(models),
                distances: None,
                fits,
            }
        }
        Method::Dats => {
            let stage = Error::at(t, "prototypes");
            let current_protos = current_task_prototypes(current).map_err(stage)?;
            let buffer_protos = buffer_prototypes(buffer).map_err(stage)?;
            let stage = Error::at(t, "scores");
            let sim = similarity_matrix(&current_protos, &buffer_protos).map_err(stage)?;
            let table = assign_distance_scores(&sim, &buffer_protos).map_err(stage)?;
            let pairs = score_buffer_records(buffer, &table).map_err(stage)?;
            let z: Vec<Vec<f64>> = pairs.iter().map(|(r, _)| r.padded_logits(width)).collect();
            let y: Vec<ClassId> = pairs.iter().map(|(r, _)| r.label).collect();
            let d: Vec<f64> = pairs.iter().map(|(_, s)| *s).collect();
            let (model, diag) = fit_dats(&z, &y, &d, &options.fit).map_err(fit_err)?;
            StageFit {
                model: FittedModel::Dats(model),
                distances: Some(table),
                fits: vec![(format!("task {t} distance-aware"), diag)],
            }
        }
    })
}

fn evaluate_stage(
    seen: &[TaskDump],
    fit: &StageFit,
    width: usize,
    options: &PipelineOptions,
    keep_outputs: bool,
) -> Result<Evaluation> {
    let method = options.method.as_str();
    match &fit.model {
        FittedModel::Identity => evaluate_tasks(seen, width, options.bins, method, keep_outputs, |dump| {
            Ok(scalar_post(dump, width, 1.0))
        }),
        FittedModel::Scalar(m) => evaluate_tasks(seen, width, options.bins, method, keep_outputs, |dump| {
            Ok(scalar_post(dump, width, m.temperature))
        }),
        FittedModel::PerTask(models) => evaluate_tasks(seen, width, options.bins, method, keep_outputs, |dump| {
            let m = models
                .get(&dump.task_id())
                .ok_or_else(|| Error::InvalidInput(format!("no oracle temperature for task {}", dump.task_id())))?;
            Ok(scalar_post(dump, width, m.temperature))
        }),
        FittedModel::Dats(model) => {
            let table = fit.distances.as_ref().expect("dats stage carries its distance table");
            let (report, temperatures, outputs) =
                evaluate_dats(seen, model, table, options.threshold, width, options.bins, keep_outputs)?;
            Ok(Evaluation {
                report,
                temperatures,
                outputs,
            })
        }
    }
}

/// Runs the selected method over the whole stream.
pub fn run_pipeline(stream: &Stream, options: &PipelineOptions) -> Result<RunResult> {
    options.validate()?;
    let tasks = stream.tasks();
    if tasks.is_empty() {
        return Err(Error::Data("stream has no tasks".into()));
    }
    let mut buffer = CalibrationBuffer::new(options.reserve_fraction, options.seed)?;
    let mut stages = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = true;
    let mut last = None;

    for (i, dump) in tasks.iter().enumerate() {
        let t = dump.task_id();
        buffer = buffer.update(dump).map_err(Error::at(t, "buffer"))?;
        debug_assert!(buffer.records().all(|r| r.split == Split::Val));
        let is_final = i + 1 == tasks.len();
        if !is_final && !options.intermediate {
            continue;
        }
        let seen = &tasks[..=i];
        let width = dump.logit_width();
        let fit = fit_stage(seen, &buffer, width, options)?;
        for (scope, diag) in &fit.fits {
            if !diag.converged {
                converged = false;
                warnings.push(format!(
                    "{scope}: fit stopped after {} iterations without converging (projected gradient {:e})",
                    diag.iterations, diag.gradient_norm_final
                ));
            }
        }
        let eval = evaluate_stage(seen, &fit, width, options, is_final)?;
        stages.push(StageReport {
            after_task: t,
            label: if is_final { StageLabel::Final } else { StageLabel::Intermediate },
            report: eval.report.clone(),
            temperatures: eval.temperatures.clone(),
            fits: fit.fits.iter().map(|(_, d)| *d).collect(),
        });
        if is_final {
            last = Some((fit, eval));
        }
    }

    let (fit, eval) = last.expect("final stage always runs");
    let final_task = tasks.last().expect("non-empty").task_id();
    let report = eval
        .report
        .ok_or_else(|| Error::at(final_task, "metrics")(Error::Data("no test records to evaluate".into())))?;
    Ok(RunResult {
        report: RunReport {
            stream_id: stream.stream_id().to_string(),
            method: options.method,
            threshold: options.threshold,
            reserve_fraction: options.reserve_fraction,
            bins: options.bins,
            seed: options.seed,
            report,
            temperatures: eval.temperatures,
            stages,
            converged,
            warnings,
        },
        model: fit.model,
        distances: fit.distances,
        outputs: eval.outputs,
    })
}

/// Recomputes pre/post metrics from persisted per-record probabilities.
pub fn evaluate_outputs(outputs: &[OutputRecord], method: &str, bins: usize) -> Result<CalibrationReport> {
    let mut by_task: BTreeMap<TaskId, Vec<&OutputRecord>> = BTreeMap::new();
    for o in outputs {
        by_task.entry(o.task_id).or_default().push(o);
    }
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for (&task, records) in &by_task {
        let labels: Vec<ClassId> = records.iter().map(|r| r.label).collect();
        let p: Vec<Vec<f64>> = records.iter().map(|r| r.pre.clone()).collect();
        let q: Vec<Vec<f64>> = records.iter().map(|r| r.post.clone()).collect();
        pre.push(task_metrics(&p, &labels, task, bins)?);
        post.push(task_metrics(&q, &labels, task, bins)?);
    }
    continual_report(&pre, &post, method)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const BINS_CSV: &str = "bins.csv";
pub const TEMPERATURES_CSV: &str = "temperatures.csv";
pub const OUTPUTS_JSONL: &str = "outputs.jsonl";
pub const MODEL_JSON: &str = "model.json";
pub const DISTANCES_JSON: &str = "distances.json";
pub const PROTOTYPES_JSON: &str = "prototypes.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: TaskId,
    pub method: String,
    pub acc: f64,
    pub nll: f64,
    pub ece_pre: f64,
    pub ece_post: f64,
    pub delta_ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub task_id: TaskId,
    pub method: String,
    pub stage: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub task_id: TaskId,
    pub method: String,
    pub temperature: f64,
    pub d_test: Option<f64>,
    pub coverage: Option<f64>,
    /// Class ids joined by `;`.
    pub representative_classes: String,
}

pub fn report_rows(report: &CalibrationReport) -> Vec<ReportRow> {
    report
        .per_task
        .iter()
        .map(|p| ReportRow {
            task_id: p.task_id,
            method: report.method_name.clone(),
            acc: p.post.accuracy,
            nll: p.post.nll,
            ece_pre: p.pre.ece,
            ece_post: p.post.ece,
            delta_ece: p.delta_ece(),
        })
        .collect()
}

pub fn bin_rows(report: &CalibrationReport) -> Vec<BinRow> {
    let mut rows = Vec::new();
    for p in &report.per_task {
        for (stage, m) in [("pre", &p.pre), ("post", &p.post)] {
            for (b, stat) in m.bins.bins.iter().enumerate() {
                rows.push(BinRow {
                    task_id: p.task_id,
                    method: report.method_name.clone(),
                    stage: stage.into(),
                    bin: b,
                    lower: m.bins.edges[b],
                    upper: m.bins.edges[b + 1],
                    count: stat.count,
                    mean_confidence: stat.mean_confidence,
                    accuracy: stat.accuracy,
                });
            }
        }
    }
    rows
}

pub fn temperature_rows(method: Method, traces: &[TemperatureTrace]) -> Vec<TemperatureRow> {
    traces
        .iter()
        .map(|t| TemperatureRow {
            task_id: t.task_id,
            method: method.as_str().into(),
            temperature: t.temperature,
            d_test: t.d_test,
            coverage: t.coverage,
            representative_classes: t
                .representative_classes
                .as_ref()
                .map(|cs| cs.iter().map(ClassId::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
        })
        .collect()
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn outputs_jsonl(outputs: &[OutputRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for o in outputs {
        out.extend(serde_json::to_vec(o)?);
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_outputs(path: &Path) -> Result<Vec<OutputRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PerTaskModelJson<'a> {
    tasks: &'a BTreeMap<TaskId, ScalarTemperatureModel>,
}

#[derive(Serialize)]
struct IdentityModelJson {
    temperature: f64,
    source: &'static str,
}

pub fn model_json(model: &FittedModel) -> Result<Vec<u8>> {
    match model {
        FittedModel::Identity => json_bytes(&IdentityModelJson {
            temperature: 1.0,
            source: "identity",
        }),
        FittedModel::Scalar(m) => json_bytes(m),
        FittedModel::PerTask(tasks) => json_bytes(&PerTaskModelJson { tasks }),
        FittedModel::Dats(m) => json_bytes(m),
    }
}

/// Writes report, CSV exports, per-record outputs and the fitted model into `dir`.
pub fn emit_run(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &result.report;
    write_atomic(&dir.join(REPORT_JSON), &json_bytes(r)?)?;
    write_atomic(&dir.join(REPORT_CSV), &csv_bytes(&report_rows(&r.report))?)?;
    write_atomic(&dir.join(BINS_CSV), &csv_bytes(&bin_rows(&r.report))?)?;
    write_atomic(
        &dir.join(TEMPERATURES_CSV),
        &csv_bytes(&temperature_rows(r.method, &r.temperatures))?,
    )?;
    write_atomic(&dir.join(OUTPUTS_JSONL), &outputs_jsonl(&result.outputs)?)?;
    write_atomic(&dir.join(MODEL_JSON), &model_json(&result.model)?)?;
    if let Some(table) = &result.distances {
        write_atomic(&dir.join(DISTANCES_JSON), &json_bytes(&table.audit())?)?;
        write_atomic(&dir.join(PROTOTYPES_JSON), &json_bytes(&table.prototypes)?)?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn read_run_report(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_JSON))
}

/// Reloads the fitted distance-aware model and its score table from a run directory.
pub fn load_dats_artifacts(dir: &Path) -> Result<(DatsModel, DistanceScoreTable)> {
    let model: DatsModel = read_json(&dir.join(MODEL_JSON))?;
    let audit: BTreeMap<ClassId, ScorePair> = read_json(&dir.join(DISTANCES_JSON))?;
    let prototypes: BTreeMap<ClassId, ClassPrototype> = read_json(&dir.join(PROTOTYPES_JSON))?;
    let table = DistanceScoreTable {
        scores: audit.iter().map(|(&c, s)| (c, s.normalized)).collect(),
        raw_scores: audit.iter().map(|(&c, s)| (c, s.raw)).collect(),
        prototypes,
    };
    Ok((model, table))
}
