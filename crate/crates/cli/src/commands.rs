use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use driftcal_core::metrics::CalibrationReport;
use driftcal_core::pipeline::{
    bin_rows, csv_bytes, emit_run, evaluate_dats, evaluate_outputs, load_dats_artifacts, read_outputs,
    read_run_report, report_rows, run_pipeline, temperature_rows, Method, RunReport, TemperatureTrace, BINS_CSV,
    OUTPUTS_JSONL, REPORT_CSV, REPORT_JSON, TEMPERATURES_CSV,
};
use driftcal_core::stream::{ingest_stream, write_atomic};
use driftcal_core::synth::{generate_stream, write_stream};
use driftcal_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    NotConverged,
}

impl FailureKind {
    pub fn code(self) -> u8 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::NotConverged => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: FailureKind::Config,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match e.root() {
            Error::Infeasible(_) => FailureKind::Config,
            _ => FailureKind::Data,
        };
        Self { kind, error: e.into() }
    }
}

type Outcome = Result<(), Failure>;

/// Where a run came from, recorded beside its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub stream: PathBuf,
    pub method: Method,
    pub threshold: f64,
    pub reserve_fraction: f64,
    pub bins: usize,
    pub seed: u64,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn generate(config_path: &Path) -> Outcome {
    let config = RunConfig::load(config_path).map_err(Failure::config)?;
    let synth = config.synth().map_err(Failure::config)?;
    let (stream, truth) = generate_stream(&synth)?;
    write_stream(&stream, &truth, &config.stream)?;
    let records: usize = stream.tasks().iter().map(|t| t.len()).sum();
    println!(
        "wrote stream {} ({} tasks, {records} records) to {}",
        stream.stream_id(),
        stream.tasks().len(),
        config.stream.display()
    );
    Ok(())
}

pub fn calibrate(config_path: &Path, method: Option<Method>, out: Option<PathBuf>, strict: bool) -> Outcome {
    let config = RunConfig::load(config_path).map_err(Failure::config)?;
    let options = config.pipeline(method).map_err(Failure::config)?;
    let dir = out.unwrap_or_else(|| config.output_dir(options.method));
    let stream = ingest_stream(&config.stream)?;
    let result = run_pipeline(&stream, &options)?;
    emit_run(&result, &dir)?;
    let stream_path = std::fs::canonicalize(&config.stream).unwrap_or_else(|_| config.stream.clone());
    let info = RunInfo {
        stream: stream_path,
        method: options.method,
        threshold: options.threshold,
        reserve_fraction: options.reserve_fraction,
        bins: options.bins,
        seed: options.seed,
    };
    write_atomic(&dir.join(RUN_FILE), &json_bytes(&info)?)?;
    for w in &result.report.warnings {
        log::warn!("{w}");
    }
    print_summary(&result.report.report, &result.report.temperatures);
    println!("artifacts in {}", dir.display());
    if strict && !result.report.converged {
        return Err(Failure {
            kind: FailureKind::NotConverged,
            error: anyhow!("{} fit(s) did not converge", result.report.warnings.len()),
        });
    }
    Ok(())
}

fn read_run_info(run: &Path) -> Result<RunInfo, Failure> {
    let path = run.join(RUN_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|error| Failure {
            kind: FailureKind::Data,
            error,
        })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
        .map_err(Failure::from)
}

pub fn evaluate(run: &Path, threshold: Option<f64>, bins: Option<usize>, out: Option<PathBuf>) -> Outcome {
    let info = read_run_info(run)?;
    let bins = bins.unwrap_or(info.bins);
    if bins == 0 {
        return Err(Failure::config(anyhow!("bins must be at least 1")));
    }
    let (report, temperatures) = match threshold {
        None => {
            let outputs = read_outputs(&run.join(OUTPUTS_JSONL))?;
            let report = evaluate_outputs(&outputs, info.method.as_str(), bins)?;
            let temperatures = read_run_report(run)?.temperatures;
            (report, temperatures)
        }
        Some(t) => {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Failure::config(anyhow!("threshold {t} outside (0, 1]")));
            }
            if info.method != Method::Dats {
                return Err(Failure::config(anyhow!(
                    "--threshold applies to dats runs; {} was run with {}",
                    run.display(),
                    info.method
                )));
            }
            let stream = ingest_stream(&info.stream)?;
            let (model, table) = load_dats_artifacts(run)?;
            let width = stream.tasks().last().map(|d| d.logit_width()).unwrap_or(0);
            let (report, temperatures, _) = evaluate_dats(stream.tasks(), &model, &table, t, width, bins, false)?;
            let report = report.ok_or_else(|| Error::Data("stream has no test records".into()))?;
            (report, temperatures)
        }
    };
    print_summary(&report, &temperatures);
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(|error| Failure {
                kind: FailureKind::Data,
                error,
            })?;
        write_atomic(&dir.join(REPORT_JSON), &json_bytes(&report)?)?;
        write_atomic(&dir.join(REPORT_CSV), &csv_bytes(&report_rows(&report))?)?;
        write_atomic(&dir.join(BINS_CSV), &csv_bytes(&bin_rows(&report))?)?;
        write_atomic(
            &dir.join(TEMPERATURES_CSV),
            &csv_bytes(&temperature_rows(info.method, &temperatures))?,
        )?;
        println!("report in {}", dir.display());
    }
    Ok(())
}

/// One row per run in the merged summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub stream_id: String,
    pub method: String,
    pub avg_acc: f64,
    pub avg_nll: f64,
    pub aece: f64,
    pub aece_pre: f64,
    pub delta_lece: f64,
    pub max_delta_ece: f64,
    pub max_delta_task: u32,
}

pub fn report(runs: &[PathBuf], out: &Path) -> Outcome {
    let mut loaded: Vec<(String, RunReport)> = Vec::new();
    for run in runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        loaded.push((name, read_run_report(run)?));
    }
    let mut rows = Vec::new();
    let mut bins = Vec::new();
    let mut temps = Vec::new();
    let mut summary = Vec::new();
    for (name, r) in &loaded {
        rows.extend(report_rows(&r.report));
        bins.extend(bin_rows(&r.report));
        temps.extend(temperature_rows(r.method, &r.temperatures));
        summary.push(SummaryRow {
            run: name.clone(),
            stream_id: r.stream_id.clone(),
            method: r.method.as_str().into(),
            avg_acc: r.report.avg_acc,
            avg_nll: r.report.avg_nll,
            aece: r.report.aece,
            aece_pre: r.report.aece_pre,
            delta_lece: r.report.delta_lece,
            max_delta_ece: r.report.max_delta_ece,
            max_delta_task: r.report.max_delta_task,
        });
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(|error| Failure {
            kind: FailureKind::Data,
            error,
        })?;
    write_atomic(&out.join(SUMMARY_CSV), &csv_bytes(&summary)?)?;
    write_atomic(&out.join(REPORT_CSV), &csv_bytes(&rows)?)?;
    write_atomic(&out.join(BINS_CSV), &csv_bytes(&bins)?)?;
    write_atomic(&out.join(TEMPERATURES_CSV), &csv_bytes(&temps)?)?;

    println!(
        "{:<16} {:<16} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "run", "method", "acc", "nll", "aece", "d_lece", "max_d_ece"
    );
    for s in &summary {
        println!(
            "{:<16} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>+9.4} {:>+9.4}",
            s.run, s.method, s.avg_acc, s.avg_nll, s.aece, s.delta_lece, s.max_delta_ece
        );
    }
    println!("tables in {}", out.display());
    Ok(())
}

fn print_summary(report: &CalibrationReport, temperatures: &[TemperatureTrace]) {
    println!(
        "{:>4} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
        "task", "acc", "nll", "ece_pre", "ece", "delta", "T"
    );
    for p in &report.per_task {
        let t = temperatures
            .iter()
            .find(|t| t.task_id == p.task_id)
            .map(|t| format!("{:.4}", t.temperature))
            .unwrap_or_default();
        println!(
            "{:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>+9.4} {:>8}",
            p.task_id,
            p.post.accuracy,
            p.post.nll,
            p.pre.ece,
            p.post.ece,
            p.delta_ece(),
            t
        );
    }
    println!(
        "{}: avg acc {:.4}, avg nll {:.4}, aece {:.4} (uncalibrated {:.4}), last-task delta {:+.4}, max delta {:+.4} at task {}",
        report.method_name,
        report.avg_acc,
        report.avg_nll,
        report.aece,
        report.aece_pre,
        report.delta_lece,
        report.max_delta_ece,
        report.max_delta_task
    );
}
