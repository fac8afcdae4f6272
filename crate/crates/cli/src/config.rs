//! The flat TOML run configuration shared by every subcommand.
//!
//! One file describes both the synthetic stream (`generate`) and the
//! calibration run (`calibrate`). Unknown keys are rejected. Relative paths
//! resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use driftcal_core::calibrators::ScalarLoss;
use driftcal_core::pipeline::{Method, PipelineOptions};
use driftcal_core::synth::SynthConfig;
use serde::Deserialize;

pub const SEED_ENV: &str = "DRIFTCAL_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Stream directory holding `manifest.json` and the task files.
    pub stream: PathBuf,
    /// Run directory for calibration outputs.
    pub output: Option<PathBuf>,
    pub method: Option<Method>,
    pub threshold: Option<f64>,
    pub reserve_fraction: Option<f64>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub baseline_loss: Option<ScalarLoss>,
    pub intermediate: Option<bool>,
    pub max_iterations: Option<usize>,
    pub temperature_floor: Option<f64>,

    pub n_tasks: Option<usize>,
    pub classes_per_task: Option<usize>,
    pub samples_per_class_val: Option<usize>,
    pub samples_per_class_test: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub cluster_separation: Option<f64>,
    pub true_temperature_per_task: Option<Vec<f64>>,
    pub forgetting_noise_per_task: Option<Vec<f64>>,
    pub target_median_confidence: Option<f64>,
    pub min_mean_distance: Option<f64>,
    pub stream_id: Option<String>,
}

impl RunConfig {
    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
            config.seed = Some(seed);
        }
        let base = path.parent().unwrap_or(Path::new(""));
        config.stream = base.join(&config.stream);
        config.output = config.output.map(|o| base.join(o));
        Ok(config)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let n_tasks = self.n_tasks.unwrap_or(d.n_tasks);
        let cfg = SynthConfig {
            n_tasks,
            classes_per_task: self.classes_per_task.unwrap_or(d.classes_per_task),
            samples_per_class_val: self.samples_per_class_val.unwrap_or(d.samples_per_class_val),
            samples_per_class_test: self.samples_per_class_test.unwrap_or(d.samples_per_class_test),
            embedding_dim: self.embedding_dim.unwrap_or(d.embedding_dim),
            cluster_separation: self.cluster_separation.unwrap_or(d.cluster_separation),
            true_temperature_per_task: self
                .true_temperature_per_task
                .clone()
                .unwrap_or_else(|| vec![1.0; n_tasks]),
            forgetting_noise_per_task: self
                .forgetting_noise_per_task
                .clone()
                .unwrap_or_else(|| vec![0.0; n_tasks]),
            seed: self.seed.unwrap_or(d.seed),
            target_median_confidence: self.target_median_confidence.unwrap_or(d.target_median_confidence),
            min_mean_distance: self.min_mean_distance.unwrap_or(d.min_mean_distance),
            stream_id: self.stream_id.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self, method: Option<Method>) -> Result<PipelineOptions> {
        let d = PipelineOptions::default();
        let mut fit = d.fit;
        if let Some(n) = self.max_iterations {
            if n == 0 {
                bail!("max_iterations must be at least 1");
            }
            fit.optimizer.max_iterations = n;
        }
        if let Some(floor) = self.temperature_floor {
            if floor.is_nan() || floor <= 0.0 {
                bail!("temperature_floor must be positive, got {floor}");
            }
            fit.temperature_floor = floor;
        }
        let options = PipelineOptions {
            method: method.or(self.method).unwrap_or(d.method),
            threshold: self.threshold.unwrap_or(d.threshold),
            reserve_fraction: self.reserve_fraction.unwrap_or(d.reserve_fraction),
            bins: self.bins.unwrap_or(d.bins),
            seed: self.seed.unwrap_or(d.seed),
            fit,
            baseline_loss: self.baseline_loss.unwrap_or(d.baseline_loss),
            intermediate: self.intermediate.unwrap_or(d.intermediate),
        };
        options.validate()?;
        Ok(options)
    }

    /// The configured run directory, or `runs/<method>` beside the stream.
    pub fn output_dir(&self, method: Method) -> PathBuf {
        self.output.clone().unwrap_or_else(|| {
            let parent = self.stream.parent().unwrap_or(Path::new(""));
            parent.join("runs").join(method.as_str())
        })
    }
}
