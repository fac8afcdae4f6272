//! Temperature models fitted on held-out logits.
//!
//! [`DatsModel`] is the distance-aware model: every buffer class `c` gets a
//! temperature `T(d_c) = t_base + w_c * d_c`, where `d_c` is the class's
//! normalised distance to the current task. It is fitted by minimising the
//! summed Brier score over the calibration buffer, each sample being scaled
//! by the temperature of its own (true) class.
//!
//! [`ScalarTemperatureModel`] covers the single-temperature baselines. They
//! differ only in the data they are fitted on, recorded in [`FitSource`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, LbfgsConfig};
use crate::stream::ClassId;

pub const DEFAULT_TEMPERATURE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSource {
    /// Plain temperature scaling on the current task's validation split.
    CurrentVal,
    /// One temperature on the whole calibration buffer (replayed calibration).
    CalibrationBuffer,
    /// One temperature per task on that task's own validation split.
    PerTaskOracle,
}

impl FitSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FitSource::CurrentVal => "current_val",
            FitSource::CalibrationBuffer => "calibration_buffer",
            FitSource::PerTaskOracle => "per_task_oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarLoss {
    Nll,
    Brier,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub temperature_floor: f64,
    pub optimizer: LbfgsConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            temperature_floor: DEFAULT_TEMPERATURE_FLOOR,
            optimizer: LbfgsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DatsModelJson", try_from = "DatsModelJson")]
pub struct DatsModel {
    pub t_base: f64,
    pub weights: BTreeMap<ClassId, f64>,
    pub class_distances: BTreeMap<ClassId, f64>,
    pub temperature_floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassTerm {
    w: f64,
    d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatsModelJson {
    t_base: f64,
    floor: f64,
    classes: BTreeMap<ClassId, ClassTerm>,
}

impl From<DatsModel> for DatsModelJson {
    fn from(m: DatsModel) -> Self {
        let classes = m
            .weights
            .iter()
            .map(|(&c, &w)| (c, ClassTerm { w, d: m.class_distances[&c] }))
            .collect();
        Self {
            t_base: m.t_base,
            floor: m.temperature_floor,
            classes,
        }
    }
}

impl TryFrom<DatsModelJson> for DatsModel {
    type Error = String;

    fn try_from(j: DatsModelJson) -> std::result::Result<Self, String> {
        if !(j.t_base > 0.0 && j.floor > 0.0) {
            return Err("t_base and floor must be positive".into());
        }
        Ok(Self {
            t_base: j.t_base,
            weights: j.classes.iter().map(|(&c, t)| (c, t.w)).collect(),
            class_distances: j.classes.iter().map(|(&c, t)| (c, t.d)).collect(),
            temperature_floor: j.floor,
        })
    }
}

impl DatsModel {
    /// `max(t_base + w_c * d_c, floor)`.
    pub fn temperature_for_class(&self, class: ClassId) -> Result<f64> {
        let w = self.weights.get(&class).ok_or(Error::MissingClass(class))?;
        let d = self.class_distances[&class];
        Ok((self.t_base + w * d).max(self.temperature_floor))
    }

    pub fn effective_temperatures(&self) -> BTreeMap<ClassId, f64> {
        self.weights
            .keys()
            .map(|&c| (c, self.temperature_for_class(c).expect("class from own keys")))
            .collect()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.weights.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarTemperatureModel {
    pub temperature: f64,
    #[serde(rename = "source")]
    pub fit_source: FitSource,
}

/// Brier term of one sample at temperature `t` and its derivative in `t`.
fn brier_sample(z: &[f64], label: usize, t: f64, p: &mut Vec<f64>) -> (f64, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    p.clear();
    let mut total = 0.0;
    for &zk in z {
        let e = ((zk - max) / t).exp();
        total += e;
        p.push(e);
    }
    let mut loss = 0.0;
    let mut s = 0.0;
    for (k, pk) in p.iter_mut().enumerate() {
        *pk /= total;
        let target = if k == label { 1.0 } else { 0.0 };
        let diff = *pk - target;
        loss += diff * diff;
        s += 2.0 * diff * *pk;
    }
    // dL/dT = -(1/T^2) sum_k p_k (g_k - s) z_k with g = 2 (p - e); the sum is
    // shift invariant so the max-shifted logits are used.
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        let target = if k == label { 1.0 } else { 0.0 };
        let g = 2.0 * (pk - target);
        acc += pk * (g - s) * (z[k] - max);
    }
    (loss, -acc / (t * t))
}

/// Negative log-likelihood of one sample at temperature `t` and its
/// derivative in `t`.
fn nll_sample(z: &[f64], label: usize, t: f64) -> (f64, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut weighted = 0.0;
    for &zk in z {
        let e = ((zk - max) / t).exp();
        total += e;
        weighted += e * (zk - max);
    }
    let zy = z[label] - max;
    let loss = total.ln() - zy / t;
    let mean_z = weighted / total;
    (loss, (zy - mean_z) / (t * t))
}

/// Validated, contiguous view of a labelled logit set.
struct LogitSet {
    width: usize,
    logits: Vec<f64>,
    labels: Vec<usize>,
}

impl LogitSet {
    fn new(logits: &[Vec<f64>], labels: &[ClassId]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidInput("no samples to fit on".into()));
        }
        if logits.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} logit vectors but {} labels",
                logits.len(),
                labels.len()
            )));
        }
        let width = logits[0].len();
        let mut flat = Vec::with_capacity(width * logits.len());
        for (z, y) in logits.iter().zip(labels) {
            if z.len() != width {
                return Err(Error::InvalidInput(format!(
                    "logit vectors have widths {width} and {}",
                    z.len()
                )));
            }
            if y.index() >= width {
                return Err(Error::InvalidInput(format!("label {y} outside logit width {width}")));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite logit".into()));
            }
            flat.extend_from_slice(z);
        }
        Ok(Self {
            width,
            logits: flat,
            labels: labels.iter().map(|c| c.index()).collect(),
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.width..(i + 1) * self.width]
    }

    fn distinct_labels(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Summed Brier score with per-sample temperature `t_base + w_{y_i} d_i`.
pub fn brier_loss(
    logits: &[Vec<f64>],
    labels: &[ClassId],
    distances: &[f64],
    t_base: f64,
    weights: &BTreeMap<ClassId, f64>,
    floor: f64,
) -> Result<f64> {
    brier_loss_and_gradient(logits, labels, distances, t_base, weights, floor).map(|r| r.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrierGradient {
    pub loss: f64,
    pub d_t_base: f64,
    pub d_weights: BTreeMap<ClassId, f64>,
}

/// Summed Brier score and its analytic gradient in `t_base` and each `w_c`.
pub fn brier_loss_and_gradient(
    logits: &[Vec<f64>],
    labels: &[ClassId],
    distances: &[f64],
    t_base: f64,
    weights: &BTreeMap<ClassId, f64>,
    floor: f64,
) -> Result<BrierGradient> {
    if logits.len() != labels.len() || labels.len() != distances.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} logits, {} labels, {} distances",
            logits.len(),
            labels.len(),
            distances.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    let mut p = Vec::new();
    let mut loss = 0.0;
    let mut d_t_base = 0.0;
    let mut d_weights: BTreeMap<ClassId, f64> = weights.keys().map(|&c| (c, 0.0)).collect();
    for ((z, &y), &d) in logits.iter().zip(labels).zip(distances) {
        let w = *weights.get(&y).ok_or(Error::MissingClass(y))?;
        let t = t_base + w * d;
        if t.is_nan() || t < floor {
            return Err(Error::TemperatureDomain { temperature: t, floor });
        }
        if y.index() >= z.len() {
            return Err(Error::InvalidInput(format!("label {y} outside logit width {}", z.len())));
        }
        let (l, dt) = brier_sample(z, y.index(), t, &mut p);
        loss += l;
        d_t_base += dt;
        *d_weights.get_mut(&y).expect("seeded above") += dt * d;
    }
    Ok(BrierGradient {
        loss,
        d_t_base,
        d_weights,
    })
}

/// Fits `t_base` and one weight per buffer class by minimising the Brier
/// score, starting from the identity calibrator (`t_base = 1`, `w = 0`).
///
/// Classes whose distance is 0 leave their weight unidentified; it stays at 0.
pub fn fit_dats(
    logits: &[Vec<f64>],
    labels: &[ClassId],
    distances: &[f64],
    config: &FitConfig,
) -> Result<(DatsModel, FitDiagnostics)> {
    let set = LogitSet::new(logits, labels)?;
    if distances.len() != set.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples but {} distances",
            set.len(),
            distances.len()
        )));
    }

    let mut class_distance: BTreeMap<ClassId, f64> = BTreeMap::new();
    for (&y, &d) in labels.iter().zip(distances) {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::InvalidInput(format!("distance {d} outside [0, 1]")));
        }
        match class_distance.get(&y) {
            Some(&prev) if (prev - d).abs() > 1e-12 => {
                return Err(Error::InvalidInput(format!(
                    "class {y} carries distances {prev} and {d}; scores must be constant per class"
                )));
            }
            Some(_) => {}
            None => {
                class_distance.insert(y, d);
            }
        }
    }
    if class_distance.len() < 2 {
        return Err(Error::InvalidInput(
            "distance-aware fit needs samples from at least two classes".into(),
        ));
    }

    let classes: Vec<ClassId> = class_distance.keys().copied().collect();
    let class_d: Vec<f64> = classes.iter().map(|c| class_distance[c]).collect();
    let slot: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let sample_slot: Vec<usize> = labels.iter().map(|y| slot[y]).collect();
    let floor = config.temperature_floor;
    let n = set.len() as f64;

    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut p = Vec::with_capacity(set.width);
        let mut total = 0.0;
        for (i, &j) in sample_slot.iter().enumerate() {
            let d = class_d[j];
            let t = (x[0] + x[1 + j] * d).max(floor);
            let (l, dt) = brier_sample(set.row(i), set.labels[i], t, &mut p);
            total += l;
            grad[0] += dt;
            grad[1 + j] += dt * d;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        total / n
    };
    let project = |x: &mut [f64]| {
        x[0] = x[0].max(floor);
        for (j, &d) in class_d.iter().enumerate() {
            if d > 0.0 && x[0] + x[1 + j] * d < floor {
                x[1 + j] = (floor - x[0]) / d;
            }
        }
    };

    let mut x0 = vec![0.0; 1 + classes.len()];
    x0[0] = 1.0;
    let result = optim::minimize(objective, project, x0, &config.optimizer);
    let diagnostics = FitDiagnostics {
        initial_loss: result.initial_value * n,
        final_loss: result.value * n,
        iterations: result.iterations,
        converged: result.converged,
        gradient_norm_final: result.gradient_norm,
    };
    if !diagnostics.converged {
        log::warn!(
            "distance-aware fit stopped after {} iterations without converging (|pg| = {:e})",
            diagnostics.iterations,
            diagnostics.gradient_norm_final
        );
    }

    let model = DatsModel {
        t_base: result.point[0],
        weights: classes.iter().enumerate().map(|(j, &c)| (c, result.point[1 + j])).collect(),
        class_distances: class_distance,
        temperature_floor: floor,
    };
    Ok((model, diagnostics))
}

/// Fits one temperature on the given set.
pub fn fit_single_temperature(
    logits: &[Vec<f64>],
    labels: &[ClassId],
    source: FitSource,
    loss: ScalarLoss,
    config: &FitConfig,
) -> Result<(ScalarTemperatureModel, FitDiagnostics)> {
    let set = LogitSet::new(logits, labels)?;
    if set.distinct_labels() < 2 {
        return Err(Error::InvalidInput(
            "temperature fit needs at least two distinct labels".into(),
        ));
    }
    let floor = config.temperature_floor;
    let n = set.len() as f64;
    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let t = x[0].max(floor);
        let mut p = Vec::with_capacity(set.width);
        let mut total = 0.0;
        let mut dt_total = 0.0;
        for i in 0..set.len() {
            let (l, dt) = match loss {
                ScalarLoss::Nll => nll_sample(set.row(i), set.labels[i], t),
                ScalarLoss::Brier => brier_sample(set.row(i), set.labels[i], t, &mut p),
            };
            total += l;
            dt_total += dt;
        }
        grad[0] = dt_total / n;
        total / n
    };
    let project = |x: &mut [f64]| x[0] = x[0].max(floor);
    let result = optim::minimize(objective, project, vec![1.0], &config.optimizer);
    let diagnostics = FitDiagnostics {
        initial_loss: result.initial_value * n,
        final_loss: result.value * n,
        iterations: result.iterations,
        converged: result.converged,
        gradient_norm_final: result.gradient_norm,
    };
    if !diagnostics.converged {
        log::warn!(
            "temperature fit ({}) stopped after {} iterations without converging",
            source.as_str(),
            diagnostics.iterations
        );
    }
    Ok((
        ScalarTemperatureModel {
            temperature: result.point[0],
            fit_source: source,
        },
        diagnostics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(i: usize) -> ClassId {
        ClassId(i)
    }

    #[test]
    fn saturated_sample_has_near_zero_loss() {
        let w = BTreeMap::from([(c(0), 0.0), (c(1), 0.0)]);
        let l = brier_loss(&[vec![30.0, -30.0]], &[c(0)], &[0.0], 1.0, &w, 1e-3).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn flat_logits_give_half() {
        let w = BTreeMap::from([(c(0), 0.0)]);
        for t in [0.3, 1.0, 7.0] {
            let l = brier_loss(&[vec![0.0, 0.0]], &[c(0)], &[0.0], t, &w, 1e-3).unwrap();
            assert!((l - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_loss_is_additive() {
        let w = BTreeMap::from([(c(0), 0.4), (c(1), -0.2)]);
        let z = vec![vec![1.0, -0.5], vec![0.2, 2.0], vec![-1.0, 0.3]];
        let y = vec![c(0), c(1), c(0)];
        let d = vec![0.5, 1.0, 0.5];
        let total = brier_loss(&z, &y, &d, 1.3, &w, 1e-3).unwrap();
        let parts: f64 = (0..3)
            .map(|i| brier_loss(&z[i..=i], &y[i..=i], &d[i..=i], 1.3, &w, 1e-3).unwrap())
            .sum();
        assert!((total - parts).abs() < 1e-14);
    }

    #[test]
    fn temperature_below_floor_is_domain_error() {
        let w = BTreeMap::from([(c(0), -2.0)]);
        let err = brier_loss(&[vec![1.0, 0.0]], &[c(0)], &[0.5], 0.5, &w, 1e-3).unwrap_err();
        assert!(matches!(err, Error::TemperatureDomain { .. }));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let w = BTreeMap::from([(c(0), 0.0)]);
        assert!(brier_loss(&[vec![1.0, 0.0]], &[c(0)], &[], 1.0, &w, 1e-3).is_err());
    }

    #[test]
    fn class_temperature_rule() {
        let model = DatsModel {
            t_base: 1.2,
            weights: BTreeMap::from([(c(0), 0.5), (c(1), 3.0)]),
            class_distances: BTreeMap::from([(c(0), 0.4), (c(1), 0.0)]),
            temperature_floor: 1e-3,
        };
        assert!((model.temperature_for_class(c(0)).unwrap() - 1.4).abs() < 1e-15);
        assert_eq!(model.temperature_for_class(c(1)).unwrap(), 1.2);
        assert!(model.temperature_for_class(c(9)).is_err());

        let floored = DatsModel {
            t_base: 0.2,
            weights: BTreeMap::from([(c(0), -1.0)]),
            class_distances: BTreeMap::from([(c(0), 0.5)]),
            temperature_floor: 1e-3,
        };
        assert_eq!(floored.temperature_for_class(c(0)).unwrap(), 1e-3);
    }

    #[test]
    fn model_json_layout() {
        let model = DatsModel {
            t_base: 1.5,
            weights: BTreeMap::from([(c(2), 0.25)]),
            class_distances: BTreeMap::from([(c(2), 1.0)]),
            temperature_floor: 1e-3,
        };
        let json = serde_json::to_string(&model).unwrap();
        assert_eq!(json, r#"{"t_base":1.5,"floor":0.001,"classes":{"2":{"w":0.25,"d":1.0}}}"#);
        let back: DatsModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);

        let scalar = ScalarTemperatureModel {
            temperature: 2.0,
            fit_source: FitSource::CalibrationBuffer,
        };
        assert_eq!(
            serde_json::to_string(&scalar).unwrap(),
            r#"{"temperature":2.0,"source":"calibration_buffer"}"#
        );
    }

    #[test]
    fn single_class_inputs_are_rejected() {
        let z = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let y = vec![c(0), c(0)];
        let cfg = FitConfig::default();
        assert!(fit_single_temperature(&z, &y, FitSource::CurrentVal, ScalarLoss::Nll, &cfg).is_err());
        assert!(fit_dats(&z, &y, &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn non_constant_class_distance_is_rejected() {
        let z = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let y = vec![c(0), c(0), c(1)];
        assert!(fit_dats(&z, &y, &[0.1, 0.2, 0.0], &FitConfig::default()).is_err());
    }

    #[test]
    fn nll_derivative_matches_difference_quotient() {
        let z = [2.0, -1.0, 0.5];
        let (_, dt) = nll_sample(&z, 1, 1.7);
        let h = 1e-6;
        let fd = (nll_sample(&z, 1, 1.7 + h).0 - nll_sample(&z, 1, 1.7 - h).0) / (2.0 * h);
        assert!((dt - fd).abs() < 1e-8, "{dt} vs {fd}");
    }
}
