//! Test-time temperature selection without task labels.
//!
//! Test samples vote for their nearest buffer prototype. The most frequent
//! classes that together cover a share `threshold` of the votes form the
//! representative set; the mean of their distance scores is the test-set
//! distance, which feeds the fitted temperature model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrators::DatsModel;
use crate::error::{Error, Result};
use crate::math::{cosine, softmax_scaled, squared_norm};
use crate::prototype::{ClassPrototype, DistanceScoreTable};
use crate::stream::{ClassId, SampleRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentHistogram {
    pub counts: BTreeMap<ClassId, usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub classes: Vec<ClassId>,
    pub coverage_achieved: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCalibration {
    pub d_test: f64,
    pub temperature: f64,
    pub representative: RepresentativeSet,
}

/// Tallies each test sample under the prototype with the highest cosine
/// similarity. Equal similarities go to the smaller class id.
pub fn assign_test_samples(
    test: &[SampleRecord],
    prototypes: &BTreeMap<ClassId, ClassPrototype>,
) -> Result<AssignmentHistogram> {
    if test.is_empty() {
        return Err(Error::InvalidInput("no test samples to assign".into()));
    }
    if prototypes.is_empty() {
        return Err(Error::InvalidInput("no prototypes to assign test samples to".into()));
    }
    let dim = prototypes.values().next().map(ClassPrototype::dim).unwrap_or(0);
    let zero_norm: Vec<String> = test
        .iter()
        .filter(|s| squared_norm(&s.embedding) == 0.0)
        .map(|s| s.sample_id.clone())
        .collect();
    if !zero_norm.is_empty() {
        return Err(Error::ZeroNormEmbedding(zero_norm));
    }

    let mut counts = BTreeMap::new();
    for s in test {
        if s.embedding.len() != dim {
            return Err(Error::InvalidInput(format!(
                "test sample {} has embedding length {}, prototypes have {dim}",
                s.sample_id,
                s.embedding.len()
            )));
        }
        let mut best: Option<(ClassId, f64)> = None;
        for (&class, proto) in prototypes {
            if proto.dim() != dim {
                return Err(Error::InvalidInput(format!(
                    "prototype of class {class} has dimension {}, expected {dim}",
                    proto.dim()
                )));
            }
            let sim = cosine(&s.embedding, &proto.mean_embedding);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((class, sim));
            }
        }
        let (class, _) = best.expect("prototypes non-empty");
        *counts.entry(class).or_insert(0) += 1;
    }
    Ok(AssignmentHistogram {
        counts,
        total: test.len(),
    })
}

/// Shortest prefix of classes, by descending count then ascending id, whose
/// share of the assignments reaches `threshold`.
pub fn select_representative(hist: &AssignmentHistogram, threshold: f64) -> Result<RepresentativeSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside (0, 1]")));
    }
    if hist.total == 0 {
        return Err(Error::InvalidInput("empty assignment histogram".into()));
    }
    let mut ranked: Vec<(ClassId, usize)> =
        hist.counts.iter().filter(|(_, &n)| n > 0).map(|(&c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let total = hist.total as f64;
    let mut classes = Vec::new();
    let mut covered = 0usize;
    for (class, n) in ranked {
        classes.push(class);
        covered += n;
        if covered as f64 / total >= threshold {
            break;
        }
    }
    Ok(RepresentativeSet {
        classes,
        coverage_achieved: covered as f64 / total,
        threshold,
    })
}

pub fn compute_d_test(rep: &RepresentativeSet, table: &DistanceScoreTable) -> Result<f64> {
    if rep.classes.is_empty() {
        return Err(Error::InvalidInput("empty representative set".into()));
    }
    let mut sum = 0.0;
    for &c in &rep.classes {
        sum += table.score(c)?;
    }
    Ok(sum / rep.classes.len() as f64)
}

/// `max(t_base + mean(w_c over the representatives) * d_test, floor)`.
pub fn test_temperature(model: &DatsModel, rep: &RepresentativeSet, d_test: f64) -> Result<f64> {
    let mut w_sum = 0.0;
    for c in &rep.classes {
        w_sum += model.weights.get(c).ok_or(Error::MissingClass(*c))?;
    }
    let w_bar = w_sum / rep.classes.len() as f64;
    Ok((model.t_base + w_bar * d_test).max(model.temperature_floor))
}

/// Calibrates one test set with a single temperature. Logits shorter than
/// `width` are zero-padded first.
pub fn calibrate_test_set(
    test: &[SampleRecord],
    model: &DatsModel,
    table: &DistanceScoreTable,
    threshold: f64,
    width: usize,
) -> Result<(TestCalibration, Vec<Vec<f64>>)> {
    let hist = assign_test_samples(test, &table.prototypes)?;
    let representative = select_representative(&hist, threshold)?;
    let d_test = compute_d_test(&representative, table)?;
    let temperature = test_temperature(model, &representative, d_test)?;
    let probs = test
        .iter()
        .map(|s| softmax_scaled(&s.padded_logits(width), temperature))
        .collect();
    Ok((
        TestCalibration {
            d_test,
            temperature,
            representative,
        },
        probs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Split;

    fn proto(class: usize, v: Vec<f64>) -> (ClassId, ClassPrototype) {
        (
            ClassId(class),
            ClassPrototype {
                class_id: ClassId(class),
                mean_embedding: v,
                support: 1,
            },
        )
    }

    fn sample(id: &str, embedding: Vec<f64>) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            task_id: 0,
            split: Split::Test,
            label: ClassId(0),
            logits: vec![1.0, 0.0],
            embedding,
        }
    }

    fn hist(pairs: &[(usize, usize)]) -> AssignmentHistogram {
        AssignmentHistogram {
            counts: pairs.iter().map(|&(c, n)| (ClassId(c), n)).collect(),
            total: pairs.iter().map(|p| p.1).sum(),
        }
    }

    #[test]
    fn hand_cosine_assignment() {
        let protos = BTreeMap::from([proto(0, vec![1.0, 0.0]), proto(1, vec![0.0, 1.0])]);
        let mut test: Vec<_> = (0..3).map(|i| sample(&format!("a{i}"), vec![0.9, 0.1])).collect();
        test.push(sample("b", vec![0.1, 0.9]));
        let h = assign_test_samples(&test, &protos).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(ClassId(0), 3), (ClassId(1), 1)]));
        assert_eq!(h.total, 4);
    }

    #[test]
    fn exact_prototype_match_and_ties() {
        let protos = BTreeMap::from([proto(2, vec![1.0, 0.0]), proto(5, vec![0.0, 1.0]), proto(7, vec![0.3, 0.3])]);
        let test: Vec<_> = (0..4).map(|i| sample(&format!("s{i}"), vec![0.3, 0.3])).collect();
        let h = assign_test_samples(&test, &protos).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(ClassId(7), 4)]));

        let protos = BTreeMap::from([proto(5, vec![0.0, 1.0]), proto(2, vec![1.0, 0.0])]);
        let h = assign_test_samples(&[sample("eq", vec![1.0, 1.0])], &protos).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(ClassId(2), 1)]));
    }

    #[test]
    fn zero_norm_samples_are_listed() {
        let protos = BTreeMap::from([proto(0, vec![1.0, 0.0])]);
        let test = vec![sample("ok", vec![1.0, 0.0]), sample("bad", vec![0.0, 0.0])];
        match assign_test_samples(&test, &protos) {
            Err(Error::ZeroNormEmbedding(ids)) => assert_eq!(ids, vec!["bad".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        let wrong_dim = vec![sample("x", vec![1.0, 0.0, 0.0])];
        assert!(assign_test_samples(&wrong_dim, &protos).is_err());
    }

    #[test]
    fn greedy_coverage() {
        let rep = select_representative(&hist(&[(0, 50), (1, 30), (2, 15), (3, 5)]), 0.6).unwrap();
        assert_eq!(rep.classes, vec![ClassId(0), ClassId(1)]);
        assert!((rep.coverage_achieved - 0.8).abs() < 1e-15);

        let rep = select_representative(&hist(&[(4, 12)]), 0.6).unwrap();
        assert_eq!(rep.classes, vec![ClassId(4)]);
        assert_eq!(rep.coverage_achieved, 1.0);

        let rep = select_representative(&hist(&[(0, 1), (1, 3), (2, 0), (3, 3)]), 1.0).unwrap();
        assert_eq!(rep.classes, vec![ClassId(1), ClassId(3), ClassId(0)]);

        assert!(select_representative(&hist(&[(0, 1)]), 0.0).is_err());
    }

    fn table(scores: &[(usize, f64)]) -> DistanceScoreTable {
        DistanceScoreTable {
            scores: scores.iter().map(|&(c, s)| (ClassId(c), s)).collect(),
            raw_scores: scores.iter().map(|&(c, s)| (ClassId(c), s)).collect(),
            prototypes: BTreeMap::new(),
        }
    }

    fn rep(classes: &[usize]) -> RepresentativeSet {
        RepresentativeSet {
            classes: classes.iter().map(|&c| ClassId(c)).collect(),
            coverage_achieved: 1.0,
            threshold: 0.6,
        }
    }

    #[test]
    fn d_test_is_mean_of_scores() {
        let t = table(&[(6, 0.0), (1, 0.1), (3, 0.7)]);
        assert_eq!(compute_d_test(&rep(&[6]), &t).unwrap(), 0.0);
        assert!((compute_d_test(&rep(&[6, 1]), &t).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(compute_d_test(&rep(&[3]), &t).unwrap(), 0.7);
        assert!(compute_d_test(&rep(&[9]), &t).is_err());
    }

    #[test]
    fn temperature_uses_mean_weight() {
        let model = DatsModel {
            t_base: 1.1,
            weights: BTreeMap::from([(ClassId(0), 0.8), (ClassId(1), 1.2)]),
            class_distances: BTreeMap::from([(ClassId(0), 0.4), (ClassId(1), 0.6)]),
            temperature_floor: 1e-3,
        };
        let t = test_temperature(&model, &rep(&[0, 1]), 0.5).unwrap();
        assert!((t - 1.6).abs() < 1e-12);
        assert_eq!(test_temperature(&model, &rep(&[0, 1]), 0.0).unwrap(), 1.1);
    }
}
