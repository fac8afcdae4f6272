//! End-to-end acceptance checks on synthetic streams.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use driftcal_core::calibrators::{brier_loss_and_gradient, DatsModel};
use driftcal_core::math::argmax;
use driftcal_core::metrics::ece;
use driftcal_core::pipeline::{emit_run, evaluate_dats, run_pipeline, FittedModel, Method, PipelineOptions, RunResult};
use driftcal_core::stream::{ClassId, Stream};
use driftcal_core::synth::{generate_stream, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn run(stream: &Stream, method: Method, threshold: f64, reserve_fraction: f64, seed: u64) -> RunResult {
    let options = PipelineOptions {
        method,
        threshold,
        reserve_fraction,
        seed,
        intermediate: false,
        ..PipelineOptions::default()
    };
    run_pipeline(stream, &options).expect("pipeline run")
}

/// Brute force: scan every bin's interval for every sample.
fn ece_oracle(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - avg).abs();
    }
    total
}

fn ece_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let bins = rng.random_range(1..=20);
        let n = rng.random_range(1..=200);
        let conf: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => rng.random_range(0..=bins) as f64 / bins as f64,
                _ => rng.random::<f64>(),
            })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let (got, _) = ece(&conf, &correct, bins).expect("valid inputs");
        worst = worst.max((got - ece_oracle(&conf, &correct, bins)).abs());
    }
    Outcome {
        passed: worst <= 1e-12,
        detail: format!("max |ece - oracle| = {worst:.3e} over 1000 instances"),
    }
}

fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Summed Brier score written directly from its definition.
fn brier_oracle(z: &[Vec<f64>], y: &[ClassId], d: &[f64], t_base: f64, w: &BTreeMap<ClassId, f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let p = softmax(&z[i], t_base + w[&y[i]] * d[i]);
        for (k, pk) in p.iter().enumerate() {
            let e = if k == y[i].index() { 1.0 } else { 0.0 };
            total += (e - pk).powi(2);
        }
    }
    total
}

fn brier_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(5..=40);
        let class_d: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let y: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..k))).collect();
        let d: Vec<f64> = y.iter().map(|c| class_d[c.index()]).collect();
        let t_base = rng.random_range(0.5..3.0);
        let w: BTreeMap<ClassId, f64> = (0..k).map(|c| (ClassId(c), rng.random_range(-0.4..2.0))).collect();

        let g = brier_loss_and_gradient(&z, &y, &d, t_base, &w, 1e-3).expect("in domain");
        let mut analytic = vec![g.d_t_base];
        analytic.extend(g.d_weights.values());
        let mut numeric = vec![(brier_oracle(&z, &y, &d, t_base + h, &w) - brier_oracle(&z, &y, &d, t_base - h, &w)) / (2.0 * h)];
        for c in w.keys() {
            let mut up = w.clone();
            let mut down = w.clone();
            *up.get_mut(c).unwrap() += h;
            *down.get_mut(c).unwrap() -= h;
            numeric.push((brier_oracle(&z, &y, &d, t_base, &up) - brier_oracle(&z, &y, &d, t_base, &down)) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
    }
    Outcome {
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.3e} over 100 points"),
    }
}

fn recovery_stream() -> Stream {
    let cfg = SynthConfig {
        samples_per_class_val: 10_000,
        samples_per_class_test: 1_000,
        true_temperature_per_task: vec![1.0, 2.0, 3.0],
        forgetting_noise_per_task: vec![0.0; 3],
        seed: 3,
        ..SynthConfig::default()
    };
    generate_stream(&cfg).expect("valid config").0
}

fn oracle_temperatures(run: &RunResult) -> Vec<f64> {
    match &run.model {
        FittedModel::PerTask(m) => m.values().map(|s| s.temperature).collect(),
        other => panic!("expected per-task model, got {other:?}"),
    }
}

fn temperature_recovery(stream: &Stream) -> Outcome {
    let truth = [1.0, 2.0, 3.0];
    let oracle = oracle_temperatures(&run(stream, Method::PerTaskOracle, 0.6, 0.5, 0));
    let oracle_err = oracle
        .iter()
        .zip(truth)
        .fold(0.0f64, |m, (t, m_t)| m.max((t - m_t).abs() / m_t));

    let dats = run(stream, Method::Dats, 0.6, 0.5, 0);
    let FittedModel::Dats(model) = &dats.model else { panic!("expected dats model") };
    let dats_err = model
        .effective_temperatures()
        .iter()
        .fold(0.0f64, |m, (c, t)| {
            let m_t = truth[c.index() / 2];
            m.max((t - m_t).abs() / m_t)
        });
    let separable = model.class_distances.iter().all(|(c, &d)| (c.index() / 2 == 2) == (d < 1e-2));
    Outcome {
        passed: oracle_err < 0.10 && dats_err < 0.10 && separable,
        detail: format!(
            "oracle {oracle:.3?}, worst oracle error {:.1}%, worst per-class error {:.1}%",
            100.0 * oracle_err,
            100.0 * dats_err
        ),
    }
}

fn pooled_temperature_gap(stream: &Stream) -> Outcome {
    let oracle = oracle_temperatures(&run(stream, Method::PerTaskOracle, 0.6, 0.5, 0));
    let rc = run(stream, Method::Rc, 0.6, 0.5, 0).report.temperatures[0].temperature;
    let lo = oracle.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_gap = oracle.iter().fold(0.0f64, |m, t| m.max((rc - t).abs() / t));
    Outcome {
        passed: lo < rc && rc < hi && max_gap > 0.20,
        detail: format!("pooled {rc:.3} vs oracle range [{lo:.3}, {hi:.3}], largest gap {:.0}%", 100.0 * max_gap),
    }
}

fn forgetting_stream(seed: u64) -> Stream {
    let cfg = SynthConfig {
        samples_per_class_val: 1_000,
        samples_per_class_test: 3_000,
        true_temperature_per_task: vec![3.0, 3.0, 1.2],
        forgetting_noise_per_task: vec![0.7, 0.7, 0.0],
        seed,
        ..SynthConfig::default()
    };
    generate_stream(&cfg).expect("valid config").0
}

fn replayed_calibration_regression(streams: &[Stream]) -> Outcome {
    let mut good = 0;
    let mut lines = Vec::new();
    for (seed, stream) in streams.iter().enumerate() {
        let rc = run(stream, Method::Rc, 0.6, 0.5, seed as u64).report.report;
        let dats = run(stream, Method::Dats, 0.6, 0.5, seed as u64).report.report;
        let ok = rc.delta_lece > 0.0 && rc.max_delta_ece > 0.0 && dats.delta_lece <= 0.0 && dats.max_delta_ece <= 0.01;
        good += ok as usize;
        lines.push(format!(
            "{:+.3}/{:+.3}",
            rc.delta_lece, dats.delta_lece
        ));
    }
    Outcome {
        passed: good >= 9,
        detail: format!("{good}/10 trials; last-task delta ECE rc/dats: {}", lines.join(" ")),
    }
}

fn last_task_overconfidence(streams: &[Stream]) -> Outcome {
    let mut worst_margin = f64::INFINITY;
    for (seed, stream) in streams.iter().enumerate() {
        let report = run(stream, Method::Uncalibrated, 0.6, 0.5, seed as u64).report.report;
        let conf: Vec<f64> = report.per_task.iter().map(|p| p.pre.mean_confidence).collect();
        let (last, earlier) = conf.split_last().expect("tasks");
        for c in earlier {
            worst_margin = worst_margin.min(last - c);
        }
    }
    Outcome {
        passed: worst_margin >= 0.05,
        detail: format!("smallest last-minus-earlier confidence margin {worst_margin:.3} over 10 streams"),
    }
}

fn test_time_retrieval() -> Outcome {
    let mut exact = 0;
    let mut total = 0;
    let mut zero_current = 0;
    let mut t_base_match = 0;
    let streams = 200;
    for seed in 0..streams {
        let cfg = SynthConfig {
            n_tasks: 5,
            samples_per_class_val: 50,
            samples_per_class_test: 50,
            true_temperature_per_task: vec![1.0; 5],
            forgetting_noise_per_task: vec![0.0; 5],
            cluster_separation: 6.0,
            seed: 1_000 + seed,
            ..SynthConfig::default()
        };
        let stream = generate_stream(&cfg).expect("valid config").0;
        let result = run(&stream, Method::Dats, 0.6, 1.0, seed);
        for (trace, dump) in result.report.temperatures.iter().zip(stream.tasks()) {
            let mut got = trace.representative_classes.clone().unwrap_or_default();
            got.sort();
            total += 1;
            exact += (got == dump.class_set()) as usize;
        }
        let current = result.report.temperatures.last().expect("traces");
        zero_current += (current.d_test == Some(0.0)) as usize;
        if let FittedModel::Dats(DatsModel { t_base, .. }) = result.model {
            t_base_match += (current.temperature == t_base) as usize;
        }
    }
    let rate = exact as f64 / total as f64;
    Outcome {
        passed: rate >= 0.99 && zero_current == streams as usize && t_base_match == streams as usize,
        detail: format!(
            "{exact}/{total} exact class sets; current-task d_test = 0 in {zero_current}/{streams}, temperature = t_base in {t_base_match}/{streams}"
        ),
    }
}

fn invariant_suite() -> Outcome {
    let mut failures = Vec::new();
    let cfg = SynthConfig {
        samples_per_class_val: 200,
        samples_per_class_test: 200,
        true_temperature_per_task: vec![2.5, 1.5, 1.0],
        forgetting_noise_per_task: vec![0.4, 0.2, 0.0],
        seed: 21,
        ..SynthConfig::default()
    };
    let stream = generate_stream(&cfg).expect("valid config").0;
    for method in Method::ALL {
        let options = PipelineOptions {
            method,
            seed: 4,
            ..PipelineOptions::default()
        };
        let result = run_pipeline(&stream, &options).expect("pipeline run");
        for o in &result.outputs {
            if argmax(&o.pre) != argmax(&o.post) {
                failures.push(format!("{method}: argmax changed for {}", o.id));
                break;
            }
        }
        if result.outputs.iter().any(|o| {
            (o.post.iter().sum::<f64>() - 1.0).abs() > 1e-9 || o.post.iter().any(|p| !(0.0..=1.0).contains(p))
        }) {
            failures.push(format!("{method}: probabilities not normalised"));
        }
        for stage in &result.report.stages {
            if stage.fits.iter().any(|f| f.final_loss > f.initial_loss + 1e-9) {
                failures.push(format!("{method}: loss increased after task {}", stage.after_task));
            }
        }
        if let Some(table) = &result.distances {
            let lo = table.scores.values().copied().fold(f64::INFINITY, f64::min);
            if lo != 0.0 || table.scores.values().any(|s| !(0.0..=1.0).contains(s)) {
                failures.push(format!("{method}: distance scores outside [0, 1] or min != 0"));
            }
        }

        let first = tempfile::tempdir().expect("tempdir");
        let second = tempfile::tempdir().expect("tempdir");
        emit_run(&result, first.path()).expect("emit");
        emit_run(&run_pipeline(&stream, &options).expect("rerun"), second.path()).expect("emit");
        for entry in std::fs::read_dir(first.path()).expect("read dir") {
            let name = entry.expect("entry").file_name();
            let a = std::fs::read(first.path().join(&name)).expect("read");
            let b = std::fs::read(second.path().join(&name)).unwrap_or_default();
            if a != b {
                failures.push(format!("{method}: {} differs between seeded runs", name.to_string_lossy()));
            }
        }
    }
    Outcome {
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "argmax, normalisation, score range, monotone fits and byte-identical reruns hold for all methods".into()
        } else {
            failures.join("; ")
        },
    }
}

fn threshold_ablation() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let cfg = SynthConfig {
            n_tasks: 5,
            classes_per_task: 3,
            samples_per_class_val: 300,
            samples_per_class_test: 300,
            cluster_separation: 3.0,
            true_temperature_per_task: vec![3.0, 3.0, 3.0, 3.0, 1.2],
            forgetting_noise_per_task: vec![0.7, 0.7, 0.7, 0.7, 0.0],
            seed: 500 + seed,
            ..SynthConfig::default()
        };
        let stream = generate_stream(&cfg).expect("valid config").0;
        let result = run(&stream, Method::Dats, 0.5, 0.5, seed);
        let FittedModel::Dats(model) = &result.model else { panic!("expected dats model") };
        let table = result.distances.as_ref().expect("distance table");
        let width = stream.tasks().last().expect("tasks").logit_width();
        let (wide, _, _) = evaluate_dats(stream.tasks(), model, table, 0.8, width, 10, false).expect("evaluate");
        let narrow = result.report.report.aece;
        let wide = wide.expect("report").aece;
        wins += (wide > narrow) as usize;
        pairs.push(format!("{narrow:.3}/{wide:.3}"));
    }
    Outcome {
        passed: wins >= 8,
        detail: format!("{wins}/10 seeds; AECE at 0.5/0.8: {}", pairs.join(" ")),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = outcome.passed && in_time;
        failed += (!passed) as usize;
        println!(
            "{} {name}: {} [{:.2?} of {:.0?}{}]",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed,
            budget,
            if in_time { "" } else { ", over budget" }
        );
    };

    report("ece_oracle_equivalence", Duration::from_secs(1), &mut ece_oracle_equivalence);
    report("brier_gradient_check", Duration::from_secs(10), &mut brier_gradient_check);

    let start = Instant::now();
    let stream = recovery_stream();
    let generation = start.elapsed();
    report("temperature_recovery", Duration::from_secs(60), &mut || {
        let mut o = temperature_recovery(&stream);
        o.detail.push_str(&format!(", generation {generation:.2?}"));
        o
    });
    report("pooled_temperature_gap", Duration::from_secs(60), &mut || pooled_temperature_gap(&stream));
    drop(stream);

    let mut streams = Vec::new();
    report("replayed_calibration_regression", Duration::from_secs(300), &mut || {
        streams = (0..10).map(forgetting_stream).collect();
        replayed_calibration_regression(&streams)
    });
    report("last_task_overconfidence", Duration::from_secs(30), &mut || last_task_overconfidence(&streams));
    report("test_time_retrieval", Duration::from_secs(60), &mut test_time_retrieval);
    report("invariant_suite", Duration::from_secs(120), &mut invariant_suite);
    report("threshold_ablation", Duration::from_secs(300), &mut threshold_ablation);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
