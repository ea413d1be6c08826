//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! The process fails if any criterion fails, except for a criterion listed
//! as known-unattainable, whose line still reads FAIL along with the reason.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use churnforge::{run, PipelineConfig};
use churnforge_core::features::{count_features, default_denominators, Feature, RatioSpec};
use churnforge_core::metrics::roc_auc;
use churnforge_core::models::{majority_accuracy, threshold_baseline};
use churnforge_core::selection::univariate_r2;
use churnforge_core::*;
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    /// The literal statement cannot hold; the reason is printed.
    Unattainable(String),
}

use Outcome::*;

type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn seed42() -> (RecordStore, simgen::GroundTruth) {
    generate_store(&SimConfig::default()).expect("default simulation")
}

fn feature_count() -> Outcome {
    let start = Instant::now();
    let config = AxesConfig::default();
    let n = enumerate_features(&config, &[]).expect("enumerate").len();
    let counted = count_features(&config, 0);
    let secs = start.elapsed().as_secs_f64();
    // measures · kinds · directions · times · day types · classes, each with
    // 5 windows × {total, per_active_day} plus 2 temporal statistics, then
    // one inactivity fraction per window.
    let oracle = 2 * 4 * 3 * 3 * 3 * 7 * (5 * 2 + 2) + 5;
    check(
        n == oracle && counted == oracle as u64 && oracle == 18_149 && secs < 1.0,
        format!("enumerated {n}, counted {counted}, closed form {oracle}, {secs:.3} s"),
    )
}

fn vocabulary() -> Outcome {
    let config = AxesConfig::default();
    let base: HashSet<_> = config.base_features().into_iter().collect();
    let mut problems = Vec::new();
    let mut features = Vec::new();
    for name in PREDICTOR_VOCABULARY {
        match name.parse::<Feature>() {
            Ok(f) => {
                let in_tree = match &f {
                    Feature::Base(b) => base.contains(b),
                    Feature::Ratio(RatioSpec { numerator, denominator }) => {
                        base.contains(numerator) && base.contains(denominator)
                    }
                };
                if !in_tree || f.canonical_name() != name {
                    problems.push(name.to_string());
                }
                features.push(f);
            }
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Fail(format!("not expressible: {problems:?}"));
    }
    let m = compute_matrix(&fixture_store(), &features, &config).expect("fixture matrix");
    check(
        m.n_cols() == 20 && m.check_finite().is_ok(),
        format!("{} predictors constructed by name and computed on the fixture", m.n_cols()),
    )
}

fn micro_fixture() -> Outcome {
    let store = fixture_store();
    let expected = micro_expected();
    let features: Vec<Feature> = expected.iter().map(|(n, _)| n.parse().expect("fixture name")).collect();
    let m = compute_matrix(&store, &features, &AxesConfig::default()).expect("fixture matrix");
    let mut worst: f64 = 0.0;
    for (j, (_, want)) in expected.iter().enumerate() {
        for (i, w) in want.iter().enumerate() {
            worst = worst.max((m.get(i, j) - w).abs());
        }
    }
    let (_, eval) = split_windows(store.window());
    let labels = compute_labels(&store, eval);
    for (i, (churned, pct)) in MICRO_LABELS.iter().enumerate() {
        if labels.churned[i] != *churned {
            return Fail(format!("label of row {i} differs"));
        }
        worst = worst.max((labels.pct_inactive_eval[i] - pct).abs());
    }
    check(
        worst <= 1e-12 && store.record_count() == 20,
        format!("{} hand values over 3 subscribers, worst error {worst:e}", expected.len() * 3 + 6),
    )
}

fn additivity() -> Outcome {
    let sim = SimConfig {
        n_subscribers: 1_000,
        ..SimConfig::default()
    };
    let (store, _) = generate_store(&sim).expect("simulation");
    let config = AxesConfig::for_window(store.window());
    let mut features = Vec::new();
    for f in enumerate_features(&config, &[]).expect("enumerate") {
        let name = f.canonical_name();
        if let Some(stem) = name.strip_suffix(".full.total") {
            features.push(f);
            for m in 1..=4 {
                features.push(format!("{stem}.m{m}.total").parse().expect("monthly name"));
            }
        }
    }
    let matrix = compute_matrix(&store, &features, &config).expect("matrix");
    let (mut activity, mut activity_bad, mut degree, mut degree_unequal, mut degree_super) = (0, 0, 0, 0, 0);
    for j in (0..features.len()).step_by(5) {
        let is_activity = features[j].canonical_name().starts_with("activity.");
        let (mut unequal, mut superadditive) = (false, false);
        for i in 0..matrix.n_rows() {
            let months: f64 = (1..5).map(|m| matrix.get(i, j + m)).sum();
            unequal |= months != matrix.get(i, j);
            superadditive |= months < matrix.get(i, j);
        }
        if is_activity {
            activity += 1;
            activity_bad += unequal as usize;
        } else {
            degree += 1;
            degree_unequal += unequal as usize;
            degree_super += superadditive as usize;
        }
    }
    let detail = format!(
        "{activity} ACTIVITY totals: {activity_bad} violate M1+M2+M3+M4 = FULL; \
         {degree} DEGREE totals: {degree_unequal} violate it, {degree_super} exceed the monthly sum"
    );
    if activity_bad > 0 || degree_super > 0 || activity == 0 {
        Fail(detail)
    } else if degree_unequal > 0 {
        Unattainable(format!(
            "{detail}; degree counts unique alters, and an alter seen in two months counts once over FULL"
        ))
    } else {
        Pass(detail)
    }
}

fn labels_oracle(store: &RecordStore, truth: &simgen::GroundTruth) -> Outcome {
    let (_, eval) = split_windows(store.window());
    let labels = compute_labels(store, eval);
    let mismatches = labels.churned.iter().zip(&truth.churned).filter(|(a, b)| a != b).count();
    let f = labels.churn_fraction();
    check(
        labels.ego_ids == truth.ego_ids && mismatches == 0 && (f - 0.26).abs() <= 0.03 && labels.len() == 5_000,
        format!("{} subscribers, {mismatches} mismatches, churn fraction {f:.4}", labels.len()),
    )
}

fn baseline_oracle(store: &RecordStore) -> Outcome {
    let (_, eval) = split_windows(store.window());
    let labels = compute_labels(store, eval);
    let inactivity = compute_matrix(
        store,
        &["inactivity.full".parse().expect("name")],
        &AxesConfig::for_window(store.window()),
    )
    .expect("inactivity")
    .column(0);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut samples: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..10 {
        order.shuffle(&mut r);
        let rows = &order[..500];
        samples.push((
            rows.iter().map(|&i| inactivity[i]).collect(),
            rows.iter().map(|&i| labels.churned[i]).collect(),
        ));
    }
    for _ in 0..20 {
        let levels = r.gen_range(2..200);
        let lean = r.gen_range(0.0..1.0);
        let x: Vec<f64> = (0..500).map(|_| r.gen_range(0..=levels) as f64 / levels as f64).collect();
        let y = x.iter().map(|v| r.gen_bool((lean * 0.5 + v * 0.5).min(1.0))).collect();
        samples.push((x, y));
    }
    let (mut agree, mut dominated) = (0, 0);
    let mut margin = f64::INFINITY;
    for (x, y) in &samples {
        let got = threshold_baseline(x, y).expect("baseline");
        agree += ((got.threshold, got.accuracy) == brute_force_baseline(x, y)) as usize;
        let m = majority_accuracy(y);
        dominated += (got.accuracy >= m) as usize;
        margin = margin.min(got.accuracy - m);
    }
    let n = samples.len();
    check(
        agree == n && dominated == n,
        format!("{agree}/{n} samples of 500 match brute force; baseline ≥ majority on {dominated}/{n} (min margin {margin:.4})"),
    )
}

fn auc_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (mut done, mut worst, mut tied) = (0, 0.0f64, 0);
    while done < 50 {
        let n = r.gen_range(2..=200);
        let levels = r.gen_range(1..30);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..=levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        if labels.iter().all(|&c| c) || !labels.iter().any(|&c| c) {
            continue;
        }
        let (_, auc) = roc_auc(&scores, &labels).expect("auc");
        worst = worst.max((auc - concordance(&scores, &labels)).abs());
        let distinct: HashSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        tied += (distinct.len() < n) as usize;
        done += 1;
    }
    check(
        worst <= 1e-12,
        format!("50 instances ({tied} with tied scores), worst gap {worst:e}"),
    )
}

fn gradient_check() -> Outcome {
    let worst = logistic_gradient_worst_error(8, 50);
    check(worst < 1e-5, format!("50 random problems, worst relative error {worst:e}"))
}

/// The reference pipeline at full simulation size, through the CLI stages.
fn benchmark(dir: &Path) -> Outcome {
    let start = Instant::now();
    let config = PipelineConfig::parse(
        &format!("sim.n_subscribers = 5000\nfeatures.denominators = none\noutput.dir = {}\n", dir.display()),
        None,
    )
    .expect("config");
    if let Err(e) = run(churnforge::Command::Pipeline, &config) {
        return Fail(format!("pipeline failed: {e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("report.json")).expect("report")).expect("json");
    let rows: BTreeMap<String, (f64, f64)> = report["rows"]
        .as_array()
        .expect("rows")
        .iter()
        .map(|r| {
            let m = r["model"].as_str().expect("model").to_string();
            (m, (r["accuracy"].as_f64().unwrap_or(f64::NAN), r["auc"].as_f64().unwrap_or(f64::NAN)))
        })
        .collect();
    let baseline = rows["baseline"].0;
    let majority = rows["majority_class"].0;
    let models: Vec<_> = rows
        .iter()
        .filter(|(m, _)| !matches!(m.as_str(), "baseline" | "majority_class"))
        .collect();
    let worst_acc = models.iter().map(|(_, v)| v.0).fold(f64::INFINITY, f64::min);
    let worst_auc = models.iter().map(|(_, v)| v.1).fold(f64::INFINITY, f64::min);
    check(
        models.len() == 6 && worst_acc > baseline && baseline > majority && worst_auc >= 0.85 && secs < 600.0,
        format!(
            "{} models, lowest CV accuracy {worst_acc:.4} > baseline {baseline:.4} > majority {majority:.4}; \
             lowest AUC {worst_auc:.4}; {secs:.0} s",
            models.len()
        ),
    )
}

/// Univariate R² over the full default feature tree, denominators included,
/// computed in column blocks to bound memory.
fn selection_sanity(store: &RecordStore, dir: &Path) -> Outcome {
    let (_, eval) = split_windows(store.window());
    let labels = compute_labels(store, eval);
    let axes = AxesConfig::for_window(store.window());
    let features = enumerate_features(&axes, &default_denominators()).expect("enumerate");
    let mut scores: Vec<(f64, String)> = Vec::with_capacity(features.len());
    for block in features.chunks(8_000) {
        let m = compute_matrix(store, block, &axes).expect("matrix");
        let r = univariate_r2(&m, &labels).expect("r2");
        scores.extend(r.entries.into_iter().map(|e| (e.score, e.name)));
    }
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let rank = scores.iter().position(|s| s.1 == "inactivity.full").map(|p| p + 1);
    // The same ranking from the pipeline run, without denominators.
    let plain = std::fs::read(dir.join("rankings_r2.csv"))
        .ok()
        .and_then(|b| churnforge_core::FeatureRanking::read_csv(b.as_slice()).ok())
        .and_then(|r| r.rank_of("inactivity.full"));
    let top: Vec<String> = scores.iter().take(3).map(|s| format!("{} ({:.3})", s.1, s.0)).collect();
    check(
        rank.is_some_and(|r| r <= 3) && plain.is_some_and(|r| r <= 3),
        format!(
            "rank {} of {} features; rank {} without denominators; top 3: {}",
            rank.map_or("none".into(), |r| r.to_string()),
            scores.len(),
            plain.map_or("none".into(), |r| r.to_string()),
            top.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().expect("tempdir");
    let cfg = root.path().join("run.cfg");
    std::fs::write(&cfg, "sim.n_subscribers = 300\nseed = 42\n").expect("config");
    let mut dirs = Vec::new();
    for workers in ["1", "2", "3"] {
        let out = root.path().join(format!("w{workers}"));
        let status = Command::new(env!("CARGO_BIN_EXE_churnforge"))
            .arg("pipeline")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg("--workers")
            .arg(workers)
            .status()
            .expect("spawn");
        if !status.success() {
            return Fail(format!("pipeline with {workers} workers exited with {status}"));
        }
        dirs.push(out);
    }
    let manifests: Vec<String> = ["generate", "featurize", "select", "train", "score", "evaluate"]
        .iter()
        .map(|s| format!("manifest_{s}.json"))
        .collect();
    let mut differing = Vec::new();
    for m in &manifests {
        let first = std::fs::read(dirs[0].join(m)).unwrap_or_default();
        if first.is_empty() || dirs[1..].iter().any(|d| std::fs::read(d.join(m)).ok() != Some(first.clone())) {
            differing.push(m.clone());
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} manifests byte-identical across 1, 2 and 3 workers", manifests.len())
        } else {
            format!("differing manifests: {differing:?}")
        },
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let work = tempfile::tempdir().expect("tempdir");
    let (store, truth) = seed42();
    let criteria: Vec<(&str, Check)> = vec![
        ("feature count", Box::new(feature_count)),
        ("predictor vocabulary", Box::new(vocabulary)),
        ("micro-fixture featurization", Box::new(micro_fixture)),
        ("monthly additivity of totals", Box::new(additivity)),
        ("label oracle", Box::new(|| labels_oracle(&store, &truth))),
        ("baseline sweep oracle", Box::new(|| baseline_oracle(&store))),
        ("AUC oracle", Box::new(auc_oracle)),
        ("logistic gradient check", Box::new(gradient_check)),
        ("end-to-end benchmark", Box::new(|| benchmark(work.path()))),
        ("selection sanity", Box::new(|| selection_sanity(&store, work.path()))),
        ("pipeline determinism", Box::new(determinism)),
    ];
    let (mut passed, mut failed, mut unattainable) = (0, 0, 0);
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        match guarded(f) {
            Pass(d) => {
                passed += 1;
                println!("PASS {n:>2} {name}: {d}");
            }
            Fail(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
            Unattainable(d) => {
                unattainable += 1;
                println!("FAIL {n:>2} {name} (not satisfiable as stated): {d}");
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {unattainable} not satisfiable as stated");
    if failed > 0 {
        std::process::exit(1);
    }
}
