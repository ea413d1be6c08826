//! The pipeline stages. Each reads its inputs from the output directory
//! (or the configured dataset), writes its artifacts there and finishes
//! with a manifest.

use std::io::BufRead;

use churnforge_core::cdr::ingest_reader;
use churnforge_core::labeling::LabelSet;
use churnforge_core::metrics::{classification_metrics, error_distribution, inactivity_distribution, roc_auc};
use churnforge_core::models::{majority_accuracy, CvReport};
use churnforge_core::selection::{tree_select, univariate_r2, univariate_ttest};
use churnforge_core::simgen::generate;
use churnforge_core::{
    compute_labels, compute_matrix, enumerate_features, kfold_cv, split_windows, threshold_baseline, train, Error,
    Feature, FeatureMatrix, FeatureRanking, ModelFamily, Result, StudyWindow, Target, TrainedModel,
};
use serde_json::json;

use crate::config::{MatrixFormat, PipelineConfig};
use crate::stage::Stage;

const CDR: &str = "cdr.csv";
const HEADER: &str = "cdr.header";
const TRUTH: &str = "truth.csv";
const FEATURES: &str = "features.txt";
const LABELS: &str = "labels.csv";
const REJECTS: &str = "rejects.csv";
const TRAIN_INACTIVITY: &str = "train_inactivity.csv";
const RANK_TTEST: &str = "rankings_ttest.csv";
const RANK_R2: &str = "rankings_r2.csv";
const RANK_TREE: &str = "rankings_tree.csv";
const REPORT: &str = "report.json";

/// Name of the baseline's predictor column.
const INACTIVITY_FULL: &str = "inactivity.full";

fn stage(name: &'static str, config: &PipelineConfig) -> Result<Stage> {
    Stage::new(name, &config.output_dir, &config.hash(), config.seed)
}

fn data_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{what}: {e}"))
}

pub fn generate_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("generate", config)?;
    let sim = config.sim_config();
    sim.validate()?;
    // Simulate into memory first so a failure leaves no half-written CSV.
    let mut cdr = Vec::new();
    let mut truth = Vec::new();
    generate(&sim, &mut cdr, &mut truth)?;
    st.write(CDR, |w| w.write_all(&cdr))?;
    st.write(TRUTH, |w| w.write_all(&truth))?;
    st.write(HEADER, |w| w.write_all(sim.window.to_sidecar().as_bytes()))?;
    st.finish()
}

/// Study window and CDR bytes for `featurize`.
fn featurize_inputs(config: &PipelineConfig, st: &mut Stage) -> Result<(StudyWindow, Vec<u8>)> {
    let window = match (&config.sidecar, &config.cdr) {
        (Some(path), _) => StudyWindow::from_sidecar(&text(st.read_external("data.sidecar", path)?)?)?,
        (None, None) => StudyWindow::from_sidecar(&text(st.read(HEADER)?)?)?,
        (None, Some(_)) => config.window.clone(),
    };
    let bytes = match &config.cdr {
        Some(path) => st.read_external("data.cdr", path)?,
        None => st.read(CDR)?,
    };
    Ok((window, bytes))
}

fn text(bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).map_err(|e| data_err("not UTF-8", e))
}

pub fn featurize_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("featurize", config)?;
    let (window, bytes) = featurize_inputs(config, &mut st)?;
    let ingested = ingest_reader(bytes.as_slice(), &window)?;
    drop(bytes);
    let store = ingested.store;
    if store.subscriber_count() == 0 {
        return Err(Error::Data("no valid CDR rows".into()));
    }
    st.write(REJECTS, |w| {
        writeln!(w, "line,reason")?;
        for r in &ingested.rejects {
            writeln!(w, "{},\"{}\"", r.line, r.reason.replace('"', "\"\""))?;
        }
        Ok(())
    })?;

    // Axis overrides are expressed against the default window; rebuild the
    // temporal windows if the dataset's month count differs.
    let mut axes = config.axes.clone();
    if window.train_months() != config.window.train_months() {
        axes.windows = churnforge_core::features::FeatureWindow::all(window.train_months());
        axes.inactivity_windows = axes.windows.clone();
    }
    let features = enumerate_features(&axes, &config.denominators)?;
    let matrix = compute_matrix(&store, &features, &axes)?;
    let (_, eval) = split_windows(&window);
    let labels = compute_labels(&store, eval);
    let inactivity: Feature = INACTIVITY_FULL.parse()?;
    let baseline = compute_matrix(&store, &[inactivity], &axes)?;

    st.write(FEATURES, |w| {
        for c in matrix.columns() {
            writeln!(w, "{c}")?;
        }
        Ok(())
    })?;
    st.write(config.matrix_format.file_name(), |w| match config.matrix_format {
        MatrixFormat::Binary => matrix.write_binary(w),
        MatrixFormat::Csv => matrix.write_csv(w),
    })?;
    st.write(LABELS, |w| labels.write_csv(w))?;
    st.write(TRAIN_INACTIVITY, |w| {
        writeln!(w, "ego_id,{INACTIVITY_FULL}")?;
        for (i, id) in baseline.row_ids().iter().enumerate() {
            writeln!(w, "{id},{}", baseline.get(i, 0))?;
        }
        Ok(())
    })?;
    st.finish()
}

fn load_matrix(config: &PipelineConfig, st: &mut Stage) -> Result<FeatureMatrix> {
    let bytes = st.read(config.matrix_format.file_name())?;
    match config.matrix_format {
        MatrixFormat::Binary => FeatureMatrix::read_binary(bytes.as_slice()),
        MatrixFormat::Csv => FeatureMatrix::read_csv(bytes.as_slice()),
    }
}

fn load_labels(st: &mut Stage) -> Result<LabelSet> {
    LabelSet::read_csv(st.read(LABELS)?.as_slice())
}

pub fn select_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("select", config)?;
    let matrix = load_matrix(config, &mut st)?;
    let labels = load_labels(&mut st)?;
    labels.check_aligned(matrix.row_ids())?;
    let ttest = univariate_ttest(&matrix, &labels)?;
    st.write(RANK_TTEST, |w| ttest.write_csv(w))?;
    let r2 = univariate_r2(&matrix, &labels)?;
    st.write(RANK_R2, |w| r2.write_csv(w))?;
    let tree = tree_select(&matrix, &labels, &config.selection_config())?;
    st.write(RANK_TREE, |w| tree.write_csv(w))?;
    st.finish()
}

fn cv_name(family: ModelFamily, target: Target) -> String {
    match target {
        Target::Binary => family.to_string(),
        Target::Continuous => format!("{family}_continuous"),
    }
}

fn write_cv(st: &mut Stage, report: &CvReport, matrix: &FeatureMatrix) -> Result<()> {
    let name = cv_name(report.family, report.target);
    st.try_write(&format!("cv_{name}.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, report).map_err(|e| Error::Invariant(e.to_string()))?;
        writeln!(w).map_err(|e| data_err("write", e))
    })?;
    st.write(&format!("oof_{name}.csv"), |w| {
        writeln!(w, "ego_id,fold,churn_score")?;
        for (i, id) in matrix.row_ids().iter().enumerate() {
            match report.oof_scores[i] {
                Some(s) => writeln!(w, "{id},{},{s}", report.assignment[i])?,
                None => writeln!(w, "{id},{},", report.assignment[i])?,
            }
        }
        Ok(())
    })
}

pub fn train_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("train", config)?;
    let ranking = FeatureRanking::read_csv(st.read(RANK_TREE)?.as_slice())?;
    let matrix = load_matrix(config, &mut st)?.select_columns(&ranking.names())?;
    let labels = load_labels(&mut st)?;
    for &family in &config.roster {
        let spec = config.model_spec(family);
        let report = kfold_cv(&spec, &matrix, &labels, Target::Binary, config.cv_folds, config.cv_seed())?;
        write_cv(&mut st, &report, &matrix)?;
        let model = train(&spec, &matrix, &labels, Target::Binary)?;
        st.write(&format!("model_{family}.cfmd"), |w| model.write_to(w))?;
    }
    for &family in &config.continuous_roster {
        let spec = config.model_spec(family);
        let report = kfold_cv(&spec, &matrix, &labels, Target::Continuous, config.cv_folds, config.cv_seed())?;
        write_cv(&mut st, &report, &matrix)?;
    }
    st.finish()
}

pub fn score_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("score", config)?;
    let matrix = load_matrix(config, &mut st)?;
    for &family in &config.roster {
        let model = TrainedModel::read_from(st.read(&format!("model_{family}.cfmd"))?.as_slice())?;
        if model.family != family {
            return Err(Error::Data(format!("model_{family}.cfmd holds a {} model", model.family)));
        }
        let scores = model.predict_scores(&matrix.select_columns(&model.features)?)?;
        st.write(&format!("scores_{family}.csv"), |w| {
            writeln!(w, "ego_id,churn_score")?;
            for (id, s) in matrix.row_ids().iter().zip(&scores) {
                writeln!(w, "{id},{s}")?;
            }
            Ok(())
        })?;
    }
    st.finish()
}

/// Per-row held-out scores from an `oof_*.csv`, aligned with `ids`.
fn read_oof(bytes: &[u8], ids: &[String]) -> Result<Vec<Option<f64>>> {
    let mut lines = bytes.lines();
    match lines.next() {
        Some(Ok(h)) if h == "ego_id,fold,churn_score" => {}
        _ => return Err(Error::Data("bad out-of-fold header".into())),
    }
    let mut out = Vec::with_capacity(ids.len());
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| data_err("out-of-fold scores", e))?;
        let bad = || Error::Data(format!("out-of-fold line {}: `{line}`", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 || ids.get(i).map(String::as_str) != Some(f[0]) {
            return Err(bad());
        }
        out.push(match f[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        });
    }
    if out.len() != ids.len() {
        return Err(Error::Data("out-of-fold scores do not cover every subscriber".into()));
    }
    Ok(out)
}

fn read_inactivity(bytes: &[u8], ids: &[String]) -> Result<Vec<f64>> {
    let mut lines = bytes.lines();
    match lines.next() {
        Some(Ok(h)) if h == format!("ego_id,{INACTIVITY_FULL}") => {}
        _ => return Err(Error::Data("bad training-inactivity header".into())),
    }
    let mut out = Vec::with_capacity(ids.len());
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| data_err("training inactivity", e))?;
        let bad = || Error::Data(format!("training-inactivity line {}: `{line}`", i + 2));
        let (id, v) = line.split_once(',').ok_or_else(bad)?;
        if ids.get(i).map(String::as_str) != Some(id) {
            return Err(bad());
        }
        out.push(v.parse().map_err(|_| bad())?);
    }
    if out.len() != ids.len() {
        return Err(Error::Data("training inactivity does not cover every subscriber".into()));
    }
    Ok(out)
}

fn write_roc(st: &mut Stage, name: &str, scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (curve, auc) = roc_auc(scores, labels)?;
    st.write(name, |w| curve.write_csv(w))?;
    Ok(auc)
}

fn cv_mean(bytes: &[u8]) -> Result<serde_json::Value> {
    let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| data_err("cross-validation report", e))?;
    Ok(v["mean"].clone())
}

pub fn evaluate_stage(config: &PipelineConfig) -> Result<()> {
    let mut st = stage("evaluate", config)?;
    let labels = load_labels(&mut st)?;
    let mut rows = Vec::new();
    for &family in &config.roster {
        let mean = cv_mean(&st.read(&format!("cv_{family}.json"))?)?;
        if mean.is_null() {
            return Err(Error::Data(format!("{family}: every fold was flagged")));
        }
        let oof = read_oof(&st.read(&format!("oof_{family}.csv"))?, &labels.ego_ids)?;
        let (scores, truth): (Vec<f64>, Vec<bool>) = oof
            .iter()
            .zip(&labels.churned)
            .filter_map(|(s, &c)| s.map(|s| (s, c)))
            .unzip();
        write_roc(&mut st, &format!("roc_{family}.csv"), &scores, &truth)?;
        rows.push(json!({
            "model": family.as_str(),
            "accuracy": mean["accuracy"],
            "precision": mean["precision"],
            "recall": mean["recall"],
            "f_score": mean["f_score"],
            "auc": mean["auc"],
        }));
    }

    let inactivity = read_inactivity(&st.read(TRAIN_INACTIVITY)?, &labels.ego_ids)?;
    let base = threshold_baseline(&inactivity, &labels.churned)?;
    st.write("baseline_sweep.csv", |w| {
        writeln!(w, "threshold,accuracy")?;
        for (t, a) in &base.curve {
            writeln!(w, "{t},{a}")?;
        }
        Ok(())
    })?;
    // The baseline flags churners strictly above its threshold.
    let flagged: Vec<f64> = inactivity.iter().map(|&v| (v > base.threshold) as u8 as f64).collect();
    let m = classification_metrics(&flagged, &labels.churned, 0.5)?;
    let auc = write_roc(&mut st, "roc_baseline.csv", &inactivity, &labels.churned)?;
    rows.push(json!({
        "model": "baseline",
        "accuracy": base.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "f_score": m.f_score,
        "auc": auc,
        "threshold": base.threshold,
    }));

    let churners = labels.churned.iter().filter(|&&c| c).count();
    let majority = (2 * churners > labels.len()) as u8 as f64;
    let m = classification_metrics(&vec![majority; labels.len()], &labels.churned, 0.5)?;
    rows.push(json!({
        "model": "majority_class",
        "accuracy": majority_accuracy(&labels.churned),
        "precision": m.precision,
        "recall": m.recall,
        "f_score": m.f_score,
        "auc": 0.5,
    }));

    let hist = inactivity_distribution(&labels.pct_inactive_eval, config.histogram_bins)?;
    st.write("inactivity_hist.csv", |w| hist.write_csv(w))?;

    let mut continuous = Vec::new();
    for &family in &config.continuous_roster {
        let name = cv_name(family, Target::Continuous);
        let mean = cv_mean(&st.read(&format!("cv_{name}.json"))?)?;
        let oof = read_oof(&st.read(&format!("oof_{name}.csv"))?, &labels.ego_ids)?;
        let (predicted, actual): (Vec<f64>, Vec<f64>) = oof
            .iter()
            .zip(&labels.pct_inactive_eval)
            .filter_map(|(s, &a)| s.map(|s| (s, a)))
            .unzip();
        let dist = error_distribution(&predicted, &actual, config.histogram_bins)?;
        st.write(&format!("error_hist_{family}.csv"), |w| dist.histogram.write_csv(w))?;
        st.write(&format!("error_pairs_{family}.csv"), |w| {
            writeln!(w, "actual,predicted")?;
            for (a, p) in &dist.pairs {
                writeln!(w, "{a},{p}")?;
            }
            Ok(())
        })?;
        continuous.push(json!({ "model": family.as_str(), "mae": mean["mae"] }));
    }

    let report = json!({
        "subscribers": labels.len(),
        "churn_fraction": labels.churn_fraction(),
        "rows": rows,
        "continuous": continuous,
    });
    st.try_write(REPORT, |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(|e| Error::Invariant(e.to_string()))?;
        writeln!(w).map_err(|e| data_err("write", e))
    })?;
    st.finish()
}

pub fn pipeline(config: &PipelineConfig) -> Result<()> {
    if config.cdr.is_none() {
        generate_stage(config)?;
    }
    featurize_stage(config)?;
    select_stage(config)?;
    train_stage(config)?;
    score_stage(config)?;
    evaluate_stage(config)
}
