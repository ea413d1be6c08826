//! Flat `key = value` pipeline configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos surface as configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use churnforge_core::features::{
    default_denominators, ClassDim, DayType, DirectionDim, FeatureWindow, KindDim, Measure, Statistic, TimeOfDay,
};
use churnforge_core::models::ModelFamily;
use churnforge_core::selection::TreeSelectConfig;
use churnforge_core::simgen::sub_seed;
use churnforge_core::tree::MaxFeatures;
use churnforge_core::{AxesConfig, Error, Result, SimConfig, StudyWindow};
use sha2::{Digest, Sha256};

fn parse_date(value: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("bad date `{value}` (want YYYY-MM-DD)")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Binary,
}

impl MatrixFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "matrix.csv",
            MatrixFormat::Binary => "matrix.cfm",
        }
    }

    fn token(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// CDR input; `None` means the `generate` output in the output directory.
    pub cdr: Option<PathBuf>,
    /// Dataset header sidecar; falls back to the `window.*` keys.
    pub sidecar: Option<PathBuf>,
    pub window: StudyWindow,
    pub sim: SimConfig,
    pub axes: AxesConfig,
    pub denominators: Vec<String>,
    pub matrix_format: MatrixFormat,
    pub selection: TreeSelectConfig,
    pub roster: Vec<ModelFamily>,
    /// Models also cross-validated against the continuous inactivity target.
    pub continuous_roster: Vec<ModelFamily>,
    pub hyperparameters: BTreeMap<ModelFamily, BTreeMap<String, f64>>,
    pub cv_folds: usize,
    pub histogram_bins: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// 0 = all cores.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let window = StudyWindow::standard();
        PipelineConfig {
            cdr: None,
            sidecar: None,
            sim: SimConfig {
                n_subscribers: 500,
                window: window.clone(),
                ..SimConfig::default()
            },
            axes: AxesConfig::for_window(&window),
            window,
            denominators: default_denominators(),
            matrix_format: MatrixFormat::Binary,
            selection: TreeSelectConfig::default(),
            roster: ModelFamily::ALL.to_vec(),
            continuous_roster: vec![ModelFamily::LinReg],
            hyperparameters: BTreeMap::new(),
            cv_folds: 5,
            histogram_bins: 10,
            seed: 42,
            output_dir: PathBuf::from("churnforge-out"),
            workers: 0,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("`{key} = {value}`: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list(value: &str) -> Vec<&str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_axis<T: Copy>(key: &str, value: &str, from: fn(&str) -> Option<T>) -> Result<Vec<T>> {
    list(value)
        .into_iter()
        .map(|t| from(t).ok_or_else(|| bad(key, value, &format!("unknown token `{t}`"))))
        .collect()
}

fn join<T: Copy>(items: &[T], token: fn(T) -> &'static str) -> String {
    items.iter().map(|&t| token(t)).collect::<Vec<_>>().join(",")
}

fn families(key: &str, value: &str) -> Result<Vec<ModelFamily>> {
    let out: Vec<ModelFamily> = list(value)
        .into_iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    let mut seen = out.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != out.len() {
        return Err(bad(key, value, "model listed twice"));
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Parse config text; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
        }
        Self::from_entries(&entries, base)
    }

    pub fn from_entries(entries: &BTreeMap<String, String>, base: Option<&Path>) -> Result<Self> {
        let mut c = PipelineConfig::default();
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let (mut start, mut total, mut train, mut eval) = (
            c.window.start_day(),
            c.window.total_days(),
            c.window.train_months(),
            c.window.eval_months(),
        );
        let mut window_axis_set = false;
        let mut inactivity_set = false;
        for (key, value) in entries {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "data.cdr" => c.cdr = (!v.is_empty()).then(|| resolve(v)),
                "data.sidecar" => c.sidecar = (!v.is_empty()).then(|| resolve(v)),
                "window.start_day" => start = parse_date(v)?,
                "window.total_days" => total = parse_num(k, v)?,
                "window.train_months" => train = parse_num(k, v)?,
                "window.eval_months" => eval = parse_num(k, v)?,
                "sim.n_subscribers" => c.sim.n_subscribers = parse_num(k, v)?,
                "sim.churn_fraction" => c.sim.target_churn_fraction = parse_num(k, v)?,
                "sim.daily_call_rate" => c.sim.daily_call_rate = parse_num(k, v)?,
                "sim.daily_sms_rate" => c.sim.daily_sms_rate = parse_num(k, v)?,
                "sim.alter_pool_size" => c.sim.alter_pool_size = parse_num(k, v)?,
                "sim.churn_decay_days" => c.sim.churn_decay_days = parse_num(k, v)?,
                "sim.competitor_signal_strength" => c.sim.competitor_signal_strength = parse_num(k, v)?,
                "features.measures" => c.axes.measures = parse_axis(k, v, Measure::from_token)?,
                "features.kinds" => c.axes.kinds = parse_axis(k, v, KindDim::from_token)?,
                "features.directions" => c.axes.directions = parse_axis(k, v, DirectionDim::from_token)?,
                "features.times_of_day" => c.axes.times_of_day = parse_axis(k, v, TimeOfDay::from_token)?,
                "features.day_types" => c.axes.day_types = parse_axis(k, v, DayType::from_token)?,
                "features.alter_classes" => c.axes.alter_classes = parse_axis(k, v, ClassDim::from_token)?,
                "features.statistics" => c.axes.statistics = parse_axis(k, v, Statistic::from_token)?,
                "features.windows" => {
                    c.axes.windows = parse_axis(k, v, FeatureWindow::from_token)?;
                    window_axis_set = true;
                }
                "features.inactivity_windows" => {
                    c.axes.inactivity_windows = parse_axis(k, v, FeatureWindow::from_token)?;
                    inactivity_set = true;
                }
                "features.short_call_threshold_s" => c.axes.short_call_threshold_s = parse_num(k, v)?,
                "features.day_hours" => {
                    let parts = list(v);
                    if parts.len() != 2 {
                        return Err(bad(k, v, "want `start,end`"));
                    }
                    c.axes.day_hours = (parse_num(k, parts[0])?, parse_num(k, parts[1])?);
                }
                "features.denominators" => {
                    c.denominators = match v {
                        "default" => default_denominators(),
                        "none" | "" => Vec::new(),
                        _ => list(v).into_iter().map(String::from).collect(),
                    }
                }
                "features.format" => {
                    c.matrix_format = match v {
                        "csv" => MatrixFormat::Csv,
                        "binary" => MatrixFormat::Binary,
                        _ => return Err(bad(k, v, "want `csv` or `binary`")),
                    }
                }
                "selection.n_trees" => c.selection.n_trees = parse_num(k, v)?,
                "selection.k" => c.selection.k = parse_num(k, v)?,
                "selection.max_depth" => c.selection.max_depth = parse_num(k, v)?,
                "selection.max_features" => {
                    c.selection.max_features = match v {
                        "sqrt" => MaxFeatures::Sqrt,
                        "all" => MaxFeatures::All,
                        _ => MaxFeatures::Count(parse_num(k, v)?),
                    }
                }
                "models.roster" => c.roster = families(k, v)?,
                "models.continuous" => c.continuous_roster = families(k, v)?,
                "cv.folds" => c.cv_folds = parse_num(k, v)?,
                "evaluate.bins" => c.histogram_bins = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "output.dir" => c.output_dir = PathBuf::from(v),
                "workers" => c.workers = parse_num(k, v)?,
                _ => {
                    let Some(rest) = k.strip_prefix("model.") else {
                        return Err(Error::Config(format!("unknown key `{k}`")));
                    };
                    let (family, param) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
                    let family: ModelFamily = family.parse()?;
                    c.hyperparameters
                        .entry(family)
                        .or_default()
                        .insert(param.to_string(), parse_num(k, v)?);
                }
            }
        }
        c.window = StudyWindow::new(start, total, train, eval)?;
        c.sim.window = c.window.clone();
        let windows = FeatureWindow::all(train);
        if !window_axis_set {
            c.axes.windows = windows.clone();
        }
        if !inactivity_set {
            c.axes.inactivity_windows = windows;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.axes.validate()?;
        self.sim.validate()?;
        if self.selection.n_trees == 0 || self.selection.k == 0 || self.selection.max_depth == 0 {
            return Err(Error::Config("selection.n_trees, k and max_depth must be positive".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("models.roster is empty".into()));
        }
        if let Some(f) = self
            .continuous_roster
            .iter()
            .find(|f| !matches!(f, ModelFamily::LinReg | ModelFamily::RandomForest))
        {
            return Err(Error::Config(format!("{f} cannot fit a continuous target")));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv.folds must be at least 2".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("evaluate.bins must be at least 1".into()));
        }
        for family in self.hyperparameters.keys() {
            self.model_spec(*family).validate()?;
        }
        Ok(())
    }

    /// Model spec with configured overrides and a per-family sub-seed.
    pub fn model_spec(&self, family: ModelFamily) -> churnforge_core::ModelSpec {
        let mut spec = churnforge_core::ModelSpec::new(family, sub_seed(self.seed, 100 + family as u64));
        if let Some(h) = self.hyperparameters.get(&family) {
            for (k, v) in h {
                spec = spec.with(k, *v);
            }
        }
        spec
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.sim.clone()
        }
    }

    pub fn selection_config(&self) -> TreeSelectConfig {
        TreeSelectConfig {
            seed: sub_seed(self.seed, 1),
            ..self.selection
        }
    }

    pub fn cv_seed(&self) -> u64 {
        sub_seed(self.seed, 2)
    }

    /// Every effective setting except the output directory and worker count,
    /// rendered as sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        put("data.cdr", path(&self.cdr));
        put("data.sidecar", path(&self.sidecar));
        put("window.start_day", self.window.start_day().format("%Y-%m-%d").to_string());
        put("window.total_days", self.window.total_days().to_string());
        put("window.train_months", self.window.train_months().to_string());
        put("window.eval_months", self.window.eval_months().to_string());
        put("sim.n_subscribers", self.sim.n_subscribers.to_string());
        put("sim.churn_fraction", self.sim.target_churn_fraction.to_string());
        put("sim.daily_call_rate", self.sim.daily_call_rate.to_string());
        put("sim.daily_sms_rate", self.sim.daily_sms_rate.to_string());
        put("sim.alter_pool_size", self.sim.alter_pool_size.to_string());
        put("sim.churn_decay_days", self.sim.churn_decay_days.to_string());
        put("sim.competitor_signal_strength", self.sim.competitor_signal_strength.to_string());
        let a = &self.axes;
        put("features.measures", join(&a.measures, Measure::token));
        put("features.kinds", join(&a.kinds, KindDim::token));
        put("features.directions", join(&a.directions, DirectionDim::token));
        put("features.times_of_day", join(&a.times_of_day, TimeOfDay::token));
        put("features.day_types", join(&a.day_types, DayType::token));
        put("features.alter_classes", join(&a.alter_classes, ClassDim::token));
        put("features.statistics", join(&a.statistics, Statistic::token));
        let windows = |w: &[FeatureWindow]| w.iter().map(|w| w.token()).collect::<Vec<_>>().join(",");
        put("features.windows", windows(&a.windows));
        put("features.inactivity_windows", windows(&a.inactivity_windows));
        put("features.short_call_threshold_s", a.short_call_threshold_s.to_string());
        put("features.day_hours", format!("{},{}", a.day_hours.0, a.day_hours.1));
        put("features.denominators", self.denominators.join(","));
        put("features.format", self.matrix_format.token().to_string());
        put("selection.n_trees", self.selection.n_trees.to_string());
        put("selection.k", self.selection.k.to_string());
        put("selection.max_depth", self.selection.max_depth.to_string());
        put(
            "selection.max_features",
            match self.selection.max_features {
                MaxFeatures::Sqrt => "sqrt".to_string(),
                MaxFeatures::All => "all".to_string(),
                MaxFeatures::Count(n) => n.to_string(),
            },
        );
        put("models.roster", join(&self.roster, ModelFamily::as_str));
        put("models.continuous", join(&self.continuous_roster, ModelFamily::as_str));
        for family in &self.roster {
            for (k, v) in &self.model_spec(*family).hyperparameters {
                put(&format!("model.{family}.{k}"), v.to_string());
            }
        }
        put("cv.folds", self.cv_folds.to_string());
        put("evaluate.bins", self.histogram_bins.to_string());
        put("seed", self.seed.to_string());
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let c = PipelineConfig::parse(
            "# comment\nseed = 7\nsim.n_subscribers = 20\nfeatures.denominators = none\nfeatures.kinds = call, sms\nmodel.knn.k = 3\nmodels.roster = knn,logreg\n",
            None,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.sim.n_subscribers, 20);
        assert!(c.denominators.is_empty());
        assert_eq!(c.axes.kinds, vec![KindDim::Call, KindDim::Sms]);
        assert_eq!(c.model_spec(ModelFamily::Knn).hyperparameters["k"], 3.0);
        assert_eq!(c.roster, vec![ModelFamily::Knn, ModelFamily::LogReg]);
    }

    #[test]
    fn rejects_bad_entries() {
        for text in [
            "nonsense = 1",
            "seed = x",
            "seed",
            "seed = 1\nseed = 2",
            "features.kinds = video",
            "model.knn.k = 0",
            "model.knn.depth = 3",
            "model.tree.k = 3",
            "models.continuous = knn",
            "cv.folds = 1",
            "window.eval_months = 0",
        ] {
            assert!(PipelineConfig::parse(text, None).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_and_workers_only() {
        let a = PipelineConfig::parse("output.dir = a\nworkers = 1", None).unwrap();
        let b = PipelineConfig::parse("output.dir = b\nworkers = 4", None).unwrap();
        let c = PipelineConfig::parse("seed = 43", None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        // Spelling out a default changes nothing.
        let d = PipelineConfig::parse("model.knn.k = 15\nfeatures.denominators = default", None).unwrap();
        assert_eq!(a.hash(), d.hash());
    }
}
