//! Combinatoric behavioral features.
//!
//! A feature is a point in an eight-axis tree: measure × kind × direction ×
//! time of day × day type × alter class × window × statistic. Every
//! combination is enumerated (temporal statistics only over the full training
//! window), followed by per-window inactivity fractions and then ratios of
//! every feature over a short list of denominators.
//!
//! Canonical names join the axis tokens with `.`, e.g.
//! `degree.call.out.any.any.any.m1.total`; inactivity features are
//! `inactivity.<window>` and ratios `<numerator>/<denominator>`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cdr::{AlterClass, Direction, Event, EventKind, RecordStore, StudyWindow, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

macro_rules! axis {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }

            pub fn from_token(s: &str) -> Option<Self> {
                match s {
                    $($token => Some($name::$variant),)+
                    _ => None,
                }
            }

            #[allow(dead_code)]
            fn index(self) -> usize {
                self as usize
            }
        }
    };
}

axis!(Measure { Activity => "activity", Degree => "degree" });
axis!(
    /// `ShortCall` matches calls shorter than the configured threshold.
    KindDim { Call => "call", Sms => "sms", ShortCall => "short_call", Any => "any" }
);
axis!(DirectionDim { In => "in", Out => "out", Any => "any" });
axis!(TimeOfDay { Day => "day", Night => "night", Any => "any" });
axis!(DayType { Weekday => "weekday", Weekend => "weekend", Any => "any" });
axis!(ClassDim {
    Onnet => "onnet",
    Competitor => "competitor",
    International => "international",
    InfoPortal => "info_portal",
    MobileMoney => "mobile_money",
    Other => "other",
    Any => "any",
});
axis!(Statistic {
    Total => "total",
    PerActiveDay => "per_active_day",
    MaxMonthlyDelta => "max_monthly_delta",
    TrendSlope => "trend_slope",
});

impl Statistic {
    /// Statistics computed across months, only meaningful on the full window.
    pub fn is_temporal(self) -> bool {
        matches!(self, Statistic::MaxMonthlyDelta | Statistic::TrendSlope)
    }
}

impl ClassDim {
    fn of(class: AlterClass) -> ClassDim {
        ClassDim::ALL[class.index()]
    }
}

/// Training month (1-based) or the whole training period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureWindow {
    Month(u8),
    Full,
}

impl FeatureWindow {
    /// `M1..Mn` followed by `FULL`.
    pub fn all(train_months: u32) -> Vec<FeatureWindow> {
        (1..=train_months as u8)
            .map(FeatureWindow::Month)
            .chain(std::iter::once(FeatureWindow::Full))
            .collect()
    }

    pub fn token(self) -> String {
        match self {
            FeatureWindow::Month(m) => format!("m{m}"),
            FeatureWindow::Full => "full".to_string(),
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        if s == "full" {
            return Some(FeatureWindow::Full);
        }
        let m: u8 = s.strip_prefix('m')?.parse().ok()?;
        (m >= 1).then_some(FeatureWindow::Month(m))
    }
}

/// One leaf of the axis tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceSpec {
    pub measure: Measure,
    pub kind: KindDim,
    pub direction: DirectionDim,
    pub time_of_day: TimeOfDay,
    pub day_type: DayType,
    pub alter_class: ClassDim,
    pub window: FeatureWindow,
    pub statistic: Statistic,
}

impl SliceSpec {
    pub fn is_valid(&self) -> bool {
        !self.statistic.is_temporal() || self.window == FeatureWindow::Full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureSpec {
    Slice(SliceSpec),
    /// Fraction of days in the window with no event of any type.
    Inactivity(FeatureWindow),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatioSpec {
    pub numerator: FeatureSpec,
    pub denominator: FeatureSpec,
}

/// Anything that becomes a matrix column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Base(FeatureSpec),
    Ratio(RatioSpec),
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::Slice(s) => write!(
                f,
                "{}.{}.{}.{}.{}.{}.{}.{}",
                s.measure.token(),
                s.kind.token(),
                s.direction.token(),
                s.time_of_day.token(),
                s.day_type.token(),
                s.alter_class.token(),
                s.window.token(),
                s.statistic.token()
            ),
            FeatureSpec::Inactivity(w) => write!(f, "inactivity.{}", w.token()),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Base(s) => s.fmt(f),
            Feature::Ratio(r) => write!(f, "{}/{}", r.numerator, r.denominator),
        }
    }
}

impl Feature {
    pub fn canonical_name(&self) -> String {
        self.to_string()
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownFeature(s.to_string());
        let tokens: Vec<&str> = s.split('.').collect();
        match tokens.as_slice() {
            ["inactivity", w] => Ok(FeatureSpec::Inactivity(
                FeatureWindow::from_token(w).ok_or_else(unknown)?,
            )),
            [m, k, d, t, dt, c, w, st] => {
                let spec = SliceSpec {
                    measure: Measure::from_token(m).ok_or_else(unknown)?,
                    kind: KindDim::from_token(k).ok_or_else(unknown)?,
                    direction: DirectionDim::from_token(d).ok_or_else(unknown)?,
                    time_of_day: TimeOfDay::from_token(t).ok_or_else(unknown)?,
                    day_type: DayType::from_token(dt).ok_or_else(unknown)?,
                    alter_class: ClassDim::from_token(c).ok_or_else(unknown)?,
                    window: FeatureWindow::from_token(w).ok_or_else(unknown)?,
                    statistic: Statistic::from_token(st).ok_or_else(unknown)?,
                };
                if !spec.is_valid() {
                    return Err(unknown());
                }
                Ok(FeatureSpec::Slice(spec))
            }
            _ => Err(unknown()),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            None => Ok(Feature::Base(s.parse()?)),
            Some((num, den)) => {
                let numerator: FeatureSpec = num.parse()?;
                let denominator: FeatureSpec = den.parse()?;
                if numerator == denominator {
                    return Err(Error::UnknownFeature(s.to_string()));
                }
                Ok(Feature::Ratio(RatioSpec {
                    numerator,
                    denominator,
                }))
            }
        }
    }
}

/// Dimensions enumerated on each axis plus the slicing parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxesConfig {
    pub measures: Vec<Measure>,
    pub kinds: Vec<KindDim>,
    pub directions: Vec<DirectionDim>,
    pub times_of_day: Vec<TimeOfDay>,
    pub day_types: Vec<DayType>,
    pub alter_classes: Vec<ClassDim>,
    pub windows: Vec<FeatureWindow>,
    pub statistics: Vec<Statistic>,
    /// Windows receiving an inactivity feature; independent of `windows`.
    pub inactivity_windows: Vec<FeatureWindow>,
    /// Calls strictly shorter than this count as short calls.
    pub short_call_threshold_s: u32,
    /// `[start, end)` UTC hours counted as daytime.
    pub day_hours: (u8, u8),
}

impl Default for AxesConfig {
    fn default() -> Self {
        AxesConfig {
            measures: Measure::ALL.to_vec(),
            kinds: KindDim::ALL.to_vec(),
            directions: DirectionDim::ALL.to_vec(),
            times_of_day: TimeOfDay::ALL.to_vec(),
            day_types: DayType::ALL.to_vec(),
            alter_classes: ClassDim::ALL.to_vec(),
            windows: FeatureWindow::all(4),
            statistics: Statistic::ALL.to_vec(),
            inactivity_windows: FeatureWindow::all(4),
            short_call_threshold_s: 10,
            day_hours: (8, 20),
        }
    }
}

fn check_axis<T: Copy + Eq + std::hash::Hash + fmt::Debug>(name: &str, dims: &[T]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Config(format!("axis `{name}` has no dimensions")));
    }
    let mut seen = HashSet::new();
    for d in dims {
        if !seen.insert(*d) {
            return Err(Error::Config(format!("axis `{name}` repeats {d:?}")));
        }
    }
    Ok(())
}

impl AxesConfig {
    /// Axes configured for a window with `train_months` training months.
    pub fn for_window(window: &StudyWindow) -> Self {
        let windows = FeatureWindow::all(window.train_months());
        AxesConfig {
            windows: windows.clone(),
            inactivity_windows: windows,
            ..AxesConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("measure", &self.measures)?;
        check_axis("kind", &self.kinds)?;
        check_axis("direction", &self.directions)?;
        check_axis("time_of_day", &self.times_of_day)?;
        check_axis("day_type", &self.day_types)?;
        check_axis("alter_class", &self.alter_classes)?;
        check_axis("window", &self.windows)?;
        check_axis("statistic", &self.statistics)?;
        if self.inactivity_windows.iter().collect::<HashSet<_>>().len()
            != self.inactivity_windows.len()
        {
            return Err(Error::Config("inactivity windows repeat".into()));
        }
        let (a, b) = self.day_hours;
        if a >= b || b > 24 {
            return Err(Error::Config(format!("bad day hours [{a},{b})")));
        }
        Ok(())
    }

    fn base_slices(&self) -> impl Iterator<Item = SliceSpec> + '_ {
        let mut out = Vec::new();
        for &measure in &self.measures {
            for &kind in &self.kinds {
                for &direction in &self.directions {
                    for &time_of_day in &self.times_of_day {
                        for &day_type in &self.day_types {
                            for &alter_class in &self.alter_classes {
                                for &window in &self.windows {
                                    for &statistic in &self.statistics {
                                        let s = SliceSpec {
                                            measure,
                                            kind,
                                            direction,
                                            time_of_day,
                                            day_type,
                                            alter_class,
                                            window,
                                            statistic,
                                        };
                                        if s.is_valid() {
                                            out.push(s);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out.into_iter()
    }

    /// Slices and inactivity features, in enumeration order.
    pub fn base_features(&self) -> Vec<FeatureSpec> {
        self.base_slices()
            .map(FeatureSpec::Slice)
            .chain(self.inactivity_windows.iter().map(|&w| FeatureSpec::Inactivity(w)))
            .collect()
    }
}

/// The six denominators used for ratio features by default: incoming calls,
/// outgoing calls, call degree, SMS degree, incoming degree and inactivity,
/// all over the full training window.
pub fn default_denominators() -> Vec<String> {
    [
        "activity.call.in.any.any.any.full.total",
        "activity.call.out.any.any.any.full.total",
        "degree.call.any.any.any.any.full.total",
        "degree.sms.any.any.any.any.full.total",
        "degree.any.in.any.any.any.full.total",
        "inactivity.full",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Closed-form feature count for a configuration.
pub fn count_features(config: &AxesConfig, n_denominators: usize) -> u64 {
    let filters = [
        config.measures.len(),
        config.kinds.len(),
        config.directions.len(),
        config.times_of_day.len(),
        config.day_types.len(),
        config.alter_classes.len(),
    ]
    .iter()
    .map(|&d| d as u64)
    .product::<u64>();
    let plain_stats = config.statistics.iter().filter(|s| !s.is_temporal()).count() as u64;
    let temporal_stats = config.statistics.len() as u64 - plain_stats;
    let has_full = config.windows.contains(&FeatureWindow::Full) as u64;
    let per_filter = config.windows.len() as u64 * plain_stats + has_full * temporal_stats;
    let base = filters * per_filter + config.inactivity_windows.len() as u64;
    let d = n_denominators as u64;
    // Each denominator is itself a base feature, so one self-ratio is skipped per denominator.
    base + base * d - d
}

/// Base features, then inactivity features, then every base feature over each
/// denominator (self-ratios skipped).
pub fn enumerate_features(config: &AxesConfig, denominators: &[String]) -> Result<Vec<Feature>> {
    config.validate()?;
    let base = config.base_features();
    let base_set: HashSet<&FeatureSpec> = base.iter().collect();
    let mut dens = Vec::with_capacity(denominators.len());
    for name in denominators {
        let spec: FeatureSpec = name.parse().map_err(|_| {
            Error::Config(format!("unknown denominator `{name}`"))
        })?;
        if !base_set.contains(&spec) {
            return Err(Error::Config(format!(
                "denominator `{name}` is not produced by the axis configuration"
            )));
        }
        if dens.contains(&spec) {
            return Err(Error::Config(format!("denominator `{name}` listed twice")));
        }
        dens.push(spec);
    }

    let mut out: Vec<Feature> = base.iter().map(|&s| Feature::Base(s)).collect();
    for &numerator in &base {
        for &denominator in &dens {
            if numerator != denominator {
                out.push(Feature::Ratio(RatioSpec {
                    numerator,
                    denominator,
                }));
            }
        }
    }
    Ok(out)
}

const N_KIND: usize = 4;
const N_DIR: usize = 3;
const N_TOD: usize = 3;
const N_DAYTYPE: usize = 3;
const N_CLASS: usize = 7;
/// Every filter combination over the full dimension universe.
const N_CELLS: usize = N_KIND * N_DIR * N_TOD * N_DAYTYPE * N_CLASS;

fn cell_index(k: KindDim, d: DirectionDim, t: TimeOfDay, w: DayType, c: ClassDim) -> usize {
    (((k.index() * N_DIR + d.index()) * N_TOD + t.index()) * N_DAYTYPE + w.index()) * N_CLASS
        + c.index()
}

#[derive(Debug, Clone, Copy)]
enum WindowSel {
    Month(usize),
    Full,
}

#[derive(Debug, Clone, Copy)]
enum BasePlan {
    Slice {
        cell: usize,
        measure: Measure,
        window: WindowSel,
        statistic: Statistic,
    },
    Inactivity(WindowSel),
}

#[derive(Debug, Clone, Copy)]
enum Plan {
    Base(BasePlan),
    Ratio(BasePlan, BasePlan),
}

fn plan_window(w: FeatureWindow, n_months: usize, name: &dyn fmt::Display) -> Result<WindowSel> {
    match w {
        FeatureWindow::Full => Ok(WindowSel::Full),
        FeatureWindow::Month(m) if (m as usize) >= 1 && (m as usize) <= n_months => {
            Ok(WindowSel::Month(m as usize - 1))
        }
        FeatureWindow::Month(m) => Err(Error::Config(format!(
            "feature `{name}` references month {m} but training has {n_months} months"
        ))),
    }
}

fn plan_base(spec: &FeatureSpec, n_months: usize) -> Result<BasePlan> {
    match spec {
        FeatureSpec::Slice(s) => Ok(BasePlan::Slice {
            cell: cell_index(s.kind, s.direction, s.time_of_day, s.day_type, s.alter_class),
            measure: s.measure,
            window: plan_window(s.window, n_months, spec)?,
            statistic: s.statistic,
        }),
        FeatureSpec::Inactivity(w) => Ok(BasePlan::Inactivity(plan_window(*w, n_months, spec)?)),
    }
}

/// Per-subscriber accumulators: event counts and alter bitsets for every
/// (filter cell, training month).
struct Scratch {
    n_months: usize,
    counts: Vec<u32>,
    bits: Vec<u64>,
    words: usize,
    alters: Vec<u32>,
    /// Monthly and full-window values per cell, per measure.
    activity: Vec<f64>,
    degree: Vec<f64>,
    active_day: Vec<bool>,
    /// Active days per month then full window.
    active_days: Vec<u32>,
    window_days: Vec<u32>,
}

impl Scratch {
    fn new(n_months: usize, window_days: Vec<u32>) -> Self {
        Scratch {
            n_months,
            counts: vec![0; N_CELLS * n_months],
            bits: Vec::new(),
            words: 0,
            alters: Vec::new(),
            activity: vec![0.0; N_CELLS * (n_months + 1)],
            degree: vec![0.0; N_CELLS * (n_months + 1)],
            active_day: Vec::new(),
            active_days: vec![0; n_months + 1],
            window_days,
        }
    }
}

struct Engine<'a> {
    window: &'a StudyWindow,
    month_of_day: Vec<u8>,
    train_days: u32,
    short_call_threshold_s: u32,
    day_hours: (u8, u8),
    plans: Vec<Plan>,
}

impl Engine<'_> {
    fn accumulate(&self, events: &[Event], s: &mut Scratch) {
        let m = s.n_months;
        let start_ts = self.window.start_timestamp();

        s.alters.clear();
        s.alters.extend(events.iter().map(|e| e.alter));
        s.alters.sort_unstable();
        s.alters.dedup();
        s.words = s.alters.len().div_ceil(64).max(1);
        s.counts.iter_mut().for_each(|c| *c = 0);
        s.bits.clear();
        s.bits.resize(N_CELLS * m * s.words, 0);
        s.active_day.clear();
        s.active_day.resize(self.train_days as usize, false);

        let mut kinds = [KindDim::Any; 3];
        for e in events {
            let offset = e.timestamp - start_ts;
            let day = (offset / SECONDS_PER_DAY) as u32;
            if day >= self.train_days {
                break;
            }
            s.active_day[day as usize] = true;
            let month = self.month_of_day[day as usize] as usize;
            let hour = ((offset % SECONDS_PER_DAY) / 3600) as u8;

            let mut nk = 0;
            let base_kind = match e.kind {
                EventKind::Call => KindDim::Call,
                EventKind::Sms => KindDim::Sms,
            };
            kinds[nk] = base_kind;
            nk += 1;
            if e.kind == EventKind::Call && e.duration_s < self.short_call_threshold_s {
                kinds[nk] = KindDim::ShortCall;
                nk += 1;
            }
            kinds[nk] = KindDim::Any;
            nk += 1;
            let dirs = [
                match e.direction {
                    Direction::In => DirectionDim::In,
                    Direction::Out => DirectionDim::Out,
                },
                DirectionDim::Any,
            ];
            let tods = [
                if hour >= self.day_hours.0 && hour < self.day_hours.1 {
                    TimeOfDay::Day
                } else {
                    TimeOfDay::Night
                },
                TimeOfDay::Any,
            ];
            let dts = [
                if self.window.is_weekend(day) {
                    DayType::Weekend
                } else {
                    DayType::Weekday
                },
                DayType::Any,
            ];
            let classes = [ClassDim::of(e.alter_class), ClassDim::Any];
            let local = s.alters.binary_search(&e.alter).unwrap();
            let (word, bit) = (local / 64, 1u64 << (local % 64));

            for &k in &kinds[..nk] {
                for &d in &dirs {
                    for &t in &tods {
                        for &w in &dts {
                            for &c in &classes {
                                let slot = cell_index(k, d, t, w, c) * m + month;
                                s.counts[slot] += 1;
                                s.bits[slot * s.words + word] |= bit;
                            }
                        }
                    }
                }
            }
        }

        let words = s.words;
        let mut union = vec![0u64; words];
        for cell in 0..N_CELLS {
            let mut total = 0u32;
            union.iter_mut().for_each(|u| *u = 0);
            for month in 0..m {
                let slot = cell * m + month;
                total += s.counts[slot];
                let b = &s.bits[slot * words..(slot + 1) * words];
                let mut deg = 0u32;
                for (u, &x) in union.iter_mut().zip(b) {
                    deg += x.count_ones();
                    *u |= x;
                }
                s.activity[cell * (m + 1) + month] = s.counts[slot] as f64;
                s.degree[cell * (m + 1) + month] = deg as f64;
            }
            s.activity[cell * (m + 1) + m] = total as f64;
            s.degree[cell * (m + 1) + m] =
                union.iter().map(|u| u.count_ones()).sum::<u32>() as f64;
        }

        s.active_days.iter_mut().for_each(|a| *a = 0);
        for (day, &active) in s.active_day.iter().enumerate() {
            if active {
                s.active_days[self.month_of_day[day] as usize] += 1;
                s.active_days[m] += 1;
            }
        }
    }

    fn eval_base(&self, plan: &BasePlan, s: &Scratch) -> f64 {
        let m = s.n_months;
        let sel = |w: &WindowSel| match *w {
            WindowSel::Month(i) => i,
            WindowSel::Full => m,
        };
        match plan {
            BasePlan::Inactivity(w) => {
                let i = sel(w);
                let days = s.window_days[i];
                if days == 0 {
                    0.0
                } else {
                    (days - s.active_days[i]) as f64 / days as f64
                }
            }
            BasePlan::Slice {
                cell,
                measure,
                window,
                statistic,
            } => {
                let series = match measure {
                    Measure::Activity => &s.activity[cell * (m + 1)..(cell + 1) * (m + 1)],
                    Measure::Degree => &s.degree[cell * (m + 1)..(cell + 1) * (m + 1)],
                };
                let i = sel(window);
                match statistic {
                    Statistic::Total => series[i],
                    Statistic::PerActiveDay => {
                        let active = s.active_days[i];
                        if active == 0 {
                            0.0
                        } else {
                            series[i] / active as f64
                        }
                    }
                    Statistic::MaxMonthlyDelta => max_monthly_delta(&series[..m]),
                    Statistic::TrendSlope => trend_slope(&series[..m]),
                }
            }
        }
    }

    fn fill_row(&self, events: &[Event], s: &mut Scratch, row: &mut [f64]) {
        self.accumulate(events, s);
        for (out, plan) in row.iter_mut().zip(&self.plans) {
            *out = match plan {
                Plan::Base(b) => self.eval_base(b, s),
                Plan::Ratio(num, den) => {
                    let d = self.eval_base(den, s);
                    if d == 0.0 {
                        0.0
                    } else {
                        self.eval_base(num, s) / d
                    }
                }
            };
        }
    }
}

/// Largest absolute change between consecutive months.
pub fn max_monthly_delta(monthly: &[f64]) -> f64 {
    monthly
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max)
}

/// Least-squares slope of monthly values against month index 1..n.
pub fn trend_slope(monthly: &[f64]) -> f64 {
    let n = monthly.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n as f64 + 1.0) / 2.0;
    let y_mean = monthly.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in monthly.iter().enumerate() {
        let dx = (i + 1) as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Dense feature matrix over the training months of the store's window,
/// one row per subscriber in store order.
pub fn compute_matrix(
    store: &RecordStore,
    features: &[Feature],
    config: &AxesConfig,
) -> Result<FeatureMatrix> {
    config.validate()?;
    let window = store.window();
    let train = window.train_month_ranges();
    let n_months = train.len();
    let plans = features
        .iter()
        .map(|f| {
            Ok(match f {
                Feature::Base(b) => Plan::Base(plan_base(b, n_months)?),
                Feature::Ratio(r) => Plan::Ratio(
                    plan_base(&r.numerator, n_months)?,
                    plan_base(&r.denominator, n_months)?,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let train_days = train.last().map(|r| r.end).unwrap_or(0);
    let mut month_of_day = vec![0u8; train_days as usize];
    for (i, r) in train.iter().enumerate() {
        for d in r.start..r.end {
            month_of_day[d as usize] = i as u8;
        }
    }
    let mut window_days: Vec<u32> = train.iter().map(|r| r.len()).collect();
    window_days.push(train_days);

    let engine = Engine {
        window,
        month_of_day,
        train_days,
        short_call_threshold_s: config.short_call_threshold_s,
        day_hours: config.day_hours,
        plans,
    };

    let columns: Vec<String> = features.iter().map(|f| f.canonical_name()).collect();
    let mut matrix = FeatureMatrix::zeros(store.ego_ids().to_vec(), columns);
    let p = features.len();
    if p > 0 {
        matrix
            .values_mut()
            .par_chunks_mut(p)
            .enumerate()
            .for_each_init(
                || Scratch::new(n_months, window_days.clone()),
                |scratch, (i, row)| engine.fill_row(store.events_of(i), scratch, row),
            );
    }
    matrix.check_finite().map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdr::CdrRecord;

    fn slice(measure: Measure, kind: KindDim, dir: DirectionDim, w: FeatureWindow, st: Statistic) -> Feature {
        Feature::Base(FeatureSpec::Slice(SliceSpec {
            measure,
            kind,
            direction: dir,
            time_of_day: TimeOfDay::Any,
            day_type: DayType::Any,
            alter_class: ClassDim::Any,
            window: w,
            statistic: st,
        }))
    }

    /// Independent count: walk every axis combination and apply the pruning rule.
    fn brute_force_count(config: &AxesConfig, n_den: usize) -> u64 {
        let mut n = 0u64;
        for _ in &config.measures {
            for _ in &config.kinds {
                for _ in &config.directions {
                    for _ in &config.times_of_day {
                        for _ in &config.day_types {
                            for _ in &config.alter_classes {
                                for w in &config.windows {
                                    for s in &config.statistics {
                                        if !s.is_temporal() || *w == FeatureWindow::Full {
                                            n += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        n += config.inactivity_windows.len() as u64;
        n * (n_den as u64 + 1) - n_den as u64
    }

    #[test]
    fn default_count_matches_product_and_enumeration() {
        let c = AxesConfig::default();
        assert_eq!(2 * 4 * 3 * 3 * 3 * 7 * (5 * 2 + 2) + 5, 18_149);
        assert_eq!(count_features(&c, 0), 18_149);
        assert_eq!(brute_force_count(&c, 0), 18_149);
        assert_eq!(enumerate_features(&c, &[]).unwrap().len(), 18_149);
    }

    #[test]
    fn ratio_count_with_default_denominators() {
        let c = AxesConfig::default();
        let den = default_denominators();
        let n = enumerate_features(&c, &den).unwrap().len() as u64;
        assert_eq!(n, 18_149 + (18_149 - 1) * 6);
        assert_eq!(n, count_features(&c, 6));
        assert_eq!(n, brute_force_count(&c, 6));
    }

    #[test]
    fn degenerate_tree() {
        let c = AxesConfig {
            measures: vec![Measure::Activity],
            kinds: vec![KindDim::Any],
            directions: vec![DirectionDim::Any],
            times_of_day: vec![TimeOfDay::Any],
            day_types: vec![DayType::Any],
            alter_classes: vec![ClassDim::Any],
            windows: vec![FeatureWindow::Full],
            statistics: vec![Statistic::Total],
            ..AxesConfig::default()
        };
        let f = enumerate_features(&c, &[]).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(count_features(&c, 0), 6);
        assert_eq!(f[0].canonical_name(), "activity.any.any.any.any.any.full.total");
        assert_eq!(f[5].canonical_name(), "inactivity.full");
    }

    #[test]
    fn unknown_denominator_is_config_error() {
        let c = AxesConfig::default();
        let err = enumerate_features(&c, &["degree.bogus".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let twice = vec!["inactivity.full".to_string(), "inactivity.full".to_string()];
        assert!(enumerate_features(&c, &twice).is_err());
    }

    #[test]
    fn names_are_injective_and_parse_back() {
        let c = AxesConfig::default();
        let feats = enumerate_features(&c, &default_denominators()[..2]).unwrap();
        let mut seen = HashSet::new();
        for f in &feats {
            let name = f.canonical_name();
            assert_eq!(&name.parse::<Feature>().unwrap(), f);
            assert!(seen.insert(name));
        }
    }

    #[test]
    fn pruned_specs_do_not_parse() {
        assert!("activity.any.any.any.any.any.m1.trend_slope".parse::<Feature>().is_err());
        assert!("activity.any.any.any.any.any.full.trend_slope".parse::<Feature>().is_ok());
        assert!("inactivity.full/inactivity.full".parse::<Feature>().is_err());
    }

    #[test]
    fn monthly_statistics() {
        assert_eq!(max_monthly_delta(&[10.0, 4.0, 6.0, 2.0]), 6.0);
        assert_eq!(trend_slope(&[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(trend_slope(&[5.0]), 0.0);
    }

    fn rec(ego: &str, alter: &str, day: i64, kind: EventKind, dir: Direction) -> CdrRecord {
        let w = StudyWindow::standard();
        CdrRecord {
            ego_id: ego.into(),
            alter_id: alter.into(),
            timestamp: w.start_timestamp() + day * SECONDS_PER_DAY + 12 * 3600,
            kind,
            direction: dir,
            duration_s: if kind == EventKind::Call { 60 } else { 0 },
            alter_class: AlterClass::Onnet,
        }
    }

    #[test]
    fn counts_and_degree_in_first_month() {
        use Direction::*;
        use EventKind::*;
        let recs = vec![
            rec("E", "A", 0, Call, Out),
            rec("E", "A", 1, Call, Out),
            rec("E", "B", 1, Call, Out),
            // other ego entirely inactive during training
            rec("Q", "A", 150, Sms, In),
        ];
        let store = RecordStore::from_records(StudyWindow::standard(), recs).unwrap();
        let m1 = FeatureWindow::Month(1);
        let feats = vec![
            slice(Measure::Activity, KindDim::Call, DirectionDim::Out, m1, Statistic::Total),
            slice(Measure::Degree, KindDim::Call, DirectionDim::Out, m1, Statistic::Total),
            slice(Measure::Activity, KindDim::Any, DirectionDim::Any, FeatureWindow::Full, Statistic::PerActiveDay),
            Feature::Base(FeatureSpec::Inactivity(FeatureWindow::Full)),
            "activity.any.any.any.any.any.full.total/degree.any.any.any.any.any.full.total"
                .parse()
                .unwrap(),
        ];
        let m = compute_matrix(&store, &feats, &AxesConfig::default()).unwrap();
        assert_eq!(m.row_ids(), &["E".to_string(), "Q".to_string()]);
        assert_eq!(m.row(0)[..3], [3.0, 2.0, 1.5]);
        assert_eq!(m.row(0)[3], 120.0 / 122.0);
        assert_eq!(m.row(0)[4], 1.5);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn month_outside_training_is_rejected() {
        let store = RecordStore::from_records(StudyWindow::standard(), vec![]).unwrap();
        let f: Feature = "activity.any.any.any.any.any.m5.total".parse().unwrap();
        assert!(matches!(
            compute_matrix(&store, &[f], &AxesConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
