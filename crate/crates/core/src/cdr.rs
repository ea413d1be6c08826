//! Call-detail record model, CSV ingestion and windowed per-subscriber access.
//!
//! A [`RecordStore`] groups events by subscriber (ego) in lexicographic ego
//! order, each group sorted by timestamp. Identifiers are interned: alters are
//! stored as indices into a sorted name table, so two stores built from the
//! same rows compare equal regardless of the row order in the source file.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Exact header line of the CDR CSV format.
pub const CDR_HEADER: [&str; 7] = [
    "ego_id",
    "alter_id",
    "timestamp",
    "kind",
    "direction",
    "duration_s",
    "alter_class",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Call,
    Sms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    In,
    Out,
}

/// Network class of the counterparty number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlterClass {
    Onnet,
    Competitor,
    International,
    InfoPortal,
    MobileMoney,
    Other,
}

impl AlterClass {
    pub const ALL: [AlterClass; 6] = [
        AlterClass::Onnet,
        AlterClass::Competitor,
        AlterClass::International,
        AlterClass::InfoPortal,
        AlterClass::MobileMoney,
        AlterClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

macro_rules! token_enum {
    ($ty:ty { $($variant:ident => $token:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $(<$ty>::$variant => $token,)+
                }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($token => Ok(<$ty>::$variant),)+
                    other => Err(Error::Data(format!(
                        "unknown {} token `{}`",
                        stringify!($ty),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

token_enum!(EventKind { Call => "CALL", Sms => "SMS" });
token_enum!(Direction { In => "IN", Out => "OUT" });
token_enum!(AlterClass {
    Onnet => "ONNET",
    Competitor => "COMPETITOR",
    International => "INTERNATIONAL",
    InfoPortal => "INFO_PORTAL",
    MobileMoney => "MOBILE_MONEY",
    Other => "OTHER",
});

/// One call or SMS as it appears in the CSV feed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdrRecord {
    pub ego_id: String,
    pub alter_id: String,
    pub timestamp: i64,
    pub kind: EventKind,
    pub direction: Direction,
    pub duration_s: u32,
    pub alter_class: AlterClass,
}

/// Half-open range of day indices `[start, end)` relative to the window start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DayRange {
    pub start: u32,
    pub end: u32,
}

impl DayRange {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(start <= end);
        DayRange { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, day: u32) -> bool {
        self.start <= day && day < self.end
    }
}

/// Observation window: a start date tiled into 30/31-day months, the first
/// `train_months` of which feed the features and the rest the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyWindow {
    start_day: NaiveDate,
    total_days: u32,
    train_months: u32,
    eval_months: u32,
    months: Vec<DayRange>,
}

impl StudyWindow {
    pub fn new(
        start_day: NaiveDate,
        total_days: u32,
        train_months: u32,
        eval_months: u32,
    ) -> Result<Self> {
        if train_months == 0 {
            return Err(Error::Config("train_months must be at least 1".into()));
        }
        if eval_months == 0 {
            return Err(Error::Config("eval_months must be at least 1".into()));
        }
        let n = train_months + eval_months;
        if total_days < 30 * n || total_days > 31 * n {
            return Err(Error::Config(format!(
                "total_days {total_days} cannot be tiled into {n} months of 30 or 31 days"
            )));
        }
        // Spread the 31-day months evenly, leading with a long month:
        // 183 days over 6 months gives 31,30,31,30,31,30.
        let extra = (total_days - 30 * n) as u64;
        let n64 = n as u64;
        let ceil_div = |a: u64| a.div_ceil(n64);
        let mut months = Vec::with_capacity(n as usize);
        let mut start = 0u32;
        for i in 0..n64 {
            let long = ceil_div((i + 1) * extra) > ceil_div(i * extra);
            let len = if long { 31 } else { 30 };
            months.push(DayRange::new(start, start + len));
            start += len;
        }
        debug_assert_eq!(start, total_days);
        Ok(StudyWindow {
            start_day,
            total_days,
            train_months,
            eval_months,
            months,
        })
    }

    /// 183 days from 2014-01-01, four training months and two evaluation months.
    pub fn standard() -> Self {
        StudyWindow::new(NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(), 183, 4, 2)
            .expect("default window tiles")
    }

    pub fn start_day(&self) -> NaiveDate {
        self.start_day
    }

    pub fn total_days(&self) -> u32 {
        self.total_days
    }

    pub fn train_months(&self) -> u32 {
        self.train_months
    }

    pub fn eval_months(&self) -> u32 {
        self.eval_months
    }

    pub fn months(&self) -> &[DayRange] {
        &self.months
    }

    pub fn train_month_ranges(&self) -> &[DayRange] {
        &self.months[..self.train_months as usize]
    }

    pub fn full_range(&self) -> DayRange {
        DayRange::new(0, self.total_days)
    }

    /// Unix seconds of the window's first midnight (UTC).
    pub fn start_timestamp(&self) -> i64 {
        self.start_day
            .and_hms_opt(0, 0, 0)
            .unwrap()
            .and_utc()
            .timestamp()
    }

    pub fn end_timestamp(&self) -> i64 {
        self.start_timestamp() + self.total_days as i64 * SECONDS_PER_DAY
    }

    pub fn contains_timestamp(&self, ts: i64) -> bool {
        ts >= self.start_timestamp() && ts < self.end_timestamp()
    }

    /// Day index of an in-window timestamp.
    pub fn day_of(&self, ts: i64) -> u32 {
        (ts - self.start_timestamp()).div_euclid(SECONDS_PER_DAY) as u32
    }

    /// Monday = 0 .. Sunday = 6 for the window's first day.
    pub fn first_weekday(&self) -> u32 {
        self.start_day.weekday().num_days_from_monday()
    }

    pub fn is_weekend(&self, day: u32) -> bool {
        (self.first_weekday() + day) % 7 >= 5
    }

    /// Parse the `key=value` dataset sidecar.
    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut start_day = None;
        let mut total_days = None;
        let mut train_months = None;
        let mut eval_months = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("sidecar line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_u32 = |v: &str| {
                v.parse::<u32>()
                    .map_err(|_| Error::Config(format!("sidecar `{key}`: bad integer `{v}`")))
            };
            match key {
                "start_day" => {
                    start_day = Some(NaiveDate::parse_from_str(value, "%Y-%m-%d").map_err(
                        |_| Error::Config(format!("sidecar `start_day`: bad date `{value}`")),
                    )?)
                }
                "total_days" => total_days = Some(parse_u32(value)?),
                "train_months" => train_months = Some(parse_u32(value)?),
                "eval_months" => eval_months = Some(parse_u32(value)?),
                other => return Err(Error::Config(format!("sidecar: unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("sidecar: missing `{k}`"));
        StudyWindow::new(
            start_day.ok_or_else(|| missing("start_day"))?,
            total_days.ok_or_else(|| missing("total_days"))?,
            train_months.ok_or_else(|| missing("train_months"))?,
            eval_months.ok_or_else(|| missing("eval_months"))?,
        )
    }

    pub fn to_sidecar(&self) -> String {
        format!(
            "start_day={}\ntotal_days={}\ntrain_months={}\neval_months={}\n",
            self.start_day.format("%Y-%m-%d"),
            self.total_days,
            self.train_months,
            self.eval_months
        )
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

/// Stored event; the ego is implied by the group it sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub timestamp: i64,
    /// Index into [`RecordStore::alter_name`].
    pub alter: u32,
    pub duration_s: u32,
    pub kind: EventKind,
    pub direction: Direction,
    pub alter_class: AlterClass,
}

/// Immutable, subscriber-grouped event store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordStore {
    window: StudyWindow,
    egos: Vec<String>,
    /// `offsets[i]..offsets[i + 1]` delimits ego `i`'s events.
    offsets: Vec<usize>,
    events: Vec<Event>,
    alters: Vec<String>,
}

/// Row that failed validation during ingest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub store: RecordStore,
    pub rejects: Vec<RejectedRow>,
}

impl RecordStore {
    /// Build a store from in-memory records. Records are validated against
    /// the window exactly like ingested rows; the first violation is an error.
    pub fn from_records(window: StudyWindow, records: Vec<CdrRecord>) -> Result<Self> {
        let mut builder = StoreBuilder::default();
        for (i, rec) in records.into_iter().enumerate() {
            validate(&rec, &window).map_err(|reason| {
                Error::Data(format!("record {i}: {reason}"))
            })?;
            builder.push(rec, i as u64);
        }
        Ok(builder.finish(window))
    }

    pub fn window(&self) -> &StudyWindow {
        &self.window
    }

    pub fn subscriber_count(&self) -> usize {
        self.egos.len()
    }

    pub fn record_count(&self) -> usize {
        self.events.len()
    }

    pub fn ego_ids(&self) -> &[String] {
        &self.egos
    }

    pub fn alter_name(&self, alter: u32) -> &str {
        &self.alters[alter as usize]
    }

    pub fn alter_count(&self) -> usize {
        self.alters.len()
    }

    pub fn events_of(&self, index: usize) -> &[Event] {
        &self.events[self.offsets[index]..self.offsets[index + 1]]
    }

    /// Subscribers in lexicographic order with their time-sorted events.
    pub fn subscribers(&self) -> impl ExactSizeIterator<Item = (&str, &[Event])> + '_ {
        (0..self.egos.len()).map(move |i| (self.egos[i].as_str(), self.events_of(i)))
    }

    /// Events whose day index falls inside `range`, per subscriber.
    pub fn slice(&self, range: DayRange) -> StoreView<'_> {
        let lo = self.window.start_timestamp() + range.start as i64 * SECONDS_PER_DAY;
        let hi = self.window.start_timestamp() + range.end as i64 * SECONDS_PER_DAY;
        let spans = (0..self.egos.len())
            .map(|i| {
                let base = self.offsets[i];
                let evs = self.events_of(i);
                let a = evs.partition_point(|e| e.timestamp < lo);
                let b = evs.partition_point(|e| e.timestamp < hi);
                base + a..base + b.max(a)
            })
            .collect();
        StoreView {
            store: self,
            range,
            spans,
        }
    }

    pub fn to_records(&self) -> impl Iterator<Item = CdrRecord> + '_ {
        self.subscribers().flat_map(move |(ego, evs)| {
            evs.iter().map(move |e| CdrRecord {
                ego_id: ego.to_string(),
                alter_id: self.alter_name(e.alter).to_string(),
                timestamp: e.timestamp,
                kind: e.kind,
                direction: e.direction,
                duration_s: e.duration_s,
                alter_class: e.alter_class,
            })
        })
    }

    /// Write the store in the CDR CSV format.
    pub fn export<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = CdrWriter::new(out)?;
        for rec in self.to_records() {
            w.write(&rec)?;
        }
        w.finish()
    }
}

/// Borrowed per-subscriber view of the events inside a day range. Every
/// subscriber of the parent store is present, possibly with no events.
#[derive(Debug, Clone)]
pub struct StoreView<'a> {
    store: &'a RecordStore,
    range: DayRange,
    spans: Vec<Range<usize>>,
}

impl<'a> StoreView<'a> {
    pub fn range(&self) -> DayRange {
        self.range
    }

    pub fn store(&self) -> &'a RecordStore {
        self.store
    }

    pub fn subscriber_count(&self) -> usize {
        self.spans.len()
    }

    pub fn record_count(&self) -> usize {
        self.spans.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.iter().all(|s| s.is_empty())
    }

    pub fn events_of(&self, index: usize) -> &'a [Event] {
        &self.store.events[self.spans[index].clone()]
    }

    pub fn subscribers(&self) -> impl ExactSizeIterator<Item = (&'a str, &'a [Event])> + '_ {
        (0..self.spans.len()).map(move |i| (self.store.egos[i].as_str(), self.events_of(i)))
    }

    /// Materialize as a standalone store. Subscribers left without events
    /// are dropped, matching what ingesting the exported rows would give.
    pub fn to_store(&self) -> RecordStore {
        let mut builder = StoreBuilder::default();
        let mut line = 0u64;
        for (ego, evs) in self.subscribers() {
            for e in evs {
                builder.push(
                    CdrRecord {
                        ego_id: ego.to_string(),
                        alter_id: self.store.alter_name(e.alter).to_string(),
                        timestamp: e.timestamp,
                        kind: e.kind,
                        direction: e.direction,
                        duration_s: e.duration_s,
                        alter_class: e.alter_class,
                    },
                    line,
                );
                line += 1;
            }
        }
        builder.finish(self.store.window.clone())
    }
}

/// Incremental store construction; rows may arrive in any order.
#[derive(Default)]
pub(crate) struct StoreBuilder {
    ego_ids: HashMap<String, u32>,
    alter_ids: HashMap<String, u32>,
    ego_names: Vec<String>,
    alter_names: Vec<String>,
    rows: Vec<(u32, u64, Event)>,
}

impl StoreBuilder {
    fn intern(map: &mut HashMap<String, u32>, names: &mut Vec<String>, s: String) -> u32 {
        if let Some(&id) = map.get(&s) {
            return id;
        }
        let id = names.len() as u32;
        names.push(s.clone());
        map.insert(s, id);
        id
    }

    pub(crate) fn push(&mut self, rec: CdrRecord, line: u64) {
        let ego = Self::intern(&mut self.ego_ids, &mut self.ego_names, rec.ego_id);
        let alter = Self::intern(&mut self.alter_ids, &mut self.alter_names, rec.alter_id);
        self.rows.push((
            ego,
            line,
            Event {
                timestamp: rec.timestamp,
                alter,
                duration_s: rec.duration_s,
                kind: rec.kind,
                direction: rec.direction,
                alter_class: rec.alter_class,
            },
        ));
    }

    pub(crate) fn finish(self, window: StudyWindow) -> RecordStore {
        // Re-number both name tables in lexicographic order.
        let rank = |names: &[String]| {
            let mut order: Vec<u32> = (0..names.len() as u32).collect();
            order.sort_by(|&a, &b| names[a as usize].cmp(&names[b as usize]));
            let mut remap = vec![0u32; names.len()];
            for (new, &old) in order.iter().enumerate() {
                remap[old as usize] = new as u32;
            }
            let sorted: Vec<String> = order.iter().map(|&i| names[i as usize].clone()).collect();
            (remap, sorted)
        };
        let (ego_remap, egos) = rank(&self.ego_names);
        let (alter_remap, alters) = rank(&self.alter_names);

        let mut rows = self.rows;
        for row in rows.iter_mut() {
            row.0 = ego_remap[row.0 as usize];
            row.2.alter = alter_remap[row.2.alter as usize];
        }
        rows.sort_by_key(|&(ego, line, ev)| (ego, ev.timestamp, line));

        let mut offsets = Vec::with_capacity(egos.len() + 1);
        offsets.push(0);
        let mut events = Vec::with_capacity(rows.len());
        let mut current = 0u32;
        for (ego, _, ev) in rows {
            while current < ego {
                offsets.push(events.len());
                current += 1;
            }
            events.push(ev);
        }
        while offsets.len() < egos.len() + 1 {
            offsets.push(events.len());
        }
        RecordStore {
            window,
            egos,
            offsets,
            events,
            alters,
        }
    }
}

fn validate(rec: &CdrRecord, window: &StudyWindow) -> std::result::Result<(), String> {
    if rec.ego_id.is_empty() || rec.alter_id.is_empty() {
        return Err("empty identifier".into());
    }
    if rec.ego_id == rec.alter_id {
        return Err("ego_id equals alter_id".into());
    }
    if rec.kind == EventKind::Sms && rec.duration_s != 0 {
        return Err("SMS with non-zero duration".into());
    }
    if !window.contains_timestamp(rec.timestamp) {
        return Err(format!("timestamp {} outside study window", rec.timestamp));
    }
    Ok(())
}

fn parse_row(fields: &csv::StringRecord) -> std::result::Result<CdrRecord, String> {
    if fields.len() != CDR_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            CDR_HEADER.len(),
            fields.len()
        ));
    }
    let timestamp = fields[2]
        .parse::<i64>()
        .map_err(|_| format!("bad timestamp `{}`", &fields[2]))?;
    let duration = fields[5]
        .parse::<i64>()
        .map_err(|_| format!("bad duration_s `{}`", &fields[5]))?;
    if duration < 0 || duration > u32::MAX as i64 {
        return Err(format!("duration_s {duration} out of range"));
    }
    Ok(CdrRecord {
        ego_id: fields[0].to_string(),
        alter_id: fields[1].to_string(),
        timestamp,
        kind: fields[3].parse().map_err(|e: Error| e.to_string())?,
        direction: fields[4].parse().map_err(|e: Error| e.to_string())?,
        duration_s: duration as u32,
        alter_class: fields[6].parse().map_err(|e: Error| e.to_string())?,
    })
}

/// Parse a CDR CSV stream. Malformed rows are tallied in
/// [`Ingested::rejects`]; only a missing or wrong header is fatal.
pub fn ingest_reader<R: Read>(input: R, window: &StudyWindow) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(Error::Data(format!("unreadable header: {e}"))),
        None => return Err(Error::Data("missing CDR header".into())),
    };
    if header.iter().ne(CDR_HEADER.iter().copied()) {
        return Err(Error::Data(format!(
            "bad CDR header `{}`; expected `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            CDR_HEADER.join(",")
        )));
    }

    let mut builder = StoreBuilder::default();
    let mut rejects = Vec::new();
    for row in rows {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(Error::Data(format!("read failure near line {line}: {e}")));
                }
                rejects.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row).and_then(|rec| validate(&rec, window).map(|_| rec)) {
            Ok(rec) => builder.push(rec, line),
            Err(reason) => rejects.push(RejectedRow { line, reason }),
        }
    }
    Ok(Ingested {
        store: builder.finish(window.clone()),
        rejects,
    })
}

pub fn ingest(path: &Path, window: &StudyWindow) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), window)
}

/// Streaming writer for the CDR CSV format.
pub struct CdrWriter<W: Write> {
    out: std::io::BufWriter<W>,
}

impl<W: Write> CdrWriter<W> {
    pub fn new(out: W) -> std::io::Result<Self> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "{}", CDR_HEADER.join(","))?;
        Ok(CdrWriter { out })
    }

    pub fn write(&mut self, rec: &CdrRecord) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            rec.ego_id,
            rec.alter_id,
            rec.timestamp,
            rec.kind,
            rec.direction,
            rec.duration_s,
            rec.alter_class
        )
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Dataset-level counts in the shape of a summary-statistics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub subscribers: usize,
    pub days: u32,
    pub calls: u64,
    pub sms: u64,
    pub calls_per_subscriber_mean: f64,
    pub calls_per_subscriber_sd: f64,
    pub sms_per_subscriber_mean: f64,
    pub sms_per_subscriber_sd: f64,
}

/// Population mean and standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summary_stats(store: &RecordStore) -> SummaryStats {
    let mut calls = Vec::with_capacity(store.subscriber_count());
    let mut sms = Vec::with_capacity(store.subscriber_count());
    for (_, evs) in store.subscribers() {
        let c = evs.iter().filter(|e| e.kind == EventKind::Call).count();
        calls.push(c as f64);
        sms.push((evs.len() - c) as f64);
    }
    let (cm, csd) = mean_sd(&calls);
    let (sm, ssd) = mean_sd(&sms);
    SummaryStats {
        subscribers: store.subscriber_count(),
        days: store.window().total_days(),
        calls: calls.iter().sum::<f64>() as u64,
        sms: sms.iter().sum::<f64>() as u64,
        calls_per_subscriber_mean: cm,
        calls_per_subscriber_sd: csd,
        sms_per_subscriber_mean: sm,
        sms_per_subscriber_sd: ssd,
    }
}
