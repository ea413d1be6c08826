//! Training/evaluation split and the two churn labels.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use crate::cdr::{DayRange, RecordStore, StudyWindow};
use crate::error::{Error, Result};

/// Day ranges of the training months and of the evaluation months.
pub fn split_windows(window: &StudyWindow) -> (DayRange, DayRange) {
    let train = window.train_month_ranges();
    let cut = train.last().map(|r| r.end).unwrap_or(0);
    (
        DayRange::new(0, cut),
        DayRange::new(cut, window.total_days()),
    )
}

/// Per-subscriber churn labels, aligned with the store's subscriber order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub ego_ids: Vec<String>,
    /// No event at all during evaluation.
    pub churned: Vec<bool>,
    /// Fraction of evaluation days without any event.
    pub pct_inactive_eval: Vec<f64>,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.ego_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego_ids.is_empty()
    }

    pub fn churn_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.churned.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }

    pub fn select(&self, rows: &[usize]) -> LabelSet {
        LabelSet {
            ego_ids: rows.iter().map(|&i| self.ego_ids[i].clone()).collect(),
            churned: rows.iter().map(|&i| self.churned[i]).collect(),
            pct_inactive_eval: rows.iter().map(|&i| self.pct_inactive_eval[i]).collect(),
        }
    }

    /// Error unless the labels are in exactly this row order.
    pub fn check_aligned(&self, row_ids: &[String]) -> Result<()> {
        if self.ego_ids.len() != row_ids.len() {
            return Err(Error::Data(format!(
                "{} labels for {} matrix rows",
                self.ego_ids.len(),
                row_ids.len()
            )));
        }
        if let Some(i) = self.ego_ids.iter().zip(row_ids).position(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "label row {i} is `{}` but matrix row is `{}`",
                self.ego_ids[i], row_ids[i]
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "ego_id,churned,pct_inactive_eval")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{}",
                self.ego_ids[i], self.churned[i] as u8, self.pct_inactive_eval[i]
            )?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<LabelSet> {
        let mut lines = BufReader::new(input).lines();
        match lines.next() {
            Some(Ok(h)) if h == "ego_id,churned,pct_inactive_eval" => {}
            _ => return Err(Error::Data("bad label header".into())),
        }
        let mut labels = LabelSet {
            ego_ids: vec![],
            churned: vec![],
            pct_inactive_eval: vec![],
        };
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("label line {}: `{line}`", k + 2));
            let mut f = line.split(',');
            let (Some(ego), Some(c), Some(p), None) = (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(bad());
            };
            let churned = match c {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            };
            let pct: f64 = p.parse().map_err(|_| bad())?;
            labels.ego_ids.push(ego.to_string());
            labels.churned.push(churned);
            labels.pct_inactive_eval.push(pct);
        }
        Ok(labels)
    }
}

/// Binary and continuous churn labels for every subscriber in the store.
pub fn compute_labels(store: &RecordStore, eval: DayRange) -> LabelSet {
    let view = store.slice(eval);
    let window = store.window();
    let days = eval.len();
    let mut labels = LabelSet {
        ego_ids: Vec::with_capacity(view.subscriber_count()),
        churned: Vec::with_capacity(view.subscriber_count()),
        pct_inactive_eval: Vec::with_capacity(view.subscriber_count()),
    };
    let mut active = HashSet::new();
    for (ego, events) in view.subscribers() {
        active.clear();
        active.extend(events.iter().map(|e| window.day_of(e.timestamp)));
        let pct = if days == 0 {
            1.0
        } else {
            (days as usize - active.len()) as f64 / days as f64
        };
        labels.ego_ids.push(ego.to_string());
        labels.churned.push(events.is_empty());
        labels.pct_inactive_eval.push(pct);
    }
    labels
}
