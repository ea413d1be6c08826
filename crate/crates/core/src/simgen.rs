//! Seeded synthetic CDR generator with planted churn.
//!
//! Each subscriber is simulated independently from its own RNG stream derived
//! from the master seed and the subscriber index, so output is identical
//! however the work is split across threads. The first draw of every stream
//! decides churn; activity is then sampled day by day as Poisson counts scaled
//! by a log-normal per-subscriber multiplier. A churner's rate ramps linearly
//! to zero ending on a churn day inside the last training month and stays zero
//! afterwards, and churners receive extra competitor SMS while still active.

use std::io::{BufWriter, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson};
use rayon::prelude::*;

use crate::cdr::{
    AlterClass, CdrRecord, CdrWriter, Direction, EventKind, RecordStore, StoreBuilder,
    StudyWindow, SECONDS_PER_DAY,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_subscribers: usize,
    pub window: StudyWindow,
    pub target_churn_fraction: f64,
    /// Mean calls per day for a subscriber with multiplier 1.
    pub daily_call_rate: f64,
    pub daily_sms_rate: f64,
    /// Size of the shared counterparty namespace.
    pub alter_pool_size: usize,
    /// Length of the linear pre-churn decay ramp.
    pub churn_decay_days: u32,
    /// Multiplier on the competitor-SMS rate for future churners.
    pub competitor_signal_strength: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_subscribers: 5_000,
            window: StudyWindow::standard(),
            target_churn_fraction: 0.26,
            daily_call_rate: 1.0,
            daily_sms_rate: 2.0,
            alter_pool_size: 2_000,
            churn_decay_days: 30,
            competitor_signal_strength: 3.0,
            seed: 42,
        }
    }
}

/// Log-normal sigma of the per-subscriber activity multiplier.
const RATE_SIGMA: f64 = 0.8;
/// Future churners are drawn from a quieter population.
const CHURNER_RATE_SCALE: f64 = 0.3;
/// Share of the SMS rate arriving as competitor promotions.
const COMPETITOR_SMS_SHARE: f64 = 0.1;
const SHORT_CALL_PROB: f64 = 0.15;
const MEAN_CALL_SECONDS: f64 = 90.0;
const CHUNK: usize = 256;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if !(0.0..=1.0).contains(&self.target_churn_fraction) {
            return bad("target_churn_fraction must lie in [0, 1]");
        }
        if !(self.daily_call_rate >= 0.0 && self.daily_sms_rate >= 0.0) {
            return bad("daily rates must be non-negative");
        }
        if self.competitor_signal_strength.is_nan() || self.competitor_signal_strength < 0.0 {
            return bad("competitor_signal_strength must be non-negative");
        }
        if self.alter_pool_size < 20 {
            return bad("alter_pool_size must be at least 20");
        }
        Ok(())
    }

    fn ego_id(&self, index: usize) -> String {
        let width = self.n_subscribers.saturating_sub(1).to_string().len().max(6);
        format!("S{index:0width$}")
    }
}

/// Class of pooled alter `j`: 60% on-net, 20% competitor, 5% each of the rest.
fn alter_class(j: usize) -> AlterClass {
    match j % 20 {
        0..=11 => AlterClass::Onnet,
        12..=15 => AlterClass::Competitor,
        16 => AlterClass::International,
        17 => AlterClass::InfoPortal,
        18 => AlterClass::MobileMoney,
        _ => AlterClass::Other,
    }
}

fn alter_id(j: usize) -> String {
    format!("N{j:06}")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for stream `index` of a master seed.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

/// One simulated subscriber.
#[derive(Debug, Clone)]
pub struct SimSubscriber {
    pub ego_id: String,
    pub churned: bool,
    /// Time-sorted.
    pub records: Vec<CdrRecord>,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// Seconds into the day, daytime-heavy.
fn second_of_day(rng: &mut ChaCha8Rng) -> i64 {
    if rng.gen_bool(0.8) {
        rng.gen_range(8 * 3600..22 * 3600)
    } else {
        let s = rng.gen_range(0..10 * 3600);
        if s < 8 * 3600 {
            s
        } else {
            s + 14 * 3600
        }
    }
}

fn simulate_one(config: &SimConfig, index: usize) -> SimSubscriber {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, index as u64));
    let churned = rng.gen_bool(config.target_churn_fraction);
    let window = &config.window;
    let start_ts = window.start_timestamp();
    let total_days = window.total_days();
    let last_train = *window.train_month_ranges().last().unwrap();
    let eval_start = last_train.end;

    let multiplier = LogNormal::new(-RATE_SIGMA * RATE_SIGMA / 2.0, RATE_SIGMA)
        .unwrap()
        .sample(&mut rng)
        * if churned { CHURNER_RATE_SCALE } else { 1.0 };
    let churn_day = churned.then(|| rng.gen_range(last_train.start..last_train.end));
    let n_contacts = rng.gen_range(5..=30).min(config.alter_pool_size);
    let contacts: Vec<usize> = index::sample(&mut rng, config.alter_pool_size, n_contacts).into_vec();
    // Zipf-like preference over the personal contact list.
    let weights: Vec<f64> = (0..n_contacts).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let competitor_pool: Vec<usize> = (0..config.alter_pool_size)
        .filter(|&j| alter_class(j) == AlterClass::Competitor)
        .collect();
    let call_len = Exp::new(1.0 / MEAN_CALL_SECONDS).unwrap();

    let ego_id = config.ego_id(index);
    let decay = config.churn_decay_days.max(1) as f64;
    let factor = |day: u32| -> f64 {
        match churn_day {
            None => 1.0,
            Some(c) if day >= c => 0.0,
            Some(c) => ((c - day) as f64 / decay).min(1.0),
        }
    };

    let mut records = Vec::new();
    let push = |rng: &mut ChaCha8Rng,
                    records: &mut Vec<CdrRecord>,
                    day: u32,
                    alter: usize,
                    kind: EventKind,
                    direction: Direction| {
        let duration_s = match kind {
            EventKind::Sms => 0,
            EventKind::Call if rng.gen_bool(SHORT_CALL_PROB) => rng.gen_range(0..10),
            EventKind::Call => 10 + call_len.sample(rng) as u32,
        };
        records.push(CdrRecord {
            ego_id: ego_id.clone(),
            alter_id: alter_id(alter),
            timestamp: start_ts + day as i64 * SECONDS_PER_DAY + second_of_day(rng),
            kind,
            direction,
            duration_s,
            alter_class: alter_class(alter),
        });
    };
    let pick_contact = |rng: &mut ChaCha8Rng| {
        let mut u = rng.gen::<f64>() * weight_sum;
        for (c, w) in contacts.iter().zip(&weights) {
            if u < *w {
                return *c;
            }
            u -= w;
        }
        contacts[n_contacts - 1]
    };

    for day in 0..total_days {
        let f = factor(day) * multiplier;
        if f <= 0.0 {
            continue;
        }
        for (kind, rate) in [
            (EventKind::Call, config.daily_call_rate),
            (EventKind::Sms, config.daily_sms_rate),
        ] {
            for _ in 0..poisson(&mut rng, rate * f) {
                let alter = pick_contact(&mut rng);
                let direction = if rng.gen_bool(0.5) {
                    Direction::In
                } else {
                    Direction::Out
                };
                push(&mut rng, &mut records, day, alter, kind, direction);
            }
        }
        let boost = if churned {
            config.competitor_signal_strength
        } else {
            1.0
        };
        let promo_rate = config.daily_sms_rate * COMPETITOR_SMS_SHARE * f * boost;
        for _ in 0..poisson(&mut rng, promo_rate) {
            let alter = competitor_pool[rng.gen_range(0..competitor_pool.len())];
            push(&mut rng, &mut records, day, alter, EventKind::Sms, Direction::In);
        }
    }

    // Keep the planted labels recoverable: churners must appear in the data
    // at all, and non-churners must show up at least once during evaluation.
    if churned && records.is_empty() {
        let alter = pick_contact(&mut rng);
        push(&mut rng, &mut records, 0, alter, EventKind::Sms, Direction::In);
    }
    if !churned {
        let eval_ts = start_ts + eval_start as i64 * SECONDS_PER_DAY;
        if !records.iter().any(|r| r.timestamp >= eval_ts) {
            let day = rng.gen_range(eval_start..total_days);
            let alter = pick_contact(&mut rng);
            push(&mut rng, &mut records, day, alter, EventKind::Sms, Direction::In);
        }
    }
    records.sort_by_key(|r| r.timestamp);

    SimSubscriber {
        ego_id,
        churned,
        records,
    }
}

/// Simulate subscribers in order, handing each block to `sink`.
fn simulate_blocks(
    config: &SimConfig,
    mut sink: impl FnMut(Vec<SimSubscriber>) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let mut start = 0;
    while start < config.n_subscribers {
        let end = (start + CHUNK).min(config.n_subscribers);
        let block: Vec<SimSubscriber> = (start..end)
            .into_par_iter()
            .map(|i| simulate_one(config, i))
            .collect();
        sink(block)?;
        start = end;
    }
    Ok(())
}

/// Planted churn flags in subscriber order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub ego_ids: Vec<String>,
    pub churned: Vec<bool>,
}

impl GroundTruth {
    pub fn churn_fraction(&self) -> f64 {
        if self.ego_ids.is_empty() {
            return 0.0;
        }
        self.churned.iter().filter(|&&c| c).count() as f64 / self.ego_ids.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "ego_id,churned")?;
        for (e, c) in self.ego_ids.iter().zip(&self.churned) {
            writeln!(out, "{e},{}", *c as u8)?;
        }
        out.flush()
    }
}

/// Simulate straight into an in-memory store.
pub fn generate_store(config: &SimConfig) -> Result<(RecordStore, GroundTruth)> {
    let mut builder = StoreBuilder::default();
    let mut truth = GroundTruth::default();
    let mut line = 0u64;
    simulate_blocks(config, |block| {
        for sub in block {
            truth.ego_ids.push(sub.ego_id);
            truth.churned.push(sub.churned);
            for rec in sub.records {
                builder.push(rec, line);
                line += 1;
            }
        }
        Ok(())
    })?;
    Ok((builder.finish(config.window.clone()), truth))
}

/// Write the CDR CSV and the `ego_id,churned` ground truth.
pub fn generate<W1: Write, W2: Write>(config: &SimConfig, cdr: W1, truth: W2) -> Result<GroundTruth> {
    let io = |e: std::io::Error| Error::Data(format!("writing simulated data: {e}"));
    let mut writer = CdrWriter::new(cdr).map_err(io)?;
    let mut gt = GroundTruth::default();
    simulate_blocks(config, |block| {
        for sub in block {
            for rec in &sub.records {
                writer.write(rec).map_err(io)?;
            }
            gt.ego_ids.push(sub.ego_id);
            gt.churned.push(sub.churned);
        }
        Ok(())
    })?;
    writer.finish().map_err(io)?;
    gt.write_csv(truth).map_err(io)?;
    Ok(gt)
}
