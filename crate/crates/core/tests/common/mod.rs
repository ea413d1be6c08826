//! Fixtures and brute-force oracles shared by several test targets.
#![allow(dead_code)]

use churnforge_core::cdr::ingest_reader;
use churnforge_core::models::{logistic_loss_grad, THRESHOLD_EPSILON};
use churnforge_core::{RecordStore, StudyWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const JAN_1_2014: i64 = 1_388_534_400;

pub fn ts(day: i64, hour: i64) -> i64 {
    JAN_1_2014 + day * 86_400 + hour * 3_600
}

/// Three subscribers, twenty records. A is spread over all months, B is
/// active only in the last training month, C goes silent after day 6.
pub fn fixture_csv() -> String {
    // (ego, alter, day, hour, kind, direction, duration, class)
    type Row<'a> = (&'a str, &'a str, i64, i64, &'a str, &'a str, u32, &'a str);
    let rows: [Row; 20] = [
        ("A", "X1", 0, 9, "CALL", "OUT", 60, "ONNET"),
        ("A", "X2", 0, 21, "SMS", "OUT", 0, "COMPETITOR"),
        ("A", "X1", 3, 10, "CALL", "IN", 5, "ONNET"),
        ("A", "X3", 10, 12, "CALL", "OUT", 120, "INFO_PORTAL"),
        ("A", "X1", 40, 14, "CALL", "OUT", 30, "ONNET"),
        ("A", "X2", 40, 15, "SMS", "IN", 0, "COMPETITOR"),
        ("A", "X4", 70, 2, "CALL", "IN", 200, "INTERNATIONAL"),
        ("A", "X1", 100, 9, "CALL", "OUT", 8, "ONNET"),
        ("A", "X1", 130, 9, "CALL", "OUT", 60, "ONNET"),
        ("A", "X2", 150, 12, "SMS", "IN", 0, "COMPETITOR"),
        ("B", "X5", 92, 10, "SMS", "OUT", 0, "MOBILE_MONEY"),
        ("B", "X5", 92, 11, "SMS", "OUT", 0, "MOBILE_MONEY"),
        ("B", "X6", 93, 10, "CALL", "OUT", 15, "ONNET"),
        ("B", "X6", 95, 20, "CALL", "IN", 9, "ONNET"),
        ("B", "X7", 121, 23, "SMS", "IN", 0, "OTHER"),
        ("B", "X6", 122, 0, "CALL", "OUT", 40, "ONNET"),
        ("B", "X5", 182, 23, "SMS", "OUT", 0, "MOBILE_MONEY"),
        ("C", "X8", 5, 8, "CALL", "OUT", 10, "COMPETITOR"),
        ("C", "X8", 5, 19, "CALL", "OUT", 600, "COMPETITOR"),
        ("C", "X9", 6, 12, "SMS", "IN", 0, "ONNET"),
    ];
    let mut out = String::from("ego_id,alter_id,timestamp,kind,direction,duration_s,alter_class\n");
    for (e, a, d, h, k, dir, dur, c) in rows {
        out.push_str(&format!("{e},{a},{},{k},{dir},{dur},{c}\n", ts(d, h)));
    }
    out
}

pub fn fixture_store() -> RecordStore {
    let ingested = ingest_reader(fixture_csv().as_bytes(), &StudyWindow::standard()).unwrap();
    assert!(ingested.rejects.is_empty());
    ingested.store
}

/// Hand-computed `(feature, [A, B, C])` values for the fixture.
pub fn micro_expected() -> Vec<(&'static str, [f64; 3])> {
    vec![
        ("activity.call.any.any.any.any.full.total", [6.0, 2.0, 2.0]),
        ("activity.call.out.any.any.any.full.total", [4.0, 1.0, 2.0]),
        ("activity.call.in.any.any.any.full.total", [2.0, 1.0, 0.0]),
        ("activity.call.in.any.any.any.m1.total", [1.0, 0.0, 0.0]),
        ("activity.call.in.any.any.any.full.max_monthly_delta", [1.0, 1.0, 0.0]),
        ("activity.call.in.any.any.any.full.trend_slope", [-0.2, 0.3, 0.0]),
        ("activity.call.out.any.any.any.full.max_monthly_delta", [1.0, 1.0, 2.0]),
        ("activity.call.out.any.any.any.full.trend_slope", [-0.4, 0.3, -0.6]),
        ("activity.any.any.any.any.any.full.trend_slope", [-1.0, 1.5, -0.9]),
        ("activity.any.any.any.any.any.m4.total", [1.0, 5.0, 0.0]),
        ("degree.call.out.any.any.any.full.total", [2.0, 1.0, 1.0]),
        ("degree.any.any.any.any.any.m1.total", [3.0, 0.0, 2.0]),
        ("degree.any.any.any.any.any.full.total", [4.0, 3.0, 2.0]),
        ("degree.any.out.any.any.any.m4.total", [1.0, 2.0, 0.0]),
        ("degree.any.any.any.weekend.any.m1.total", [2.0, 0.0, 0.0]),
        ("degree.any.any.any.any.any.m1.per_active_day", [1.0, 0.0, 1.0]),
        ("activity.any.any.any.any.any.full.per_active_day", [8.0 / 6.0, 5.0 / 4.0, 3.0 / 2.0]),
        ("activity.call.any.any.any.any.full.per_active_day", [1.0, 0.5, 1.0]),
        ("activity.call.out.any.any.info_portal.full.per_active_day", [1.0 / 6.0, 0.0, 0.0]),
        ("activity.short_call.any.any.any.any.full.total", [2.0, 1.0, 0.0]),
        ("activity.any.any.night.any.any.full.total", [2.0, 2.0, 0.0]),
        ("activity.any.any.any.weekend.any.full.total", [2.0, 1.0, 0.0]),
        ("activity.sms.in.any.any.competitor.full.total", [1.0, 0.0, 0.0]),
        ("activity.sms.out.any.any.mobile_money.full.total", [0.0, 2.0, 0.0]),
        ("degree.sms.out.any.any.mobile_money.full.total", [0.0, 1.0, 0.0]),
        ("activity.call.out.day.any.competitor.full.total", [0.0, 0.0, 2.0]),
        ("degree.call.out.day.any.competitor.full.total", [0.0, 0.0, 1.0]),
        ("inactivity.full", [116.0 / 122.0, 118.0 / 122.0, 120.0 / 122.0]),
        ("inactivity.m1", [28.0 / 31.0, 1.0, 29.0 / 31.0]),
        ("inactivity.m4", [29.0 / 30.0, 26.0 / 30.0, 1.0]),
        (
            "activity.call.in.any.any.any.full.max_monthly_delta/activity.call.in.any.any.any.full.total",
            [0.5, 1.0, 0.0],
        ),
        (
            "activity.call.in.any.any.any.full.total/activity.call.out.any.any.any.full.total",
            [0.5, 1.0, 0.0],
        ),
        (
            "activity.call.in.any.any.any.full.total/inactivity.full",
            [2.0 * 122.0 / 116.0, 122.0 / 118.0, 0.0],
        ),
    ]
}

/// `(churned, pct_inactive_eval)` per fixture subscriber.
pub const MICRO_LABELS: [(bool, f64); 3] = [(false, 59.0 / 61.0), (false, 59.0 / 61.0), (true, 1.0)];

/// Twenty known churn predictors, written in this crate's vocabulary.
pub const PREDICTOR_VOCABULARY: [&str; 20] = [
    "inactivity.full",
    "activity.call.in.any.any.any.full.max_monthly_delta/activity.call.in.any.any.any.full.total",
    "activity.call.in.any.any.any.full.max_monthly_delta/activity.call.out.any.any.any.full.total",
    "degree.any.out.any.any.any.m4.total",
    "activity.sms.in.any.any.competitor.full.total",
    "activity.call.out.any.any.info_portal.full.per_active_day",
    "degree.any.any.any.weekend.any.full.per_active_day",
    "activity.sms.in.any.any.competitor.full.per_active_day",
    "inactivity.m1",
    "degree.call.any.day.any.any.full.total",
    "degree.any.out.any.any.any.m4.total",
    "degree.any.out.any.any.any.m1.total/degree.sms.any.any.any.any.full.total",
    "degree.any.in.any.any.any.m2.total/activity.call.in.any.any.any.full.total",
    "activity.sms.out.any.any.mobile_money.full.total/inactivity.full",
    "activity.short_call.any.any.any.any.m1.total/activity.call.in.any.any.any.full.total",
    "activity.call.in.any.any.any.full.total/activity.any.in.any.any.any.full.total",
    "activity.call.out.any.any.mobile_money.m1.total/inactivity.full",
    "activity.any.out.any.any.any.m1.total/degree.call.any.any.any.any.full.total",
    "activity.sms.in.any.weekend.international.full.total/degree.any.in.any.any.any.full.total",
    "degree.any.out.any.any.any.m1.total/degree.call.any.any.any.any.full.total",
];

pub fn brute_force_baseline(x: &[f64], y: &[bool]) -> (f64, f64) {
    let mut values: Vec<f64> = x.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = vec![-THRESHOLD_EPSILON, 1.0 + THRESHOLD_EPSILON];
    candidates.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(f64::total_cmp);
    let mut best = (f64::NAN, -1.0);
    for t in candidates {
        let correct = x.iter().zip(y).filter(|(v, c)| (**v > t) == **c).count();
        let acc = correct as f64 / x.len() as f64;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

pub fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

/// Worst relative gap between the analytic logistic gradient and central
/// finite differences over `rounds` random small problems.
pub fn logistic_gradient_worst_error(seed: u64, rounds: usize) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rounds {
        let n = r.gen_range(3..20);
        let p = r.gen_range(1..6);
        let x: Vec<f64> = (0..n * p).map(|_| r.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_bool(0.5) as u8 as f64).collect();
        let w: Vec<f64> = (0..p).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b = r.gen_range(-1.0..1.0);
        let l2 = r.gen_range(0.0..0.1);
        let (_, g, gb) = logistic_loss_grad(&x, &y, &w, b, l2);
        let h = 1e-6;
        let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        for j in 0..p {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let num = (logistic_loss_grad(&x, &y, &up, b, l2).0 - logistic_loss_grad(&x, &y, &down, b, l2).0) / (2.0 * h);
            worst = worst.max(rel(g[j], num));
        }
        let num = (logistic_loss_grad(&x, &y, &w, b + h, l2).0 - logistic_loss_grad(&x, &y, &w, b - h, l2).0) / (2.0 * h);
        worst = worst.max(rel(gb, num));
    }
    worst
}
