//! Coverage, rule accumulation, extraction timing and identification
//! accuracy, all computed from an engine journal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::{ContextAttribute, Timestamp};
use crate::engine::{JournalEntry, JournalEvent};
use crate::identify::overlap_accuracy;

pub const DAY_MS: i64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: usize,
    pub n_a: u64,
    pub n_c: u64,
    pub coverage: f64,
    pub rules: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub v: u32,
    /// N_c / N_a per day; 0 for a day without usages.
    pub coverage_by_day: Vec<f64>,
    /// Live rules (both polarities) at the end of each day.
    pub rules_by_day: Vec<usize>,
    pub positive_rules: usize,
    pub negative_rules: usize,
    pub n_a: u64,
    pub n_c: u64,
    pub coverage: f64,
    /// Share of validated samples judged accurate; absent without samples.
    pub accuracy: Option<f64>,
    pub mean_overlap_ratio: Option<f64>,
    pub accuracy_samples: usize,
    pub mean_extraction_seconds: Option<f64>,
    pub mean_extraction_seconds_with_selection: Option<f64>,
    pub reasons_submitted: usize,
    pub predicted_confirms: usize,
    pub skipped_actions: usize,
    pub days: Vec<DayMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,n_a,n_c,coverage,rules\n");
        for d in &self.days {
            out.push_str(&format!("{},{},{},{:.6},{}\n", d.day + 1, d.n_a, d.n_c, d.coverage, d.rules));
        }
        out
    }
}

/// Day index of `ts` relative to the day of `origin`, with local days shifted
/// by `tz_offset_ms` from UTC.
pub fn day_index(origin: Timestamp, ts: Timestamp, tz_offset_ms: i64) -> usize {
    let d = |t: Timestamp| (t + tz_offset_ms).div_euclid(DAY_MS);
    (d(ts) - d(origin)).max(0) as usize
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Computes the report. `origin` anchors day 1 (defaults to the first entry)
/// and `min_days` pads trailing empty days.
pub fn compute(entries: &[JournalEntry], origin: Option<Timestamp>, tz_offset_ms: i64, min_days: usize) -> MetricsReport {
    let origin = origin.or_else(|| entries.first().map(|e| e.ts)).unwrap_or(0);
    let n_days = entries
        .last()
        .map_or(0, |e| day_index(origin, e.ts, tz_offset_ms) + 1)
        .max(min_days);
    let mut days: Vec<DayMetrics> =
        (0..n_days).map(|day| DayMetrics { day, n_a: 0, n_c: 0, coverage: 0.0, rules: 0 }).collect();

    let mut live: BTreeMap<String, bool> = BTreeMap::new();
    let mut opened: BTreeMap<String, Timestamp> = BTreeMap::new();
    let mut identified: BTreeMap<String, Vec<ContextAttribute>> = BTreeMap::new();
    let mut extraction = Vec::new();
    let mut with_selection = Vec::new();
    let mut ratios = Vec::new();
    let mut accurate = 0usize;
    let mut reasons = 0usize;
    let mut confirms = 0usize;
    let mut day_rules = vec![None; n_days];

    for e in entries {
        let day = day_index(origin, e.ts, tz_offset_ms);
        match &e.event {
            JournalEvent::Usage { covered, .. } => {
                days[day].n_a += 1;
                if *covered {
                    days[day].n_c += 1;
                }
            }
            JournalEvent::RequestOpened { request } => {
                opened.insert(request.request_id.clone(), request.created_at);
            }
            JournalEvent::ReasonSubmitted { request_id, cause, .. } => {
                reasons += 1;
                if let Some(&t0) = opened.get(request_id) {
                    extraction.push((e.ts - t0) as f64 / 1000.0);
                }
                identified.insert(request_id.clone(), cause.clone());
            }
            JournalEvent::AttributesSelected { request_id, attributes } => {
                if let (Some(pred), Some(&t0)) = (identified.get(request_id), opened.get(request_id)) {
                    if let Ok((ratio, ok)) = overlap_accuracy(attributes, pred) {
                        ratios.push(ratio);
                        accurate += ok as usize;
                        with_selection.push((e.ts - t0) as f64 / 1000.0);
                    }
                }
            }
            JournalEvent::RuleInserted { rule, .. } => {
                live.insert(rule.rule_id.clone(), rule.polarity == crate::rules::Polarity::Positive);
                if rule.origin == crate::rules::RuleOrigin::PredictedReasonConfirm {
                    confirms += 1;
                }
            }
            JournalEvent::RuleDeleted { rule_id } => {
                live.remove(rule_id);
            }
            _ => {}
        }
        day_rules[day] = Some(live.len());
    }

    let mut carried = 0;
    for (d, slot) in days.iter_mut().zip(day_rules) {
        carried = slot.unwrap_or(carried);
        d.rules = carried;
        d.coverage = if d.n_a == 0 { 0.0 } else { d.n_c as f64 / d.n_a as f64 };
    }
    let n_a: u64 = days.iter().map(|d| d.n_a).sum();
    let n_c: u64 = days.iter().map(|d| d.n_c).sum();
    let positive = live.values().filter(|p| **p).count();

    MetricsReport {
        v: 1,
        coverage_by_day: days.iter().map(|d| d.coverage).collect(),
        rules_by_day: days.iter().map(|d| d.rules).collect(),
        positive_rules: positive,
        negative_rules: live.len() - positive,
        n_a,
        n_c,
        coverage: if n_a == 0 { 0.0 } else { n_c as f64 / n_a as f64 },
        accuracy: (!ratios.is_empty()).then(|| accurate as f64 / ratios.len() as f64),
        mean_overlap_ratio: mean(&ratios),
        accuracy_samples: ratios.len(),
        mean_extraction_seconds: mean(&extraction),
        mean_extraction_seconds_with_selection: mean(&with_selection),
        reasons_submitted: reasons,
        predicted_confirms: confirms,
        skipped_actions: 0,
        days,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ServiceId;
    use crate::recognition::Trigger;

    fn usage(seq: u64, ts: Timestamp, covered: bool) -> JournalEntry {
        JournalEntry {
            v: 1,
            seq,
            ts,
            event: JournalEvent::Usage { service: ServiceId::open("a"), covered, trigger: Trigger::Injected },
        }
    }

    #[test]
    fn coverage_is_covered_over_all() {
        let entries: Vec<_> = (0..100).map(|i| usage(i + 1, i as i64, i < 45)).collect();
        let m = compute(&entries, None, 0, 0);
        assert_eq!((m.n_a, m.n_c), (100, 45));
        assert_eq!(m.coverage, 0.45);
        assert_eq!(m.coverage_by_day, [0.45]);
    }

    #[test]
    fn day_buckets_follow_offset() {
        let origin = 0;
        assert_eq!(day_index(origin, DAY_MS - 1, 0), 0);
        assert_eq!(day_index(origin, DAY_MS, 0), 1);
        // 23:00 UTC on day 0 is already day 1 at UTC+2.
        assert_eq!(day_index(origin, DAY_MS - 3_600_000, 2 * 3_600_000), 1);
    }

    #[test]
    fn empty_days_are_padded() {
        let entries = vec![usage(1, 0, true), usage(2, 2 * DAY_MS, false)];
        let m = compute(&entries, None, 0, 4);
        assert_eq!(m.coverage_by_day, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.days.len(), 4);
        assert!(m.accuracy.is_none());
        assert!(m.to_csv().starts_with("day,n_a,n_c,coverage,rules\n1,1,1,1.000000,0\n"));
    }
}
