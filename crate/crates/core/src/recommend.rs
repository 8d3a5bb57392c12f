//! Ranked recommendations from rule matches, negative filtering and
//! recency backfill.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ServiceId;
use crate::context::{ContextSnapshot, Timestamp};
use crate::rules::RuleTree;

pub const RECENCY_REASON: &str = "recently used";
pub const DEFAULT_LIST_SIZE: usize = 6;
pub const DEFAULT_RECENCY_CAPACITY: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Rule,
    Recency,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub occurrences: usize,
    pub max_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub service: ServiceId,
    pub reason: String,
    pub score: Score,
    pub source: Source,
}

/// Ranking order: occurrences desc, then depth desc, then service id asc.
pub fn rank_order(a: (&Score, &ServiceId), b: (&Score, &ServiceId)) -> Ordering {
    b.0.occurrences
        .cmp(&a.0.occurrences)
        .then(b.0.max_depth.cmp(&a.0.max_depth))
        .then_with(|| a.1.cmp(b.1))
}

/// Services by most recent use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecencyLog {
    entries: Vec<(ServiceId, Timestamp)>,
    capacity: usize,
}

impl Default for RecencyLog {
    fn default() -> Self {
        RecencyLog::new(DEFAULT_RECENCY_CAPACITY)
    }
}

impl RecencyLog {
    pub fn new(capacity: usize) -> Self {
        RecencyLog { entries: Vec::new(), capacity }
    }

    /// Moves (or inserts) the service to the front and enforces capacity.
    pub fn record_usage(&mut self, service: ServiceId, timestamp: Timestamp) {
        self.entries.retain(|(s, _)| s != &service);
        self.entries.insert(0, (service, timestamp));
        self.entries.truncate(self.capacity);
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceId> {
        self.entries.iter().map(|(s, _)| s)
    }

    pub fn entries(&self) -> &[(ServiceId, Timestamp)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn recommend(
    snapshot: &ContextSnapshot,
    positive: &RuleTree,
    negative: &RuleTree,
    recency: &RecencyLog,
    k: usize,
) -> Vec<Recommendation> {
    recommend_excluding(snapshot, positive, negative, recency, &BTreeSet::new(), k)
}

/// As [`recommend`], additionally dropping `excluded` services (session-local
/// suppression after a rejection).
pub fn recommend_excluding(
    snapshot: &ContextSnapshot,
    positive: &RuleTree,
    negative: &RuleTree,
    recency: &RecencyLog,
    excluded: &BTreeSet<ServiceId>,
    k: usize,
) -> Vec<Recommendation> {
    let blocked: BTreeSet<ServiceId> = negative
        .query(snapshot)
        .into_iter()
        .map(|m| m.service)
        .chain(excluded.iter().cloned())
        .collect();

    // service -> (score, deepest reason, its rule id)
    let mut grouped: BTreeMap<ServiceId, (Score, String, String)> = BTreeMap::new();
    for m in positive.query(snapshot) {
        if blocked.contains(&m.service) {
            continue;
        }
        let e = grouped.entry(m.service).or_insert((Score::default(), String::new(), String::new()));
        e.0.occurrences += 1;
        let deeper = m.depth > e.0.max_depth || (m.depth == e.0.max_depth && (e.2.is_empty() || m.rule_id < e.2));
        if deeper {
            e.0.max_depth = m.depth;
            e.1 = m.reason;
            e.2 = m.rule_id;
        }
    }
    let mut list: Vec<Recommendation> = grouped
        .into_iter()
        .map(|(service, (score, reason, _))| Recommendation { service, reason, score, source: Source::Rule })
        .collect();
    list.sort_by(|a, b| rank_order((&a.score, &a.service), (&b.score, &b.service)));

    for s in recency.services() {
        if list.len() >= k {
            break;
        }
        if blocked.contains(s) || list.iter().any(|r| &r.service == s) {
            continue;
        }
        list.push(Recommendation {
            service: s.clone(),
            reason: RECENCY_REASON.to_string(),
            score: Score::default(),
            source: Source::Recency,
        });
    }
    list.truncate(k);
    list
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::context::{ContextAttribute, Registry};
    use crate::rules::{ContextualRule, Polarity, RuleOrigin};

    fn reg() -> Arc<Registry> {
        Arc::new(Registry::default_registry())
    }

    fn attr(d: &str, f: &str, v: &str) -> ContextAttribute {
        ContextAttribute::from_triple(d, f, v)
    }

    fn rule(id: &str, cause: Vec<ContextAttribute>, svc: &str, polarity: Polarity) -> ContextualRule {
        ContextualRule {
            rule_id: id.into(),
            cause,
            service: ServiceId::new("app", svc),
            polarity,
            reason: format!("because {id}"),
            created_at: 0,
            origin: RuleOrigin::UserReason,
        }
    }

    fn trees() -> (RuleTree, RuleTree) {
        (RuleTree::new(reg(), Polarity::Positive), RuleTree::new(reg(), Polarity::Negative))
    }

    #[test]
    fn cold_start_uses_recency() {
        let (p, n) = trees();
        let mut log = RecencyLog::default();
        for (i, s) in ["clock", "maps", "chat"].iter().enumerate() {
            log.record_usage(ServiceId::open(*s), i as i64);
        }
        let out = recommend(&ContextSnapshot::default(), &p, &n, &log, 2);
        let ids: Vec<_> = out.iter().map(|r| r.service.app_id.as_str()).collect();
        assert_eq!(ids, ["chat", "maps"]);
        assert!(out.iter().all(|r| r.source == Source::Recency && r.reason == RECENCY_REASON));
    }

    #[test]
    fn negative_rule_removes_service() {
        let (mut p, mut n) = trees();
        let home = attr("Location", "location_tag", "home");
        p.insert_rule(&rule("r1", vec![home.clone()], "alarm", Polarity::Positive)).unwrap();
        n.insert_rule(&rule("r2", vec![home.clone()], "alarm", Polarity::Negative)).unwrap();
        let mut log = RecencyLog::default();
        log.record_usage(ServiceId::new("app", "alarm"), 0);
        log.record_usage(ServiceId::open("maps"), 1);
        let snap = ContextSnapshot::new(0, [home]).unwrap();
        let out = recommend(&snap, &p, &n, &log, 6);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].service, ServiceId::open("maps"));
    }

    #[test]
    fn occurrences_dominate_depth() {
        let (mut p, n) = trees();
        let a = attr("Time", "day_of_week", "Monday");
        let b = attr("Location", "location_tag", "home");
        let deep = vec![
            attr("Time", "day_of_week", "Monday"),
            attr("Network", "network_type", "wifi"),
            attr("Bluetooth", "bluetooth_state", "on"),
            attr("Weather", "weather_type", "clear"),
            attr("Location", "location_tag", "home"),
        ];
        p.insert_rule(&rule("r1", vec![a.clone()], "x", Polarity::Positive)).unwrap();
        p.insert_rule(&rule("r2", vec![a, b], "x", Polarity::Positive)).unwrap();
        p.insert_rule(&rule("r3", deep.clone(), "y", Polarity::Positive)).unwrap();
        let snap = ContextSnapshot::new(0, deep).unwrap();
        let out = recommend(&snap, &p, &n, &RecencyLog::default(), 6);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].service.service_key, "x");
        assert_eq!(out[0].score, Score { occurrences: 2, max_depth: 2 });
        assert_eq!(out[0].reason, "because r2");
        assert_eq!(out[1].score, Score { occurrences: 1, max_depth: 5 });
    }

    #[test]
    fn recency_log_mechanics() {
        let mut log = RecencyLog::new(20);
        log.record_usage(ServiceId::open("x"), 0);
        assert_eq!(log.len(), 1);
        log.record_usage(ServiceId::open("clock"), 1);
        log.record_usage(ServiceId::open("clock"), 2);
        assert_eq!(log.len(), 2);
        assert_eq!(log.entries()[0], (ServiceId::open("clock"), 2));
        for i in 0..20 {
            log.record_usage(ServiceId::open(format!("s{i}")), 10 + i);
        }
        assert_eq!(log.len(), 20);
        assert!(!log.services().any(|s| s.app_id == "x"));
    }

    #[test]
    fn truncates_and_never_duplicates() {
        let (p, n) = trees();
        let mut log = RecencyLog::default();
        for i in 0..10 {
            log.record_usage(ServiceId::open(format!("s{i}")), i);
        }
        let out = recommend(&ContextSnapshot::default(), &p, &n, &log, 3);
        assert_eq!(out.len(), 3);
        let excluded: BTreeSet<_> = [ServiceId::open("s9")].into();
        let out = recommend_excluding(&ContextSnapshot::default(), &p, &n, &log, &excluded, 3);
        assert_eq!(out[0].service, ServiceId::open("s8"));
    }
}
