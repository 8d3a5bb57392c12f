//! Contextual rules and the context rule tree.
//!
//! A rule's cause, sorted by the registry's canonical order, is a unique
//! root-to-node path; the node stores `(service, reason, rule_id)` entries.
//! Rules sharing a cause share a path, and causes sharing a canonical
//! prefix share nodes. Positive and negative rules live in separate trees.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ServiceId;
use crate::context::{AttrKey, ContextAttribute, ContextError, ContextSnapshot, Registry, Timestamp};

pub type RuleId = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("rule cause is empty")]
    EmptyCause,
    #[error("rule cause has two values for {0}")]
    DuplicateFeature(String),
    #[error("rule polarity does not match the tree")]
    PolarityMismatch,
    #[error("rule id {0} already stored")]
    DuplicateRuleId(RuleId),
    #[error("rule {0} not found")]
    NotFound(RuleId),
    #[error("malformed rule line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Context(#[from] ContextError),
}

impl RuleError {
    pub fn code(&self) -> &'static str {
        match self {
            RuleError::EmptyCause => "EMPTY_CAUSE",
            RuleError::DuplicateFeature(_) => "DUPLICATE_FEATURE",
            RuleError::PolarityMismatch => "POLARITY_MISMATCH",
            RuleError::DuplicateRuleId(_) => "DUPLICATE_RULE_ID",
            RuleError::NotFound(_) => "RULE_NOT_FOUND",
            RuleError::Parse { .. } => "PARSE_ERROR",
            RuleError::Context(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleOrigin {
    UserReason,
    PredictedReasonConfirm,
    Feedback,
}

/// "if cause then (not) recommend service", with the user's reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualRule {
    pub rule_id: RuleId,
    pub cause: Vec<ContextAttribute>,
    pub service: ServiceId,
    pub polarity: Polarity,
    pub reason: String,
    pub created_at: Timestamp,
    pub origin: RuleOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRule {
    pub service: ServiceId,
    pub reason: String,
    pub rule_id: RuleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub service: ServiceId,
    pub rule_id: RuleId,
    pub reason: String,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Same cause and service already stored under `existing`.
    Duplicate { existing: RuleId },
}

#[derive(Debug, Clone, Default)]
struct Node {
    attr: Option<ContextAttribute>,
    children: BTreeMap<AttrKey, Node>,
    stored: Vec<StoredRule>,
}

impl Node {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.stored.is_empty()
    }

    fn count(&self) -> usize {
        1 + self.children.values().map(Node::count).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct RuleTree {
    registry: Arc<Registry>,
    polarity: Polarity,
    root: Node,
    paths: BTreeMap<RuleId, Vec<AttrKey>>,
}

impl RuleTree {
    pub fn new(registry: Arc<Registry>, polarity: Polarity) -> Self {
        RuleTree { registry, polarity, root: Node::default(), paths: BTreeMap::new() }
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    /// Canonically sorted cause with its keys; rejects two values per feature.
    pub fn canonical_cause(&self, cause: &[ContextAttribute]) -> Result<Vec<(AttrKey, ContextAttribute)>, RuleError> {
        if cause.is_empty() {
            return Err(RuleError::EmptyCause);
        }
        let mut keyed = cause
            .iter()
            .map(|a| Ok((self.registry.key(a)?, a.clone())))
            .collect::<Result<Vec<_>, RuleError>>()?;
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        keyed.dedup_by(|a, b| a.0 == b.0);
        for w in keyed.windows(2) {
            if (w[0].0.dimension, w[0].0.feature) == (w[1].0.dimension, w[1].0.feature) {
                return Err(RuleError::DuplicateFeature(w[1].1.feature_key()));
            }
        }
        Ok(keyed)
    }

    pub fn insert_rule(&mut self, rule: &ContextualRule) -> Result<InsertOutcome, RuleError> {
        if rule.polarity != self.polarity {
            return Err(RuleError::PolarityMismatch);
        }
        if self.paths.contains_key(&rule.rule_id) {
            return Err(RuleError::DuplicateRuleId(rule.rule_id.clone()));
        }
        let keyed = self.canonical_cause(&rule.cause)?;
        // Check for a duplicate before creating any nodes.
        let mut node = Some(&self.root);
        for (k, _) in &keyed {
            node = node.and_then(|n| n.children.get(k));
        }
        if let Some(existing) = node.and_then(|n| n.stored.iter().find(|s| s.service == rule.service)) {
            return Ok(InsertOutcome::Duplicate { existing: existing.rule_id.clone() });
        }
        let mut node = &mut self.root;
        for (k, a) in &keyed {
            node = node
                .children
                .entry(k.clone())
                .or_insert_with(|| Node { attr: Some(a.clone()), ..Node::default() });
        }
        node.stored.push(StoredRule {
            service: rule.service.clone(),
            reason: rule.reason.clone(),
            rule_id: rule.rule_id.clone(),
        });
        self.paths.insert(rule.rule_id.clone(), keyed.into_iter().map(|(k, _)| k).collect());
        Ok(InsertOutcome::Inserted)
    }

    /// Removes the rule and prunes the now-empty tail of its path.
    pub fn delete_rule(&mut self, rule_id: &str) -> bool {
        let Some(path) = self.paths.remove(rule_id) else {
            return false;
        };
        fn remove(node: &mut Node, path: &[AttrKey], rule_id: &str) {
            match path.split_first() {
                None => node.stored.retain(|s| s.rule_id != rule_id),
                Some((k, rest)) => {
                    if let Some(child) = node.children.get_mut(k) {
                        remove(child, rest, rule_id);
                        if child.is_empty() {
                            node.children.remove(k);
                        }
                    }
                }
            }
        }
        remove(&mut self.root, &path, rule_id);
        true
    }

    /// Every stored rule whose whole cause holds in the snapshot.
    pub fn query(&self, snapshot: &ContextSnapshot) -> Vec<RuleMatch> {
        let mut keys: Vec<AttrKey> = snapshot.attributes().iter().filter_map(|a| self.registry.key(a).ok()).collect();
        keys.sort();
        let mut out = Vec::new();
        fn walk(node: &Node, keys: &[AttrKey], depth: usize, out: &mut Vec<RuleMatch>) {
            for s in &node.stored {
                out.push(RuleMatch { service: s.service.clone(), rule_id: s.rule_id.clone(), reason: s.reason.clone(), depth });
            }
            // Children are strictly greater than the parent, so only later
            // snapshot keys can extend the path.
            for (i, k) in keys.iter().enumerate() {
                if let Some(child) = node.children.get(k) {
                    walk(child, &keys[i + 1..], depth + 1, out);
                }
            }
        }
        walk(&self.root, &keys, 0, &mut out);
        out
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Node count including the root.
    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    /// Attribute path of a stored rule, canonically ordered.
    pub fn path_of(&self, rule_id: &str) -> Option<Vec<ContextAttribute>> {
        let keys = self.paths.get(rule_id)?;
        let mut node = &self.root;
        let mut attrs = Vec::with_capacity(keys.len());
        for k in keys {
            node = node.children.get(k)?;
            attrs.push(node.attr.clone()?);
        }
        Some(attrs)
    }

    /// Checks the structural invariants: strictly increasing paths, and
    /// every rule id stored at exactly one node.
    pub fn check_invariants(&self) -> Result<(), String> {
        fn walk(node: &Node, parent: Option<&AttrKey>, seen: &mut BTreeMap<RuleId, usize>) -> Result<(), String> {
            for s in &node.stored {
                *seen.entry(s.rule_id.clone()).or_default() += 1;
            }
            for (k, child) in &node.children {
                if parent.is_some_and(|p| p >= k) {
                    return Err(format!("child {k:?} not greater than parent"));
                }
                if child.is_empty() {
                    return Err("empty node left in tree".into());
                }
                walk(child, Some(k), seen)?;
            }
            Ok(())
        }
        let mut seen = BTreeMap::new();
        walk(&self.root, None, &mut seen)?;
        if seen.len() != self.paths.len() || seen.values().any(|&c| c != 1) {
            return Err("rule ids not stored exactly once".into());
        }
        Ok(())
    }
}

/// Both trees plus the flat rule list they are derived from.
#[derive(Debug, Clone)]
pub struct RuleStore {
    positive: RuleTree,
    negative: RuleTree,
    rules: BTreeMap<RuleId, ContextualRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RuleLine {
    v: u32,
    rule_id: RuleId,
    polarity: Polarity,
    service: ServiceId,
    reason: String,
    origin: RuleOrigin,
    created_at: Timestamp,
    cause: Vec<(String, String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    cause_semantics: Vec<String>,
}

impl RuleStore {
    pub fn new(registry: Arc<Registry>) -> Self {
        RuleStore {
            positive: RuleTree::new(registry.clone(), Polarity::Positive),
            negative: RuleTree::new(registry, Polarity::Negative),
            rules: BTreeMap::new(),
        }
    }

    pub fn tree(&self, polarity: Polarity) -> &RuleTree {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }

    /// Inserts into the matching tree; the stored cause is canonically sorted.
    pub fn insert(&mut self, rule: ContextualRule) -> Result<InsertOutcome, RuleError> {
        let tree = match rule.polarity {
            Polarity::Positive => &mut self.positive,
            Polarity::Negative => &mut self.negative,
        };
        let cause = tree.canonical_cause(&rule.cause)?.into_iter().map(|(_, a)| a).collect();
        let rule = ContextualRule { cause, ..rule };
        let outcome = tree.insert_rule(&rule)?;
        if outcome == InsertOutcome::Inserted {
            self.rules.insert(rule.rule_id.clone(), rule);
        }
        Ok(outcome)
    }

    pub fn delete(&mut self, rule_id: &str) -> Option<ContextualRule> {
        let rule = self.rules.remove(rule_id)?;
        match rule.polarity {
            Polarity::Positive => self.positive.delete_rule(rule_id),
            Polarity::Negative => self.negative.delete_rule(rule_id),
        };
        Some(rule)
    }

    pub fn get(&self, rule_id: &str) -> Option<&ContextualRule> {
        self.rules.get(rule_id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &ContextualRule> {
        self.rules.values()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// One JSON object per line, in rule id order.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.rules.values() {
            let line = RuleLine {
                v: 1,
                rule_id: r.rule_id.clone(),
                polarity: r.polarity,
                service: r.service.clone(),
                reason: r.reason.clone(),
                origin: r.origin,
                created_at: r.created_at,
                cause: r.cause.iter().map(ContextAttribute::triple).collect(),
                cause_semantics: r.cause.iter().map(|a| a.semantic.clone()).collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("rule serializes"));
            out.push('\n');
        }
        out
    }

    pub fn import_jsonl(registry: Arc<Registry>, text: &str) -> Result<Self, RuleError> {
        let mut store = RuleStore::new(registry.clone());
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: RuleLine =
                serde_json::from_str(raw).map_err(|e| RuleError::Parse { line: i + 1, message: e.to_string() })?;
            let cause = line
                .cause
                .iter()
                .enumerate()
                .map(|(j, (d, f, v))| {
                    let mut a = ContextAttribute::from_triple(d, f, v);
                    if let Some(s) = line.cause_semantics.get(j) {
                        a.semantic = s.clone();
                    }
                    if let Ok(feat) = registry.feature(d, f) {
                        a.color_tag = feat.color_tag.clone();
                    }
                    registry.validate_attribute(&a)?;
                    Ok(a)
                })
                .collect::<Result<Vec<_>, RuleError>>()?;
            store.insert(ContextualRule {
                rule_id: line.rule_id,
                cause,
                service: line.service,
                polarity: line.polarity,
                reason: line.reason,
                created_at: line.created_at,
                origin: line.origin,
            })?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn reg() -> Arc<Registry> {
        Arc::new(Registry::default_registry())
    }

    fn attr(d: &str, f: &str, v: &str) -> ContextAttribute {
        ContextAttribute::from_triple(d, f, v)
    }

    fn home() -> ContextAttribute {
        attr("Location", "location_tag", "home")
    }
    fn midnight() -> ContextAttribute {
        attr("Time", "o_clock", "24:00")
    }
    fn stilling() -> ContextAttribute {
        attr("Activities", "activity", "stilling")
    }

    fn rule(id: &str, cause: Vec<ContextAttribute>, service: &str) -> ContextualRule {
        ContextualRule {
            rule_id: id.into(),
            cause,
            service: ServiceId::new("app", service),
            polarity: Polarity::Positive,
            reason: format!("reason {id}"),
            created_at: 0,
            origin: RuleOrigin::UserReason,
        }
    }

    #[test]
    fn duplicate_insert_is_reported() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        let c = vec![home(), attr("Time", "time_period", "deep-night"), stilling()];
        assert_eq!(t.insert_rule(&rule("r1", c.clone(), "alarm")).unwrap(), InsertOutcome::Inserted);
        let nodes = t.node_count();
        let mut permuted = c.clone();
        permuted.reverse();
        assert_eq!(
            t.insert_rule(&rule("r2", permuted, "alarm")).unwrap(),
            InsertOutcome::Duplicate { existing: "r1".into() }
        );
        assert_eq!(t.node_count(), nodes);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn same_cause_different_services_share_path() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        let c = vec![home(), attr("Time", "time_period", "deep-night")];
        t.insert_rule(&rule("r1", c.clone(), "alarm")).unwrap();
        t.insert_rule(&rule("r2", c, "music")).unwrap();
        assert_eq!(t.node_count(), 3);
        t.check_invariants().unwrap();
    }

    #[test]
    fn prefix_paths_are_shared() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        t.insert_rule(&rule("r1", vec![midnight()], "a")).unwrap();
        t.insert_rule(&rule("r2", vec![midnight(), home()], "b")).unwrap();
        assert_eq!(t.node_count(), 3);
        let snap = ContextSnapshot::new(0, [midnight(), home()]).unwrap();
        let m = t.query(&snap);
        assert_eq!(m.len(), 2);
        assert_eq!(m.iter().find(|m| m.rule_id == "r2").unwrap().depth, 2);
    }

    #[test]
    fn figure_tree_query() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        let mut r = rule("r1", vec![home(), midnight(), stilling()], "set_alarm");
        r.reason = "Before sleep".into();
        t.insert_rule(&r).unwrap();
        let charging = attr("Network", "network_type", "wifi");
        let snap = ContextSnapshot::new(0, [home(), midnight(), stilling(), charging.clone()]).unwrap();
        let m = t.query(&snap);
        assert_eq!(m, vec![RuleMatch {
            service: ServiceId::new("app", "set_alarm"),
            rule_id: "r1".into(),
            reason: "Before sleep".into(),
            depth: 3
        }]);
        let snap = ContextSnapshot::new(0, [home(), midnight(), charging]).unwrap();
        assert!(t.query(&snap).is_empty());
        assert!(t.query(&ContextSnapshot::default()).is_empty());
    }

    #[test]
    fn delete_cases() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        t.insert_rule(&rule("r1", vec![home()], "a")).unwrap();
        assert!(t.delete_rule("r1"));
        assert_eq!(t.node_count(), 1);
        assert!(!t.delete_rule("nope"));

        t.insert_rule(&rule("r1", vec![midnight()], "a")).unwrap();
        t.insert_rule(&rule("r2", vec![midnight(), home()], "b")).unwrap();
        assert!(t.delete_rule("r1"));
        t.check_invariants().unwrap();
        let snap = ContextSnapshot::new(0, [midnight(), home()]).unwrap();
        let ids: Vec<_> = t.query(&snap).into_iter().map(|m| m.rule_id).collect();
        assert_eq!(ids, ["r2"]);
    }

    #[test]
    fn rejects_bad_rules() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        assert_eq!(t.insert_rule(&rule("r", vec![], "a")), Err(RuleError::EmptyCause));
        let two = vec![home(), attr("Location", "location_tag", "office")];
        assert!(matches!(t.insert_rule(&rule("r", two, "a")), Err(RuleError::DuplicateFeature(_))));
        let mut neg = rule("r", vec![home()], "a");
        neg.polarity = Polarity::Negative;
        assert_eq!(t.insert_rule(&neg), Err(RuleError::PolarityMismatch));
        assert!(matches!(
            t.insert_rule(&rule("r", vec![attr("Mood", "x", "y")], "a")),
            Err(RuleError::Context(ContextError::UnknownAttribute { .. }))
        ));
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = RuleStore::new(reg());
        s.insert(rule("r1", vec![stilling(), home()], "a")).unwrap();
        let mut n = rule("r2", vec![midnight()], "b");
        n.polarity = Polarity::Negative;
        n.origin = RuleOrigin::Feedback;
        s.insert(n).unwrap();
        let text = s.export_jsonl();
        assert!(text.lines().next().unwrap().contains(r#""cause":[["Location","location_tag","home"],["Activities","activity","stilling"]]"#));
        let back = RuleStore::import_jsonl(reg(), &text).unwrap();
        assert_eq!(back.export_jsonl(), text);
        assert_eq!(back.tree(Polarity::Negative).len(), 1);
        assert!(matches!(RuleStore::import_jsonl(reg(), "{bad"), Err(RuleError::Parse { line: 1, .. })));
    }

    #[test]
    fn path_is_canonical() {
        let mut t = RuleTree::new(reg(), Polarity::Positive);
        t.insert_rule(&rule("r1", vec![stilling(), home(), midnight()], "a")).unwrap();
        let path: Vec<String> = t.path_of("r1").unwrap().iter().map(|a| a.to_string()).collect();
        assert_eq!(path, ["Time/o_clock=24:00", "Location/location_tag=home", "Activities/activity=stilling"]);
        let set: BTreeSet<_> = path.into_iter().collect();
        assert_eq!(set.len(), 3);
    }
}
