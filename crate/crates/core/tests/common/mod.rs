#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use sayrea_core::catalog::ServiceId;
use sayrea_core::context::{ContextAttribute, ContextSnapshot, Registry};
use sayrea_core::rules::{ContextualRule, Polarity, RuleOrigin};
use serde_json::json;

/// Registry of `dims` dimensions, one categorical feature each with
/// `values` values.
pub fn small_registry(dims: usize, values: usize) -> Arc<Registry> {
    let dimensions: Vec<_> = (0..dims)
        .map(|d| {
            json!({
                "id": format!("D{d}"),
                "display_name": format!("D{d}"),
                "features": [{
                    "id": "f",
                    "display_name": "f",
                    "value_kind": "categorical",
                    "categories": (0..values).map(|v| format!("v{v}")).collect::<Vec<_>>(),
                    "template": "{}"
                }]
            })
        })
        .collect();
    let doc = json!({ "v": 1, "dimensions": dimensions });
    Arc::new(Registry::from_json(&doc.to_string()).expect("valid registry"))
}

pub fn attr(d: usize, v: usize) -> ContextAttribute {
    ContextAttribute::from_triple(&format!("D{d}"), "f", &format!("v{v}"))
}

pub fn random_cause(rng: &mut impl Rng, dims: usize, values: usize) -> Vec<ContextAttribute> {
    let mut ds: Vec<usize> = (0..dims).collect();
    ds.shuffle(rng);
    let n = rng.random_range(1..=dims);
    ds[..n].iter().map(|&d| attr(d, rng.random_range(0..values))).collect()
}

pub fn random_snapshot(rng: &mut impl Rng, dims: usize, values: usize) -> ContextSnapshot {
    let mut attrs = Vec::new();
    for d in 0..dims {
        if rng.random_bool(0.85) {
            attrs.push(attr(d, rng.random_range(0..values)));
        }
    }
    ContextSnapshot::new(0, attrs).expect("one value per feature")
}

pub fn random_rules(
    rng: &mut impl Rng,
    dims: usize,
    values: usize,
    n: usize,
    services: usize,
    polarity: Polarity,
    prefix: &str,
) -> Vec<ContextualRule> {
    (0..n)
        .map(|i| ContextualRule {
            rule_id: format!("{prefix}{i:04}"),
            cause: random_cause(rng, dims, values),
            service: ServiceId::open(format!("s{}", rng.random_range(0..services))),
            polarity,
            reason: format!("reason {i}"),
            created_at: 0,
            origin: RuleOrigin::UserReason,
        })
        .collect()
}

pub fn triples(cause: &[ContextAttribute]) -> BTreeSet<(String, String, String)> {
    cause.iter().map(ContextAttribute::triple).collect()
}

/// Linear-scan oracle: every rule whose cause is contained in the snapshot.
pub fn linear_matches<'a>(rules: &'a [ContextualRule], snapshot: &ContextSnapshot) -> BTreeSet<&'a str> {
    rules
        .iter()
        .filter(|r| r.cause.iter().all(|a| snapshot.satisfies(a)))
        .map(|r| r.rule_id.as_str())
        .collect()
}
