//! Context dimensions, features and attributes, plus the templated
//! semanticization that turns raw sensed values into readable strings and
//! canonical match values.
//!
//! A [`Registry`] is loaded once (the shipped default mirrors the eight
//! context types of the original system: Time, Network, Bluetooth, Weather,
//! Location, Activities, Service, Notification) and is immutable afterwards.
//! The registry row order fixes [`Registry::canonical_order`], which in turn
//! fixes the shape of every rule tree.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timestamps are epoch milliseconds throughout the engine.
pub type Timestamp = i64;

/// The shipped default registry.
pub const DEFAULT_REGISTRY_JSON: &str = include_str!("../data/registry.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("value {value} is outside the range of feature {feature}")]
    Range { feature: String, value: f64 },
    #[error("unknown category {value:?} for feature {feature}")]
    UnknownCategory { feature: String, value: String },
    #[error("unknown attribute {dimension}/{feature}")]
    UnknownAttribute { dimension: String, feature: String },
    #[error("feature {feature} expects a {expected} value")]
    ValueType { feature: String, expected: &'static str },
    #[error("duplicate attribute for {dimension}/{feature} in snapshot")]
    DuplicateFeature { dimension: String, feature: String },
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
}

impl ContextError {
    pub fn code(&self) -> &'static str {
        match self {
            ContextError::Range { .. } => "RANGE_ERROR",
            ContextError::UnknownCategory { .. } => "UNKNOWN_CATEGORY",
            ContextError::UnknownAttribute { .. } => "UNKNOWN_ATTRIBUTE",
            ContextError::ValueType { .. } => "VALUE_TYPE_ERROR",
            ContextError::DuplicateFeature { .. } => "DUPLICATE_FEATURE",
            ContextError::InvalidRegistry(_) => "INVALID_REGISTRY",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    Categorical,
    DiscretizedNumeric,
    FreeTextTag,
}

/// How the value placed into a feature template is rendered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Render {
    /// The raw value itself ("28").
    #[default]
    Value,
    /// The band label ("deep-night").
    Band,
    /// Hours rendered as a clock reading ("24:00", "07:30").
    Clock,
}

/// Half-open numeric band `[lower, upper)`; a missing bound is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub label: String,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl Band {
    pub fn contains(&self, v: f64) -> bool {
        self.lower.is_none_or(|lo| v >= lo) && self.upper.is_none_or(|hi| v < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeature {
    pub id: String,
    pub display_name: String,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Declared sensor range, inclusive on both ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discretization: Vec<Band>,
    pub template: String,
    #[serde(default)]
    pub render: Render,
    /// Sibling feature whose raw value also drives this one (time period from o'clock).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
}

impl From<f64> for RawValue {
    fn from(v: f64) -> Self {
        RawValue::Number(v)
    }
}

impl From<&str> for RawValue {
    fn from(v: &str) -> Self {
        RawValue::Text(v.to_string())
    }
}

/// Free-text tags and categories compare on this form.
pub fn fold_text(s: &str) -> String {
    s.trim().to_lowercase()
}

fn render_clock(v: f64) -> String {
    let minutes = (v * 60.0).round() as i64;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

fn render_number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl ContextFeature {
    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |msg: String| Err(ContextError::InvalidRegistry(format!("{}: {msg}", self.id)));
        if self.template.matches("{}").count() != 1 {
            return bad("template must contain exactly one {} placeholder".into());
        }
        match self.value_kind {
            ValueKind::Categorical if self.categories.is_empty() => {
                return bad("categorical feature without categories".into())
            }
            ValueKind::DiscretizedNumeric => {
                let Some((min, max)) = self.range else {
                    return bad("discretized feature without range".into());
                };
                if self.discretization.is_empty() {
                    return bad("discretized feature without bands".into());
                }
                let mut bands: Vec<&Band> = self.discretization.iter().collect();
                bands.sort_by(|a, b| {
                    a.lower
                        .unwrap_or(f64::NEG_INFINITY)
                        .total_cmp(&b.lower.unwrap_or(f64::NEG_INFINITY))
                });
                for b in &bands {
                    if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                        if lo >= hi {
                            return bad(format!("empty band {}", b.label));
                        }
                    }
                }
                if bands[0].lower.is_some_and(|lo| lo > min) {
                    return bad("bands do not cover range minimum".into());
                }
                for w in bands.windows(2) {
                    if w[0].upper != w[1].lower {
                        return bad(format!("bands {} and {} are not contiguous", w[0].label, w[1].label));
                    }
                }
                if bands[bands.len() - 1].upper.is_some_and(|hi| hi <= max) {
                    return bad("bands do not cover range maximum".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn band_for(&self, v: f64) -> Option<&Band> {
        self.discretization.iter().find(|b| b.contains(v))
    }

    /// Turns one raw sensed value into an attribute of this feature.
    pub fn semanticize(&self, dimension_id: &str, raw: &RawValue) -> Result<ContextAttribute, ContextError> {
        let (canonical, rendered) = match (self.value_kind, raw) {
            (ValueKind::DiscretizedNumeric, RawValue::Number(v)) => {
                let v = *v;
                let in_range = self.range.is_some_and(|(lo, hi)| v >= lo && v <= hi);
                let band = self.band_for(v).filter(|_| in_range && v.is_finite());
                let Some(band) = band else {
                    return Err(ContextError::Range { feature: self.id.clone(), value: v });
                };
                let rendered = match self.render {
                    Render::Value => render_number(v),
                    Render::Band => band.label.clone(),
                    Render::Clock => render_clock(v),
                };
                (band.label.clone(), rendered)
            }
            (ValueKind::DiscretizedNumeric, RawValue::Text(_)) => {
                return Err(ContextError::ValueType { feature: self.id.clone(), expected: "numeric" })
            }
            (ValueKind::Categorical, raw) => {
                let text = match raw {
                    RawValue::Text(t) => t.clone(),
                    RawValue::Number(n) => render_number(*n),
                };
                let folded = fold_text(&text);
                let Some(token) = self.categories.iter().find(|c| fold_text(c) == folded) else {
                    return Err(ContextError::UnknownCategory { feature: self.id.clone(), value: text });
                };
                (token.clone(), token.clone())
            }
            (ValueKind::FreeTextTag, raw) => {
                let text = match raw {
                    RawValue::Text(t) => t.trim().to_string(),
                    RawValue::Number(n) => render_number(*n),
                };
                if text.is_empty() {
                    return Err(ContextError::UnknownCategory { feature: self.id.clone(), value: text });
                }
                (fold_text(&text), text)
            }
        };
        Ok(ContextAttribute {
            dimension_id: dimension_id.to_string(),
            feature_id: self.id.clone(),
            canonical_value: canonical,
            semantic: self.template.replacen("{}", &rendered, 1),
            color_tag: self.color_tag.clone(),
        })
    }

    /// Every canonical value this feature can produce, or `None` for free text.
    pub fn canonical_values(&self) -> Option<Vec<String>> {
        match self.value_kind {
            ValueKind::Categorical => Some(self.categories.clone()),
            ValueKind::DiscretizedNumeric => {
                let mut labels: Vec<String> = Vec::new();
                for b in &self.discretization {
                    if !labels.contains(&b.label) {
                        labels.push(b.label.clone());
                    }
                }
                Some(labels)
            }
            ValueKind::FreeTextTag => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDimension {
    pub id: String,
    pub display_name: String,
    pub features: Vec<ContextFeature>,
    /// Assigned from position on load.
    #[serde(default)]
    pub registry_index: usize,
}

/// One (dimension, feature, value) triple. Equality and hashing use the
/// triple only; `semantic` and `color_tag` are presentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextAttribute {
    pub dimension_id: String,
    pub feature_id: String,
    pub canonical_value: String,
    pub semantic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_tag: Option<String>,
}

impl PartialEq for ContextAttribute {
    fn eq(&self, other: &Self) -> bool {
        self.dimension_id == other.dimension_id
            && self.feature_id == other.feature_id
            && self.canonical_value == other.canonical_value
    }
}

impl Eq for ContextAttribute {}

impl std::hash::Hash for ContextAttribute {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.dimension_id.hash(state);
        self.feature_id.hash(state);
        self.canonical_value.hash(state);
    }
}

impl ContextAttribute {
    /// Attribute with `semantic` equal to the canonical value; used for
    /// rules imported as bare triples.
    pub fn from_triple(dimension_id: &str, feature_id: &str, canonical_value: &str) -> Self {
        ContextAttribute {
            dimension_id: dimension_id.to_string(),
            feature_id: feature_id.to_string(),
            canonical_value: canonical_value.to_string(),
            semantic: canonical_value.to_string(),
            color_tag: None,
        }
    }

    /// "Dimension/feature"
    pub fn feature_key(&self) -> String {
        format!("{}/{}", self.dimension_id, self.feature_id)
    }

    pub fn same_feature(&self, other: &ContextAttribute) -> bool {
        self.dimension_id == other.dimension_id && self.feature_id == other.feature_id
    }

    pub fn triple(&self) -> (String, String, String) {
        (self.dimension_id.clone(), self.feature_id.clone(), self.canonical_value.clone())
    }
}

impl fmt::Display for ContextAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}={}", self.dimension_id, self.feature_id, self.canonical_value)
    }
}

/// The full attribute set at one instant: at most one attribute per feature.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub timestamp: Timestamp,
    attributes: Vec<ContextAttribute>,
}

impl ContextSnapshot {
    pub fn new(
        timestamp: Timestamp,
        attributes: impl IntoIterator<Item = ContextAttribute>,
    ) -> Result<Self, ContextError> {
        let mut snap = ContextSnapshot { timestamp, attributes: Vec::new() };
        for attr in attributes {
            if snap.get(&attr.dimension_id, &attr.feature_id).is_some() {
                return Err(ContextError::DuplicateFeature {
                    dimension: attr.dimension_id,
                    feature: attr.feature_id,
                });
            }
            snap.set(attr);
        }
        Ok(snap)
    }

    fn position(&self, dimension_id: &str, feature_id: &str) -> Result<usize, usize> {
        self.attributes
            .binary_search_by(|a| (a.dimension_id.as_str(), a.feature_id.as_str()).cmp(&(dimension_id, feature_id)))
    }

    pub fn get(&self, dimension_id: &str, feature_id: &str) -> Option<&ContextAttribute> {
        self.position(dimension_id, feature_id).ok().map(|i| &self.attributes[i])
    }

    /// Inserts or replaces the attribute for its feature.
    pub fn set(&mut self, attr: ContextAttribute) {
        match self.position(&attr.dimension_id, &attr.feature_id) {
            Ok(i) => self.attributes[i] = attr,
            Err(i) => self.attributes.insert(i, attr),
        }
    }

    pub fn remove(&mut self, dimension_id: &str, feature_id: &str) -> Option<ContextAttribute> {
        self.position(dimension_id, feature_id).ok().map(|i| self.attributes.remove(i))
    }

    /// True when the snapshot holds this feature with an equal canonical value.
    pub fn satisfies(&self, attr: &ContextAttribute) -> bool {
        self.get(&attr.dimension_id, &attr.feature_id)
            .is_some_and(|a| a.canonical_value == attr.canonical_value)
    }

    pub fn attributes(&self) -> &[ContextAttribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

/// Attributes of `b` whose value differs from `a`, plus features present in
/// only one of the two. Features that vanished are reported with `a`'s value.
pub fn snapshot_diff(a: &ContextSnapshot, b: &ContextSnapshot) -> Vec<ContextAttribute> {
    let mut out: Vec<ContextAttribute> = b
        .attributes()
        .iter()
        .filter(|attr| match a.get(&attr.dimension_id, &attr.feature_id) {
            Some(prev) => prev.canonical_value != attr.canonical_value,
            None => true,
        })
        .cloned()
        .collect();
    out.extend(
        a.attributes()
            .iter()
            .filter(|attr| b.get(&attr.dimension_id, &attr.feature_id).is_none())
            .cloned(),
    );
    out
}

/// Registry-resolved sort key of an attribute. The derived ordering is the
/// canonical order: dimension index, then feature index, then value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttrKey {
    pub dimension: usize,
    pub feature: usize,
    pub value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryDoc {
    #[serde(default = "one")]
    v: u32,
    dimensions: Vec<ContextDimension>,
}

fn one() -> u32 {
    1
}

/// Immutable set of context dimensions.
#[derive(Debug, Clone)]
pub struct Registry {
    dimensions: Vec<ContextDimension>,
    index: BTreeMap<(String, String), (usize, usize)>,
}

impl Registry {
    pub fn new(mut dimensions: Vec<ContextDimension>) -> Result<Self, ContextError> {
        let mut index = BTreeMap::new();
        for (di, dim) in dimensions.iter_mut().enumerate() {
            dim.registry_index = di;
            for (fi, feat) in dim.features.iter().enumerate() {
                feat.validate()?;
                if index.insert((dim.id.clone(), feat.id.clone()), (di, fi)).is_some() {
                    return Err(ContextError::InvalidRegistry(format!(
                        "duplicate feature {}/{}",
                        dim.id, feat.id
                    )));
                }
            }
        }
        for dim in &dimensions {
            for feat in &dim.features {
                if let Some(src) = &feat.source {
                    let ok = dim.features.iter().any(|f| &f.id == src && f.value_kind == ValueKind::DiscretizedNumeric);
                    if !ok {
                        return Err(ContextError::InvalidRegistry(format!(
                            "{}/{} has unknown numeric source {src}",
                            dim.id, feat.id
                        )));
                    }
                }
            }
        }
        Ok(Registry { dimensions, index })
    }

    pub fn from_json(text: &str) -> Result<Self, ContextError> {
        let doc: RegistryDoc =
            serde_json::from_str(text).map_err(|e| ContextError::InvalidRegistry(e.to_string()))?;
        if doc.v != 1 {
            return Err(ContextError::InvalidRegistry(format!("unsupported version {}", doc.v)));
        }
        Registry::new(doc.dimensions)
    }

    pub fn to_json(&self) -> String {
        let doc = RegistryDoc { v: 1, dimensions: self.dimensions.clone() };
        serde_json::to_string_pretty(&doc).expect("registry serializes")
    }

    pub fn default_registry() -> Self {
        Registry::from_json(DEFAULT_REGISTRY_JSON).expect("shipped registry is valid")
    }

    pub fn dimensions(&self) -> &[ContextDimension] {
        &self.dimensions
    }

    pub fn dimension(&self, id: &str) -> Option<&ContextDimension> {
        self.dimensions.iter().find(|d| d.id == id)
    }

    pub fn feature(&self, dimension_id: &str, feature_id: &str) -> Result<&ContextFeature, ContextError> {
        self.index
            .get(&(dimension_id.to_string(), feature_id.to_string()))
            .map(|&(d, f)| &self.dimensions[d].features[f])
            .ok_or_else(|| ContextError::UnknownAttribute {
                dimension: dimension_id.to_string(),
                feature: feature_id.to_string(),
            })
    }

    /// Resolves "Dimension/feature" case-insensitively.
    pub fn resolve_key(&self, key: &str) -> Option<(&ContextDimension, &ContextFeature)> {
        let (d, f) = key.split_once(['/', '.'])?;
        let (d, f) = (fold_text(d), fold_text(f));
        self.dimensions.iter().find_map(|dim| {
            if fold_text(&dim.id) != d {
                return None;
            }
            dim.features.iter().find(|feat| fold_text(&feat.id) == f).map(|feat| (dim, feat))
        })
    }

    pub fn semanticize(
        &self,
        dimension_id: &str,
        feature_id: &str,
        raw: &RawValue,
    ) -> Result<ContextAttribute, ContextError> {
        self.feature(dimension_id, feature_id)?.semanticize(dimension_id, raw)
    }

    /// Builds a snapshot from raw values keyed by "Dimension/feature".
    /// Features with a `source` are filled from their source's raw value
    /// unless given explicitly.
    pub fn snapshot(
        &self,
        timestamp: Timestamp,
        raw: &BTreeMap<String, RawValue>,
    ) -> Result<ContextSnapshot, ContextError> {
        let mut snap = ContextSnapshot { timestamp, attributes: Vec::new() };
        for (key, value) in raw {
            let (dim, feat) = self.resolve_key(key).ok_or_else(|| {
                let (d, f) = key.split_once(['/', '.']).unwrap_or((key.as_str(), ""));
                ContextError::UnknownAttribute { dimension: d.to_string(), feature: f.to_string() }
            })?;
            snap.set(feat.semanticize(&dim.id, value)?);
        }
        for dim in &self.dimensions {
            for feat in &dim.features {
                let Some(src) = &feat.source else { continue };
                if snap.get(&dim.id, &feat.id).is_some() {
                    continue;
                }
                let source_raw = raw.iter().find_map(|(k, v)| {
                    let (d, f) = self.resolve_key(k)?;
                    (d.id == dim.id && &f.id == src).then_some(v)
                });
                if let Some(v) = source_raw {
                    snap.set(feat.semanticize(&dim.id, v)?);
                }
            }
        }
        Ok(snap)
    }

    /// Checks that the attribute's feature exists and its value is one the
    /// feature can produce.
    pub fn validate_attribute(&self, attr: &ContextAttribute) -> Result<(), ContextError> {
        let feat = self.feature(&attr.dimension_id, &attr.feature_id)?;
        match feat.canonical_values() {
            Some(values) if !values.contains(&attr.canonical_value) => Err(ContextError::UnknownCategory {
                feature: feat.id.clone(),
                value: attr.canonical_value.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn key(&self, attr: &ContextAttribute) -> Result<AttrKey, ContextError> {
        let &(dimension, feature) = self
            .index
            .get(&(attr.dimension_id.clone(), attr.feature_id.clone()))
            .ok_or_else(|| ContextError::UnknownAttribute {
                dimension: attr.dimension_id.clone(),
                feature: attr.feature_id.clone(),
            })?;
        Ok(AttrKey { dimension, feature, value: attr.canonical_value.clone() })
    }

    /// Total order over registry attributes: (dimension index, feature
    /// index, canonical value).
    pub fn canonical_order(&self, x: &ContextAttribute, y: &ContextAttribute) -> Result<Ordering, ContextError> {
        Ok(self.key(x)?.cmp(&self.key(y)?))
    }

    /// Sorts attributes canonically; fails on the first unresolvable one.
    pub fn sort_canonical(&self, attrs: &mut [ContextAttribute]) -> Result<(), ContextError> {
        for a in attrs.iter() {
            self.key(a)?;
        }
        attrs.sort_by(|a, b| self.canonical_order(a, b).expect("keys resolved above"));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        Registry::default_registry()
    }

    #[test]
    fn temperature_28_is_hot() {
        let a = reg().semanticize("Weather", "temperature", &28.0.into()).unwrap();
        assert_eq!(a.semantic, "28 degrees Celsius");
        assert_eq!(a.canonical_value, "hot");
    }

    #[test]
    fn temperature_band_edges() {
        let r = reg();
        let band = |v: f64| r.semanticize("Weather", "temperature", &v.into()).unwrap().canonical_value;
        assert_eq!(band(-0.5), "freezing");
        assert_eq!(band(0.0), "cold");
        assert_eq!(band(10.0), "cool");
        assert_eq!(band(18.0), "mild");
        assert_eq!(band(24.0), "warm");
        assert_eq!(band(27.9), "warm");
    }

    #[test]
    fn day_of_week_is_identity() {
        let a = reg().semanticize("Time", "day_of_week", &"Monday".into()).unwrap();
        assert_eq!(a.semantic, "Monday");
        assert_eq!(a.canonical_value, "Monday");
        let b = reg().semanticize("Time", "day_of_week", &"monday".into()).unwrap();
        assert_eq!(b.canonical_value, "Monday");
    }

    #[test]
    fn midnight_is_deep_night() {
        let r = reg();
        let mut raw = BTreeMap::new();
        raw.insert("Time/o_clock".to_string(), RawValue::Number(24.0));
        let snap = r.snapshot(0, &raw).unwrap();
        let clock = snap.get("Time", "o_clock").unwrap();
        assert_eq!(clock.semantic, "24:00");
        assert_eq!(clock.canonical_value, "24:00");
        assert_eq!(snap.get("Time", "time_period").unwrap().canonical_value, "deep-night");
        raw.insert("Time/o_clock".to_string(), RawValue::Number(0.5));
        let snap = r.snapshot(0, &raw).unwrap();
        assert_eq!(snap.get("Time", "time_period").unwrap().canonical_value, "deep-night");
        assert_eq!(snap.get("Time", "o_clock").unwrap().semantic, "00:30");
    }

    #[test]
    fn out_of_range_and_unknown_category() {
        let r = reg();
        assert!(matches!(
            r.semanticize("Weather", "temperature", &1000.0.into()),
            Err(ContextError::Range { feature, .. }) if feature == "temperature"
        ));
        assert!(matches!(
            r.semanticize("Time", "day_of_week", &"Caturday".into()),
            Err(ContextError::UnknownCategory { .. })
        ));
    }

    #[test]
    fn free_text_folds_case() {
        let a = reg().semanticize("Network", "ssid", &"  HomeWifi ".into()).unwrap();
        assert_eq!(a.canonical_value, "homewifi");
        assert_eq!(a.semantic, "Wi-Fi HomeWifi");
    }

    #[test]
    fn diff_cases() {
        let r = reg();
        let attr = |d: &str, f: &str, v: RawValue| r.semanticize(d, f, &v).unwrap();
        let a = ContextSnapshot::new(0, [attr("Time", "time_period", 23.0.into())]).unwrap();
        assert!(snapshot_diff(&a, &a).is_empty());
        let b = ContextSnapshot::new(1, [attr("Time", "time_period", 10.0.into())]).unwrap();
        let d = snapshot_diff(&a, &b);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].canonical_value, "morning");
        let mut c = a.clone();
        c.set(attr("Network", "ssid", "HomeWifi".into()));
        let d = snapshot_diff(&a, &c);
        assert_eq!(d, vec![attr("Network", "ssid", "HomeWifi".into())]);
    }

    #[test]
    fn canonical_order_examples() {
        let r = reg();
        let monday = r.semanticize("Time", "day_of_week", &"Monday".into()).unwrap();
        let hot = r.semanticize("Weather", "temperature", &30.0.into()).unwrap();
        assert_eq!(r.canonical_order(&monday, &hot).unwrap(), Ordering::Less);
        assert_eq!(r.canonical_order(&hot, &hot).unwrap(), Ordering::Equal);
        let dorm = r.semanticize("Location", "address", &"Dorm".into()).unwrap();
        let office = r.semanticize("Location", "address", &"Office".into()).unwrap();
        assert_eq!(r.canonical_order(&dorm, &office).unwrap(), Ordering::Less);
        let bogus = ContextAttribute::from_triple("Mood", "happy", "yes");
        assert!(matches!(r.canonical_order(&bogus, &hot), Err(ContextError::UnknownAttribute { .. })));
    }

    #[test]
    fn registry_order_follows_table_rows() {
        let ids: Vec<_> = reg().dimensions().iter().map(|d| d.id.clone()).collect();
        assert_eq!(
            ids,
            ["Time", "Network", "Bluetooth", "Weather", "Location", "Activities", "Service", "Notification"]
        );
    }

    #[test]
    fn band_sweep_maps_every_value_to_exactly_one_band() {
        for dim in reg().dimensions() {
            for feat in dim.features.iter().filter(|f| f.value_kind == ValueKind::DiscretizedNumeric) {
                let (lo, hi) = feat.range.unwrap();
                let steps = 2000;
                for i in 0..=steps {
                    let v = lo + (hi - lo) * i as f64 / steps as f64;
                    let hits = feat.discretization.iter().filter(|b| b.contains(v)).count();
                    assert_eq!(hits, 1, "{}/{} value {v}", dim.id, feat.id);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_feature_definitions() {
        let mut f = reg().feature("Weather", "temperature").unwrap().clone();
        f.template = "no placeholder".into();
        assert!(f.validate().is_err());
        let mut f = reg().feature("Weather", "temperature").unwrap().clone();
        f.discretization.remove(2);
        assert!(f.validate().is_err());
    }

    #[test]
    fn registry_json_round_trip() {
        let r = reg();
        let again = Registry::from_json(&r.to_json()).unwrap();
        assert_eq!(again.dimensions(), r.dimensions());
    }
}
