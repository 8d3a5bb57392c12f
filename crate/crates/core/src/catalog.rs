//! Registry of recognizable services: labeled in-app services (pages plus
//! page/action sequences) and open-app services.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_with::{DeserializeFromStr, SerializeDisplay};
use thiserror::Error;

use crate::context::fold_text;

/// The shipped illustrative catalog.
pub const DEFAULT_CATALOG_JSON: &str = include_str!("../data/catalog.json");

pub const OPEN_SERVICE_KEY: &str = "open";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("duplicate service {0}")]
    DuplicateService(ServiceId),
    #[error("catalog validation failed: {0}")]
    Validation(String),
    #[error("catalog parse error: {0}")]
    Parse(String),
}

impl CatalogError {
    pub fn code(&self) -> &'static str {
        match self {
            CatalogError::DuplicateService(_) => "DUPLICATE_SERVICE",
            CatalogError::Validation(_) => "CATALOG_VALIDATION",
            CatalogError::Parse(_) => "CATALOG_PARSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, SerializeDisplay, DeserializeFromStr)]
pub struct ServiceId {
    pub app_id: String,
    pub service_key: String,
}

impl ServiceId {
    pub fn new(app_id: impl Into<String>, service_key: impl Into<String>) -> Self {
        ServiceId { app_id: app_id.into(), service_key: service_key.into() }
    }

    pub fn open(app_id: impl Into<String>) -> Self {
        ServiceId::new(app_id, OPEN_SERVICE_KEY)
    }

    pub fn is_open_app(&self) -> bool {
        self.service_key == OPEN_SERVICE_KEY
    }
}

/// Rendered as `app_id:service_key`.
impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.app_id, self.service_key)
    }
}

impl FromStr for ServiceId {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.rsplit_once(':') {
            Some((app, key)) if !app.is_empty() && !key.is_empty() => Ok(ServiceId::new(app, key)),
            _ => Err(CatalogError::Parse(format!("malformed service id {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceKind {
    InApp,
    OpenApp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLabel {
    pub page_id: String,
    pub keywords: BTreeSet<String>,
}

/// One labeled way of performing a service: chronological page ids and
/// action keywords, compared against their windows separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    #[serde(default)]
    pub page_sequence: Vec<String>,
    #[serde(default)]
    pub action_sequence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceLabel {
    pub id: ServiceId,
    pub semantic: String,
    pub pages: Vec<PageLabel>,
    /// First entry is the primary labeled sequence; the rest are alternatives.
    pub sequences: Vec<LabeledSequence>,
    pub kind: ServiceKind,
}

impl ServiceLabel {
    pub fn page(&self, page_id: &str) -> Option<&PageLabel> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }
}

/// Open-app service; its semantic is the application name.
pub fn open_app_service(app_id: &str, app_name: &str) -> ServiceLabel {
    ServiceLabel {
        id: ServiceId::open(app_id),
        semantic: app_name.to_string(),
        pages: Vec::new(),
        sequences: Vec::new(),
        kind: ServiceKind::OpenApp,
    }
}

// On-disk document shapes.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CatalogDoc {
    #[serde(default)]
    pub apps: Vec<AppDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppDoc {
    pub app_id: String,
    pub app_name: String,
    #[serde(default)]
    pub services: Vec<ServiceDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceDoc {
    pub service_key: String,
    pub semantic: String,
    #[serde(default)]
    pub pages: Vec<PageDoc>,
    #[serde(default)]
    pub page_sequence: Vec<String>,
    #[serde(default)]
    pub action_sequence: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternatives: Vec<LabeledSequence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageDoc {
    pub page_id: String,
    pub keywords: Vec<String>,
}

/// (service index, page index) into [`Catalog::services`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PageRef {
    pub service: usize,
    pub page: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    apps: Vec<(String, String)>,
    services: Vec<ServiceLabel>,
    keyword_index: BTreeMap<String, Vec<PageRef>>,
    by_app: BTreeMap<String, Vec<usize>>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        if text.trim().is_empty() {
            return Ok(Catalog::default());
        }
        let doc: CatalogDoc = serde_json::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        Catalog::load(doc)
    }

    pub fn default_catalog() -> Self {
        Catalog::from_json(DEFAULT_CATALOG_JSON).expect("shipped catalog is valid")
    }

    pub fn load(doc: CatalogDoc) -> Result<Self, CatalogError> {
        let mut cat = Catalog::default();
        let mut seen = BTreeSet::new();
        for app in doc.apps {
            if app.app_id.trim().is_empty() {
                return Err(CatalogError::Validation("empty app_id".into()));
            }
            if cat.apps.iter().any(|(a, _)| a == &app.app_id) {
                return Err(CatalogError::Validation(format!("duplicate app {}", app.app_id)));
            }
            cat.apps.push((app.app_id.clone(), app.app_name.clone()));
            for svc in app.services {
                let id = ServiceId::new(&app.app_id, &svc.service_key);
                if svc.service_key.is_empty() || svc.service_key == OPEN_SERVICE_KEY {
                    return Err(CatalogError::Validation(format!("invalid service key in {id}")));
                }
                if !seen.insert(id.clone()) {
                    return Err(CatalogError::DuplicateService(id));
                }
                let label = build_label(id, svc)?;
                let si = cat.services.len();
                for (pi, page) in label.pages.iter().enumerate() {
                    for kw in &page.keywords {
                        cat.keyword_index.entry(kw.clone()).or_default().push(PageRef { service: si, page: pi });
                    }
                }
                cat.by_app.entry(app.app_id.clone()).or_default().push(si);
                cat.services.push(label);
            }
        }
        Ok(cat)
    }

    pub fn to_doc(&self) -> CatalogDoc {
        let apps = self
            .apps
            .iter()
            .map(|(app_id, app_name)| AppDoc {
                app_id: app_id.clone(),
                app_name: app_name.clone(),
                services: self
                    .services_of(app_id)
                    .map(|s| {
                        let mut seqs = s.sequences.iter().cloned();
                        let primary = seqs.next().unwrap_or_default();
                        ServiceDoc {
                            service_key: s.id.service_key.clone(),
                            semantic: s.semantic.clone(),
                            pages: s
                                .pages
                                .iter()
                                .map(|p| PageDoc { page_id: p.page_id.clone(), keywords: p.keywords.iter().cloned().collect() })
                                .collect(),
                            page_sequence: primary.page_sequence,
                            action_sequence: primary.action_sequence,
                            alternatives: seqs.collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        CatalogDoc { apps }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("catalog serializes")
    }

    pub fn services(&self) -> &[ServiceLabel] {
        &self.services
    }

    pub fn services_of<'a>(&'a self, app_id: &str) -> impl Iterator<Item = &'a ServiceLabel> + 'a {
        self.by_app.get(app_id).into_iter().flatten().map(|&i| &self.services[i])
    }

    pub fn app_name(&self, app_id: &str) -> Option<&str> {
        self.apps.iter().find(|(a, _)| a == app_id).map(|(_, n)| n.as_str())
    }

    pub fn apps(&self) -> impl Iterator<Item = (&str, &str)> {
        self.apps.iter().map(|(a, n)| (a.as_str(), n.as_str()))
    }

    /// Pages containing `keyword` (already normalized).
    pub fn pages_with_keyword(&self, keyword: &str) -> &[PageRef] {
        self.keyword_index.get(keyword).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn page(&self, r: PageRef) -> &PageLabel {
        &self.services[r.service].pages[r.page]
    }

    /// Looks up a labeled service, or synthesizes the open-app label.
    pub fn label(&self, id: &ServiceId) -> Option<ServiceLabel> {
        if id.is_open_app() {
            let name = self.app_name(&id.app_id).unwrap_or(&id.app_id);
            return Some(open_app_service(&id.app_id, name));
        }
        self.services.iter().find(|s| &s.id == id).cloned()
    }

    /// Human-readable semantic for any service id, falling back to the id.
    pub fn semantic(&self, id: &ServiceId) -> String {
        self.label(id).map(|l| l.semantic).unwrap_or_else(|| id.to_string())
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }
}

fn build_label(id: ServiceId, svc: ServiceDoc) -> Result<ServiceLabel, CatalogError> {
    let mut pages = Vec::with_capacity(svc.pages.len());
    for p in svc.pages {
        let keywords: BTreeSet<String> = p.keywords.iter().map(|k| fold_text(k)).filter(|k| !k.is_empty()).collect();
        if keywords.is_empty() {
            return Err(CatalogError::Validation(format!("page {} of {id} has no keywords", p.page_id)));
        }
        if pages.iter().any(|q: &PageLabel| q.page_id == p.page_id) {
            return Err(CatalogError::Validation(format!("duplicate page {} in {id}", p.page_id)));
        }
        pages.push(PageLabel { page_id: p.page_id, keywords });
    }
    let primary = LabeledSequence {
        page_sequence: svc.page_sequence,
        action_sequence: svc.action_sequence.iter().map(|a| fold_text(a)).collect(),
    };
    let mut sequences = vec![primary];
    sequences.extend(svc.alternatives.into_iter().map(|s| LabeledSequence {
        page_sequence: s.page_sequence,
        action_sequence: s.action_sequence.iter().map(|a| fold_text(a)).collect(),
    }));
    if pages.is_empty() {
        return Err(CatalogError::Validation(format!("in-app service {id} has no pages")));
    }
    for seq in &sequences {
        if seq.page_sequence.is_empty() && seq.action_sequence.is_empty() {
            return Err(CatalogError::Validation(format!("in-app service {id} has an empty sequence")));
        }
        for step in &seq.page_sequence {
            if !pages.iter().any(|p| &p.page_id == step) {
                return Err(CatalogError::Validation(format!("{id} references unknown page {step}")));
            }
        }
    }
    Ok(ServiceLabel { id, semantic: svc.semantic, pages, sequences, kind: ServiceKind::InApp })
}
