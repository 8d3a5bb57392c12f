//! Service recognition from page/action/app-open event streams.
//!
//! Pages are recognized by keyword overlap with labeled pages and appended
//! to a page window; actions go to a separate action window. A labeled
//! service is recognized when each of its non-empty labeled sequences is
//! within edit distance 1.5 of its window, where deleting window tokens is
//! free, and at least one of its own pages has been seen. Deletions being free makes the distance invariant under reversing
//! both sequences, so windows are compared in chronological order.
//!
//! A passing service first becomes a candidate. The candidate is emitted
//! once its distance reaches zero, or when a later event no longer improves
//! it (the user moved on), or on [`Recognizer::flush`]. Emitted services
//! consume their matched window tokens so the same contents never trigger
//! twice.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, LabeledSequence, PageLabel, ServiceId};
use crate::context::{fold_text, Timestamp};

pub const PAGE_MATCH_RATIO: f64 = 0.8;
pub const RECOGNITION_THRESHOLD: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecognitionError {
    #[error("event payload is empty")]
    EmptyPayload,
    #[error("event at {got} precedes the previous event at {last}")]
    OutOfOrder { last: Timestamp, got: Timestamp },
}

impl RecognitionError {
    pub fn code(&self) -> &'static str {
        match self {
            RecognitionError::EmptyPayload => "EMPTY_PAYLOAD",
            RecognitionError::OutOfOrder { .. } => "ORDER_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UiPayload {
    Page { keywords: Vec<String> },
    Action { keyword: String },
    AppOpen {
        app_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        app_name: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiEvent {
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub payload: UiPayload,
}

impl UiEvent {
    pub fn page(timestamp: Timestamp, keywords: &[&str]) -> Self {
        UiEvent { timestamp, payload: UiPayload::Page { keywords: keywords.iter().map(|s| s.to_string()).collect() } }
    }

    pub fn action(timestamp: Timestamp, keyword: &str) -> Self {
        UiEvent { timestamp, payload: UiPayload::Action { keyword: keyword.to_string() } }
    }

    pub fn app_open(timestamp: Timestamp, app_id: &str) -> Self {
        UiEvent { timestamp, payload: UiPayload::AppOpen { app_id: app_id.to_string(), app_name: None } }
    }

    fn validate(&self) -> Result<(), RecognitionError> {
        let empty = match &self.payload {
            UiPayload::Page { keywords } => keywords.iter().all(|k| k.trim().is_empty()),
            UiPayload::Action { keyword } => keyword.trim().is_empty(),
            UiPayload::AppOpen { app_id, .. } => app_id.trim().is_empty(),
        };
        if empty {
            Err(RecognitionError::EmptyPayload)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    LabeledSequence,
    AppOpen,
    /// Usage reported directly (simulation or trace), bypassing the windows.
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub service: ServiceId,
    pub timestamp: Timestamp,
    pub matched_distance: f64,
    pub trigger: Trigger,
}

/// True iff at least 80% of the label's keywords occur among the runtime keywords.
pub fn match_page<S: AsRef<str>>(runtime_keywords: &[S], label: &PageLabel) -> bool {
    if label.keywords.is_empty() {
        return false;
    }
    let runtime: std::collections::BTreeSet<String> = runtime_keywords.iter().map(|k| fold_text(k.as_ref())).collect();
    let hits = label.keywords.iter().filter(|k| runtime.contains(*k)).count();
    hits as f64 / label.keywords.len() as f64 >= PAGE_MATCH_RATIO
}

/// Edit distance turning `window` into `label` where deleting a window token
/// costs 0 and inserting or substituting costs 1.
pub fn window_distance<T: PartialEq>(window: &[T], label: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=label.len()).collect();
    let mut cur = vec![0; label.len() + 1];
    for w in window {
        cur[0] = 0;
        for (j, l) in label.iter().enumerate() {
            let sub = prev[j] + usize::from(w != l);
            cur[j + 1] = sub.min(prev[j + 1]).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[label.len()]
}

pub fn passes(distance: usize) -> bool {
    (distance as f64) < RECOGNITION_THRESHOLD
}

/// Window indices aligned by one longest common subsequence with `label`.
fn aligned_indices<T: PartialEq>(window: &[T], label: &[T]) -> Vec<usize> {
    let (n, m) = (window.len(), label.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            t[i + 1][j + 1] = if window[i] == label[j] { t[i][j] + 1 } else { t[i][j + 1].max(t[i + 1][j]) };
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if window[i - 1] == label[j - 1] && t[i][j] == t[i - 1][j - 1] + 1 {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub page_max_len: usize,
    pub action_max_len: usize,
    pub max_age_ms: i64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { page_max_len: 10, action_max_len: 20, max_age_ms: 5 * 60 * 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindow {
    entries: VecDeque<(Timestamp, String)>,
    max_len: usize,
    max_age_ms: i64,
}

impl SlidingWindow {
    pub fn new(max_len: usize, max_age_ms: i64) -> Self {
        SlidingWindow { entries: VecDeque::new(), max_len, max_age_ms }
    }

    pub fn push(&mut self, ts: Timestamp, token: String) {
        self.entries.push_back((ts, token));
        self.prune(ts);
        while self.entries.len() > self.max_len {
            self.entries.pop_front();
        }
    }

    /// Drops entries at least `max_age` older than `now`.
    pub fn prune(&mut self, now: Timestamp) {
        while self.entries.front().is_some_and(|(t, _)| now - t >= self.max_age_ms) {
            self.entries.pop_front();
        }
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.entries.iter().map(|(_, t)| t.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn remove_indices(&mut self, idx: &[usize]) {
        let mut i = 0;
        self.entries.retain(|_| {
            let keep = !idx.contains(&i);
            i += 1;
            keep
        });
    }
}

/// Window token for a recognized page.
fn page_token(app_id: &str, page_id: &str) -> String {
    format!("{app_id}/{page_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct Score {
    max: usize,
    sum: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Candidate {
    timestamp: Timestamp,
    score: Score,
    sequence: usize,
}

/// Per-session recognizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognizer {
    pages: SlidingWindow,
    actions: SlidingWindow,
    candidates: BTreeMap<ServiceId, Candidate>,
    last_timestamp: Option<Timestamp>,
}

impl Default for Recognizer {
    fn default() -> Self {
        Recognizer::new(WindowConfig::default())
    }
}

impl Recognizer {
    pub fn new(config: WindowConfig) -> Self {
        Recognizer {
            pages: SlidingWindow::new(config.page_max_len, config.max_age_ms),
            actions: SlidingWindow::new(config.action_max_len, config.max_age_ms),
            candidates: BTreeMap::new(),
            last_timestamp: None,
        }
    }

    pub fn page_window(&self) -> &SlidingWindow {
        &self.pages
    }

    pub fn action_window(&self) -> &SlidingWindow {
        &self.actions
    }

    pub fn has_candidates(&self) -> bool {
        !self.candidates.is_empty()
    }

    pub fn ingest(&mut self, event: &UiEvent, catalog: &Catalog) -> Result<Vec<Recognition>, RecognitionError> {
        event.validate()?;
        if let Some(last) = self.last_timestamp {
            if event.timestamp < last {
                return Err(RecognitionError::OutOfOrder { last, got: event.timestamp });
            }
        }
        self.last_timestamp = Some(event.timestamp);
        let now = event.timestamp;
        self.pages.prune(now);
        self.actions.prune(now);

        // Services whose labels contain a token appended by this event.
        let mut touched: Vec<usize> = Vec::new();
        match &event.payload {
            UiPayload::Page { keywords } => {
                let mut matched: Vec<(usize, usize)> = Vec::new();
                for kw in keywords {
                    for r in catalog.pages_with_keyword(&fold_text(kw)) {
                        if !matched.contains(&(r.service, r.page)) && match_page(keywords, catalog.page(*r)) {
                            matched.push((r.service, r.page));
                        }
                    }
                }
                matched.sort();
                for (si, pi) in matched {
                    let svc = &catalog.services()[si];
                    let page_id = &svc.pages[pi].page_id;
                    self.pages.push(now, page_token(&svc.id.app_id, page_id));
                    for (sj, other) in catalog.services().iter().enumerate() {
                        let t = page_token(&svc.id.app_id, page_id);
                        let hit = other.sequences.iter().any(|s| {
                            s.page_sequence.iter().any(|p| page_token(&other.id.app_id, p) == t)
                        });
                        if hit && !touched.contains(&sj) {
                            touched.push(sj);
                        }
                    }
                }
            }
            UiPayload::Action { keyword } => {
                let kw = fold_text(keyword);
                for (sj, svc) in catalog.services().iter().enumerate() {
                    if svc.sequences.iter().any(|s| s.action_sequence.contains(&kw)) {
                        touched.push(sj);
                    }
                }
                self.actions.push(now, kw);
            }
            UiPayload::AppOpen { app_id, .. } => {
                let mut out = self.flush(catalog);
                out.push(Recognition {
                    service: ServiceId::open(app_id.trim()),
                    timestamp: now,
                    matched_distance: 0.0,
                    trigger: Trigger::AppOpen,
                });
                return Ok(out);
            }
        }

        let mut settle: Vec<ServiceId> = Vec::new();
        let mut emit_now: Vec<(ServiceId, Score, usize)> = Vec::new();
        let touched_ids: Vec<&ServiceId> = touched.iter().map(|&i| &catalog.services()[i].id).collect();
        for id in self.candidates.keys() {
            if !touched_ids.contains(&id) {
                settle.push(id.clone());
            }
        }
        for &si in &touched {
            let svc = &catalog.services()[si];
            let best = self.best_sequence(&svc.id.app_id, &svc.sequences);
            match (best, self.candidates.get(&svc.id)) {
                (Some((score, seq)), _) if score.max == 0 => emit_now.push((svc.id.clone(), score, seq)),
                (Some((score, seq)), Some(c)) if score < c.score => {
                    self.candidates.insert(svc.id.clone(), Candidate { timestamp: now, score, sequence: seq });
                }
                (Some(_), Some(_)) | (None, Some(_)) => settle.push(svc.id.clone()),
                (Some((score, seq)), None) => {
                    self.candidates.insert(svc.id.clone(), Candidate { timestamp: now, score, sequence: seq });
                }
                (None, None) => {}
            }
        }

        // Exact matches go first; their tokens are consumed, so candidates
        // that relied on them are re-checked before emission.
        let mut out = Vec::new();
        for (id, score, seq) in emit_now {
            self.candidates.remove(&id);
            out.push(self.emit(catalog, id, now, score, seq));
        }
        for id in settle {
            if let Some(c) = self.candidates.remove(&id) {
                if self.still_passes(catalog, &id) {
                    out.push(self.emit(catalog, id, c.timestamp, c.score, c.sequence));
                }
            }
        }
        if !out.is_empty() {
            let stale: Vec<ServiceId> =
                self.candidates.keys().filter(|id| !self.still_passes(catalog, id)).cloned().collect();
            for id in stale {
                self.candidates.remove(&id);
            }
        }
        out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.service.cmp(&b.service)));
        Ok(out)
    }

    /// Emits every pending candidate.
    pub fn flush(&mut self, catalog: &Catalog) -> Vec<Recognition> {
        let pending = std::mem::take(&mut self.candidates);
        let mut out = Vec::new();
        for (id, c) in pending {
            if self.still_passes(catalog, &id) {
                out.push(self.emit(catalog, id, c.timestamp, c.score, c.sequence));
            }
        }
        out
    }

    fn still_passes(&self, catalog: &Catalog, id: &ServiceId) -> bool {
        catalog
            .services()
            .iter()
            .find(|s| &s.id == id)
            .is_some_and(|s| self.best_sequence(&s.id.app_id, &s.sequences).is_some())
    }

    fn best_sequence(&self, app_id: &str, sequences: &[LabeledSequence]) -> Option<(Score, usize)> {
        let pages = self.pages.tokens();
        let actions = self.actions.tokens();
        sequences
            .iter()
            .enumerate()
            .filter_map(|(i, seq)| {
                let mut dists = Vec::with_capacity(2);
                if !seq.page_sequence.is_empty() {
                    let label: Vec<String> = seq.page_sequence.iter().map(|p| page_token(app_id, p)).collect();
                    let label: Vec<&str> = label.iter().map(String::as_str).collect();
                    let d = window_distance(&pages, &label);
                    // Action keywords are shared across apps; at least one page of
                    // the service itself must have been seen.
                    if d == label.len() {
                        return None;
                    }
                    dists.push(d);
                }
                if !seq.action_sequence.is_empty() {
                    let label: Vec<&str> = seq.action_sequence.iter().map(String::as_str).collect();
                    dists.push(window_distance(&actions, &label));
                }
                if dists.is_empty() || !dists.iter().all(|&d| passes(d)) {
                    return None;
                }
                Some((Score { max: *dists.iter().max().unwrap(), sum: dists.iter().sum() }, i))
            })
            .min()
    }

    fn emit(&mut self, catalog: &Catalog, id: ServiceId, ts: Timestamp, score: Score, seq: usize) -> Recognition {
        if let Some(label) = catalog.services().iter().find(|s| s.id == id) {
            if let Some(seq) = label.sequences.get(seq) {
                let page_label: Vec<String> = seq.page_sequence.iter().map(|p| page_token(&id.app_id, p)).collect();
                let page_label: Vec<&str> = page_label.iter().map(String::as_str).collect();
                let idx = aligned_indices(&self.pages.tokens(), &page_label);
                self.pages.remove_indices(&idx);
                let action_label: Vec<&str> = seq.action_sequence.iter().map(String::as_str).collect();
                let idx = aligned_indices(&self.actions.tokens(), &action_label);
                self.actions.remove_indices(&idx);
            }
        }
        Recognition {
            service: id,
            timestamp: ts,
            matched_distance: score.max as f64,
            trigger: Trigger::LabeledSequence,
        }
    }
}
