//! The in-situ loop behind one serialized mutation point: recognition opens
//! reason requests, reasons become rules, rules drive recommendations.
//!
//! Every state change is recorded as a [`JournalEntry`] and applied through
//! [`Engine::apply`]; [`Engine::from_journal`] rebuilds identical state from
//! the entries alone (the backend is never consulted during replay, since
//! identified causes are part of the journal).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ServiceId};
use crate::context::{snapshot_diff, ContextAttribute, ContextError, ContextSnapshot, RawValue, Registry, Timestamp};
use crate::identify::{build_prompt, overlap_accuracy, IdentifiedCause, Identifier, IdentifyError, PromptBundle};
use crate::recognition::{Recognition, RecognitionError, Recognizer, Trigger, UiEvent, UiPayload, WindowConfig};
use crate::recommend::{recommend_excluding, RecencyLog, Recommendation, DEFAULT_LIST_SIZE, DEFAULT_RECENCY_CAPACITY};
use crate::rules::{ContextualRule, Polarity, RuleError, RuleOrigin, RuleStore};

pub const WIRE_VERSION: u32 = 1;
pub const DEFAULT_REQUEST_TTL_MS: i64 = 10 * 60 * 1000;

pub type RequestId = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("request {0} not found")]
    RequestNotFound(RequestId),
    #[error("request {0} is not pending")]
    RequestNotPending(RequestId),
    #[error("request {0} has no identified cause to compare against")]
    RequestNotAnswered(RequestId),
    #[error("predicted reason index {index} out of range ({len} available)")]
    Index { index: usize, len: usize },
    #[error("service {0} is not currently recommended")]
    NotRecommended(ServiceId),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("list size must be at least 1")]
    InvalidListSize,
    #[error("journal entry {seq}: {message}")]
    Journal { seq: u64, message: String },
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Recognition(#[from] RecognitionError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::RequestNotFound(_) => "REQUEST_NOT_FOUND",
            EngineError::RequestNotPending(_) => "REQUEST_NOT_PENDING",
            EngineError::RequestNotAnswered(_) => "REQUEST_NOT_ANSWERED",
            EngineError::Index { .. } => "INDEX_ERROR",
            EngineError::NotRecommended(_) => "NOT_RECOMMENDED",
            EngineError::UnknownService(_) => "UNKNOWN_SERVICE",
            EngineError::InvalidListSize => "INVALID_LIST_SIZE",
            EngineError::Journal { .. } => "JOURNAL_ERROR",
            EngineError::Identify(e) => e.code(),
            EngineError::Context(e) => e.code(),
            EngineError::Recognition(e) => e.code(),
            EngineError::Rule(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestState {
    Pending,
    Answered,
    Confirmed,
    Dismissed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedReason {
    pub reason: String,
    pub cause: Vec<ContextAttribute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonRequest {
    pub request_id: RequestId,
    pub service: ServiceId,
    pub service_semantic: String,
    /// Negative requests come from rejecting a recommendation.
    pub polarity: Polarity,
    pub snapshot: ContextSnapshot,
    pub created_at: Timestamp,
    pub predicted_reasons: Vec<PredictedReason>,
    pub state: RequestState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identified: Option<Vec<ContextAttribute>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JournalEvent {
    /// Raw values merged into the live context.
    ContextUpdate { values: BTreeMap<String, RawValue> },
    UiEvent { event: UiEvent },
    /// Pending recognition candidates were emitted ahead of a context change.
    RecognizerFlush,
    Recognition { recognition: Recognition },
    RecommendationShown { services: Vec<ServiceId> },
    Usage { service: ServiceId, covered: bool, trigger: Trigger },
    RequestOpened { request: ReasonRequest },
    ReasonSubmitted {
        request_id: RequestId,
        reason: String,
        cause: Vec<ContextAttribute>,
        backend: String,
        latency_ms: u64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
    },
    RuleInserted {
        rule: ContextualRule,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<RequestId>,
    },
    RuleDeleted { rule_id: String },
    Rejection { service: ServiceId },
    RequestClosed { request_id: RequestId, state: RequestState },
    AttributesSelected { request_id: RequestId, attributes: Vec<ContextAttribute> },
}

impl JournalEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            JournalEvent::ContextUpdate { .. } => "context-update",
            JournalEvent::UiEvent { .. } => "ui-event",
            JournalEvent::RecognizerFlush => "recognizer-flush",
            JournalEvent::Recognition { .. } => "recognition",
            JournalEvent::RecommendationShown { .. } => "recommendation-shown",
            JournalEvent::Usage { .. } => "usage",
            JournalEvent::RequestOpened { .. } => "request-opened",
            JournalEvent::ReasonSubmitted { .. } => "reason-submitted",
            JournalEvent::RuleInserted { .. } => "rule-inserted",
            JournalEvent::RuleDeleted { .. } => "rule-deleted",
            JournalEvent::Rejection { .. } => "rejection",
            JournalEvent::RequestClosed { .. } => "request-closed",
            JournalEvent::AttributesSelected { .. } => "attributes-selected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub v: u32,
    pub seq: u64,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub event: JournalEvent,
}

impl JournalEntry {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("journal entry serializes")
    }
}

/// Parses journal lines. A final line without a trailing newline that fails
/// to parse is treated as a torn write and dropped.
pub fn parse_journal(text: &str) -> Result<Vec<JournalEntry>, EngineError> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(EngineError::Journal { seq: out.last().map_or(0, |e: &JournalEntry| e.seq + 1), message: format!("line {}: {e}", i + 1) })
            }
        }
    }
    Ok(out)
}

pub fn journal_to_jsonl(entries: &[JournalEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub list_size: usize,
    pub recency_capacity: usize,
    pub request_ttl_ms: i64,
    pub windows: WindowConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            list_size: DEFAULT_LIST_SIZE,
            recency_capacity: DEFAULT_RECENCY_CAPACITY,
            request_ttl_ms: DEFAULT_REQUEST_TTL_MS,
            windows: WindowConfig::default(),
        }
    }
}

/// Everything the journal rebuilds.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub raw_context: BTreeMap<String, RawValue>,
    pub snapshot: ContextSnapshot,
    pub rules: RuleStore,
    pub recency: RecencyLog,
    pub recognizer: Recognizer,
    pub requests: BTreeMap<RequestId, ReasonRequest>,
    /// Services rejected under the current context; cleared when it changes.
    pub suppressed: BTreeSet<ServiceId>,
    pub last_shown: Vec<ServiceId>,
    request_seq: u64,
    rule_seq: u64,
}

/// Work order for identifying a reason outside the mutation point.
#[derive(Debug, Clone)]
pub struct ReasonJob {
    pub request_id: RequestId,
    pub reason: String,
    pub bundle: PromptBundle,
    pub snapshot: ContextSnapshot,
}

impl ReasonJob {
    pub fn run(&self, identifier: &dyn Identifier) -> Result<IdentifiedCause, IdentifyError> {
        identifier.identify(&self.bundle, &self.snapshot)
    }
}

pub struct Engine {
    registry: Arc<Registry>,
    catalog: Arc<Catalog>,
    identifier: Arc<dyn Identifier>,
    config: EngineConfig,
    state: EngineState,
    journal: Vec<JournalEntry>,
}

impl Engine {
    pub fn new(
        registry: Arc<Registry>,
        catalog: Arc<Catalog>,
        identifier: Arc<dyn Identifier>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        if config.list_size == 0 {
            return Err(EngineError::InvalidListSize);
        }
        let state = EngineState {
            raw_context: BTreeMap::new(),
            snapshot: ContextSnapshot::default(),
            rules: RuleStore::new(registry.clone()),
            recency: RecencyLog::new(config.recency_capacity),
            recognizer: Recognizer::new(config.windows),
            requests: BTreeMap::new(),
            suppressed: BTreeSet::new(),
            last_shown: Vec::new(),
            request_seq: 0,
            rule_seq: 0,
        };
        Ok(Engine { registry, catalog, identifier, config, state, journal: Vec::new() })
    }

    /// Rebuilds an engine by applying `entries` to a fresh state.
    pub fn from_journal(
        registry: Arc<Registry>,
        catalog: Arc<Catalog>,
        identifier: Arc<dyn Identifier>,
        config: EngineConfig,
        entries: impl IntoIterator<Item = JournalEntry>,
    ) -> Result<Self, EngineError> {
        let mut engine = Engine::new(registry, catalog, identifier, config)?;
        for entry in entries {
            engine.apply(entry)?;
        }
        Ok(engine)
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn identifier(&self) -> Arc<dyn Identifier> {
        self.identifier.clone()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn snapshot(&self) -> &ContextSnapshot {
        &self.state.snapshot
    }

    pub fn rules(&self) -> &RuleStore {
        &self.state.rules
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.journal.last().map(|e| e.ts)
    }

    pub fn request(&self, id: &str) -> Option<&ReasonRequest> {
        self.state.requests.get(id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &ReasonRequest> {
        self.state.requests.values()
    }

    pub fn pending_requests(&self) -> Vec<&ReasonRequest> {
        self.state.requests.values().filter(|r| r.state == RequestState::Pending).collect()
    }

    /// Applies one entry. Sequence numbers must increase and timestamps must
    /// not go backwards.
    pub fn apply(&mut self, entry: JournalEntry) -> Result<(), EngineError> {
        let fail = |message: String| EngineError::Journal { seq: entry.seq, message };
        if let Some(last) = self.journal.last() {
            if entry.seq <= last.seq {
                return Err(fail(format!("sequence number not increasing after {}", last.seq)));
            }
            if entry.ts < last.ts {
                return Err(fail(format!("timestamp {} before {}", entry.ts, last.ts)));
            }
        }
        let st = &mut self.state;
        match &entry.event {
            JournalEvent::ContextUpdate { values } => {
                let mut raw = st.raw_context.clone();
                for (k, v) in values {
                    let (d, f) = self.registry.resolve_key(k).ok_or_else(|| fail(format!("unknown attribute {k}")))?;
                    raw.insert(format!("{}/{}", d.id, f.id), v.clone());
                }
                let snap = self.registry.snapshot(entry.ts, &raw)?;
                if !snapshot_diff(&st.snapshot, &snap).is_empty() {
                    st.suppressed.clear();
                }
                st.raw_context = raw;
                st.snapshot = snap;
            }
            JournalEvent::UiEvent { event } => {
                st.recognizer.ingest(event, &self.catalog)?;
            }
            JournalEvent::RecognizerFlush => {
                st.recognizer.flush(&self.catalog);
            }
            JournalEvent::Recognition { .. } => {}
            JournalEvent::RecommendationShown { services } => {
                st.last_shown = services.clone();
            }
            JournalEvent::Usage { service, .. } => {
                st.recency.record_usage(service.clone(), entry.ts);
            }
            JournalEvent::RequestOpened { request } => {
                if st.requests.contains_key(&request.request_id) {
                    return Err(fail(format!("request {} opened twice", request.request_id)));
                }
                st.request_seq += 1;
                st.requests.insert(request.request_id.clone(), request.clone());
            }
            JournalEvent::ReasonSubmitted { request_id, reason, cause, .. } => {
                let req = st.requests.get_mut(request_id).ok_or_else(|| fail(format!("unknown request {request_id}")))?;
                if req.state != RequestState::Pending {
                    return Err(fail(format!("request {request_id} is not pending")));
                }
                req.state = RequestState::Answered;
                req.reason = Some(reason.clone());
                req.identified = Some(cause.clone());
            }
            JournalEvent::RuleInserted { rule, request_id } => {
                st.rule_seq += 1;
                st.rules.insert(rule.clone())?;
                if let Some(req) = request_id.as_ref().and_then(|id| st.requests.get_mut(id)) {
                    req.rule_id = Some(rule.rule_id.clone());
                }
            }
            JournalEvent::RuleDeleted { rule_id } => {
                st.rules.delete(rule_id).ok_or_else(|| fail(format!("unknown rule {rule_id}")))?;
            }
            JournalEvent::Rejection { service } => {
                st.suppressed.insert(service.clone());
            }
            JournalEvent::RequestClosed { request_id, state } => {
                let req = st.requests.get_mut(request_id).ok_or_else(|| fail(format!("unknown request {request_id}")))?;
                if req.state != RequestState::Pending && req.state != RequestState::Answered {
                    return Err(fail(format!("request {request_id} already closed")));
                }
                req.state = *state;
            }
            JournalEvent::AttributesSelected { .. } => {}
        }
        self.journal.push(entry);
        Ok(())
    }

    fn clock(&self, now: Timestamp) -> Timestamp {
        self.last_timestamp().map_or(now, |last| now.max(last))
    }

    fn record(&mut self, ts: Timestamp, event: JournalEvent) -> Result<(), EngineError> {
        let seq = self.journal.last().map_or(1, |e| e.seq + 1);
        let ts = self.clock(ts);
        self.apply(JournalEntry { v: WIRE_VERSION, seq, ts, event })
    }

    /// Expires pending requests older than the configured lifetime.
    pub fn expire(&mut self, now: Timestamp) -> Result<Vec<RequestId>, EngineError> {
        let now = self.clock(now);
        let ttl = self.config.request_ttl_ms;
        let stale: Vec<RequestId> = self
            .state
            .requests
            .values()
            .filter(|r| r.state == RequestState::Pending && now - r.created_at >= ttl)
            .map(|r| r.request_id.clone())
            .collect();
        for id in &stale {
            self.record(now, JournalEvent::RequestClosed { request_id: id.clone(), state: RequestState::Expired })?;
        }
        Ok(stale)
    }

    pub fn recommendations(&self, k: Option<usize>) -> Result<Vec<Recommendation>, EngineError> {
        let k = k.unwrap_or(self.config.list_size);
        if k == 0 {
            return Err(EngineError::InvalidListSize);
        }
        let st = &self.state;
        Ok(recommend_excluding(
            &st.snapshot,
            st.rules.tree(Polarity::Positive),
            st.rules.tree(Polarity::Negative),
            &st.recency,
            &st.suppressed,
            k,
        ))
    }

    /// Merges raw values into the live context. Recognition candidates formed
    /// under the old context are settled first.
    pub fn update_context(
        &mut self,
        values: BTreeMap<String, RawValue>,
        now: Timestamp,
    ) -> Result<(ContextSnapshot, Vec<ReasonRequest>), EngineError> {
        let now = self.clock(now);
        let mut raw = self.state.raw_context.clone();
        for (k, v) in &values {
            let (d, f) = self.registry.resolve_key(k).ok_or_else(|| {
                let (d, f) = k.split_once(['/', '.']).unwrap_or((k.as_str(), ""));
                ContextError::UnknownAttribute { dimension: d.to_string(), feature: f.to_string() }
            })?;
            raw.insert(format!("{}/{}", d.id, f.id), v.clone());
        }
        self.registry.snapshot(now, &raw)?;
        let opened = self.flush_recognizer(now)?;
        self.expire(now)?;
        self.record(now, JournalEvent::ContextUpdate { values })?;
        Ok((self.state.snapshot.clone(), opened))
    }

    /// Emits any pending recognition candidates as usages.
    pub fn flush_recognizer(&mut self, now: Timestamp) -> Result<Vec<ReasonRequest>, EngineError> {
        if !self.state.recognizer.has_candidates() {
            return Ok(Vec::new());
        }
        let recs = self.state.recognizer.clone().flush(&self.catalog);
        self.record(now, JournalEvent::RecognizerFlush)?;
        self.handle_recognitions(recs, now)
    }

    pub fn ingest_event(&mut self, event: UiEvent) -> Result<Vec<ReasonRequest>, EngineError> {
        let ts = self.clock(event.timestamp);
        let event = UiEvent { timestamp: ts, ..event };
        if let UiPayload::AppOpen { app_id, .. } = &event.payload {
            if app_id.trim().is_empty() {
                return Err(RecognitionError::EmptyPayload.into());
            }
        }
        let recs = self.state.recognizer.clone().ingest(&event, &self.catalog)?;
        self.expire(ts)?;
        self.record(ts, JournalEvent::UiEvent { event })?;
        self.handle_recognitions(recs, ts)
    }

    /// Direct usage report, bypassing the recognizer windows.
    pub fn inject_usage(&mut self, service: ServiceId, now: Timestamp) -> Result<ReasonRequest, EngineError> {
        if self.catalog.label(&service).is_none() {
            return Err(EngineError::UnknownService(service));
        }
        let now = self.clock(now);
        self.expire(now)?;
        let rec = Recognition { service, timestamp: now, matched_distance: 0.0, trigger: Trigger::Injected };
        self.on_recognition(rec)
    }

    fn handle_recognitions(&mut self, recs: Vec<Recognition>, now: Timestamp) -> Result<Vec<ReasonRequest>, EngineError> {
        let mut out = Vec::new();
        for mut rec in recs {
            rec.timestamp = rec.timestamp.min(now);
            let req = self.on_recognition(rec)?;
            if !out.iter().any(|r: &ReasonRequest| r.request_id == req.request_id) {
                out.push(req);
            }
        }
        Ok(out)
    }

    /// Records the usage (with coverage against the list on display) and opens
    /// a reason request carrying the predicted reasons for this context.
    pub fn on_recognition(&mut self, rec: Recognition) -> Result<ReasonRequest, EngineError> {
        let now = self.clock(rec.timestamp);
        let created_at = rec.timestamp;
        if let Some(existing) = self
            .state
            .requests
            .values()
            .find(|r| r.service == rec.service && r.created_at == created_at && r.polarity == Polarity::Positive)
        {
            return Ok(existing.clone());
        }
        let shown: Vec<ServiceId> = self.recommendations(None)?.into_iter().map(|r| r.service).collect();
        let covered = shown.contains(&rec.service);
        let service = rec.service.clone();
        let trigger = rec.trigger;
        self.record(now, JournalEvent::Recognition { recognition: rec })?;
        self.record(now, JournalEvent::RecommendationShown { services: shown })?;
        self.record(now, JournalEvent::Usage { service: service.clone(), covered, trigger })?;
        let request = ReasonRequest {
            request_id: format!("q{:06}", self.state.request_seq + 1),
            service_semantic: self.catalog.semantic(&service),
            service,
            polarity: Polarity::Positive,
            snapshot: self.state.snapshot.clone(),
            created_at,
            predicted_reasons: self.predicted_reasons(),
            state: RequestState::Pending,
            reason: None,
            identified: None,
            rule_id: None,
        };
        self.record(now, JournalEvent::RequestOpened { request: request.clone() })?;
        Ok(request)
    }

    /// Distinct (reason, cause) pairs of positive rules matching the live
    /// snapshot, deepest first.
    fn predicted_reasons(&self) -> Vec<PredictedReason> {
        let mut matches = self.state.rules.tree(Polarity::Positive).query(&self.state.snapshot);
        matches.sort_by(|a, b| b.depth.cmp(&a.depth).then_with(|| a.rule_id.cmp(&b.rule_id)));
        let mut out: Vec<PredictedReason> = Vec::new();
        for m in matches {
            let Some(rule) = self.state.rules.get(&m.rule_id) else { continue };
            let dup = out.iter().any(|p| p.reason == rule.reason && p.cause == rule.cause);
            if !dup {
                out.push(PredictedReason { reason: rule.reason.clone(), cause: rule.cause.clone() });
            }
        }
        out
    }

    fn pending(&self, request_id: &str) -> Result<&ReasonRequest, EngineError> {
        let req = self.state.requests.get(request_id).ok_or_else(|| EngineError::RequestNotFound(request_id.into()))?;
        if req.state != RequestState::Pending {
            return Err(EngineError::RequestNotPending(request_id.into()));
        }
        Ok(req)
    }

    /// First half of a reason submission: validates and builds the prompt.
    pub fn prepare_reason(&mut self, request_id: &str, reason: &str, now: Timestamp) -> Result<ReasonJob, EngineError> {
        self.expire(now)?;
        let req = self.pending(request_id)?;
        let bundle = build_prompt(reason, &req.service_semantic, &req.snapshot, &self.registry)?;
        Ok(ReasonJob {
            request_id: request_id.to_string(),
            reason: reason.trim().to_string(),
            bundle,
            snapshot: req.snapshot.clone(),
        })
    }

    /// Second half: applies an identification result. Identification errors
    /// leave the request pending.
    pub fn complete_reason(
        &mut self,
        job: ReasonJob,
        result: Result<IdentifiedCause, IdentifyError>,
        now: Timestamp,
    ) -> Result<ContextualRule, EngineError> {
        let cause = result?;
        let now = self.clock(now);
        let req = self.pending(&job.request_id)?.clone();
        self.record(
            now,
            JournalEvent::ReasonSubmitted {
                request_id: job.request_id.clone(),
                reason: job.reason.clone(),
                cause: cause.attributes.clone(),
                backend: cause.backend.clone(),
                latency_ms: cause.latency_ms,
                warnings: cause.warnings.clone(),
            },
        )?;
        let origin = match req.polarity {
            Polarity::Positive => RuleOrigin::UserReason,
            Polarity::Negative => RuleOrigin::Feedback,
        };
        self.insert_rule(&req.request_id, cause.attributes, req.service, req.polarity, job.reason, origin, now)
    }

    /// Identifies inline with the configured identifier.
    pub fn submit_reason(&mut self, request_id: &str, reason: &str, now: Timestamp) -> Result<ContextualRule, EngineError> {
        let job = self.prepare_reason(request_id, reason, now)?;
        let result = job.run(self.identifier.as_ref());
        self.complete_reason(job, result, now)
    }

    pub fn confirm_predicted(&mut self, request_id: &str, index: usize, now: Timestamp) -> Result<ContextualRule, EngineError> {
        self.expire(now)?;
        let req = self.pending(request_id)?.clone();
        let predicted = req
            .predicted_reasons
            .get(index)
            .ok_or(EngineError::Index { index, len: req.predicted_reasons.len() })?
            .clone();
        let now = self.clock(now);
        self.record(now, JournalEvent::RequestClosed { request_id: req.request_id.clone(), state: RequestState::Confirmed })?;
        self.insert_rule(
            &req.request_id,
            predicted.cause,
            req.service,
            req.polarity,
            predicted.reason,
            RuleOrigin::PredictedReasonConfirm,
            now,
        )
    }

    /// Inserts a rule unless the same cause and service already exist, in
    /// which case the stored rule is returned.
    #[allow(clippy::too_many_arguments)]
    fn insert_rule(
        &mut self,
        request_id: &str,
        cause: Vec<ContextAttribute>,
        service: ServiceId,
        polarity: Polarity,
        reason: String,
        origin: RuleOrigin,
        now: Timestamp,
    ) -> Result<ContextualRule, EngineError> {
        let canonical: Vec<ContextAttribute> = self
            .state
            .rules
            .tree(polarity)
            .canonical_cause(&cause)?
            .into_iter()
            .map(|(_, a)| a)
            .collect();
        if let Some(existing) = self
            .state
            .rules
            .rules()
            .find(|r| r.polarity == polarity && r.service == service && r.cause == canonical)
        {
            return Ok(existing.clone());
        }
        let rule = ContextualRule {
            rule_id: format!("r{:06}", self.state.rule_seq + 1),
            cause: canonical,
            service,
            polarity,
            reason,
            created_at: now,
            origin,
        };
        self.record(now, JournalEvent::RuleInserted { rule: rule.clone(), request_id: Some(request_id.to_string()) })?;
        Ok(rule)
    }

    pub fn dismiss(&mut self, request_id: &str, now: Timestamp) -> Result<ReasonRequest, EngineError> {
        self.expire(now)?;
        self.pending(request_id)?;
        self.record(now, JournalEvent::RequestClosed { request_id: request_id.to_string(), state: RequestState::Dismissed })?;
        Ok(self.state.requests[request_id].clone())
    }

    /// Removes a displayed service for the current context and opens a
    /// negative reason request.
    pub fn reject(&mut self, service: &ServiceId, now: Timestamp) -> Result<ReasonRequest, EngineError> {
        let now = self.clock(now);
        self.expire(now)?;
        if !self.recommendations(None)?.iter().any(|r| &r.service == service) {
            return Err(EngineError::NotRecommended(service.clone()));
        }
        self.record(now, JournalEvent::Rejection { service: service.clone() })?;
        let request = ReasonRequest {
            request_id: format!("q{:06}", self.state.request_seq + 1),
            service: service.clone(),
            service_semantic: self.catalog.semantic(service),
            polarity: Polarity::Negative,
            snapshot: self.state.snapshot.clone(),
            created_at: now,
            predicted_reasons: Vec::new(),
            state: RequestState::Pending,
            reason: None,
            identified: None,
            rule_id: None,
        };
        self.record(now, JournalEvent::RequestOpened { request: request.clone() })?;
        Ok(request)
    }

    /// Logs the user's own choice of attributes for an answered request and
    /// returns the overlap accuracy against the identified cause.
    pub fn select_attributes(
        &mut self,
        request_id: &str,
        keys: &[String],
        now: Timestamp,
    ) -> Result<(f64, bool), EngineError> {
        let req = self.state.requests.get(request_id).ok_or_else(|| EngineError::RequestNotFound(request_id.into()))?;
        let identified = req.identified.clone().ok_or_else(|| EngineError::RequestNotAnswered(request_id.into()))?;
        let mut chosen: Vec<ContextAttribute> = Vec::new();
        for key in keys {
            let (d, f) = self.registry.resolve_key(key).ok_or_else(|| {
                let (d, f) = key.split_once(['/', '.']).unwrap_or((key.as_str(), ""));
                ContextError::UnknownAttribute { dimension: d.to_string(), feature: f.to_string() }
            })?;
            let attr = req.snapshot.get(&d.id, &f.id).ok_or_else(|| ContextError::UnknownAttribute {
                dimension: d.id.clone(),
                feature: f.id.clone(),
            })?;
            if !chosen.contains(attr) {
                chosen.push(attr.clone());
            }
        }
        let result = overlap_accuracy(&chosen, &identified)?;
        self.registry.sort_canonical(&mut chosen)?;
        self.record(now, JournalEvent::AttributesSelected { request_id: request_id.to_string(), attributes: chosen })?;
        Ok(result)
    }

    pub fn delete_rule(&mut self, rule_id: &str, now: Timestamp) -> Result<ContextualRule, EngineError> {
        let rule = self.state.rules.get(rule_id).cloned().ok_or_else(|| RuleError::NotFound(rule_id.into()))?;
        self.record(now, JournalEvent::RuleDeleted { rule_id: rule_id.to_string() })?;
        Ok(rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::{Lexicon, MockIdentifier};

    fn engine() -> Engine {
        let reg = Arc::new(Registry::default_registry());
        let cat = Arc::new(Catalog::default_catalog());
        let id = Arc::new(MockIdentifier::new(Lexicon::default_lexicon(), reg.clone()));
        Engine::new(reg, cat, id, EngineConfig::default()).unwrap()
    }

    fn ctx(pairs: &[(&str, RawValue)]) -> BTreeMap<String, RawValue> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn night_home() -> BTreeMap<String, RawValue> {
        ctx(&[
            ("Time/o_clock", 0.2.into()),
            ("Location/location_tag", "home".into()),
            ("Activities/activity", "stilling".into()),
            ("Weather/temperature", 12.0.into()),
        ])
    }

    #[test]
    fn very_hot_reason_yields_temperature_rule() {
        let mut e = engine();
        e.update_context(ctx(&[("Weather/temperature", 31.0.into()), ("Time/day_of_week", "Monday".into())]), 0)
            .unwrap();
        let req = e.inject_usage(ServiceId::open("com.demo.weather"), 1_000).unwrap();
        let rule = e.submit_reason(&req.request_id, "very hot", 2_000).unwrap();
        let triples: Vec<_> = rule.cause.iter().map(ContextAttribute::triple).collect();
        assert_eq!(triples, [("Weather".into(), "temperature".into(), "hot".into())]);
        assert_eq!(e.request(&req.request_id).unwrap().state, RequestState::Answered);
        assert!(matches!(
            e.submit_reason(&req.request_id, "very hot", 3_000),
            Err(EngineError::RequestNotPending(_))
        ));
    }

    #[test]
    fn identification_failure_keeps_request_pending() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let req = e.inject_usage(ServiceId::open("com.demo.news"), 10).unwrap();
        let err = e.submit_reason(&req.request_id, "xyzzy", 20).unwrap_err();
        assert_eq!(err.code(), "NO_ATTRIBUTES_IDENTIFIED");
        assert_eq!(e.request(&req.request_id).unwrap().state, RequestState::Pending);
        assert!(e.rules().is_empty());
    }

    #[test]
    fn predicted_reason_confirm_reuses_cause() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let alarm = ServiceId::new("com.demo.clock", "set_alarm");
        let req = e.inject_usage(alarm.clone(), 10).unwrap();
        assert!(req.predicted_reasons.is_empty());
        let first = e.submit_reason(&req.request_id, "before sleep at home", 20).unwrap();
        assert_eq!(first.cause.len(), 2);

        let music = ServiceId::new("com.demo.music", "play_playlist");
        let req = e.inject_usage(music.clone(), 30).unwrap();
        assert_eq!(req.predicted_reasons.len(), 1);
        assert_eq!(req.predicted_reasons[0].reason, "before sleep at home");
        let rule = e.confirm_predicted(&req.request_id, 0, 40).unwrap();
        assert_eq!(rule.cause, first.cause);
        assert_eq!(rule.service, music);
        assert_eq!(rule.origin, RuleOrigin::PredictedReasonConfirm);
        assert!(matches!(e.confirm_predicted(&req.request_id, 0, 50), Err(EngineError::RequestNotPending(_))));
        let recs = e.recommendations(None).unwrap();
        assert!(recs.iter().any(|r| r.service == music && r.score.occurrences >= 1));
    }

    #[test]
    fn confirm_with_bad_index() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let req = e.inject_usage(ServiceId::open("com.demo.news"), 10).unwrap();
        assert_eq!(e.confirm_predicted(&req.request_id, 0, 20).unwrap_err().code(), "INDEX_ERROR");
    }

    #[test]
    fn coverage_uses_list_at_usage_time() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let news = ServiceId::open("com.demo.news");
        e.inject_usage(news.clone(), 10).unwrap();
        e.inject_usage(news.clone(), 20).unwrap();
        let covered: Vec<bool> = e
            .journal()
            .iter()
            .filter_map(|j| match &j.event {
                JournalEvent::Usage { covered, .. } => Some(*covered),
                _ => None,
            })
            .collect();
        assert_eq!(covered, [false, true]);
    }

    #[test]
    fn reject_suppresses_until_context_changes() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let news = ServiceId::open("com.demo.news");
        e.inject_usage(news.clone(), 10).unwrap();
        let req = e.reject(&news, 20).unwrap();
        assert_eq!(req.polarity, Polarity::Negative);
        assert!(!e.recommendations(None).unwrap().iter().any(|r| r.service == news));
        assert_eq!(e.reject(&news, 21).unwrap_err().code(), "NOT_RECOMMENDED");
        e.dismiss(&req.request_id, 30).unwrap();
        assert!(e.rules().is_empty());
        e.update_context(ctx(&[("Location/location_tag", "office".into())]), 40).unwrap();
        assert!(e.recommendations(None).unwrap().iter().any(|r| r.service == news));
    }

    #[test]
    fn negative_reason_blocks_service() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let news = ServiceId::open("com.demo.news");
        e.inject_usage(news.clone(), 10).unwrap();
        let req = e.reject(&news, 20).unwrap();
        let rule = e.submit_reason(&req.request_id, "not at night", 30).unwrap();
        assert_eq!(rule.polarity, Polarity::Negative);
        assert!(rule.cause.iter().all(|a| req.snapshot.satisfies(a)));
        e.update_context(ctx(&[("Weather/temperature", 13.0.into())]), 40).unwrap();
        assert!(!e.recommendations(None).unwrap().iter().any(|r| r.service == news));
    }

    #[test]
    fn requests_expire() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let req = e.inject_usage(ServiceId::open("com.demo.news"), 10).unwrap();
        let err = e.submit_reason(&req.request_id, "at home", 10 + DEFAULT_REQUEST_TTL_MS).unwrap_err();
        assert_eq!(err.code(), "REQUEST_NOT_PENDING");
        assert_eq!(e.request(&req.request_id).unwrap().state, RequestState::Expired);
    }

    #[test]
    fn duplicate_recognition_collapses() {
        let mut e = engine();
        let svc = ServiceId::open("com.demo.news");
        let rec = Recognition { service: svc, timestamp: 5, matched_distance: 0.0, trigger: Trigger::AppOpen };
        let a = e.on_recognition(rec.clone()).unwrap();
        let b = e.on_recognition(rec).unwrap();
        assert_eq!(a.request_id, b.request_id);
        assert_eq!(e.requests().count(), 1);
    }

    #[test]
    fn ui_events_open_requests() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let opened = e.ingest_event(UiEvent::app_open(10, "com.demo.clock")).unwrap();
        assert_eq!(opened.len(), 1);
        assert_eq!(opened[0].service, ServiceId::open("com.demo.clock"));
    }

    #[test]
    fn journal_replays_to_same_state() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        let req = e.inject_usage(ServiceId::new("com.demo.clock", "set_alarm"), 10).unwrap();
        e.submit_reason(&req.request_id, "before sleep", 20).unwrap();
        e.select_attributes(&req.request_id, &["Time/time_period".into(), "Location/location_tag".into()], 25)
            .unwrap();
        let r = e.inject_usage(ServiceId::open("com.demo.news"), 30).unwrap();
        e.dismiss(&r.request_id, 40).unwrap();
        let text = journal_to_jsonl(e.journal());
        let entries = parse_journal(&text).unwrap();
        let f = Engine::from_journal(
            e.registry.clone(),
            e.catalog.clone(),
            e.identifier(),
            EngineConfig::default(),
            entries,
        )
        .unwrap();
        assert_eq!(f.rules().export_jsonl(), e.rules().export_jsonl());
        assert_eq!(journal_to_jsonl(f.journal()), text);
        assert_eq!(f.state().requests, e.state().requests);
        assert_eq!(f.snapshot(), e.snapshot());
    }

    #[test]
    fn torn_last_line_is_dropped() {
        let mut e = engine();
        e.update_context(night_home(), 0).unwrap();
        e.inject_usage(ServiceId::open("com.demo.news"), 10).unwrap();
        let text = journal_to_jsonl(e.journal());
        let torn = &text[..text.len() - 7];
        let entries = parse_journal(torn).unwrap();
        assert_eq!(entries.len(), e.journal().len() - 1);
        assert!(parse_journal(&format!("{{bad\n{text}")).is_err());
    }

    #[test]
    fn journal_rejects_out_of_order_entries() {
        let mut e = engine();
        e.update_context(night_home(), 100).unwrap();
        let mut entries = e.journal().to_vec();
        entries.push(JournalEntry { v: 1, seq: 1, ts: 200, event: JournalEvent::RecognizerFlush });
        let f = Engine::from_journal(e.registry.clone(), e.catalog.clone(), e.identifier(), EngineConfig::default(), entries);
        assert_eq!(f.err().map(|e| e.code()), Some("JOURNAL_ERROR"));
    }
}
