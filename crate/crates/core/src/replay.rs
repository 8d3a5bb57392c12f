//! Trace files, deterministic replay through a fresh engine, and a seeded
//! generator of synthetic habit traces.
//!
//! A trace is JSON lines, one event per line, each carrying `"v":1`, a
//! millisecond `ts` and a `kind`:
//!
//! ```text
//! {"v":1,"ts":0,"kind":"context","values":{"Weather/temperature":31}}
//! {"v":1,"ts":5,"kind":"ui-event","event":{"kind":"app-open","app_id":"com.demo.weather"}}
//! {"v":1,"ts":9,"kind":"reason","service":"com.demo.weather:open","text":"very hot"}
//! ```
//!
//! `reason`, `confirm-predicted` and `select-attributes` address the most
//! recent matching request for their service.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ServiceId};
use crate::context::{RawValue, Registry, Timestamp};
use crate::engine::{Engine, EngineConfig, EngineError, JournalEntry, ReasonRequest, RequestState};
use crate::identify::Identifier;
use crate::metrics::{self, MetricsReport, DAY_MS};
use crate::recognition::{UiEvent, UiPayload};

/// The shipped habit profile and the trace generated from it.
pub const DEFAULT_PROFILE_JSON: &str = include_str!("../data/habits.json");
pub const DEFAULT_TRACE_JSONL: &str = include_str!("../data/habit_trace.jsonl");
pub const DEFAULT_TRACE_SEED: u64 = 7;
pub const DEFAULT_TRACE_DAYS: usize = 10;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace line {line}: timestamp {ts} is earlier than {previous}")]
    Order { line: usize, ts: Timestamp, previous: Timestamp },
    #[error("trace line {line}: {source}")]
    Engine { line: usize, source: EngineError },
}

impl ReplayError {
    pub fn code(&self) -> &'static str {
        match self {
            ReplayError::Parse { .. } => "PARSE_ERROR",
            ReplayError::Order { .. } => "ORDER_ERROR",
            ReplayError::Engine { source, .. } => source.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceAction {
    Context { values: BTreeMap<String, RawValue> },
    UiEvent { event: UiPayload },
    Usage { service: ServiceId },
    Reason { service: ServiceId, text: String },
    SelectAttributes { service: ServiceId, attributes: Vec<String> },
    ConfirmPredicted { service: ServiceId, index: usize },
    Reject { service: ServiceId },
    DeleteRule { rule_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub v: u32,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub action: TraceAction,
}

impl TraceEvent {
    pub fn new(ts: Timestamp, action: TraceAction) -> Self {
        TraceEvent { v: 1, ts, action }
    }
}

/// Parses a trace, checking versions and chronological order.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, ReplayError> {
    let mut out: Vec<TraceEvent> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent =
            serde_json::from_str(line).map_err(|e| ReplayError::Parse { line: line_no, message: e.to_string() })?;
        if ev.v != 1 {
            return Err(ReplayError::Parse { line: line_no, message: format!("unsupported version {}", ev.v) });
        }
        if let Some(prev) = out.last() {
            if ev.ts < prev.ts {
                return Err(ReplayError::Order { line: line_no, ts: ev.ts, previous: prev.ts });
            }
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn trace_to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ReplayConfig {
    pub engine: EngineConfig,
    /// Offset of local time from UTC used for day boundaries.
    pub tz_offset_ms: i64,
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub report: MetricsReport,
    pub journal: Vec<JournalEntry>,
    pub rules_jsonl: String,
    /// (trace line, error code) for actions the engine refused.
    pub skipped: Vec<(usize, String)>,
}

fn latest<'a>(engine: &'a Engine, service: &ServiceId, state: RequestState) -> Option<&'a ReasonRequest> {
    engine
        .requests()
        .filter(|r| &r.service == service && r.state == state)
        .max_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.request_id.cmp(&b.request_id)))
}

/// Drives a fresh engine through the trace. Actions the engine rejects are
/// counted as skipped; a malformed or unordered trace fails.
pub fn replay(
    trace: &str,
    registry: Arc<Registry>,
    catalog: Arc<Catalog>,
    identifier: Arc<dyn Identifier>,
    config: &ReplayConfig,
) -> Result<ReplayOutcome, ReplayError> {
    let events = parse_trace(trace)?;
    let mut engine = Engine::new(registry, catalog, identifier, config.engine.clone())
        .map_err(|source| ReplayError::Engine { line: 0, source })?;
    let mut skipped = Vec::new();
    let mut line = 0;
    for (i, ev) in events.iter().enumerate() {
        line = i + 1;
        let ts = ev.ts;
        let result: Result<(), EngineError> = match &ev.action {
            TraceAction::Context { values } => engine.update_context(values.clone(), ts).map(drop),
            TraceAction::UiEvent { event } => {
                engine.ingest_event(UiEvent { timestamp: ts, payload: event.clone() }).map(drop)
            }
            TraceAction::Usage { service } => engine.inject_usage(service.clone(), ts).map(drop),
            TraceAction::Reason { service, text } => match latest(&engine, service, RequestState::Pending) {
                Some(req) => {
                    let id = req.request_id.clone();
                    engine.submit_reason(&id, text, ts).map(drop)
                }
                None => Err(EngineError::RequestNotFound(format!("pending request for {service}"))),
            },
            TraceAction::ConfirmPredicted { service, index } => {
                match latest(&engine, service, RequestState::Pending) {
                    Some(req) => {
                        let id = req.request_id.clone();
                        engine.confirm_predicted(&id, *index, ts).map(drop)
                    }
                    None => Err(EngineError::RequestNotFound(format!("pending request for {service}"))),
                }
            }
            TraceAction::SelectAttributes { service, attributes } => {
                match latest(&engine, service, RequestState::Answered) {
                    Some(req) => {
                        let id = req.request_id.clone();
                        engine.select_attributes(&id, attributes, ts).map(drop)
                    }
                    None => Err(EngineError::RequestNotFound(format!("answered request for {service}"))),
                }
            }
            TraceAction::Reject { service } => engine.reject(service, ts).map(drop),
            TraceAction::DeleteRule { rule_id } => engine.delete_rule(rule_id, ts).map(drop),
        };
        match result {
            Ok(()) => {}
            Err(e @ EngineError::Journal { .. }) => return Err(ReplayError::Engine { line, source: e }),
            Err(e) => skipped.push((line, e.code().to_string())),
        }
    }
    if let Some(last) = events.last() {
        engine.flush_recognizer(last.ts).map_err(|source| ReplayError::Engine { line, source })?;
    }
    let mut report = metrics::compute(engine.journal(), events.first().map(|e| e.ts), config.tz_offset_ms, 0);
    report.skipped_actions = skipped.len();
    Ok(ReplayOutcome {
        report,
        journal: engine.journal().to_vec(),
        rules_jsonl: engine.rules().export_jsonl(),
        skipped,
    })
}

// Synthetic traces.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Via {
    /// Page and action events along the service's labeled sequence.
    Ui,
    /// An app-open event.
    AppOpen,
    /// A direct usage report.
    Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Habit {
    pub name: String,
    pub service: ServiceId,
    /// Local hour of day, fractional.
    pub hour: f64,
    /// Weekdays the habit happens on; every day when empty.
    #[serde(default)]
    pub days: Vec<String>,
    #[serde(default)]
    pub context: BTreeMap<String, RawValue>,
    pub via: Via,
    /// Reason templates; `{day}` is replaced by the weekday name.
    pub reasons: Vec<String>,
    /// Attributes the user would tick when validating the identified cause.
    #[serde(default)]
    pub intended: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub per_day: usize,
    pub services: Vec<ServiceId>,
    pub contexts: Vec<BTreeMap<String, RawValue>>,
    pub reasons: Vec<String>,
    /// Earliest and latest local hour for noise usages.
    pub hours: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HabitProfile {
    pub v: u32,
    /// Local midnight of day 1, epoch milliseconds.
    pub start_ms: Timestamp,
    #[serde(default)]
    pub tz_offset_minutes: i64,
    /// Probability the user answers a reason request.
    pub compliance: f64,
    /// Probability an answered request is also validated.
    #[serde(default)]
    pub selection_rate: f64,
    pub jitter_minutes: f64,
    /// Daily temperature drawn uniformly from this range.
    pub temperature: (f64, f64),
    pub weather: Vec<String>,
    pub background: BTreeMap<String, RawValue>,
    pub habits: Vec<Habit>,
    pub noise: NoiseSpec,
}

impl HabitProfile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn default_profile() -> Self {
        HabitProfile::from_json(DEFAULT_PROFILE_JSON).expect("shipped profile is valid")
    }
}

const WEEKDAYS: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

fn weekday(local_ms: Timestamp) -> &'static str {
    // 1970-01-01 was a Thursday.
    WEEKDAYS[((local_ms.div_euclid(DAY_MS) + 3).rem_euclid(7)) as usize]
}

struct Block {
    start: Timestamp,
    events: Vec<TraceEvent>,
}

/// Generates a deterministic trace of `days` days.
pub fn gen_trace(profile: &HabitProfile, catalog: &Catalog, days: usize, seed: u64) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tz = profile.tz_offset_minutes * 60_000;
    let mut out = Vec::new();
    for day in 0..days {
        let midnight_local = profile.start_ms + tz + day as i64 * DAY_MS;
        let dow = weekday(midnight_local);
        let temperature = (rng.random_range(profile.temperature.0..=profile.temperature.1) * 2.0).round() / 2.0;
        let weather = profile.weather.choose(&mut rng).cloned().unwrap_or_else(|| "clear".into());
        let base = |hour: f64, extra: &BTreeMap<String, RawValue>| {
            let mut v = profile.background.clone();
            v.insert("Time/day_of_week".into(), dow.into());
            v.insert("Time/o_clock".into(), RawValue::Number((hour * 100.0).round() / 100.0));
            v.insert("Weather/temperature".into(), RawValue::Number(temperature));
            v.insert("Weather/weather_type".into(), RawValue::Text(weather.clone()));
            v.extend(extra.clone());
            v
        };
        let at = |hour: f64| profile.start_ms + day as i64 * DAY_MS + (hour * 3_600_000.0).round() as i64;

        let mut blocks: Vec<Block> = Vec::new();
        let mut habit_hours = Vec::new();
        for habit in &profile.habits {
            if !habit.days.is_empty() && !habit.days.iter().any(|d| d.eq_ignore_ascii_case(dow)) {
                continue;
            }
            let jitter = rng.random_range(-profile.jitter_minutes..=profile.jitter_minutes) / 60.0;
            let hour = (habit.hour + jitter).clamp(0.0, 23.99);
            habit_hours.push(hour);
            let reason = habit.reasons.choose(&mut rng).map(|r| r.replace("{day}", dow));
            let answers = rng.random_bool(profile.compliance.clamp(0.0, 1.0));
            let selects = rng.random_bool(profile.selection_rate.clamp(0.0, 1.0));
            let delay = rng.random_range(8_000..45_000);
            let select_delay = rng.random_range(4_000..20_000);
            let t0 = at(hour);
            let mut events = vec![TraceEvent::new(t0 - 60_000, TraceAction::Context { values: base(hour, &habit.context) })];
            let mut t = t0;
            events.extend(usage_events(&habit.service, &habit.via, catalog, &mut t, &mut rng));
            if let (true, Some(text)) = (answers, reason) {
                t += delay;
                events.push(TraceEvent::new(t, TraceAction::Reason { service: habit.service.clone(), text }));
                if selects && !habit.intended.is_empty() {
                    t += select_delay;
                    events.push(TraceEvent::new(
                        t,
                        TraceAction::SelectAttributes { service: habit.service.clone(), attributes: habit.intended.clone() },
                    ));
                }
            }
            blocks.push(Block { start: t0 - 60_000, events });
        }

        let noise = &profile.noise;
        let mut placed = 0;
        let mut attempts = 0;
        while placed < noise.per_day && attempts < 100 && !noise.services.is_empty() {
            attempts += 1;
            let hour = rng.random_range(noise.hours.0..noise.hours.1);
            if habit_hours.iter().any(|h| (h - hour).abs() < 0.75) {
                continue;
            }
            habit_hours.push(hour);
            placed += 1;
            let service = noise.services.choose(&mut rng).cloned().expect("non-empty");
            let ctx = noise.contexts.choose(&mut rng).cloned().unwrap_or_default();
            let answers = rng.random_bool(profile.compliance.clamp(0.0, 1.0));
            let reason = noise.reasons.choose(&mut rng).cloned();
            let t0 = at(hour);
            let mut events = vec![TraceEvent::new(t0 - 60_000, TraceAction::Context { values: base(hour, &ctx) })];
            let mut t = t0;
            events.extend(usage_events(&service, &Via::AppOpen, catalog, &mut t, &mut rng));
            if let (true, Some(text)) = (answers, reason) {
                t += rng.random_range(8_000..45_000);
                events.push(TraceEvent::new(t, TraceAction::Reason { service, text }));
            }
            blocks.push(Block { start: t0 - 60_000, events });
        }

        blocks.sort_by_key(|b| b.start);
        for b in blocks {
            out.extend(b.events);
        }
    }
    out
}

fn usage_events(service: &ServiceId, via: &Via, catalog: &Catalog, t: &mut Timestamp, rng: &mut ChaCha8Rng) -> Vec<TraceEvent> {
    let label = catalog.label(service).filter(|l| !l.sequences.is_empty());
    match (via, label) {
        (Via::Ui, Some(label)) => {
            let seq = &label.sequences[0];
            let mut out = Vec::new();
            let n = seq.page_sequence.len().max(seq.action_sequence.len());
            for i in 0..n {
                if let Some(page) = seq.page_sequence.get(i).and_then(|p| label.page(p)) {
                    *t += rng.random_range(1_500..6_000);
                    let keywords = page.keywords.iter().cloned().collect();
                    out.push(TraceEvent::new(*t, TraceAction::UiEvent { event: UiPayload::Page { keywords } }));
                }
                if let Some(action) = seq.action_sequence.get(i) {
                    *t += rng.random_range(1_500..6_000);
                    out.push(TraceEvent::new(
                        *t,
                        TraceAction::UiEvent { event: UiPayload::Action { keyword: action.clone() } },
                    ));
                }
            }
            out
        }
        (Via::AppOpen, _) if service.is_open_app() => vec![TraceEvent::new(
            *t,
            TraceAction::UiEvent { event: UiPayload::AppOpen { app_id: service.app_id.clone(), app_name: None } },
        )],
        _ => vec![TraceEvent::new(*t, TraceAction::Usage { service: service.clone() })],
    }
}
