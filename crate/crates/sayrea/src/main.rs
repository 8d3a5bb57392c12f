use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sayrea::api::{router, system_clock, AppState};
use sayrea::backend::{build_identifier, BackendKind};
use sayrea::store::DataDir;
use sayrea_core::catalog::Catalog;
use sayrea_core::context::Registry;
use sayrea_core::engine::{journal_to_jsonl, Engine, EngineConfig};
use sayrea_core::identify::{Identifier, Lexicon};
use sayrea_core::replay::{gen_trace, replay, trace_to_jsonl, HabitProfile, ReplayConfig};

#[derive(Parser)]
#[command(name = "sayrea", version, about = "Context-aware service recommender with user-stated reasons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Replay a trace through a fresh engine and write metrics.
    Replay(ReplayArgs),
    /// Generate a synthetic habit trace.
    GenTrace(GenTraceArgs),
}

#[derive(Args)]
struct Inputs {
    /// Service catalog JSON (built-in demo catalog when omitted).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Context registry JSON (built-in registry when omitted).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Lexicon for the mock identifier.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Recommendation list length.
    #[arg(long, default_value_t = EngineConfig::default().list_size)]
    list_size: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value = "./sayrea-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long, env = "SAYREA_TOKEN")]
    token: Option<String>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    trace: PathBuf,
    /// Output directory for metrics.json, days.csv, rules.jsonl and journal.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Local offset from UTC used for day boundaries.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    tz_offset_minutes: i64,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Habit profile JSON (built-in profile when omitted).
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value_t = sayrea_core::replay::DEFAULT_TRACE_DAYS)]
    days: usize,
    #[arg(long, default_value_t = sayrea_core::replay::DEFAULT_TRACE_SEED)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_catalog(path: Option<&Path>) -> anyhow::Result<Catalog> {
    match path {
        Some(p) => Ok(Catalog::from_json(&read(p)?)?),
        None => Ok(Catalog::default_catalog()),
    }
}

struct Loaded {
    registry: Arc<Registry>,
    catalog: Arc<Catalog>,
    identifier: Arc<dyn Identifier>,
    config: EngineConfig,
}

impl Inputs {
    fn load(&self) -> anyhow::Result<Loaded> {
        let registry = Arc::new(match &self.registry {
            Some(p) => Registry::from_json(&read(p)?)?,
            None => Registry::default_registry(),
        });
        let catalog = Arc::new(load_catalog(self.catalog.as_deref())?);
        let lexicon = match &self.lexicon {
            Some(p) => Lexicon::from_json(&read(p)?)?,
            None => Lexicon::default_lexicon(),
        };
        let identifier = build_identifier(self.backend, registry.clone(), lexicon)?;
        let config = EngineConfig { list_size: self.list_size, ..EngineConfig::default() };
        Ok(Loaded { registry, catalog, identifier, config })
    }
}

async fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let l = args.inputs.load()?;
    let (store, entries) = DataDir::open(&args.data_dir)?;
    let n = entries.len();
    let engine = Engine::from_journal(l.registry, l.catalog, l.identifier, l.config, entries)?;
    store.write_rules(&engine)?;
    tracing::info!(entries = n, rules = engine.rules().len(), "journal loaded");
    let state = AppState::new(engine, Some(store), system_clock(), args.token);
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("invalid host/port")?;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn run_replay(args: ReplayArgs) -> anyhow::Result<()> {
    let l = args.inputs.load()?;
    let trace = read(&args.trace)?;
    let config = ReplayConfig { engine: l.config, tz_offset_ms: args.tz_offset_minutes * 60_000 };
    let outcome = replay(&trace, l.registry, l.catalog, l.identifier, &config)
        .map_err(|e| anyhow::anyhow!("{}: {e}", e.code()))?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("metrics.json"), outcome.report.to_json())?;
    std::fs::write(args.out.join("days.csv"), outcome.report.to_csv())?;
    std::fs::write(args.out.join("rules.jsonl"), &outcome.rules_jsonl)?;
    std::fs::write(args.out.join("journal.jsonl"), journal_to_jsonl(&outcome.journal))?;
    for (line, code) in &outcome.skipped {
        tracing::debug!(line, code, "skipped trace action");
    }
    let r = &outcome.report;
    println!(
        "days={} usages={} covered={} coverage={:.3} rules={} skipped={}",
        r.days.len(),
        r.n_a,
        r.n_c,
        r.coverage,
        r.positive_rules + r.negative_rules,
        outcome.skipped.len()
    );
    Ok(())
}

fn run_gen_trace(args: GenTraceArgs) -> anyhow::Result<()> {
    let profile = match &args.profile {
        Some(p) => HabitProfile::from_json(&read(p)?)?,
        None => HabitProfile::default_profile(),
    };
    let catalog = load_catalog(args.catalog.as_deref())?;
    let text = trace_to_jsonl(&gen_trace(&profile, &catalog, args.days, args.seed));
    match &args.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve(args) => tokio::runtime::Runtime::new()?.block_on(serve(args)),
        Command::Replay(args) => run_replay(args),
        Command::GenTrace(args) => run_gen_trace(args),
    }
}
