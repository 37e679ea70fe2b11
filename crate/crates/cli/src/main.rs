//! `kya`: operator command line over a kernel data directory.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rust_decimal::Decimal;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use kya_core::attacksim::{run_topology_attack, FleetScenario};
use kya_core::canonical::DefinitionHash;
use kya_core::clock::{Clock, ManualClock, SystemClock};
use kya_core::compliance::ComplianceError;
use kya_core::evidence::{EvidenceError, TenantRetention};
use kya_core::inbound::{InboundError, RecommendationStatus, SignedEnvelope, TrustAnchorSet};
use kya_core::model::{parse_definition, AgentDefinition, DataClass, PrincipalKind, SignalKind};
use kya_core::storage::{Storage, StorageError, Store};
use kya_core::versioning::VersioningError;
use kya_core::weights::{Channel, Severity, SuggestionStatus, WeightKey, WeightsError};
use kya_core::{Kya, KyaError};

const EXIT_DRIFT: u8 = 1;
const EXIT_TAMPER: u8 = 2;
const EXIT_GATE: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_INTERNAL: u8 = 70;

#[derive(Debug, Parser)]
#[command(name = "kya", version, about = "Governance kernel for autonomous-agent fleets")]
struct Cli {
    /// Directory holding the kernel database.
    #[arg(long, env = "KYA_DATA_DIR", default_value = ".kya", global = true)]
    data_dir: PathBuf,
    #[arg(long, default_value = "default", global = true)]
    tenant: String,
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,
    /// Evaluate as of this RFC 3339 instant instead of the system clock.
    #[arg(long, global = true, value_parser = parse_instant)]
    now: Option<DateTime<Utc>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Snapshot a definition file as the agent's next version.
    Register {
        #[arg(long)]
        definition: PathBuf,
        /// Agent this one was forked from.
        #[arg(long)]
        parent: Option<String>,
    },
    /// Version history of an agent.
    Versions {
        #[arg(long)]
        agent: String,
    },
    /// Static risk score with its full decomposition.
    Score(DefinitionSource),
    /// Verify one evidence chain. Exits 2 on tamper.
    VerifyChain {
        #[arg(long)]
        invocation: String,
    },
    /// Evidence chains of the tenant.
    Chains,
    /// Compare a running definition to its declared hash. Exits 1 on drift.
    DriftCheck {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        declared_hash: String,
        /// Running definition; defaults to the latest registered version.
        #[arg(long)]
        definition: Option<PathBuf>,
    },
    /// Policy weights: list, only-tighten overrides, audit history
    #[command(subcommand)]
    Weights(WeightsCmd),
    /// Incident-driven weight suggestions awaiting review
    #[command(subcommand)]
    Suggestions(SuggestionsCmd),
    /// Signed weight recommendations from external collectors
    #[command(subcommand)]
    Inbound(InboundCmd),
    /// Record a rogue signal against a principal.
    Signal {
        #[arg(long, value_parser = parse_enum::<SignalKind>)]
        signal: SignalKind,
        #[arg(long, value_parser = parse_enum::<PrincipalKind>, default_value = "agent")]
        principal_kind: PrincipalKind,
        #[arg(long)]
        principal: String,
        /// Agent acting on the emitter's behalf; debited as well.
        #[arg(long)]
        actor: Option<String>,
    },
    /// Principal trust records of the tenant.
    Trust,
    /// Signal counters rebuilt from the tenant's evidence.
    Counters,
    /// Applicable regimes and breach notifications
    #[command(subcommand)]
    Compliance(ComplianceCmd),
    /// Drop expired evidence prefixes for the tenant.
    Prune {
        #[arg(long = "regime")]
        regimes: Vec<String>,
        #[arg(long)]
        retention_days: Option<u32>,
    },
    /// Replay the loan-fleet topology attack and print its trajectory.
    SimulateAttack {
        #[arg(long, value_parser = parse_enum::<SignalKind>, default_value = "oos_tool")]
        signal: SignalKind,
        #[arg(long, default_value_t = 20)]
        invocations: u32,
        /// Same fleet with no signals.
        #[arg(long)]
        control: bool,
        #[arg(long)]
        no_attribution: bool,
        #[arg(long)]
        no_premium: bool,
    },
    /// Write stores as newline-delimited JSON, one file per store.
    Export {
        #[arg(long)]
        out_dir: PathBuf,
        /// Limit to these stores.
        #[arg(long = "store", value_parser = parse_store)]
        stores: Vec<Store>,
    },
    /// Load newline-delimited JSON written by `export`.
    Import { files: Vec<PathBuf> },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct DefinitionSource {
    #[arg(long)]
    definition: Option<PathBuf>,
    /// Latest registered version of this agent.
    #[arg(long)]
    agent: Option<String>,
}

#[derive(Debug, Subcommand)]
enum WeightsCmd {
    /// Effective weights, with the override rows behind them.
    List {
        #[arg(long)]
        platform: bool,
    },
    /// Write an override. Tenant writes may only tighten.
    Set {
        /// `scope/key`, e.g. `factor_weight/data_class:pii`.
        key: String,
        value: Decimal,
        /// Write the platform value instead of the tenant's.
        #[arg(long)]
        platform: bool,
        #[arg(long, default_value = "cli")]
        by: String,
    },
    /// Accepted writes, oldest first.
    History {
        #[arg(long)]
        platform: bool,
    },
}

#[derive(Debug, Subcommand)]
enum SuggestionsCmd {
    List {
        #[arg(long, value_parser = parse_suggestion_status)]
        status: Option<SuggestionStatus>,
    },
    /// Score a registered agent and propose bumps for its positive factors.
    Propose {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        incident: String,
        #[arg(long, value_parser = parse_severity, default_value = "critical")]
        severity: Severity,
    },
    Approve {
        id: String,
        #[arg(long)]
        reviewer: String,
    },
    Reject {
        id: String,
        #[arg(long)]
        reviewer: String,
    },
}

#[derive(Debug, Subcommand)]
enum InboundCmd {
    /// Run a signed envelope through the gates. Exits 3 when rejected.
    Ingest {
        file: PathBuf,
        /// Keys that may be applied without review, as `scope/key`.
        #[arg(long = "auto-apply")]
        auto_apply: Vec<String>,
    },
    ListPending {
        #[arg(long)]
        platform: bool,
    },
    List {
        #[arg(long)]
        platform: bool,
    },
    Approve {
        id: String,
        #[arg(long, default_value = "cli")]
        reviewer: String,
        #[arg(long)]
        platform: bool,
    },
    Reject {
        id: String,
        #[arg(long, default_value = "cli")]
        reviewer: String,
        #[arg(long)]
        platform: bool,
    },
}

#[derive(Debug, Subcommand)]
enum ComplianceCmd {
    /// Regimes that apply to an agent, with their obligations.
    Summary(DefinitionSource),
    /// Emit breach notifications for an incident (idempotent).
    Notify {
        #[arg(long)]
        incident: String,
        #[arg(long = "regime")]
        regimes: Vec<String>,
        #[arg(long = "class", value_parser = parse_enum::<DataClass>)]
        classes: Vec<DataClass>,
    },
    Notifications,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Kernel(#[from] KyaError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Kernel(e) => kernel_code(e),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code() {
            EXIT_GATE => "gate_rejection",
            EXIT_USAGE => "usage",
            EXIT_DATA => "data",
            _ => "internal",
        }
    }
}

fn weights_code(e: &WeightsError) -> u8 {
    match e {
        WeightsError::OverrideLoosens { .. } | WeightsError::NotPending(_) => EXIT_GATE,
        WeightsError::UnknownWeightKey(_) | WeightsError::InvalidChannel { .. } | WeightsError::MissingReviewer => {
            EXIT_USAGE
        }
        WeightsError::Storage(s) => storage_code(s),
        WeightsError::Evidence(e) => evidence_code(e),
    }
}

fn storage_code(e: &StorageError) -> u8 {
    match e {
        StorageError::InvalidIdentifier(_) => EXIT_USAGE,
        StorageError::Import { .. } | StorageError::Codec { .. } => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

fn evidence_code(e: &EvidenceError) -> u8 {
    match e {
        EvidenceError::Storage(s) => storage_code(s),
        EvidenceError::InvalidEvidenceKind(_) | EvidenceError::Canonical(_) => EXIT_DATA,
        EvidenceError::Compliance(_) => EXIT_DATA,
    }
}

fn kernel_code(e: &KyaError) -> u8 {
    match e {
        KyaError::Validation(_) => EXIT_DATA,
        KyaError::Storage(s) => storage_code(s),
        KyaError::Evidence(e) => evidence_code(e),
        KyaError::Weights(w) => weights_code(w),
        KyaError::Trust(_) => EXIT_INTERNAL,
        KyaError::Versioning(v) => match v {
            VersioningError::Storage(s) => storage_code(s),
            VersioningError::Evidence(e) => evidence_code(e),
            _ => EXIT_DATA,
        },
        KyaError::Inbound(i) => match i {
            InboundError::NotPending(_) | InboundError::InboundDisabled => EXIT_GATE,
            InboundError::UnknownKeyId(_) | InboundError::SignatureInvalid => EXIT_GATE,
            InboundError::MissingReviewer => EXIT_USAGE,
            InboundError::Weights(w) => weights_code(w),
            InboundError::Storage(s) => storage_code(s),
            InboundError::Evidence(e) => evidence_code(e),
            InboundError::MalformedAnchor(_) | InboundError::MalformedEnvelope(_) | InboundError::Canonical(_) => {
                EXIT_DATA
            }
        },
        KyaError::Compliance(c) => match c {
            ComplianceError::UnknownRegime(_) => EXIT_USAGE,
            ComplianceError::Storage(s) => storage_code(s),
            _ => EXIT_DATA,
        },
        KyaError::Scoring(_) => EXIT_USAGE,
    }
}

/// Lift any kernel-module error into [`CliError`].
fn k<E: Into<KyaError>>(e: E) -> CliError {
    CliError::Kernel(e.into())
}

fn parse_instant(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)).map_err(|e| e.to_string())
}

fn parse_enum<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_store(s: &str) -> Result<Store, String> {
    Store::from_name(s).ok_or_else(|| format!("unknown store {s:?}"))
}

fn parse_suggestion_status(s: &str) -> Result<SuggestionStatus, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown status {s:?}"))
}

fn parse_severity(s: &str) -> Result<Severity, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown severity {s:?}"))
}

/// What a command produced and the exit code it implies.
struct Report {
    value: Value,
    code: u8,
}

impl Report {
    fn ok(value: impl Serialize) -> Result<Self, CliError> {
        Self::with_code(value, 0)
    }

    fn with_code(value: impl Serialize, code: u8) -> Result<Self, CliError> {
        let value = serde_json::to_value(value).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(Report { value, code })
    }
}

fn read_definition(path: &Path) -> Result<AgentDefinition, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_definition(&text).map_err(k)
}

fn resolve_definition(kya: &Kya, tenant: &str, src: &DefinitionSource) -> Result<AgentDefinition, CliError> {
    match (&src.definition, &src.agent) {
        (Some(path), _) => read_definition(path),
        (None, Some(agent)) => Ok(kya
            .latest_version(tenant, agent)
            .map_err(k)?
            .ok_or_else(|| CliError::Data(format!("agent {agent} is not registered")))?
            .definition),
        (None, None) => Err(CliError::Usage("pass --definition or --agent".into())),
    }
}

fn open(cli: &Cli) -> Result<Kya, CliError> {
    let storage = Storage::open_dir(&cli.data_dir).map_err(k)?;
    let clock: Arc<dyn Clock> = match cli.now {
        Some(t) => Arc::new(ManualClock::new(t)),
        None => Arc::new(SystemClock),
    };
    Ok(Kya::builder().storage(storage).clock(clock).build())
}

fn run(cli: &Cli) -> Result<Report, CliError> {
    if let Command::SimulateAttack { signal, invocations, control, no_attribution, no_premium } = &cli.command {
        let mut scenario =
            if *control { FleetScenario::control(*invocations) } else { FleetScenario::attack(*signal, *invocations) };
        scenario.attribution = !no_attribution;
        scenario.static_premium = !no_premium;
        return Report::ok(run_topology_attack(&scenario)?);
    }
    let kya = open(cli)?;
    let tenant = cli.tenant.as_str();
    let report = dispatch(&kya, tenant, &cli.command)?;
    kya.storage().flush().map_err(k)?;
    Ok(report)
}

fn dispatch(kya: &Kya, tenant: &str, command: &Command) -> Result<Report, CliError> {
    match command {
        Command::Register { definition, parent } => {
            let def = read_definition(definition)?;
            let snap = kya.snapshot(tenant, &def, kya.now(), parent.as_deref()).map_err(k)?;
            Report::ok(json!({
                "agent_key": snap.agent_key,
                "version_no": snap.version_no,
                "definition_hash": snap.definition_hash,
                "parent_agent_key": snap.parent_agent_key,
            }))
        }
        Command::Versions { agent } => {
            let rows: Vec<Value> = kya
                .versions(tenant, agent)
                .map_err(k)?
                .into_iter()
                .map(|s| {
                    json!({
                        "version_no": s.version_no,
                        "definition_hash": s.definition_hash,
                        "occurred_at": s.occurred_at,
                        "parent_agent_key": s.parent_agent_key,
                        "note": s.note,
                    })
                })
                .collect();
            Report::ok(rows)
        }
        Command::Score(src) => {
            let def = resolve_definition(kya, tenant, src)?;
            Report::ok(kya.score(tenant, &def)?)
        }
        Command::VerifyChain { invocation } => {
            let report = kya.verify_chain(tenant, invocation).map_err(k)?;
            let code = if report.status.is_tamper() { EXIT_TAMPER } else { 0 };
            Report::with_code(report, code)
        }
        Command::Chains => Report::ok(kya.chains(tenant).map_err(k)?),
        Command::DriftCheck { agent, declared_hash, definition } => {
            let declared: DefinitionHash =
                declared_hash.parse().map_err(|_| CliError::Usage(format!("bad hash {declared_hash:?}")))?;
            let current = match definition {
                Some(path) => read_definition(path)?,
                None => resolve_definition(kya, tenant, &DefinitionSource { definition: None, agent: Some(agent.clone()) })?,
            };
            if &current.agent_key != agent {
                return Err(CliError::Usage(format!("definition is for {}, not {agent}", current.agent_key)));
            }
            match kya.detect_drift(tenant, &declared, &current).map_err(k)? {
                None => Report::ok(json!({"drift": false})),
                Some(diff) => Report::with_code(json!({"drift": true, "diff": diff}), EXIT_DRIFT),
            }
        }
        Command::Weights(cmd) => weights(kya, tenant, cmd),
        Command::Suggestions(cmd) => suggestions(kya, tenant, cmd),
        Command::Inbound(cmd) => inbound(kya, tenant, cmd),
        Command::Signal { signal, principal_kind, principal, actor } => {
            let out = kya
                .record_principal_signal(tenant, *principal_kind, principal, *signal, actor.as_deref())
                .map_err(k)?;
            Report::ok(json!({"delta": out.delta, "principal": out.principal, "actor": out.actor}))
        }
        Command::Trust => Report::ok(kya.list_principals(tenant).map_err(k)?),
        Command::Counters => Report::ok(kya.replay_counters(tenant).map_err(k)?),
        Command::Compliance(cmd) => compliance(kya, tenant, cmd),
        Command::Prune { regimes, retention_days } => {
            let regimes: BTreeSet<String> = regimes.iter().cloned().collect();
            for r in &regimes {
                kya.regimes().resolve(r).map_err(k)?;
            }
            kya.set_tenant_retention(tenant, TenantRetention { regimes, retention_days: *retention_days });
            Report::ok(kya.prune_expired_evidence(kya.now()).map_err(k)?)
        }
        Command::SimulateAttack { .. } => unreachable!("handled before the kernel is opened"),
        Command::Export { out_dir, stores } => {
            std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
            let stores = if stores.is_empty() { Store::ALL.to_vec() } else { stores.clone() };
            let mut written = serde_json::Map::new();
            for store in stores {
                let path = out_dir.join(format!("{}.ndjson", store.name()));
                let file = File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                let mut out = BufWriter::new(file);
                let n = kya.storage().export_ndjson(store, &mut out).map_err(k)?;
                out.flush().map_err(|e| CliError::Data(e.to_string()))?;
                written.insert(store.name().to_string(), json!(n));
            }
            Report::ok(written)
        }
        Command::Import { files } => {
            if files.is_empty() {
                return Err(CliError::Usage("no files given".into()));
            }
            let mut total = 0;
            for path in files {
                let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                total += kya.storage().import_ndjson(&mut BufReader::new(file)).map_err(k)?;
            }
            Report::ok(json!({"imported": total}))
        }
    }
}

fn weights(kya: &Kya, tenant: &str, cmd: &WeightsCmd) -> Result<Report, CliError> {
    match cmd {
        WeightsCmd::List { platform } => {
            let scope = (!platform).then_some(tenant);
            let overrides = kya.list_overrides(scope).map_err(k)?;
            let rows: Vec<Value> = kya
                .effective_table(scope)
                .map_err(k)?
                .entries()
                .into_iter()
                .map(|(key, value)| {
                    let channels: Vec<&str> =
                        overrides.iter().filter(|o| o.key == key).map(|o| o.channel.as_str()).collect();
                    json!({"key": key.to_string(), "value": value.to_string(), "overridden_by": channels})
                })
                .collect();
            Report::ok(rows)
        }
        WeightsCmd::Set { key, value, platform, by } => {
            let key: WeightKey = key.parse().map_err(k)?;
            let (scope, channel) = if *platform { (None, Channel::Platform) } else { (Some(tenant), Channel::Tenant) };
            Report::ok(kya.set_override(scope, &key, *value, channel, by).map_err(k)?)
        }
        WeightsCmd::History { platform } => {
            Report::ok(kya.list_weight_changes((!platform).then_some(tenant)).map_err(k)?)
        }
    }
}

fn suggestions(kya: &Kya, tenant: &str, cmd: &SuggestionsCmd) -> Result<Report, CliError> {
    match cmd {
        SuggestionsCmd::List { status } => Report::ok(kya.list_suggestions(tenant, *status).map_err(k)?),
        SuggestionsCmd::Propose { agent, incident, severity } => {
            let def = resolve_definition(kya, tenant, &DefinitionSource { definition: None, agent: Some(agent.clone()) })?;
            let score = kya.score(tenant, &def)?;
            Report::ok(kya.propose_from_incident(tenant, &score.incident(incident, *severity)).map_err(k)?)
        }
        SuggestionsCmd::Approve { id, reviewer } => Report::ok(kya.approve_suggestion(tenant, id, reviewer).map_err(k)?),
        SuggestionsCmd::Reject { id, reviewer } => Report::ok(kya.reject_suggestion(tenant, id, reviewer).map_err(k)?),
    }
}

fn inbound(kya: &Kya, tenant: &str, cmd: &InboundCmd) -> Result<Report, CliError> {
    let ns = |platform: bool| (!platform).then_some(tenant);
    match cmd {
        InboundCmd::Ingest { file, auto_apply } => {
            let text = std::fs::read_to_string(file).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
            let env = SignedEnvelope::parse(&text).map_err(k)?;
            let anchors = TrustAnchorSet::from_env().map_err(k)?;
            let allow = auto_apply
                .iter()
                .map(|s| s.parse::<WeightKey>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(k)?;
            let rec = kya.ingest_recommendation(&env, &anchors, &allow).map_err(k)?;
            let code = if rec.status == RecommendationStatus::Rejected { EXIT_GATE } else { 0 };
            Report::with_code(rec, code)
        }
        InboundCmd::ListPending { platform } => {
            Report::ok(kya.list_pending_recommendations(ns(*platform)).map_err(k)?)
        }
        InboundCmd::List { platform } => Report::ok(kya.list_recommendations(ns(*platform)).map_err(k)?),
        InboundCmd::Approve { id, reviewer, platform } => {
            Report::ok(kya.approve_recommendation(ns(*platform), id, reviewer).map_err(k)?)
        }
        InboundCmd::Reject { id, reviewer, platform } => {
            Report::ok(kya.reject_recommendation(ns(*platform), id, reviewer).map_err(k)?)
        }
    }
}

fn compliance(kya: &Kya, tenant: &str, cmd: &ComplianceCmd) -> Result<Report, CliError> {
    match cmd {
        ComplianceCmd::Summary(src) => {
            let def = resolve_definition(kya, tenant, src)?;
            Report::ok(kya.regimes().compliance_summary(&def))
        }
        ComplianceCmd::Notify { incident, regimes, classes } => {
            let regimes: BTreeSet<String> = regimes.iter().cloned().collect();
            let classes: BTreeSet<DataClass> = classes.iter().copied().collect();
            Report::ok(kya.emit_breach_notifications(tenant, incident, &regimes, &classes).map_err(k)?)
        }
        ComplianceCmd::Notifications => Report::ok(kya.list_breach_notifications(tenant).map_err(k)?),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Plain-text rendering of a JSON result: arrays of objects become columns,
/// objects become key/value rows.
fn render_table(value: &Value) -> String {
    let (header, rows): (Vec<String>, Vec<Vec<String>>) = match value {
        Value::Array(items) if items.iter().all(Value::is_object) && !items.is_empty() => {
            let mut cols: Vec<String> = Vec::new();
            for item in items {
                for key in item.as_object().into_iter().flat_map(|m| m.keys()) {
                    if !cols.contains(key) {
                        cols.push(key.clone());
                    }
                }
            }
            let rows = items.iter().map(|item| cols.iter().map(|c| cell(&item[c])).collect()).collect();
            (cols, rows)
        }
        Value::Array(items) => (vec!["value".into()], items.iter().map(|v| vec![cell(v)]).collect()),
        Value::Object(m) => (
            vec!["field".into(), "value".into()],
            m.iter().map(|(k, v)| vec![k.clone(), cell(v)]).collect(),
        ),
        other => return cell(other),
    };
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(&header)];
    out.extend(rows.iter().map(|r| line(r)));
    out.join("\n")
}

fn emit(format: Format, value: &Value) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value).expect("values serialize")),
        Format::Table => println!("{}", render_table(value)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            emit(cli.format, &report.value);
            ExitCode::from(report.code)
        }
        Err(err) => {
            let code = err.code();
            match cli.format {
                Format::Json => eprintln!("{}", json!({"error": err.kind(), "exit_code": code, "message": err.to_string()})),
                Format::Table => eprintln!("error: {err}"),
            }
            ExitCode::from(code)
        }
    }
}
