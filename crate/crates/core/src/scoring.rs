//! Static risk scoring.
//!
//! A score is an additive sum of factor deltas, amplified by the product of
//! every interaction rule that fires (capped at [`MAX_MULTIPLIER`]), rounded
//! half-to-even and clamped to `0..=100`. Every factor is reported, including
//! zero ones, and the deltas always sum to the additive score.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::RegimeRegistry;
use crate::model::{
    AccessLevel, AgentDefinition, ApprovalStatus, AuditKind, DataClass, DeploymentEnv, HumanLoop, InputSource,
    ModelTrust, Provenance, SecurityCap,
};
use crate::weights::{Incident, Severity, WeightTable};

pub const MAX_MULTIPLIER: Decimal = Decimal::TWO;

pub const CAP_DATA_SENSITIVITY: i64 = 60;
pub const CAP_SECURITY_CAPS: i64 = 60;
pub const CAP_PROVENANCE: i64 = 20;
pub const CAP_MODEL_TRUST: i64 = 10;
pub const CAP_BLAST_RADIUS: i64 = 30;
pub const CAP_DEPLOYMENT: i64 = 25;
pub const CAP_DELEGATION_DEPTH: i64 = 25;
pub const CAP_SUPPLY_CHAIN: i64 = 35;
pub const CAP_INPUT_SOURCES: i64 = 25;
pub const CAP_DELEGATION_PREMIUM: i64 = 25;

pub const MAX_GRAPH_NODES: usize = 5000;
pub const MAX_HOPS: usize = 50;
pub const MAX_PATHS: usize = 50;

const WRITE_PREFIXES: [&str; 20] = [
    "create_", "delete_", "update_", "override_", "revert_", "ingest_", "execute_", "publish_", "ack_", "suspend_",
    "remove_", "write_", "insert_", "modify_", "set_", "send_", "submit_", "approve_", "drop_", "flag_",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskBucket {
    Low,
    Medium,
    High,
    Critical,
}

impl RiskBucket {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskBucket::Low => "low",
            RiskBucket::Medium => "medium",
            RiskBucket::High => "high",
            RiskBucket::Critical => "critical",
        }
    }
}

impl fmt::Display for RiskBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bucket under the thresholds in `weights` (defaults 30/60/85).
pub fn bucket_for_score(score: i64, weights: &WeightTable) -> RiskBucket {
    if score >= weights.threshold("critical") {
        RiskBucket::Critical
    } else if score >= weights.threshold("high") {
        RiskBucket::High
    } else if score >= weights.threshold("medium") {
        RiskBucket::Medium
    } else {
        RiskBucket::Low
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskFactor {
    pub name: String,
    pub label: String,
    pub delta: i64,
    /// Factor-weight keys that produced the delta.
    pub keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl RiskFactor {
    fn new(name: &str, label: impl Into<String>, delta: i64, keys: Vec<String>) -> Self {
        RiskFactor { name: name.to_string(), label: label.into(), delta, keys, warning: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionSeverity {
    Warning,
    Critical,
}

pub type Condition = Arc<dyn Fn(&AgentDefinition, &[RiskFactor]) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct InteractionRule {
    pub code: String,
    pub name: String,
    pub condition: Condition,
    pub multiplier: Decimal,
    pub description: String,
    pub severity: InteractionSeverity,
}

impl fmt::Debug for InteractionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InteractionRule")
            .field("code", &self.code)
            .field("multiplier", &self.multiplier)
            .field("severity", &self.severity)
            .finish_non_exhaustive()
    }
}

impl InteractionRule {
    pub fn new(
        code: &str,
        multiplier: Decimal,
        severity: InteractionSeverity,
        description: &str,
        condition: impl Fn(&AgentDefinition, &[RiskFactor]) -> bool + Send + Sync + 'static,
    ) -> Self {
        InteractionRule {
            code: code.to_string(),
            name: code.replace('_', " "),
            condition: Arc::new(condition),
            multiplier,
            description: description.to_string(),
            severity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoringError {
    #[error("interaction {code}: multiplier {multiplier} is below 1.0")]
    MultiplierBelowOne { code: String, multiplier: Decimal },
    #[error("interaction code {0} already registered")]
    DuplicateCode(String),
}

/// Ordered set of interaction rules. Registration returns a new registry.
#[derive(Debug, Clone, Default)]
pub struct InteractionRegistry {
    rules: Vec<InteractionRule>,
}

fn sum_of(factors: &[RiskFactor]) -> i64 {
    factors.iter().map(|f| f.delta).sum()
}

fn delta_of(factors: &[RiskFactor], name: &str) -> i64 {
    factors.iter().filter(|f| f.name == name).map(|f| f.delta).sum()
}

/// Agents that can change state: any write-tool delta or write/admin access.
pub fn is_writer(def: &AgentDefinition, factors: &[RiskFactor]) -> bool {
    delta_of(factors, "write_tools") > 0
        || delta_of(factors, "admin_tools") > 0
        || matches!(def.access_level, AccessLevel::Write | AccessLevel::Admin)
}

fn dec(s: &str) -> Decimal {
    s.parse().expect("literal decimal")
}

impl InteractionRegistry {
    pub fn empty() -> Self {
        InteractionRegistry::default()
    }

    pub fn with_defaults() -> Self {
        use InteractionSeverity::{Critical, Warning};
        let prod = |d: &AgentDefinition| d.deployment_env == DeploymentEnv::Prod;
        let classified = |d: &AgentDefinition| d.data_classes.iter().any(|c| c.is_classified());
        let rules = vec![
            InteractionRule::new("autonomous_writer_in_prod", dec("1.3"), Critical,
                "autonomous agent with write capability in production",
                move |d, f| d.human_loop == HumanLoop::None && is_writer(d, f) && prod(d)),
            InteractionRule::new("code_exec_with_user_input", dec("1.5"), Critical,
                "code execution reachable from uploaded or fetched input",
                |d, _| d.security_caps.contains(&SecurityCap::CodeExecution)
                    && (d.input_sources.contains(&InputSource::UserUpload) || d.input_sources.contains(&InputSource::WebFetch))),
            InteractionRule::new("classified_autonomous", dec("1.4"), Critical,
                "classified data handled without a human in the loop",
                move |d, _| classified(d) && d.human_loop == HumanLoop::None),
            InteractionRule::new("untrusted_chain", dec("1.2"), Warning,
                "marketplace agent delegating to three or more agents",
                |d, _| d.provenance == Provenance::Marketplace && d.can_delegate_to.len() >= 3),
            InteractionRule::new("unaudited_classified", dec("1.25"), Critical,
                "classified data with no audit evidence on file",
                move |d, _| classified(d) && d.audit_evidence.is_empty()),
            InteractionRule::new("rejected_in_prod", dec("1.4"), Critical,
                "rejected definition running in production",
                move |d, _| d.approval_status == ApprovalStatus::Rejected && prod(d)),
            InteractionRule::new("orphan_writer_in_prod", dec("1.2"), Warning,
                "writer in production with no owner",
                move |d, f| d.owner.is_none() && is_writer(d, f) && prod(d)),
            InteractionRule::new("prod_marketplace_writer", dec("1.2"), Warning,
                "marketplace writer in production",
                move |d, f| d.provenance == Provenance::Marketplace && is_writer(d, f) && prod(d)),
            InteractionRule::new("self_hosted_with_pii", dec("1.2"), Warning,
                "self-hosted model handling personal data",
                |d, _| d.model_trust == ModelTrust::SelfHosted && d.data_classes.iter().any(|c| c.is_personal())),
            InteractionRule::new("unowned_high_risk", dec("1.15"), Warning,
                "no owner and additive score of 60 or more",
                |d, f| d.owner.is_none() && sum_of(f) >= 60),
        ];
        InteractionRegistry { rules }
    }

    pub fn rules(&self) -> &[InteractionRule] {
        &self.rules
    }

    pub fn get(&self, code: &str) -> Option<&InteractionRule> {
        self.rules.iter().find(|r| r.code == code)
    }

    pub fn register(&self, rule: InteractionRule) -> Result<Self, ScoringError> {
        if rule.multiplier < Decimal::ONE {
            return Err(ScoringError::MultiplierBelowOne { code: rule.code, multiplier: rule.multiplier });
        }
        if self.get(&rule.code).is_some() {
            return Err(ScoringError::DuplicateCode(rule.code));
        }
        let mut next = self.clone();
        next.rules.push(rule);
        Ok(next)
    }
}

fn round_half_even(d: Decimal) -> i64 {
    d.round_dp_with_strategy(0, RoundingStrategy::MidpointNearestEven).to_i64().unwrap_or(i64::MAX)
}

/// `(final, applied_multiplier)` for an additive score and fired multipliers.
pub fn apply_interactions(additive: i64, multipliers: &[Decimal]) -> (i64, Decimal) {
    let mut product = multipliers.iter().fold(Decimal::ONE, |acc, m| acc * *m).min(MAX_MULTIPLIER).normalize();
    if product.scale() < 2 {
        product.rescale(2);
    }
    let final_score = round_half_even(Decimal::from(additive) * product).clamp(0, 100);
    (final_score, product)
}

/// Delegation adjacency: agent key to the keys it may delegate to.
pub type DelegationGraph = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DepthResult {
    pub depth: usize,
    pub truncated: bool,
    pub cycle: bool,
}

/// Longest simple delegation chain from `agent`, in hops. A cycle or any of
/// the node, hop and path caps stops the walk and sets `truncated`; a cycle
/// also pins the depth at [`MAX_HOPS`].
pub fn delegation_depth(graph: &DelegationGraph, agent: &str) -> DepthResult {
    struct Walk<'g> {
        graph: &'g DelegationGraph,
        on_path: HashSet<&'g str>,
        visited: usize,
        paths: usize,
        best: usize,
        truncated: bool,
        cycle: bool,
    }

    impl<'g> Walk<'g> {
        fn go(&mut self, node: &'g str, depth: usize) {
            if self.truncated {
                return;
            }
            self.visited += 1;
            if self.visited > MAX_GRAPH_NODES || depth >= MAX_HOPS {
                self.best = self.best.max(depth);
                self.truncated = true;
                return;
            }
            let next = self.graph.get(node).map(Vec::as_slice).unwrap_or_default();
            if next.is_empty() {
                self.best = self.best.max(depth);
                self.paths += 1;
                if self.paths >= MAX_PATHS {
                    self.truncated = true;
                }
                return;
            }
            self.on_path.insert(node);
            for child in next {
                if self.on_path.contains(child.as_str()) {
                    self.cycle = true;
                    self.truncated = true;
                    self.best = MAX_HOPS;
                    break;
                }
                self.go(child, depth + 1);
                if self.truncated {
                    break;
                }
            }
            self.on_path.remove(node);
        }
    }

    let mut w = Walk {
        graph,
        on_path: HashSet::new(),
        visited: 0,
        paths: 0,
        best: 0,
        truncated: false,
        cycle: false,
    };
    w.go(agent, 0);
    DepthResult { depth: w.best, truncated: w.truncated, cycle: w.cycle }
}

/// One delegate as seen by the premium rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegateObservation {
    pub agent_key: String,
    pub bucket: RiskBucket,
    pub observations: u64,
}

pub fn delegation_trust_premium(delegates: &[DelegateObservation], weights: &WeightTable, gate: u64) -> RiskFactor {
    let per = weights.factor("delegation:premium");
    let counted: Vec<&DelegateObservation> = delegates
        .iter()
        .filter(|d| d.observations >= gate && d.bucket >= RiskBucket::High)
        .collect();
    let delta = (per * counted.len() as i64).min(CAP_DELEGATION_PREMIUM);
    let label = if counted.is_empty() {
        "no observed high-risk delegates".to_string()
    } else {
        format!("delegates to {}", counted.iter().map(|d| d.agent_key.as_str()).collect::<Vec<_>>().join(", "))
    };
    let keys = if counted.is_empty() { vec![] } else { vec!["delegation:premium".to_string()] };
    RiskFactor::new("delegation_premium", label, delta, keys)
}

pub fn data_sensitivity_delta(classes: &BTreeSet<DataClass>, weights: &WeightTable) -> RiskFactor {
    let best = classes
        .iter()
        .map(|c| (weights.factor(&format!("data_class:{c}")), *c))
        .max_by_key(|(w, _)| *w);
    match best {
        Some((w, c)) => RiskFactor::new(
            "data_sensitivity",
            format!("handles {c} data"),
            w.min(CAP_DATA_SENSITIVITY),
            vec![format!("data_class:{c}")],
        ),
        None => RiskFactor::new("data_sensitivity", "no declared data classes", 0, vec![]),
    }
}

pub fn security_caps_delta(caps: &BTreeSet<SecurityCap>, weights: &WeightTable) -> RiskFactor {
    let keys: Vec<String> = caps.iter().map(|c| format!("security_cap:{c}")).collect();
    let sum: i64 = keys.iter().map(|k| weights.factor(k)).sum();
    let label = if caps.is_empty() {
        "no security capabilities".to_string()
    } else {
        caps.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" + ")
    };
    RiskFactor::new("security_caps", label, sum.min(CAP_SECURITY_CAPS), keys)
}

/// Role requirements per tool, when known.
pub type ToolCatalog = BTreeMap<String, BTreeSet<String>>;

fn is_admin_tool(tool: &str, catalog: Option<&ToolCatalog>) -> bool {
    tool.starts_with("admin_") || catalog.and_then(|c| c.get(tool)).is_some_and(|roles| roles.contains("admin"))
}

pub fn is_write_tool(tool: &str, catalog: Option<&ToolCatalog>) -> bool {
    WRITE_PREFIXES.iter().any(|p| tool.starts_with(p))
        || catalog.and_then(|c| c.get(tool)).is_some_and(|roles| !roles.is_empty())
}

/// Inputs beyond the definition itself.
#[derive(Debug, Clone)]
pub struct ScoreContext<'a> {
    pub now: DateTime<Utc>,
    pub disable_interactions: bool,
    /// Fleet delegation graph; without one the definition's own edges are used.
    pub graph: Option<&'a DelegationGraph>,
    pub delegates: &'a [DelegateObservation],
    pub catalog: Option<&'a ToolCatalog>,
    pub observation_gate: u64,
    /// Pending lineage elevation applied to this score only.
    pub lineage_increment: i64,
}

impl<'a> ScoreContext<'a> {
    pub fn at(now: DateTime<Utc>) -> Self {
        ScoreContext {
            now,
            disable_interactions: false,
            graph: None,
            delegates: &[],
            catalog: None,
            observation_gate: 10,
            lineage_increment: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRiskScore {
    pub agent_key: String,
    pub additive: i64,
    pub additive_bucket: RiskBucket,
    pub fired_codes: Vec<String>,
    pub applied_multiplier: Decimal,
    #[serde(rename = "final")]
    pub final_score: i64,
    pub bucket: RiskBucket,
    pub factors: Vec<RiskFactor>,
    pub depth_truncated: bool,
}

impl AgentRiskScore {
    pub fn factor(&self, name: &str) -> Option<&RiskFactor> {
        self.factors.iter().find(|f| f.name == name)
    }

    /// An incident naming every weight key that pushed this score up.
    pub fn incident(&self, id: &str, severity: Severity) -> Incident {
        let keys: BTreeSet<String> = self
            .factors
            .iter()
            .filter(|f| f.delta > 0)
            .flat_map(|f| f.keys.iter().cloned())
            .collect();
        Incident { id: id.to_string(), agent_key: self.agent_key.clone(), severity, fired_factors: keys.into_iter().collect() }
    }
}

const NEW_AGENT_WINDOW_DAYS: i64 = 7;
const CHURN_VERSIONS_30D: u32 = 20;
const AUDIT_HALF_LIFE_DAYS: i64 = 180;
const HOURS_PER_MONTH: i64 = 720;
const COST_BURST_RATIO: i64 = 5;

fn additive_factors(
    def: &AgentDefinition,
    w: &WeightTable,
    regimes: &RegimeRegistry,
    ctx: &ScoreContext<'_>,
) -> (Vec<RiskFactor>, bool) {
    let mut fs = Vec::with_capacity(26);
    let one = |k: &str| vec![k.to_string()];

    fs.push(RiskFactor::new("base", "base agent risk", w.factor("base"), one("base")));

    let (admin, write): (Vec<&String>, Vec<&String>) = {
        let admin: Vec<&String> = def.tools.iter().filter(|t| is_admin_tool(t, ctx.catalog)).collect();
        let write = def
            .tools
            .iter()
            .filter(|t| !is_admin_tool(t, ctx.catalog) && is_write_tool(t, ctx.catalog))
            .collect();
        (admin, write)
    };
    fs.push(RiskFactor::new(
        "write_tools",
        format!("{} write tool(s)", write.len()),
        w.factor("tool:write") * write.len() as i64,
        if write.is_empty() { vec![] } else { one("tool:write") },
    ));
    fs.push(RiskFactor::new(
        "admin_tools",
        format!("{} admin-gated tool(s)", admin.len()),
        w.factor("tool:admin") * admin.len() as i64,
        if admin.is_empty() { vec![] } else { one("tool:admin") },
    ));

    let gov = format!("governance:{}", def.human_loop);
    fs.push(RiskFactor::new("governance", format!("human_loop {}", def.human_loop), w.factor(&gov), one(&gov)));

    fs.push(RiskFactor::new(
        "can_override",
        "may override decisions",
        if def.can_override { w.factor("can_override") } else { 0 },
        if def.can_override { one("can_override") } else { vec![] },
    ));
    fs.push(RiskFactor::new(
        "can_revert",
        "may revert changes",
        if def.can_revert { w.factor("can_revert") } else { 0 },
        if def.can_revert { one("can_revert") } else { vec![] },
    ));

    let (access_delta, access_keys) = match def.access_level {
        AccessLevel::Read => (0, vec![]),
        AccessLevel::Write => (w.factor("access:write"), one("access:write")),
        AccessLevel::Admin => (w.factor("access:admin"), one("access:admin")),
    };
    fs.push(RiskFactor::new("access_level", format!("access {}", def.access_level), access_delta, access_keys));

    fs.push(data_sensitivity_delta(&def.data_classes, w));
    fs.push(security_caps_delta(&def.security_caps, w));

    let pk = format!("provenance:{}", def.provenance);
    fs.push(RiskFactor::new("provenance", format!("{} provenance", def.provenance), w.factor(&pk).min(CAP_PROVENANCE), one(&pk)));
    let mk = format!("model_trust:{}", def.model_trust);
    fs.push(RiskFactor::new("model_trust", format!("{} model", def.model_trust), w.factor(&mk).min(CAP_MODEL_TRUST), one(&mk)));

    let mut blast = 0;
    let mut blast_keys = vec![];
    if def.tenant_count > 1 {
        blast += w.factor("blast:multi_tenant");
        blast_keys.push("blast:multi_tenant".to_string());
    }
    if !def.downstream_write_systems.is_empty() {
        blast += w.factor("blast:downstream_write") * def.downstream_write_systems.len() as i64;
        blast_keys.push("blast:downstream_write".to_string());
    }
    fs.push(RiskFactor::new(
        "blast_radius",
        format!("{} tenant(s), {} downstream write system(s)", def.tenant_count, def.downstream_write_systems.len()),
        blast.min(CAP_BLAST_RADIUS),
        blast_keys,
    ));

    let dk = format!("deployment:{}", def.deployment_env);
    fs.push(RiskFactor::new("deployment", format!("deployed to {}", def.deployment_env), w.factor(&dk).min(CAP_DEPLOYMENT), one(&dk)));

    let own_edges;
    let graph = match ctx.graph {
        Some(g) => g,
        None => {
            own_edges = DelegationGraph::from([(def.agent_key.clone(), def.can_delegate_to.clone())]);
            &own_edges
        }
    };
    let depth = delegation_depth(graph, &def.agent_key);
    let mut depth_factor = RiskFactor::new(
        "delegation_depth",
        format!("delegation depth {}", depth.depth),
        (w.factor("delegation:per_hop") * depth.depth as i64).min(CAP_DELEGATION_DEPTH),
        if depth.depth > 0 { one("delegation:per_hop") } else { vec![] },
    );
    if depth.truncated {
        depth_factor.warning = Some(if depth.cycle { "delegation cycle" } else { "delegation walk truncated" }.into());
    }
    fs.push(depth_factor);

    let mut supply_keys: Vec<String> = def.supply_chain.iter().map(|s| format!("supply_chain:{s}")).collect();
    let mut supply: i64 = supply_keys.iter().map(|k| w.factor(k)).sum();
    if def.dependency_count > 5 {
        supply += w.factor("supply_chain:breadth");
        supply_keys.push("supply_chain:breadth".into());
    }
    fs.push(RiskFactor::new(
        "supply_chain",
        format!("{} dependencies", def.dependency_count),
        supply.min(CAP_SUPPLY_CHAIN),
        supply_keys,
    ));

    let mut input_keys: Vec<String> = def.input_sources.iter().map(|s| format!("input:{s}")).collect();
    let mut input: i64 = input_keys.iter().map(|k| w.factor(k)).sum();
    if def.input_sources.len() >= 3 {
        input += w.factor("input:breadth");
        input_keys.push("input:breadth".into());
    }
    fs.push(RiskFactor::new(
        "input_sources",
        format!("{} input source(s)", def.input_sources.len()),
        input.min(CAP_INPUT_SOURCES),
        input_keys,
    ));

    let approval = match (def.approval_status, def.review_expires_at) {
        (ApprovalStatus::Approved, Some(exp)) if exp < ctx.now => ApprovalStatus::Expired,
        (s, _) => s,
    };
    let ak = format!("approval:{approval}");
    fs.push(RiskFactor::new("approval", format!("approval {approval}"), w.factor(&ak), one(&ak)));

    let is_new = def.created_at.is_some_and(|c| ctx.now - c < Duration::days(NEW_AGENT_WINDOW_DAYS));
    fs.push(RiskFactor::new(
        "lifecycle_new",
        "created within the last week",
        if is_new { w.factor("lifecycle:new") } else { 0 },
        if is_new { one("lifecycle:new") } else { vec![] },
    ));
    let churn = def.version_count_30d >= CHURN_VERSIONS_30D;
    fs.push(RiskFactor::new(
        "lifecycle_churn",
        format!("{} versions in 30 days", def.version_count_30d),
        if churn { w.factor("lifecycle:churn") } else { 0 },
        if churn { one("lifecycle:churn") } else { vec![] },
    ));
    let unsigned = def.owner.is_none() || !def.definition_signed;
    fs.push(RiskFactor::new(
        "unsigned_ownership",
        if unsigned { "no owner or unsigned definition" } else { "owned and signed" },
        if unsigned { w.factor("lifecycle:unsigned") } else { 0 },
        if unsigned { one("lifecycle:unsigned") } else { vec![] },
    ));

    fs.push(trust_credits(def, w, ctx.now));

    let mut cost = 0;
    let mut cost_keys = vec![];
    if def.hourly_cost_peak * Decimal::from(HOURS_PER_MONTH) > Decimal::from(COST_BURST_RATIO) * def.monthly_cost_avg {
        cost += w.factor("cost:burst");
        cost_keys.push("cost:burst".to_string());
    }
    if def.monthly_budget.is_some_and(|b| b > Decimal::ZERO && def.monthly_cost_avg >= b) {
        cost += w.factor("cost:budget");
        cost_keys.push("cost:budget".to_string());
    }
    fs.push(RiskFactor::new("cost_burn", "cost anomaly", cost, cost_keys));

    fs.push(delegation_trust_premium(ctx.delegates, w, ctx.observation_gate));

    if ctx.lineage_increment != 0 {
        fs.push(RiskFactor::new("lineage", "inherited from an elevated ancestor", ctx.lineage_increment, vec![]));
    }

    let partial = sum_of(&fs).max(0);
    let mut severity = Decimal::ONE;
    let mut worst = None;
    let mut unknown = Vec::new();
    for id in &def.compliance_scope {
        match regimes.get(id) {
            Some(r) if r.severity_factor > severity => {
                severity = r.severity_factor;
                worst = Some(r.id.clone());
            }
            Some(_) => {}
            None => unknown.push(id.clone()),
        }
    }
    let elevation = round_half_even(Decimal::from(partial) * (severity - Decimal::ONE));
    fs.push(RiskFactor::new(
        "compliance",
        match &worst {
            Some(id) => format!("{id} severity x{severity}"),
            None => "no regulatory elevation".to_string(),
        },
        elevation,
        vec![],
    ));
    if !unknown.is_empty() {
        let mut f = RiskFactor::new("warning:unknown_regime", "unrecognised compliance scope", 0, vec![]);
        f.warning = Some(format!("unknown regime(s): {}", unknown.join(", ")));
        fs.push(f);
    }
    (fs, depth.truncated)
}

/// Audit credits (negative) or the missing-audit debit.
fn trust_credits(def: &AgentDefinition, w: &WeightTable, now: DateTime<Utc>) -> RiskFactor {
    if def.audit_evidence.is_empty() {
        return RiskFactor::new("trust_credits", "no audit evidence", w.factor("trust:missing_audit"), vec!["trust:missing_audit".into()]);
    }
    let mut latest: BTreeMap<AuditKind, DateTime<Utc>> = BTreeMap::new();
    for a in &def.audit_evidence {
        let slot = latest.entry(a.kind).or_insert(a.completed_at);
        *slot = (*slot).max(a.completed_at);
    }
    let mut delta = 0;
    let mut keys = Vec::new();
    for (kind, at) in &latest {
        let key = format!("trust:{kind}");
        let full = w.factor(&key);
        delta += if now - *at > Duration::days(AUDIT_HALF_LIFE_DAYS) { full / 2 } else { full };
        keys.push(key);
    }
    let label = latest.keys().map(|k| k.as_str()).collect::<Vec<_>>().join(", ");
    RiskFactor::new("trust_credits", format!("audits on file: {label}"), delta, keys)
}

/// Score a definition.
pub fn score_agent(
    def: &AgentDefinition,
    weights: &WeightTable,
    registry: &InteractionRegistry,
    regimes: &RegimeRegistry,
    ctx: &ScoreContext<'_>,
) -> AgentRiskScore {
    let (factors, depth_truncated) = additive_factors(def, weights, regimes, ctx);
    let additive = sum_of(&factors);
    let fired: Vec<&InteractionRule> = if ctx.disable_interactions {
        Vec::new()
    } else {
        registry.rules.iter().filter(|r| (r.condition)(def, &factors)).collect()
    };
    let multipliers: Vec<Decimal> = fired.iter().map(|r| r.multiplier).collect();
    let (final_score, applied) = apply_interactions(additive, &multipliers);
    AgentRiskScore {
        agent_key: def.agent_key.clone(),
        additive,
        additive_bucket: bucket_for_score(additive.clamp(0, 100), weights),
        fired_codes: fired.iter().map(|r| r.code.clone()).collect(),
        applied_multiplier: applied,
        final_score,
        bucket: bucket_for_score(final_score, weights),
        factors,
        depth_truncated,
    }
}

impl crate::Kya {
    pub fn interactions(&self) -> Arc<InteractionRegistry> {
        self.interactions.read().clone()
    }

    /// Add a rule for subsequent scores. In-flight scores keep the old set.
    pub fn register_interaction(&self, rule: InteractionRule) -> Result<(), ScoringError> {
        let mut slot = self.interactions.write();
        let next = slot.register(rule)?;
        *slot = Arc::new(next);
        Ok(())
    }

    /// Score against the tenant's effective weights and registered fleet.
    /// Delegates come from the latest registered snapshots; any pending
    /// lineage elevation is applied and consumed.
    pub fn score(&self, tenant: &str, def: &AgentDefinition) -> Result<AgentRiskScore, crate::KyaError> {
        let weights = self.effective_table(Some(tenant))?;
        let registry = self.interactions();
        let fleet = self.registered_agents(tenant)?;
        let mut graph: DelegationGraph =
            fleet.iter().map(|s| (s.agent_key.clone(), s.definition.can_delegate_to.clone())).collect();
        graph.insert(def.agent_key.clone(), def.can_delegate_to.clone());

        let now = self.now();
        let mut plain = ScoreContext::at(now);
        plain.observation_gate = self.config.observation_gate;
        let mut delegates = Vec::new();
        for key in &def.can_delegate_to {
            if let Some(snap) = fleet.iter().find(|s| &s.agent_key == key) {
                let bucket = score_agent(&snap.definition, &weights, &registry, &self.regimes, &plain).bucket;
                delegates.push(DelegateObservation {
                    agent_key: key.clone(),
                    bucket,
                    observations: self.invocation_count(tenant, key)?,
                });
            }
        }
        let ctx = ScoreContext {
            graph: Some(&graph),
            delegates: &delegates,
            lineage_increment: self.take_lineage(tenant, &def.agent_key),
            ..plain
        };
        Ok(score_agent(def, &weights, &registry, &self.regimes, &ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap()
    }

    fn w() -> WeightTable {
        WeightTable::defaults()
    }

    #[test]
    fn sensitivity_max_and_cap() {
        let set = |cs: &[DataClass]| cs.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(data_sensitivity_delta(&set(&[DataClass::Pii, DataClass::Phi]), &w()).delta, 30);
        assert_eq!(data_sensitivity_delta(&set(&[]), &w()).delta, 0);
        assert_eq!(data_sensitivity_delta(&set(&[DataClass::Itar, DataClass::UsTopSecret]), &w()).delta, 60);
    }

    #[test]
    fn caps_sum_then_cap() {
        let caps = |cs: &[SecurityCap]| cs.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(security_caps_delta(&caps(&[SecurityCap::CodeExecution, SecurityCap::ShellAccess]), &w()).delta, 45);
        assert_eq!(security_caps_delta(&caps(&[]), &w()).delta, 0);
        assert_eq!(security_caps_delta(&caps(SecurityCap::ALL), &w()).delta, 60);
    }

    #[test]
    fn apply_interactions_table_rows() {
        assert_eq!(apply_interactions(63, &[dec("1.5")]), (94, dec("1.5")));
        assert_eq!(apply_interactions(64, &[dec("1.2")]), (77, dec("1.2")));
        assert_eq!(apply_interactions(100, &[dec("1.3"), dec("1.5")]), (100, dec("1.95")));
        assert_eq!(apply_interactions(57, &[dec("1.2")]), (68, dec("1.2")));
        assert_eq!(apply_interactions(86, &[dec("1.3")]), (100, dec("1.3")));
        assert_eq!(apply_interactions(40, &[dec("1.5"), dec("1.5")]).1, MAX_MULTIPLIER);
    }

    #[test]
    fn buckets() {
        let t = w();
        assert_eq!(bucket_for_score(29, &t), RiskBucket::Low);
        assert_eq!(bucket_for_score(30, &t), RiskBucket::Medium);
        assert_eq!(bucket_for_score(85, &t), RiskBucket::Critical);
        assert_eq!(bucket_for_score(84, &t), RiskBucket::High);
        assert_eq!(bucket_for_score(0, &t), RiskBucket::Low);
    }

    #[test]
    fn registry_rules() {
        let r = InteractionRegistry::with_defaults();
        assert_eq!(r.rules().len(), 10);
        let awp = r.get("autonomous_writer_in_prod").unwrap();
        assert_eq!((awp.multiplier, awp.severity), (dec("1.3"), InteractionSeverity::Critical));
        let low = InteractionRule::new("x", dec("0.9"), InteractionSeverity::Warning, "", |_, _| true);
        assert!(matches!(r.register(low), Err(ScoringError::MultiplierBelowOne { .. })));
        let just_below = InteractionRule::new("y", dec("0.99"), InteractionSeverity::Warning, "", |_, _| true);
        assert!(r.register(just_below).is_err());
        let dup = InteractionRule::new("autonomous_writer_in_prod", dec("1.1"), InteractionSeverity::Warning, "", |_, _| true);
        assert!(matches!(r.register(dup), Err(ScoringError::DuplicateCode(_))));
        let ok = InteractionRule::new("z", dec("1.0"), InteractionSeverity::Warning, "", |_, _| true);
        assert_eq!(r.register(ok).unwrap().rules().len(), 11);
        assert_eq!(r.rules().len(), 10);
    }

    #[test]
    fn depth_examples() {
        let g = |edges: &[(&str, &[&str])]| -> DelegationGraph {
            edges.iter().map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect())).collect()
        };
        assert_eq!(delegation_depth(&g(&[("a", &[])]), "a"), DepthResult { depth: 0, truncated: false, cycle: false });
        assert_eq!(delegation_depth(&g(&[("a", &["b"]), ("b", &["c"])]), "a").depth, 2);
        let cyc = delegation_depth(&g(&[("a", &["b"]), ("b", &["a"])]), "a");
        assert!(cyc.truncated && cyc.cycle);
        assert_eq!(cyc.depth, MAX_HOPS);
    }

    #[test]
    fn premium_gate_and_cap() {
        let d = |k: &str, b, n| DelegateObservation { agent_key: k.into(), bucket: b, observations: n };
        assert_eq!(delegation_trust_premium(&[d("rr", RiskBucket::High, 100)], &w(), 10).delta, 8);
        assert_eq!(delegation_trust_premium(&[d("new", RiskBucket::Critical, 0)], &w(), 10).delta, 0);
        assert_eq!(delegation_trust_premium(&[d("m", RiskBucket::Medium, 100)], &w(), 10).delta, 0);
        let five: Vec<_> = (0..5).map(|i| d(&format!("a{i}"), RiskBucket::High, 50)).collect();
        assert_eq!(delegation_trust_premium(&five, &w(), 10).delta, 25);
    }

    #[test]
    fn approval_expires_and_credits_halve() {
        let regimes = RegimeRegistry::builtin();
        let reg = InteractionRegistry::with_defaults();
        let mut d = AgentDefinition::minimal("a");
        d.approval_status = ApprovalStatus::Approved;
        d.review_expires_at = Some(now() - Duration::days(1));
        d.audit_evidence.push(crate::model::AuditEvidence { kind: AuditKind::RedTeam, completed_at: now() - Duration::days(200) });
        let s = score_agent(&d, &w(), &reg, &regimes, &ScoreContext::at(now()));
        assert_eq!(s.factor("approval").unwrap().delta, 20);
        assert_eq!(s.factor("trust_credits").unwrap().delta, -2);
        assert_eq!(s.additive, s.factors.iter().map(|f| f.delta).sum::<i64>());
    }

    #[test]
    fn unknown_regime_is_a_warning_not_an_error() {
        let mut d = AgentDefinition::minimal("a");
        d.compliance_scope.insert("atlantis".into());
        let s = score_agent(&d, &w(), &InteractionRegistry::with_defaults(), &RegimeRegistry::builtin(), &ScoreContext::at(now()));
        let f = s.factor("warning:unknown_regime").unwrap();
        assert_eq!(f.delta, 0);
        assert!(f.warning.as_deref().unwrap().contains("atlantis"));
    }

    #[test]
    fn catalog_roles_mark_tools() {
        let cat: ToolCatalog = BTreeMap::from([
            ("lookup".to_string(), BTreeSet::new()),
            ("approve_loan".to_string(), BTreeSet::from(["underwriter".to_string()])),
            ("rotate_keys".to_string(), BTreeSet::from(["admin".to_string()])),
        ]);
        assert!(!is_write_tool("lookup", Some(&cat)));
        assert!(is_write_tool("approve_loan", Some(&cat)));
        assert!(is_admin_tool("rotate_keys", Some(&cat)));
        assert!(is_admin_tool("admin_reset", None));
    }
}
