//! Closed-set vocabularies and the agent definition shared by every module.
//!
//! Every enum here is compiled in and cannot be extended at runtime. Parsing
//! a string outside the set fails with [`UnknownEnumValue`], except for the
//! vocabularies that carry an explicit `unknown` member (input sources and
//! approval status), where unrecognised input lands in that bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// A string that is not a member of a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {set} value {value:?}")]
pub struct UnknownEnumValue {
    pub set: &'static str,
    pub value: String,
}

macro_rules! closed_set {
    (
        $(#[$meta:meta])*
        $name:ident : $set:literal {
            $($variant:ident => $text:literal),+ $(,)?
        }
        $(aliases { $($alias:literal => $target:ident),* })?
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const SET_NAME: &'static str = $set;

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = UnknownEnumValue;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    $($($alias => Ok($name::$target),)*)?
                    _ => Err(UnknownEnumValue { set: $set, value: s.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_set! {
    /// Human oversight mode. `autonomous` is accepted as a spelling of `none`.
    HumanLoop: "human_loop" {
        InLoop => "in_loop",
        OnLoop => "on_loop",
        Hybrid => "hybrid",
        None => "none",
    }
    aliases { "autonomous" => None }
}

closed_set! {
    AccessLevel: "access_level" {
        Read => "read",
        Write => "write",
        Admin => "admin",
    }
}

closed_set! {
    Provenance: "provenance" {
        Builtin => "builtin",
        Custom => "custom",
        Imported => "imported",
        Marketplace => "marketplace",
        ThirdParty => "third_party",
    }
}

closed_set! {
    ModelTrust: "model_trust" {
        Enterprise => "enterprise",
        Frontier => "frontier",
        Open => "open",
        SelfHosted => "self_hosted",
    }
}

closed_set! {
    DeploymentEnv: "deployment_env" {
        Dev => "dev",
        Staging => "staging",
        Prod => "prod",
        Enclave => "enclave",
    }
}

closed_set! {
    InputSource: "input_source" {
        ExternalApi => "external_api",
        WebFetch => "web_fetch",
        UserUpload => "user_upload",
        Unknown => "unknown",
    }
}

closed_set! {
    SupplyChainSource: "supply_chain" {
        FirstParty => "first_party",
        Marketplace => "marketplace",
        SelfHostedExt => "self_hosted_ext",
    }
}

closed_set! {
    ApprovalStatus: "approval_status" {
        Approved => "approved",
        Pending => "pending",
        Rejected => "rejected",
        Expired => "expired",
        Unknown => "unknown",
    }
}

closed_set! {
    /// Data classes, civilian through classified. Weights live in the
    /// weights module under `data_class:<name>`.
    DataClass: "data_class" {
        Public => "public",
        Internal => "internal",
        Confidential => "confidential",
        Pii => "pii",
        Financial => "financial",
        UsClassified => "us_classified",
        Phi => "phi",
        Cui => "cui",
        PhiGenetic => "phi_genetic",
        Itar => "itar",
        UsSecret => "us_secret",
        UsTopSecret => "us_top_secret",
    }
}

impl DataClass {
    /// Classes that carry national-security or export-control handling rules.
    pub fn is_classified(self) -> bool {
        matches!(
            self,
            DataClass::UsClassified
                | DataClass::Cui
                | DataClass::Itar
                | DataClass::UsSecret
                | DataClass::UsTopSecret
        )
    }

    pub fn is_personal(self) -> bool {
        matches!(self, DataClass::Pii | DataClass::Phi | DataClass::PhiGenetic)
    }
}

closed_set! {
    SecurityCap: "security_cap" {
        FsRead => "fs_read",
        NetworkEgress => "network_egress",
        CodeExecution => "code_execution",
        ShellAccess => "shell_access",
        ContainerExec => "container_exec",
    }
}

closed_set! {
    /// Runtime misbehaviour signals.
    SignalKind: "signal_kind" {
        OosTool => "oos_tool",
        RbacRefusal => "rbac_refusal",
        GovernanceBlock => "governance_block",
        DataLeak => "data_leak",
        CrossTenant => "cross_tenant",
        PolicyViolation => "policy_violation",
    }
}

closed_set! {
    QualityKind: "quality_kind" {
        Hallucination => "hallucination",
        QaIrrelevance => "qa_irrelevance",
        PromptInjectionAttempt => "prompt_injection_attempt",
    }
}

closed_set! {
    PrincipalKind: "principal_kind" {
        User => "user",
        Agent => "agent",
        ServiceAccount => "service_account",
    }
}

closed_set! {
    EvidenceKind: "evidence_kind" {
        Prompt => "prompt",
        Response => "response",
        ToolCall => "tool_call",
        ToolResult => "tool_result",
        DelegationMessage => "delegation_message",
        HilDecision => "hil_decision",
        SystemMessage => "system_message",
    }
}

closed_set! {
    Verdict: "verdict" {
        Allow => "allow",
        Block => "block",
        Redact => "redact",
        Throttle => "throttle",
        FlagForReview => "flag_for_review",
    }
}

closed_set! {
    AuditKind: "audit_kind" {
        RedTeam => "red_team",
        Fairness => "fairness",
        Citation => "citation",
    }
}

/// Parse with the `unknown` fallback for vocabularies that define one.
pub fn input_source_or_unknown(s: &str) -> InputSource {
    s.parse().unwrap_or(InputSource::Unknown)
}

pub fn approval_or_unknown(s: &str) -> ApprovalStatus {
    s.parse().unwrap_or(ApprovalStatus::Unknown)
}

/// A completed audit on file for an agent (red-team, fairness or citation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvidence {
    pub kind: AuditKind,
    pub completed_at: DateTime<Utc>,
}

/// The identifying definition of an agent.
///
/// The first block of fields is policy-bearing and feeds the canonical hash
/// (see [`crate::canonical::HASHED_FIELDS`]); everything after `compliance_scope`
/// is operational metadata that scoring may read but hashing ignores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDefinition {
    pub agent_key: String,
    pub name: String,
    pub description: String,
    pub system_prompt: String,
    pub model: String,
    pub tools: Vec<String>,
    pub denied_tools: Vec<String>,
    pub human_loop: HumanLoop,
    pub access_level: AccessLevel,
    pub can_override: bool,
    pub can_revert: bool,
    pub can_delegate_to: Vec<String>,
    pub required_roles: Vec<String>,
    pub extends: Option<String>,
    pub data_classes: BTreeSet<DataClass>,
    pub security_caps: BTreeSet<SecurityCap>,
    pub provenance: Provenance,
    pub model_trust: ModelTrust,
    pub compliance_scope: BTreeSet<String>,

    pub deployment_env: DeploymentEnv,
    pub input_sources: BTreeSet<InputSource>,
    pub supply_chain: BTreeSet<SupplyChainSource>,
    pub dependency_count: u32,
    pub approval_status: ApprovalStatus,
    pub review_expires_at: Option<DateTime<Utc>>,
    pub created_at: Option<DateTime<Utc>>,
    pub updated_at: Option<DateTime<Utc>>,
    pub version_count_30d: u32,
    pub owner: Option<String>,
    pub definition_signed: bool,
    pub monthly_cost_avg: Decimal,
    pub hourly_cost_peak: Decimal,
    pub monthly_budget: Option<Decimal>,
    pub tenant_count: u32,
    pub downstream_write_systems: Vec<String>,
    pub audit_evidence: Vec<AuditEvidence>,
    pub attributes: BTreeMap<String, String>,
}

impl AgentDefinition {
    /// A read-only, human-in-the-loop definition with every optional field at
    /// its default.
    pub fn minimal(agent_key: impl Into<String>) -> Self {
        let agent_key = agent_key.into();
        AgentDefinition {
            name: agent_key.clone(),
            agent_key,
            description: String::new(),
            system_prompt: String::new(),
            model: String::new(),
            tools: Vec::new(),
            denied_tools: Vec::new(),
            human_loop: HumanLoop::InLoop,
            access_level: AccessLevel::Read,
            can_override: false,
            can_revert: false,
            can_delegate_to: Vec::new(),
            required_roles: Vec::new(),
            extends: None,
            data_classes: BTreeSet::new(),
            security_caps: BTreeSet::new(),
            provenance: Provenance::Custom,
            model_trust: ModelTrust::Frontier,
            compliance_scope: BTreeSet::new(),
            deployment_env: DeploymentEnv::Dev,
            input_sources: BTreeSet::new(),
            supply_chain: BTreeSet::new(),
            dependency_count: 0,
            approval_status: ApprovalStatus::Unknown,
            review_expires_at: None,
            created_at: None,
            updated_at: None,
            version_count_30d: 0,
            owner: None,
            definition_signed: false,
            monthly_cost_avg: Decimal::ZERO,
            hourly_cost_peak: Decimal::ZERO,
            monthly_budget: None,
            tenant_count: 1,
            downstream_write_systems: Vec::new(),
            audit_evidence: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    /// Serialize to the definition-file JSON shape accepted by
    /// [`validate_definition`].
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("definition serializes")
    }
}

/// One reason a raw definition was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    #[error("field {field}: unknown value {value:?}")]
    UnknownEnumValue { field: String, value: String },
    #[error("tool {tool:?} is both allowed and denied")]
    DuplicateTool { tool: String },
    #[error("missing required field {field}")]
    MissingRequiredField { field: String },
    #[error("field {field}: expected {expected}")]
    InvalidType { field: String, expected: &'static str },
    #[error("unrecognised field {field}")]
    UnknownField { field: String },
    #[error("field {field}: {reason}")]
    InvalidValue { field: String, reason: String },
}

/// All violations found in one definition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid agent definition: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationErrors(pub Vec<Violation>);

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn type_err(&mut self, field: &str, expected: &'static str) {
        self.violations.push(Violation::InvalidType { field: field.to_string(), expected });
    }

    fn string(&mut self, field: &str, v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.type_err(field, "string");
                None
            }
        }
    }

    fn opt_string(&mut self, field: &str, v: &Value) -> Option<Option<String>> {
        match v {
            Value::Null => Some(None),
            Value::String(s) => Some(Some(s.clone())),
            _ => {
                self.type_err(field, "string or null");
                None
            }
        }
    }

    fn boolean(&mut self, field: &str, v: &Value) -> Option<bool> {
        match v {
            Value::Bool(b) => Some(*b),
            _ => {
                self.type_err(field, "boolean");
                None
            }
        }
    }

    fn count(&mut self, field: &str, v: &Value) -> Option<u32> {
        match v.as_u64().and_then(|n| u32::try_from(n).ok()) {
            Some(n) => Some(n),
            None => {
                self.type_err(field, "nonnegative integer");
                None
            }
        }
    }

    fn strings(&mut self, field: &str, v: &Value) -> Option<Vec<String>> {
        let Value::Array(items) = v else {
            self.type_err(field, "list of strings");
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match item {
                Value::String(s) => out.push(s.clone()),
                _ => {
                    self.type_err(field, "list of strings");
                    return None;
                }
            }
        }
        Some(out)
    }

    fn closed<T: FromStr<Err = UnknownEnumValue>>(&mut self, field: &str, v: &Value) -> Option<T> {
        let s = self.string(field, v)?;
        match s.parse() {
            Ok(t) => Some(t),
            Err(_) => {
                self.violations
                    .push(Violation::UnknownEnumValue { field: field.to_string(), value: s });
                None
            }
        }
    }

    fn closed_set<T: FromStr<Err = UnknownEnumValue> + Ord>(
        &mut self,
        field: &str,
        v: &Value,
    ) -> Option<BTreeSet<T>> {
        let items = self.strings(field, v)?;
        let mut out = BTreeSet::new();
        let mut ok = true;
        for s in items {
            match s.parse() {
                Ok(t) => {
                    out.insert(t);
                }
                Err(_) => {
                    ok = false;
                    self.violations
                        .push(Violation::UnknownEnumValue { field: field.to_string(), value: s });
                }
            }
        }
        ok.then_some(out)
    }

    fn timestamp(&mut self, field: &str, v: &Value) -> Option<Option<DateTime<Utc>>> {
        match v {
            Value::Null => Some(None),
            Value::String(s) => match DateTime::parse_from_rfc3339(s) {
                Ok(t) => Some(Some(t.with_timezone(&Utc))),
                Err(_) => {
                    self.type_err(field, "RFC 3339 timestamp");
                    None
                }
            },
            _ => {
                self.type_err(field, "RFC 3339 timestamp");
                None
            }
        }
    }

    fn decimal(&mut self, field: &str, v: &Value) -> Option<Decimal> {
        let parsed = match v {
            Value::Number(n) => n.to_string().parse::<Decimal>().ok(),
            Value::String(s) => s.parse::<Decimal>().ok(),
            _ => None,
        };
        match parsed {
            Some(d) if d >= Decimal::ZERO => Some(d),
            Some(_) => {
                self.violations.push(Violation::InvalidValue {
                    field: field.to_string(),
                    reason: "must be nonnegative".into(),
                });
                None
            }
            None => {
                self.type_err(field, "decimal");
                None
            }
        }
    }
}

/// Validate a parsed definition document.
///
/// Unknown fields are reported rather than dropped. `input_sources` and
/// `approval_status` map unrecognised strings to their `unknown` member;
/// every other closed-set field rejects them.
pub fn validate_definition(raw: &Map<String, Value>) -> Result<AgentDefinition, ValidationErrors> {
    let mut c = Checker { violations: Vec::new() };

    let agent_key = match raw.get("agent_key") {
        Some(v) => c.string("agent_key", v).unwrap_or_default(),
        None => {
            c.violations
                .push(Violation::MissingRequiredField { field: "agent_key".into() });
            String::new()
        }
    };
    if raw.contains_key("agent_key") && agent_key.trim().is_empty() {
        c.violations.push(Violation::InvalidValue {
            field: "agent_key".into(),
            reason: "must be non-empty".into(),
        });
    }
    let mut def = AgentDefinition::minimal(agent_key);
    let mut name_given = false;

    for (field, v) in raw {
        let f = field.as_str();
        match f {
            "agent_key" => {}
            "name" => {
                if let Some(s) = c.string(f, v) {
                    def.name = s;
                    name_given = true;
                }
            }
            "description" => def.description = c.string(f, v).unwrap_or_default(),
            "system_prompt" => def.system_prompt = c.string(f, v).unwrap_or_default(),
            "model" => def.model = c.string(f, v).unwrap_or_default(),
            "tools" => def.tools = c.strings(f, v).unwrap_or_default(),
            "denied_tools" => def.denied_tools = c.strings(f, v).unwrap_or_default(),
            "human_loop" => {
                if let Some(m) = c.closed(f, v) {
                    def.human_loop = m;
                }
            }
            "access_level" => {
                if let Some(a) = c.closed(f, v) {
                    def.access_level = a;
                }
            }
            "can_override" => def.can_override = c.boolean(f, v).unwrap_or(false),
            "can_revert" => def.can_revert = c.boolean(f, v).unwrap_or(false),
            "can_delegate_to" => def.can_delegate_to = c.strings(f, v).unwrap_or_default(),
            "required_roles" => def.required_roles = c.strings(f, v).unwrap_or_default(),
            "extends" => def.extends = c.opt_string(f, v).flatten(),
            "data_classes" => def.data_classes = c.closed_set(f, v).unwrap_or_default(),
            "security_caps" => def.security_caps = c.closed_set(f, v).unwrap_or_default(),
            "provenance" => {
                if let Some(p) = c.closed(f, v) {
                    def.provenance = p;
                }
            }
            "model_trust" => {
                if let Some(m) = c.closed(f, v) {
                    def.model_trust = m;
                }
            }
            "compliance_scope" => {
                def.compliance_scope = c.strings(f, v).unwrap_or_default().into_iter().collect()
            }
            "deployment_env" => {
                if let Some(d) = c.closed(f, v) {
                    def.deployment_env = d;
                }
            }
            "input_sources" => {
                def.input_sources = c
                    .strings(f, v)
                    .unwrap_or_default()
                    .iter()
                    .map(|s| input_source_or_unknown(s))
                    .collect()
            }
            "supply_chain" => def.supply_chain = c.closed_set(f, v).unwrap_or_default(),
            "dependency_count" => def.dependency_count = c.count(f, v).unwrap_or(0),
            "approval_status" => {
                def.approval_status =
                    c.string(f, v).map(|s| approval_or_unknown(&s)).unwrap_or(ApprovalStatus::Unknown)
            }
            "review_expires_at" => def.review_expires_at = c.timestamp(f, v).flatten(),
            "created_at" => def.created_at = c.timestamp(f, v).flatten(),
            "updated_at" => def.updated_at = c.timestamp(f, v).flatten(),
            "version_count_30d" => def.version_count_30d = c.count(f, v).unwrap_or(0),
            "owner" => def.owner = c.opt_string(f, v).flatten(),
            "definition_signed" => def.definition_signed = c.boolean(f, v).unwrap_or(false),
            "monthly_cost_avg" => def.monthly_cost_avg = c.decimal(f, v).unwrap_or_default(),
            "hourly_cost_peak" => def.hourly_cost_peak = c.decimal(f, v).unwrap_or_default(),
            "monthly_budget" => {
                def.monthly_budget = if v.is_null() { None } else { c.decimal(f, v) }
            }
            "tenant_count" => def.tenant_count = c.count(f, v).unwrap_or(1),
            "downstream_write_systems" => {
                def.downstream_write_systems = c.strings(f, v).unwrap_or_default()
            }
            "audit_evidence" => match serde_json::from_value::<Vec<AuditEvidence>>(v.clone()) {
                Ok(a) => def.audit_evidence = a,
                Err(_) => c.type_err(f, "list of {kind, completed_at}"),
            },
            "attributes" => match serde_json::from_value::<BTreeMap<String, String>>(v.clone()) {
                Ok(a) => def.attributes = a,
                Err(_) => c.type_err(f, "map of strings"),
            },
            _ => c.violations.push(Violation::UnknownField { field: field.clone() }),
        }
    }
    if !name_given {
        def.name = def.agent_key.clone();
    }

    let mut seen = BTreeSet::new();
    for tool in &def.tools {
        if !seen.insert(tool) {
            c.violations.push(Violation::InvalidValue {
                field: "tools".into(),
                reason: format!("tool {tool:?} listed twice"),
            });
        }
    }
    for tool in &def.denied_tools {
        if def.tools.contains(tool) {
            c.violations.push(Violation::DuplicateTool { tool: tool.clone() });
        }
    }

    if c.violations.is_empty() {
        Ok(def)
    } else {
        Err(ValidationErrors(c.violations))
    }
}

/// Parse and validate a UTF-8 JSON definition document.
pub fn parse_definition(json: &str) -> Result<AgentDefinition, ValidationErrors> {
    match serde_json::from_str::<Value>(json) {
        Ok(Value::Object(map)) => validate_definition(&map),
        _ => Err(ValidationErrors(vec![Violation::InvalidType {
            field: "<document>".into(),
            expected: "JSON object",
        }])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn minimal_definition_is_valid() {
        let def = validate_definition(&obj(json!({"agent_key": "reader"}))).unwrap();
        assert_eq!(def, AgentDefinition::minimal("reader"));
        assert_eq!(def.access_level, AccessLevel::Read);
        assert_eq!(def.human_loop, HumanLoop::InLoop);
    }

    #[test]
    fn typo_in_closed_set_is_rejected() {
        let err = validate_definition(&obj(json!({"agent_key": "a", "human_loop": "autonomus"})))
            .unwrap_err();
        assert_eq!(
            err.0,
            vec![Violation::UnknownEnumValue { field: "human_loop".into(), value: "autonomus".into() }]
        );
    }

    #[test]
    fn autonomous_is_an_alias_for_none() {
        let def =
            validate_definition(&obj(json!({"agent_key": "a", "human_loop": "autonomous"}))).unwrap();
        assert_eq!(def.human_loop, HumanLoop::None);
    }

    #[test]
    fn missing_agent_key() {
        let err = validate_definition(&obj(json!({"name": "x"}))).unwrap_err();
        assert!(err.0.contains(&Violation::MissingRequiredField { field: "agent_key".into() }));
    }

    #[test]
    fn unknown_fields_are_reported_not_dropped() {
        let err = validate_definition(&obj(json!({"agent_key": "a", "colour": "red"}))).unwrap_err();
        assert_eq!(err.0, vec![Violation::UnknownField { field: "colour".into() }]);
    }

    #[test]
    fn unknown_data_class_rejected_but_input_source_bucketed() {
        let err = validate_definition(&obj(json!({"agent_key": "a", "data_classes": ["plutonium"]})))
            .unwrap_err();
        assert!(matches!(&err.0[0], Violation::UnknownEnumValue { field, .. } if field == "data_classes"));

        let def = validate_definition(&obj(json!({"agent_key": "a", "input_sources": ["carrier_pigeon"]})))
            .unwrap();
        assert_eq!(def.input_sources, BTreeSet::from([InputSource::Unknown]));
        let def = validate_definition(&obj(json!({"agent_key": "a", "approval_status": "maybe"}))).unwrap();
        assert_eq!(def.approval_status, ApprovalStatus::Unknown);
    }

    #[test]
    fn all_violations_collected() {
        let err = validate_definition(&obj(json!({
            "agent_key": "a", "access_level": "root", "provenance": "moon", "can_override": "yes"
        })))
        .unwrap_err();
        assert_eq!(err.0.len(), 3);
    }

    // Disjointness oracle over small tool sets: a violation appears exactly
    // once per tool present in both lists.
    proptest! {
        #[test]
        fn duplicate_tool_iff_lists_intersect(
            allowed in proptest::collection::btree_set(0u8..6, 0..5),
            denied in proptest::collection::btree_set(0u8..6, 0..5),
        ) {
            let tools: Vec<String> = allowed.iter().map(|t| format!("t{t}")).collect();
            let denied_tools: Vec<String> = denied.iter().map(|t| format!("t{t}")).collect();
            let res = validate_definition(&obj(json!({
                "agent_key": "a", "tools": tools, "denied_tools": denied_tools
            })));
            let overlap: BTreeSet<String> =
                allowed.intersection(&denied).map(|t| format!("t{t}")).collect();
            match res {
                Ok(_) => prop_assert!(overlap.is_empty()),
                Err(e) => {
                    let dups: BTreeSet<String> = e.0.iter().filter_map(|v| match v {
                        Violation::DuplicateTool { tool } => Some(tool.clone()),
                        _ => None,
                    }).collect();
                    prop_assert_eq!(dups, overlap);
                }
            }
        }
    }

    fn arb_definition() -> impl Strategy<Value = AgentDefinition> {
        (
            "[a-z]{1,8}",
            prop::sample::select(HumanLoop::ALL),
            prop::sample::select(AccessLevel::ALL),
            prop::sample::select(Provenance::ALL),
            prop::sample::select(ModelTrust::ALL),
            prop::sample::select(DeploymentEnv::ALL),
            prop::sample::subsequence(DataClass::ALL, 0..4),
            prop::sample::subsequence(InputSource::ALL, 0..3),
            prop::sample::select(ApprovalStatus::ALL),
            any::<bool>(),
        )
            .prop_map(|(key, hl, al, pv, mt, env, dc, inputs, appr, flag)| {
                let mut d = AgentDefinition::minimal(key);
                d.human_loop = hl;
                d.access_level = al;
                d.provenance = pv;
                d.model_trust = mt;
                d.deployment_env = env;
                d.data_classes = dc.into_iter().collect();
                d.input_sources = inputs.into_iter().collect();
                d.approval_status = appr;
                d.can_override = flag;
                d.monthly_cost_avg = Decimal::new(1250, 2);
                d
            })
    }

    proptest! {
        #[test]
        fn validate_serialize_validate_is_idempotent(def in arb_definition()) {
            let once = validate_definition(def.to_json().as_object().unwrap()).unwrap();
            let twice = validate_definition(once.to_json().as_object().unwrap()).unwrap();
            prop_assert_eq!(&once, &def);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn closed_sets_reject_outsiders() {
        for s in ["", "OOS_TOOL", "oos-tool", "drift", "admin"] {
            assert!(s.parse::<SignalKind>().is_err());
            assert!(s.parse::<PrincipalKind>().is_err());
            assert!(s.parse::<EvidenceKind>().is_err());
            assert!(s.parse::<Verdict>().is_err());
        }
        assert_eq!(EvidenceKind::ALL.len(), 7);
        assert_eq!(PrincipalKind::ALL.len(), 3);
        assert_eq!(SignalKind::ALL.len(), 6);
        for k in SignalKind::ALL {
            assert_eq!(k.as_str().parse::<SignalKind>().unwrap(), *k);
        }
    }
}
