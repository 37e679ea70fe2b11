//! Three-channel weight tables with only-tighten composition.
//!
//! A weight is addressed by `(scope, key)`. The platform channel holds one
//! value per key and may move it freely. Tenant and recommendation writes
//! must dominate the current platform value under the scope's polarity, and
//! once accepted they are stored as the tighter of the old and new value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::evidence::{EvidenceError, NewEvent};
use crate::model::{DataClass, EvidenceKind, SignalKind};
use crate::storage::{Storage, StorageError, Store, PLATFORM_NS};
use crate::Kya;

pub const WEIGHTS_CHAIN: &str = "governance:weights";
pub const SUGGESTION_BUMP: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    FactorWeight,
    SignalDelta,
    BucketThreshold,
    DataClassMultiplier,
    ToolMultiplier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsTighter,
    LowerIsTighter,
}

impl Polarity {
    pub fn tighter(self, a: Decimal, b: Decimal) -> Decimal {
        match self {
            Polarity::HigherIsTighter => a.max(b),
            Polarity::LowerIsTighter => a.min(b),
        }
    }

    /// True when `value` is at least as tight as `base`.
    pub fn dominates(self, value: Decimal, base: Decimal) -> bool {
        match self {
            Polarity::HigherIsTighter => value >= base,
            Polarity::LowerIsTighter => value <= base,
        }
    }
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::FactorWeight,
        Scope::SignalDelta,
        Scope::BucketThreshold,
        Scope::DataClassMultiplier,
        Scope::ToolMultiplier,
    ];

    pub fn polarity(self) -> Polarity {
        match self {
            Scope::BucketThreshold => Polarity::LowerIsTighter,
            _ => Polarity::HigherIsTighter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::FactorWeight => "factor_weight",
            Scope::SignalDelta => "signal_delta",
            Scope::BucketThreshold => "bucket_threshold",
            Scope::DataClassMultiplier => "data_class_multiplier",
            Scope::ToolMultiplier => "tool_multiplier",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Scope {
    type Err = WeightsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| WeightsError::UnknownWeightKey(s.to_string()))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightKey {
    pub scope: Scope,
    pub key: String,
}

impl WeightKey {
    pub fn new(scope: Scope, key: impl Into<String>) -> Self {
        WeightKey { scope, key: key.into() }
    }

    pub fn factor(key: impl Into<String>) -> Self {
        Self::new(Scope::FactorWeight, key)
    }

    pub fn polarity(&self) -> Polarity {
        self.scope.polarity()
    }

    fn row_key(&self) -> String {
        format!("{}/{}", self.scope, self.key)
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scope, self.key)
    }
}

impl FromStr for WeightKey {
    type Err = WeightsError;

    /// `scope/key`, e.g. `factor_weight/data_class:pii`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scope, key) = s.split_once('/').ok_or_else(|| WeightsError::UnknownWeightKey(s.to_string()))?;
        Ok(WeightKey::new(scope.parse()?, key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Platform,
    Tenant,
    Recommendation,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Platform => "platform",
            Channel::Tenant => "tenant",
            Channel::Recommendation => "recommendation",
        }
    }
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("override loosens {key}: platform value {current_platform}, attempted {attempted}")]
    OverrideLoosens { key: WeightKey, current_platform: Decimal, attempted: Decimal },
    #[error("unknown weight key {0}")]
    UnknownWeightKey(String),
    #[error("{channel} channel cannot write {target}")]
    InvalidChannel { channel: &'static str, target: String },
    #[error("suggestion {0} is not pending")]
    NotPending(String),
    #[error("a reviewer identity is required")]
    MissingReviewer,
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

/// A default weight and the bound a suggestion may bump it to.
#[derive(Debug, Clone, Copy)]
struct Entry {
    value: i64,
    cap: i64,
}

type Tables<T> = [BTreeMap<String, T>; 5];

fn empty_tables<T>() -> Tables<T> {
    std::array::from_fn(|_| BTreeMap::new())
}

fn defaults() -> &'static Tables<Entry> {
    static TABLE: OnceLock<Tables<Entry>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Tables<Entry> = empty_tables();
        let mut f = |k: &str, value: i64, cap: i64| {
            t[Scope::FactorWeight.index()].insert(k.to_string(), Entry { value, cap });
        };
        f("base", 5, 100);
        f("tool:write", 4, 100);
        f("tool:admin", 8, 100);
        for (mode, v) in [("none", 30), ("on_loop", 15), ("hybrid", 10), ("in_loop", 0)] {
            f(&format!("governance:{mode}"), v, 100);
        }
        f("can_override", 12, 100);
        f("can_revert", 8, 100);
        f("access:write", 6, 100);
        f("access:admin", 10, 100);
        for (class, v) in [
            (DataClass::Public, 0),
            (DataClass::Internal, 5),
            (DataClass::Confidential, 10),
            (DataClass::Pii, 15),
            (DataClass::Financial, 20),
            (DataClass::UsClassified, 25),
            (DataClass::Phi, 30),
            (DataClass::Cui, 35),
            (DataClass::PhiGenetic, 40),
            (DataClass::Itar, 50),
            (DataClass::UsSecret, 55),
            (DataClass::UsTopSecret, 60),
        ] {
            f(&format!("data_class:{class}"), v, 60);
        }
        for (cap, v) in [
            ("fs_read", 5),
            ("network_egress", 10),
            ("code_execution", 20),
            ("shell_access", 25),
            ("container_exec", 30),
        ] {
            f(&format!("security_cap:{cap}"), v, 60);
        }
        for (p, v) in [("builtin", 0), ("custom", 5), ("imported", 10), ("marketplace", 15), ("third_party", 20)] {
            f(&format!("provenance:{p}"), v, 20);
        }
        for (m, v) in [("enterprise", 0), ("frontier", 3), ("open", 8), ("self_hosted", 10)] {
            f(&format!("model_trust:{m}"), v, 10);
        }
        for (d, v) in [("dev", 0), ("staging", 5), ("prod", 15), ("enclave", 25)] {
            f(&format!("deployment:{d}"), v, 25);
        }
        f("blast:multi_tenant", 10, 30);
        f("blast:downstream_write", 5, 30);
        f("delegation:per_hop", 5, 25);
        f("delegation:premium", 8, 25);
        for (s, v) in [("first_party", 0), ("marketplace", 5), ("self_hosted_ext", 10)] {
            f(&format!("supply_chain:{s}"), v, 35);
        }
        f("supply_chain:breadth", 5, 35);
        for (s, v) in [("external_api", 8), ("web_fetch", 15), ("user_upload", 15), ("unknown", 10)] {
            f(&format!("input:{s}"), v, 25);
        }
        f("input:breadth", 5, 25);
        for (a, v) in [("approved", 0), ("pending", 10), ("rejected", 30), ("expired", 20), ("unknown", 15)] {
            f(&format!("approval:{a}"), v, 100);
        }
        f("lifecycle:new", 8, 100);
        f("lifecycle:churn", 10, 100);
        f("lifecycle:unsigned", 5, 100);
        f("trust:red_team", -5, 0);
        f("trust:fairness", -3, 0);
        f("trust:citation", -2, 0);
        f("trust:missing_audit", 5, 100);
        f("cost:burst", 6, 100);
        f("cost:budget", 4, 100);

        for (kind, v) in [
            (SignalKind::OosTool, 3),
            (SignalKind::RbacRefusal, 2),
            (SignalKind::GovernanceBlock, 2),
            (SignalKind::DataLeak, 10),
            (SignalKind::CrossTenant, 15),
            (SignalKind::PolicyViolation, 4),
        ] {
            t[Scope::SignalDelta.index()].insert(kind.to_string(), Entry { value: v, cap: 100 });
        }
        for (b, v) in [("critical", 85), ("high", 60), ("medium", 30)] {
            t[Scope::BucketThreshold.index()].insert(b.to_string(), Entry { value: v, cap: 100 });
        }
        t
    })
}

/// Platform default for a key, or `None` if the key is not addressable.
pub fn default_value(key: &WeightKey) -> Option<Decimal> {
    if let Some(d) = defaults()[key.scope.index()].get(&key.key) {
        return Some(Decimal::from(d.value));
    }
    match key.scope {
        Scope::DataClassMultiplier => {
            let class = key.key.rsplit_once(':').map_or(key.key.as_str(), |(tool, class)| {
                if tool.is_empty() { "" } else { class }
            });
            class.parse::<DataClass>().ok().map(|_| Decimal::ONE)
        }
        Scope::ToolMultiplier if !key.key.trim().is_empty() => Some(Decimal::ONE),
        _ => None,
    }
}

/// Upper bound for a suggestion bump on a factor weight.
pub fn factor_cap(key: &str) -> Option<i64> {
    defaults()[Scope::FactorWeight.index()].get(key).map(|d| d.cap)
}

/// All statically-known keys with their defaults.
pub fn default_table() -> Vec<(WeightKey, Decimal)> {
    Scope::ALL
        .into_iter()
        .flat_map(|scope| {
            defaults()[scope.index()]
                .iter()
                .map(move |(k, d)| (WeightKey::new(scope, k.clone()), Decimal::from(d.value)))
        })
        .collect()
}

/// Resolved weights for one tenant.
#[derive(Debug, Clone)]
pub struct WeightTable {
    values: Tables<Decimal>,
}

fn round_even(d: Decimal) -> i64 {
    d.round_dp_with_strategy(0, RoundingStrategy::MidpointNearestEven).to_i64().unwrap_or(0)
}

impl WeightTable {
    pub fn defaults() -> Self {
        let mut values = empty_tables();
        for scope in Scope::ALL {
            for (k, d) in &defaults()[scope.index()] {
                values[scope.index()].insert(k.clone(), Decimal::from(d.value));
            }
        }
        WeightTable { values }
    }

    pub fn get(&self, scope: Scope, key: &str) -> Option<Decimal> {
        self.values[scope.index()].get(key).copied()
    }

    /// Move `key` toward `value` if that is tighter; never loosens.
    pub fn tighten(&mut self, key: &WeightKey, value: Decimal) {
        let pol = key.polarity();
        let start = default_value(key).unwrap_or(value);
        let slot = self.values[key.scope.index()].entry(key.key.clone()).or_insert(start);
        *slot = pol.tighter(*slot, value);
    }

    fn replace(&mut self, key: &WeightKey, value: Decimal) {
        self.values[key.scope.index()].insert(key.key.clone(), value);
    }

    /// Integer factor weight; zero for keys the table does not carry.
    pub fn factor(&self, key: &str) -> i64 {
        self.get(Scope::FactorWeight, key).map_or(0, round_even)
    }

    /// Debit magnitude for a signal kind.
    pub fn signal_delta(&self, kind: SignalKind) -> i64 {
        self.get(Scope::SignalDelta, kind.as_str()).map_or(0, round_even)
    }

    pub fn threshold(&self, bucket: &str) -> i64 {
        self.get(Scope::BucketThreshold, bucket).map_or(0, round_even)
    }

    /// Tightest of the class-wide and tool-specific multipliers.
    pub fn data_class_multiplier(&self, tool: Option<&str>, class: DataClass) -> Decimal {
        let mut m = self.get(Scope::DataClassMultiplier, class.as_str()).unwrap_or(Decimal::ONE);
        if let Some(tool) = tool {
            if let Some(t) = self.get(Scope::DataClassMultiplier, &format!("{tool}:{class}")) {
                m = m.max(t);
            }
        }
        m
    }

    pub fn tool_multiplier(&self, tool: &str) -> Decimal {
        self.get(Scope::ToolMultiplier, tool).unwrap_or(Decimal::ONE)
    }

    pub fn entries(&self) -> Vec<(WeightKey, Decimal)> {
        Scope::ALL
            .into_iter()
            .flat_map(|s| self.values[s.index()].iter().map(move |(k, v)| (WeightKey::new(s, k.clone()), *v)))
            .collect()
    }
}

impl std::default::Default for WeightTable {
    fn default() -> Self {
        Self::defaults()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightOverride {
    pub tenant_id: Option<String>,
    pub key: WeightKey,
    pub value: Decimal,
    pub channel: Channel,
    pub applied_at: DateTime<Utc>,
    pub applied_by: String,
}

/// Audit row for one accepted write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightChange {
    pub tenant_id: Option<String>,
    pub key: WeightKey,
    pub channel: Channel,
    pub previous: Option<Decimal>,
    pub requested: Decimal,
    pub stored: Decimal,
    pub applied_at: DateTime<Utc>,
    pub applied_by: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSuggestion {
    pub id: String,
    pub tenant_id: String,
    pub key: WeightKey,
    pub current: Decimal,
    pub proposed: Decimal,
    pub incident_id: String,
    pub agent_key: String,
    pub status: SuggestionStatus,
    pub reviewer: Option<String>,
    pub created_at: DateTime<Utc>,
    pub reviewed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

/// A resolved incident: which factor weights were in play and how bad it was.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    pub agent_key: String,
    pub severity: Severity,
    /// Factor-weight keys, e.g. `data_class:pii`.
    pub fired_factors: Vec<String>,
}

fn row_key(channel: Channel, key: &WeightKey) -> String {
    format!("{}|{}", channel.as_str(), key.row_key())
}

fn platform_row_key(key: &WeightKey) -> String {
    format!("platform|{}", key.row_key())
}

impl Kya {
    fn platform_value(&self, key: &WeightKey, default: Decimal) -> Result<Decimal, WeightsError> {
        Ok(self
            .storage
            .get_json::<WeightOverride>(Store::WeightOverrides, PLATFORM_NS, &platform_row_key(key))?
            .map_or(default, |o| o.value))
    }

    /// Audit keys sort in append order. A write stamped at or before the
    /// newest key reuses that stamp with the next counter.
    fn next_change_key(&self, ns: &str, micros: i64) -> Result<String, WeightsError> {
        let last = self.storage.last_json::<serde_json::Value>(Store::WeightChanges, ns, "")?.map(|(k, _)| k);
        let parsed = last.as_deref().and_then(|k| {
            let (ts, seq) = k.split_once('\u{1f}')?;
            Some((ts.parse::<i64>().ok()?, u64::from_str_radix(seq, 16).ok()?))
        });
        let (ts, seq) = match parsed {
            Some((ts, seq)) if ts >= micros => (ts, seq + 1),
            _ => (micros, 0),
        };
        Ok(format!("{ts:020}\u{1f}{seq:016x}"))
    }

    /// Write an override through the only-tighten check.
    ///
    /// The platform channel requires `tenant = None` and stores the value as
    /// given. Tenant writes require a tenant. Recommendation writes may target
    /// either; without a tenant they can only raise the platform value.
    pub fn set_override(
        &self,
        tenant: Option<&str>,
        key: &WeightKey,
        value: Decimal,
        channel: Channel,
        applied_by: &str,
    ) -> Result<WeightOverride, WeightsError> {
        let default = default_value(key).ok_or_else(|| WeightsError::UnknownWeightKey(key.to_string()))?;
        match (channel, tenant) {
            (Channel::Platform, Some(t)) => {
                return Err(WeightsError::InvalidChannel { channel: channel.as_str(), target: t.to_string() })
            }
            (Channel::Tenant, None) => {
                return Err(WeightsError::InvalidChannel { channel: channel.as_str(), target: PLATFORM_NS.into() })
            }
            _ => {}
        }
        let pol = key.polarity();
        self.storage.with_key_lock(&format!("weights\u{1f}{key}"), || {
            let platform = self.platform_value(key, default)?;
            if channel != Channel::Platform && !pol.dominates(value, platform) {
                return Err(WeightsError::OverrideLoosens {
                    key: key.clone(),
                    current_platform: platform,
                    attempted: value,
                });
            }
            let (ns, rk) = match tenant {
                Some(t) => (t, row_key(channel, key)),
                None => (PLATFORM_NS, platform_row_key(key)),
            };
            let previous = self.storage.get_json::<WeightOverride>(Store::WeightOverrides, ns, &rk)?.map(|o| o.value);
            let stored = match (channel, previous) {
                (Channel::Platform, _) | (_, None) => value,
                (_, Some(prev)) => pol.tighter(prev, value),
            };
            let now = self.now();
            let row = WeightOverride {
                tenant_id: tenant.map(str::to_string),
                key: key.clone(),
                value: stored,
                channel,
                applied_at: now,
                applied_by: applied_by.to_string(),
            };
            let change = WeightChange {
                tenant_id: row.tenant_id.clone(),
                key: key.clone(),
                channel,
                previous,
                requested: value,
                stored,
                applied_at: now,
                applied_by: applied_by.to_string(),
            };
            let row_bytes = Storage::encode_json(Store::WeightOverrides, &rk, &row)?;
            self.storage.with_key_lock(&format!("weight_changes\u{1f}{ns}"), || -> Result<(), WeightsError> {
                let change_key = self.next_change_key(ns, now.timestamp_micros().max(0))?;
                let change_bytes = Storage::encode_json(Store::WeightChanges, &change_key, &change)?;
                self.storage.write_batch(vec![
                    (Store::WeightOverrides, ns.to_string(), rk, Some(row_bytes)),
                    (Store::WeightChanges, ns.to_string(), change_key, Some(change_bytes)),
                ])?;
                Ok(())
            })?;
            self.append_event(
                ns,
                WEIGHTS_CHAIN,
                NewEvent::new(
                    EvidenceKind::SystemMessage,
                    json!({
                        "event": "weight_override",
                        "scope": key.scope,
                        "key": key.key,
                        "channel": channel,
                        "previous": previous,
                        "requested": value,
                        "stored": stored,
                        "applied_by": applied_by,
                    }),
                ),
            )?;
            Ok(row)
        })
    }

    /// Tightest of the platform value and every tenant row for `key`.
    pub fn effective_weight(&self, tenant: Option<&str>, key: &WeightKey) -> Result<Decimal, WeightsError> {
        let default = default_value(key).ok_or_else(|| WeightsError::UnknownWeightKey(key.to_string()))?;
        let mut value = self.platform_value(key, default)?;
        if let Some(t) = tenant {
            for channel in [Channel::Tenant, Channel::Recommendation] {
                if let Some(o) = self.storage.get_json::<WeightOverride>(Store::WeightOverrides, t, &row_key(channel, key))? {
                    value = key.polarity().tighter(value, o.value);
                }
            }
        }
        Ok(value)
    }

    /// Full resolved table for a tenant (or the platform alone).
    pub fn effective_table(&self, tenant: Option<&str>) -> Result<WeightTable, WeightsError> {
        let mut table = WeightTable::defaults();
        for (_, o) in self.storage.scan_json::<WeightOverride>(Store::WeightOverrides, PLATFORM_NS, "")? {
            table.replace(&o.key, o.value);
        }
        if let Some(t) = tenant {
            for (_, o) in self.storage.scan_json::<WeightOverride>(Store::WeightOverrides, t, "")? {
                table.tighten(&o.key, o.value);
            }
        }
        Ok(table)
    }

    pub fn list_overrides(&self, tenant: Option<&str>) -> Result<Vec<WeightOverride>, WeightsError> {
        let ns = tenant.unwrap_or(PLATFORM_NS);
        Ok(self.storage.scan_json(Store::WeightOverrides, ns, "")?.into_iter().map(|(_, o)| o).collect())
    }

    pub fn list_weight_changes(&self, tenant: Option<&str>) -> Result<Vec<WeightChange>, WeightsError> {
        let ns = tenant.unwrap_or(PLATFORM_NS);
        Ok(self.storage.scan_json(Store::WeightChanges, ns, "")?.into_iter().map(|(_, c)| c).collect())
    }

    /// Pending suggestions for a critical incident, one per fired factor that
    /// still has headroom below its cap. Re-proposing an incident returns the
    /// suggestions already on file.
    pub fn propose_from_incident(&self, tenant: &str, incident: &Incident) -> Result<Vec<WeightSuggestion>, WeightsError> {
        if incident.severity != Severity::Critical {
            return Ok(Vec::new());
        }
        let now = self.now();
        let mut out = Vec::new();
        let factors: BTreeSet<&String> = incident.fired_factors.iter().collect();
        for factor in factors {
            let Some(cap) = factor_cap(factor) else {
                log::warn!("incident {}: no factor weight named {factor}", incident.id);
                continue;
            };
            let id = format!("{}:{factor}", incident.id);
            if let Some(existing) = self.storage.get_json::<WeightSuggestion>(Store::WeightSuggestions, tenant, &id)? {
                out.push(existing);
                continue;
            }
            let key = WeightKey::factor(factor.clone());
            let current = self.effective_weight(Some(tenant), &key)?;
            let proposed = (current + Decimal::from(SUGGESTION_BUMP)).min(Decimal::from(cap));
            if proposed <= current {
                continue;
            }
            let s = WeightSuggestion {
                id: id.clone(),
                tenant_id: tenant.to_string(),
                key,
                current,
                proposed,
                incident_id: incident.id.clone(),
                agent_key: incident.agent_key.clone(),
                status: SuggestionStatus::Pending,
                reviewer: None,
                created_at: now,
                reviewed_at: None,
            };
            let (stored, _) = self.storage.insert_if_absent_json(Store::WeightSuggestions, tenant, &id, &s)?;
            out.push(stored);
        }
        Ok(out)
    }

    pub fn list_suggestions(&self, tenant: &str, status: Option<SuggestionStatus>) -> Result<Vec<WeightSuggestion>, WeightsError> {
        Ok(self
            .storage
            .scan_json::<WeightSuggestion>(Store::WeightSuggestions, tenant, "")?
            .into_iter()
            .map(|(_, s)| s)
            .filter(|s| status.is_none_or(|st| s.status == st))
            .collect())
    }

    fn review_suggestion(
        &self,
        tenant: &str,
        id: &str,
        reviewer: &str,
        approve: bool,
    ) -> Result<WeightSuggestion, WeightsError> {
        if reviewer.trim().is_empty() {
            return Err(WeightsError::MissingReviewer);
        }
        self.storage.with_key_lock(&format!("suggestion\u{1f}{tenant}\u{1f}{id}"), || {
            let mut s = self
                .storage
                .get_json::<WeightSuggestion>(Store::WeightSuggestions, tenant, id)?
                .filter(|s| s.status == SuggestionStatus::Pending)
                .ok_or_else(|| WeightsError::NotPending(id.to_string()))?;
            if approve {
                self.set_override(Some(tenant), &s.key, s.proposed, Channel::Tenant, reviewer)?;
            }
            s.status = if approve { SuggestionStatus::Approved } else { SuggestionStatus::Rejected };
            s.reviewer = Some(reviewer.to_string());
            s.reviewed_at = Some(self.now());
            self.storage.put_json(Store::WeightSuggestions, tenant, id, &s)?;
            self.append_event(
                tenant,
                WEIGHTS_CHAIN,
                NewEvent::new(
                    EvidenceKind::HilDecision,
                    json!({"event": "suggestion_review", "id": id, "status": s.status, "reviewer": reviewer}),
                ),
            )?;
            Ok(s)
        })
    }

    /// Apply a pending suggestion through [`Kya::set_override`]. A failure
    /// leaves it pending.
    pub fn approve_suggestion(&self, tenant: &str, id: &str, reviewer: &str) -> Result<WeightSuggestion, WeightsError> {
        self.review_suggestion(tenant, id, reviewer, true)
    }

    pub fn reject_suggestion(&self, tenant: &str, id: &str, reviewer: &str) -> Result<WeightSuggestion, WeightsError> {
        self.review_suggestion(tenant, id, reviewer, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(n: i64) -> Decimal {
        Decimal::from(n)
    }

    fn pii() -> WeightKey {
        WeightKey::factor("data_class:pii")
    }

    #[test]
    fn polarity_per_scope() {
        assert_eq!(Scope::BucketThreshold.polarity(), Polarity::LowerIsTighter);
        for s in [Scope::FactorWeight, Scope::SignalDelta, Scope::DataClassMultiplier, Scope::ToolMultiplier] {
            assert_eq!(s.polarity(), Polarity::HigherIsTighter);
        }
    }

    #[test]
    fn defaults_known() {
        assert_eq!(default_value(&pii()), Some(d(15)));
        assert_eq!(default_value(&WeightKey::new(Scope::BucketThreshold, "critical")), Some(d(85)));
        assert_eq!(default_value(&WeightKey::new(Scope::DataClassMultiplier, "ofac_screen:financial")), Some(Decimal::ONE));
        assert_eq!(default_value(&WeightKey::new(Scope::DataClassMultiplier, "ofac_screen:gold")), None);
        assert_eq!(default_value(&WeightKey::factor("nonsense")), None);
        assert_eq!("factor_weight/data_class:pii".parse::<WeightKey>().unwrap(), pii());
    }

    #[test]
    fn tenant_over_platform() {
        let k = Kya::in_memory_for_tests();
        k.set_override(None, &pii(), d(12), Channel::Platform, "admin").unwrap();
        assert_eq!(k.effective_weight(Some("t"), &pii()).unwrap(), d(12));
        k.set_override(Some("t"), &pii(), d(30), Channel::Tenant, "op").unwrap();
        assert_eq!(k.effective_weight(Some("t"), &pii()).unwrap(), d(30));
        let err = k.set_override(Some("t"), &pii(), d(5), Channel::Tenant, "op").unwrap_err();
        assert!(matches!(err, WeightsError::OverrideLoosens { attempted, .. } if attempted == d(5)));
        k.set_override(None, &pii(), d(10), Channel::Platform, "admin").unwrap();
        assert_eq!(k.effective_weight(None, &pii()).unwrap(), d(10));
        assert_eq!(k.effective_weight(Some("t"), &pii()).unwrap(), d(30));
        assert_eq!(k.list_weight_changes(None).unwrap().len(), 2);
        assert_eq!(k.list_weight_changes(Some("t")).unwrap().len(), 1);
    }

    #[test]
    fn threshold_lower_is_tighter() {
        let k = Kya::in_memory_for_tests();
        let crit = WeightKey::new(Scope::BucketThreshold, "critical");
        k.set_override(Some("t"), &crit, d(80), Channel::Tenant, "op").unwrap();
        assert_eq!(k.effective_weight(Some("t"), &crit).unwrap(), d(80));
        assert!(k.set_override(Some("t"), &crit, d(90), Channel::Tenant, "op").is_err());
        assert_eq!(k.effective_table(Some("t")).unwrap().threshold("critical"), 80);
    }

    #[test]
    fn channel_target_rules() {
        let k = Kya::in_memory_for_tests();
        assert!(matches!(
            k.set_override(Some("t"), &pii(), d(20), Channel::Platform, "x"),
            Err(WeightsError::InvalidChannel { .. })
        ));
        assert!(matches!(
            k.set_override(None, &pii(), d(20), Channel::Tenant, "x"),
            Err(WeightsError::InvalidChannel { .. })
        ));
        assert!(matches!(
            k.set_override(None, &pii(), d(10), Channel::Recommendation, "x"),
            Err(WeightsError::OverrideLoosens { .. })
        ));
    }

    #[test]
    fn suggestions_flow() {
        let k = Kya::in_memory_for_tests();
        let incident = Incident {
            id: "inc-1".into(),
            agent_key: "risk_review".into(),
            severity: Severity::Critical,
            fired_factors: vec!["data_class:pii".into()],
        };
        let s = k.propose_from_incident("t", &incident).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].current, s[0].proposed, s[0].status), (d(15), d(17), SuggestionStatus::Pending));
        assert_eq!(k.propose_from_incident("t", &incident).unwrap(), s);
        assert_eq!(k.list_suggestions("t", None).unwrap().len(), 1);
        assert_eq!(k.effective_weight(Some("t"), &pii()).unwrap(), d(15));

        let minor = Incident { severity: Severity::High, id: "inc-2".into(), ..incident.clone() };
        assert!(k.propose_from_incident("t", &minor).unwrap().is_empty());

        assert!(matches!(k.approve_suggestion("t", &s[0].id, " "), Err(WeightsError::MissingReviewer)));
        k.set_override(None, &pii(), d(20), Channel::Platform, "admin").unwrap();
        assert!(matches!(k.approve_suggestion("t", &s[0].id, "rev"), Err(WeightsError::OverrideLoosens { .. })));
        assert_eq!(k.list_suggestions("t", Some(SuggestionStatus::Pending)).unwrap().len(), 1);

        k.set_override(None, &pii(), d(15), Channel::Platform, "admin").unwrap();
        let done = k.approve_suggestion("t", &s[0].id, "rev").unwrap();
        assert_eq!(done.reviewer.as_deref(), Some("rev"));
        assert_eq!(k.effective_weight(Some("t"), &pii()).unwrap(), d(17));
        assert!(matches!(k.approve_suggestion("t", &s[0].id, "rev"), Err(WeightsError::NotPending(_))));
    }

    #[test]
    fn bump_respects_cap_and_credit_ceiling() {
        let k = Kya::in_memory_for_tests();
        let inc = Incident {
            id: "i".into(),
            agent_key: "a".into(),
            severity: Severity::Critical,
            fired_factors: vec!["data_class:us_top_secret".into(), "trust:citation".into(), "model_trust:open".into()],
        };
        let s = k.propose_from_incident("t", &inc).unwrap();
        let by_key: BTreeMap<String, Decimal> = s.iter().map(|s| (s.key.key.clone(), s.proposed)).collect();
        assert!(!by_key.contains_key("data_class:us_top_secret"));
        assert_eq!(by_key["trust:citation"], d(0));
        assert_eq!(by_key["model_trust:open"], d(10));
    }

    #[test]
    fn reject_leaves_weights_alone() {
        let k = Kya::in_memory_for_tests();
        let inc = Incident {
            id: "i".into(),
            agent_key: "a".into(),
            severity: Severity::Critical,
            fired_factors: vec!["base".into()],
        };
        let s = k.propose_from_incident("t", &inc).unwrap();
        let r = k.reject_suggestion("t", &s[0].id, "rev").unwrap();
        assert_eq!(r.status, SuggestionStatus::Rejected);
        assert_eq!(k.effective_weight(Some("t"), &WeightKey::factor("base")).unwrap(), d(5));
    }
}
