//! Principal trust, rogue signals, burst detection and the action gate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::evidence::{EvidenceError, EvidenceEvent, NewEvent};
use crate::model::{DataClass, EvidenceKind, PrincipalKind, QualityKind, SignalKind, UnknownEnumValue, Verdict};
use crate::scoring::{bucket_for_score, RiskBucket};
use crate::storage::{StorageError, Store, SEP};
use crate::weights::{WeightTable, WeightsError};
use crate::Kya;

pub const START_TRUST: i64 = 50;
pub const MAX_ROGUE_SCORE: i64 = 50;

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("unknown signal kind: {0}")]
    UnknownSignalKind(String),
    #[error("unknown principal kind: {0}")]
    UnknownPrincipalKind(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustBucket {
    Blocked,
    Risky,
    Neutral,
    Trusted,
}

impl TrustBucket {
    pub fn as_str(self) -> &'static str {
        match self {
            TrustBucket::Blocked => "blocked",
            TrustBucket::Risky => "risky",
            TrustBucket::Neutral => "neutral",
            TrustBucket::Trusted => "trusted",
        }
    }
}

impl fmt::Display for TrustBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn bucket_for_trust(score: i64) -> TrustBucket {
    match score {
        s if s >= 75 => TrustBucket::Trusted,
        s if s >= 40 => TrustBucket::Neutral,
        s if s >= 15 => TrustBucket::Risky,
        _ => TrustBucket::Blocked,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalTrustRecord {
    pub tenant_id: String,
    pub principal_kind: PrincipalKind,
    pub principal_id: String,
    pub trust_score: i64,
    pub signal_counts: BTreeMap<SignalKind, u64>,
    #[serde(default)]
    pub quality_counts: BTreeMap<QualityKind, u64>,
    pub last_signal_at: Option<DateTime<Utc>>,
    pub updated_at: DateTime<Utc>,
    /// Score right after the most recent debit; recovery is measured from here.
    pub score_at_last_signal: i64,
}

impl PrincipalTrustRecord {
    pub fn new(tenant: &str, kind: PrincipalKind, id: &str, now: DateTime<Utc>) -> Self {
        PrincipalTrustRecord {
            tenant_id: tenant.to_string(),
            principal_kind: kind,
            principal_id: id.to_string(),
            trust_score: START_TRUST,
            signal_counts: BTreeMap::new(),
            quality_counts: BTreeMap::new(),
            last_signal_at: None,
            updated_at: now,
            score_at_last_signal: START_TRUST,
        }
    }

    pub fn bucket(&self) -> TrustBucket {
        bucket_for_trust(self.trust_score)
    }
}

/// Linear recovery toward the starting score, `rate` points per full idle
/// day since the last signal. Scores at or above the start are left alone.
pub fn apply_time_decay(mut record: PrincipalTrustRecord, now: DateTime<Utc>, rate: i64) -> PrincipalTrustRecord {
    let Some(last) = record.last_signal_at else {
        return record;
    };
    if record.trust_score >= START_TRUST {
        return record;
    }
    let idle_days = (now - last).num_days().max(0);
    let recovered = (record.score_at_last_signal + idle_days * rate).min(START_TRUST);
    if recovered > record.trust_score {
        record.trust_score = recovered;
        record.updated_at = now;
    }
    record
}

fn principal_key(kind: PrincipalKind, id: &str) -> String {
    format!("{kind}{SEP}{id}")
}

pub fn signal_chain(kind: PrincipalKind, id: &str) -> String {
    format!("signals:{kind}:{id}")
}

/// Counter name for a signal kind.
pub fn counter_name(kind: SignalKind) -> &'static str {
    match kind {
        SignalKind::OosTool => "veldt_agent_oos_tool_attempts_total",
        SignalKind::RbacRefusal => "veldt_tool_rbac_refusals_total",
        SignalKind::GovernanceBlock => "veldt_governance_action_gate_total{verdict=block}",
        SignalKind::DataLeak => "veldt_agent_data_leak_total",
        SignalKind::CrossTenant => "veldt_agent_cross_tenant_attempts_total",
        SignalKind::PolicyViolation => "veldt_agent_policy_violations_total",
    }
}

pub fn quality_counter_name(kind: QualityKind) -> String {
    format!("veldt_agent_quality_{kind}_total")
}

fn gate_counter_name(verdict: Verdict) -> String {
    format!("veldt_governance_action_gate_total{{verdict={verdict}}}")
}

/// In-process monotonic counters.
#[derive(Debug, Default)]
pub struct Counters {
    values: Mutex<BTreeMap<String, u64>>,
}

impl Counters {
    pub fn incr(&self, name: &str) {
        *self.values.lock().entry(name.to_string()).or_default() += 1;
    }

    pub fn get(&self, name: &str) -> u64 {
        self.values.lock().get(name).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.values.lock().clone()
    }
}

/// Per-kind event timestamps for one principal, covering the trailing hour.
#[derive(Debug, Clone, Default)]
pub struct BurstWindow {
    events: BTreeMap<SignalKind, VecDeque<DateTime<Utc>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BurstAlert {
    pub kind: SignalKind,
    pub current_minute: u64,
    pub baseline_hour: u64,
    pub factor: f64,
}

impl BurstWindow {
    pub fn record(&mut self, kind: SignalKind, at: DateTime<Utc>) {
        let q = self.events.entry(kind).or_default();
        q.push_back(at);
        let horizon = at - Duration::hours(1) - Duration::minutes(1);
        while q.front().is_some_and(|t| *t <= horizon) {
            q.pop_front();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.values().all(VecDeque::is_empty)
    }

    /// Alert where the last minute's count exceeds `factor` times the per-minute
    /// rate of the hour before it. An empty baseline alerts on any activity.
    pub fn detect(&self, now: DateTime<Utc>, factor: f64) -> Vec<BurstAlert> {
        let minute_start = now - Duration::minutes(1);
        let hour_start = minute_start - Duration::hours(1);
        let mut alerts = Vec::new();
        for (kind, q) in &self.events {
            let current = q.iter().filter(|t| **t > minute_start && **t <= now).count() as u64;
            let baseline = q.iter().filter(|t| **t > hour_start && **t <= minute_start).count() as u64;
            let fire = if baseline == 0 {
                current > 0
            } else {
                current as f64 > factor * baseline as f64 / 60.0
            };
            if fire {
                alerts.push(BurstAlert { kind: *kind, current_minute: current, baseline_hour: baseline, factor });
            }
        }
        alerts
    }
}

/// Signal and quality counts inside one window.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RogueReport {
    pub window_secs: i64,
    pub signal_counts: BTreeMap<SignalKind, u64>,
    pub quality_counts: BTreeMap<QualityKind, u64>,
}

pub const QUALITY_WEIGHT: f64 = 1.0;

/// `min(50, Σ w·log2(1+c))`, rounded half-to-even. Signal weights are the
/// debit magnitudes in `weights`.
pub fn rogue_score(report: &RogueReport, weights: &WeightTable) -> i64 {
    let signal: f64 = report
        .signal_counts
        .iter()
        .map(|(k, c)| weights.signal_delta(*k) as f64 * (1.0 + *c as f64).log2())
        .sum();
    let quality: f64 = report.quality_counts.values().map(|c| QUALITY_WEIGHT * (1.0 + *c as f64).log2()).sum();
    let raw = (signal + quality).min(MAX_ROGUE_SCORE as f64);
    (raw.round_ties_even() as i64).clamp(0, MAX_ROGUE_SCORE)
}

/// Result of one signal: the emitter and, when attributed elsewhere, the actor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalOutcome {
    pub principal: PrincipalTrustRecord,
    pub actor: Option<PrincipalTrustRecord>,
    pub delta: i64,
    pub events: Vec<EvidenceEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RbacOutcome {
    Allow,
    Refusal,
}

/// Allowed when the tool needs no role or the caller holds one of them.
pub fn tool_rbac_check(caller_roles: &BTreeSet<String>, required: &BTreeSet<String>) -> RbacOutcome {
    if required.is_empty() || !caller_roles.is_disjoint(required) {
        RbacOutcome::Allow
    } else {
        RbacOutcome::Refusal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateAction {
    pub tool: String,
    pub data_classes: BTreeSet<DataClass>,
    pub write_capability: bool,
    pub out_of_scope_tool: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GatePolicy {
    pub weights: WeightTable,
    /// Classes the tenant allows in output; `None` allows every class.
    pub sanctioned_classes: Option<BTreeSet<DataClass>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateVerdict {
    pub verdict: Verdict,
    pub reason: String,
    pub effective_score: i64,
    pub effective_bucket: RiskBucket,
    pub signals: Vec<SignalKind>,
    pub evidence_ref: Option<String>,
}

/// Decide one action. Depends only on its arguments.
pub fn evaluate_action_gate(agent_score: i64, action: &GateAction, policy: &GatePolicy) -> GateVerdict {
    let w = &policy.weights;
    let class_mult = action
        .data_classes
        .iter()
        .map(|c| w.data_class_multiplier(Some(&action.tool), *c))
        .max()
        .unwrap_or(Decimal::ONE);
    let effective = (Decimal::from(agent_score) * w.tool_multiplier(&action.tool) * class_mult)
        .round_dp_with_strategy(0, RoundingStrategy::MidpointNearestEven)
        .to_i64()
        .unwrap_or(100)
        .clamp(0, 100);
    let bucket = bucket_for_score(effective, w);
    let verdict = |verdict, reason: String, signals| GateVerdict {
        verdict,
        reason,
        effective_score: effective,
        effective_bucket: bucket,
        signals,
        evidence_ref: None,
    };
    if action.out_of_scope_tool {
        return verdict(
            Verdict::Block,
            format!("tool {} is outside the sanctioned list", action.tool),
            vec![SignalKind::OosTool, SignalKind::PolicyViolation],
        );
    }
    if let Some(allowed) = &policy.sanctioned_classes {
        let leaked: Vec<&str> = action.data_classes.difference(allowed).map(|c| c.as_str()).collect();
        if !leaked.is_empty() {
            return verdict(Verdict::Block, format!("unsanctioned data class: {}", leaked.join(", ")), vec![SignalKind::DataLeak]);
        }
    }
    if bucket == RiskBucket::Critical && action.write_capability {
        return verdict(
            Verdict::FlagForReview,
            format!("critical effective score {effective} on a write-capable action"),
            vec![],
        );
    }
    verdict(Verdict::Allow, "within policy".into(), vec![])
}

impl Kya {
    pub fn principal_trust(&self, tenant: &str, kind: PrincipalKind, id: &str) -> Result<Option<PrincipalTrustRecord>, TrustError> {
        let rec: Option<PrincipalTrustRecord> = self.storage.get_json(Store::PrincipalTrust, tenant, &principal_key(kind, id))?;
        Ok(rec.map(|r| apply_time_decay(r, self.now(), self.config.decay_per_day)))
    }

    pub fn list_principals(&self, tenant: &str) -> Result<Vec<PrincipalTrustRecord>, TrustError> {
        let now = self.now();
        Ok(self
            .storage
            .scan_json::<PrincipalTrustRecord>(Store::PrincipalTrust, tenant, "")?
            .into_iter()
            .map(|(_, r)| apply_time_decay(r, now, self.config.decay_per_day))
            .collect())
    }

    fn debit(&self, tenant: &str, kind: PrincipalKind, id: &str, signal: SignalKind, delta: i64) -> Result<PrincipalTrustRecord, TrustError> {
        let now = self.now();
        let rate = self.config.decay_per_day;
        Ok(self.storage.upsert_json(Store::PrincipalTrust, tenant, &principal_key(kind, id), |cur: Option<PrincipalTrustRecord>| {
            let mut r = apply_time_decay(cur.unwrap_or_else(|| PrincipalTrustRecord::new(tenant, kind, id, now)), now, rate);
            r.trust_score = (r.trust_score - delta).clamp(0, 100);
            *r.signal_counts.entry(signal).or_default() += 1;
            r.last_signal_at = Some(now);
            r.score_at_last_signal = r.trust_score;
            r.updated_at = now;
            r
        })?)
    }

    /// Debit the emitting principal and, when the actor is a different
    /// agent, the actor too. The actor defaults to the emitter for agents.
    pub fn record_principal_signal(
        &self,
        tenant: &str,
        kind: PrincipalKind,
        id: &str,
        signal: SignalKind,
        actor_agent_key: Option<&str>,
    ) -> Result<SignalOutcome, TrustError> {
        let delta = self.effective_table(Some(tenant))?.signal_delta(signal);
        let actor = actor_agent_key.or((kind == PrincipalKind::Agent).then_some(id));
        let principal = self.debit(tenant, kind, id, signal, delta)?;
        let attributed = actor.filter(|a| kind != PrincipalKind::Agent || *a != id);
        let actor_rec = match attributed {
            Some(a) => Some(self.debit(tenant, PrincipalKind::Agent, a, signal, delta)?),
            None => None,
        };

        let now = self.now();
        let mut events = Vec::with_capacity(2);
        let mut log = |rec: &PrincipalTrustRecord, role: &str| -> Result<(), TrustError> {
            let mut ev = NewEvent::new(
                EvidenceKind::SystemMessage,
                json!({
                    "event": "rogue_signal",
                    "signal": signal,
                    "role": role,
                    "principal_kind": rec.principal_kind,
                    "principal_id": rec.principal_id,
                    "emitter": format!("{kind}:{id}"),
                    "delta": -delta,
                    "score_after": rec.trust_score,
                }),
            )
            .at(now);
            if let Some(a) = actor {
                ev = ev.actor(a);
            }
            events.push(self.append_event(tenant, &signal_chain(rec.principal_kind, &rec.principal_id), ev)?);
            Ok(())
        };
        log(&principal, "emitter")?;
        if let Some(a) = &actor_rec {
            log(a, "actor")?;
        }

        self.counters.incr(counter_name(signal));
        {
            let mut bursts = self.bursts.lock();
            bursts.entry(format!("{tenant}{SEP}{kind}{SEP}{id}")).or_default().record(signal, now);
            if let Some(a) = attributed {
                bursts.entry(format!("{tenant}{SEP}agent{SEP}{a}")).or_default().record(signal, now);
            }
        }
        Ok(SignalOutcome { principal, actor: actor_rec, delta, events })
    }

    /// Parse-checked variant taking the kinds as strings.
    pub fn record_principal_signal_str(
        &self,
        tenant: &str,
        kind: &str,
        id: &str,
        signal: &str,
        actor_agent_key: Option<&str>,
    ) -> Result<SignalOutcome, TrustError> {
        let kind: PrincipalKind = kind.parse().map_err(|e: UnknownEnumValue| TrustError::UnknownPrincipalKind(e.value))?;
        let signal: SignalKind = signal.parse().map_err(|e: UnknownEnumValue| TrustError::UnknownSignalKind(e.value))?;
        self.record_principal_signal(tenant, kind, id, signal, actor_agent_key)
    }

    /// Quality observations feed the rogue score but do not move trust.
    pub fn record_quality_signal(
        &self,
        tenant: &str,
        kind: PrincipalKind,
        id: &str,
        quality: QualityKind,
    ) -> Result<PrincipalTrustRecord, TrustError> {
        let now = self.now();
        let rate = self.config.decay_per_day;
        let rec = self.storage.upsert_json(Store::PrincipalTrust, tenant, &principal_key(kind, id), |cur: Option<PrincipalTrustRecord>| {
            let mut r = apply_time_decay(cur.unwrap_or_else(|| PrincipalTrustRecord::new(tenant, kind, id, now)), now, rate);
            *r.quality_counts.entry(quality).or_default() += 1;
            r.updated_at = now;
            r
        })?;
        self.append_event(
            tenant,
            &signal_chain(kind, id),
            NewEvent::new(
                EvidenceKind::SystemMessage,
                json!({"event": "quality_signal", "quality": quality, "principal_kind": kind, "principal_id": id}),
            )
            .at(now),
        )?;
        self.counters.incr(&quality_counter_name(quality));
        Ok(rec)
    }

    /// Counts over the configured window, read from the principal's chain.
    pub fn rogue_report(&self, tenant: &str, kind: PrincipalKind, id: &str) -> Result<RogueReport, TrustError> {
        let now = self.now();
        let from = now - self.config.rogue_window;
        let mut report = RogueReport { window_secs: self.config.rogue_window.num_seconds(), ..Default::default() };
        for e in self.chain_events(tenant, &signal_chain(kind, id))? {
            if e.occurred_at <= from || e.occurred_at > now {
                continue;
            }
            if let Some(s) = e.payload.get("signal").and_then(Value::as_str).and_then(|s| s.parse().ok()) {
                *report.signal_counts.entry(s).or_default() += 1;
            } else if let Some(q) = e.payload.get("quality").and_then(Value::as_str).and_then(|s| s.parse().ok()) {
                *report.quality_counts.entry(q).or_default() += 1;
            }
        }
        Ok(report)
    }

    pub fn principal_rogue_score(&self, tenant: &str, kind: PrincipalKind, id: &str) -> Result<i64, TrustError> {
        let report = self.rogue_report(tenant, kind, id)?;
        Ok(rogue_score(&report, &self.effective_table(Some(tenant))?))
    }

    pub fn detect_burst_anomalies(&self, tenant: &str, kind: PrincipalKind, id: &str) -> Vec<BurstAlert> {
        let now = self.now();
        self.bursts
            .lock()
            .get(&format!("{tenant}{SEP}{kind}{SEP}{id}"))
            .map(|w| w.detect(now, self.config.burst_factor))
            .unwrap_or_default()
    }

    /// RBAC check that records an `rbac_refusal` on refusal.
    pub fn check_tool_rbac(
        &self,
        tenant: &str,
        kind: PrincipalKind,
        id: &str,
        actor_agent_key: Option<&str>,
        caller_roles: &BTreeSet<String>,
        required: &BTreeSet<String>,
    ) -> Result<RbacOutcome, TrustError> {
        let outcome = tool_rbac_check(caller_roles, required);
        if outcome == RbacOutcome::Refusal {
            self.record_principal_signal(tenant, kind, id, SignalKind::RbacRefusal, actor_agent_key)?;
        }
        Ok(outcome)
    }

    /// Evaluate, chain the verdict on `invocation`, and emit its signals.
    pub fn enforce_action_gate(
        &self,
        tenant: &str,
        invocation: &str,
        agent_key: &str,
        actor_agent_key: Option<&str>,
        agent_score: i64,
        action: &GateAction,
        policy: &GatePolicy,
    ) -> Result<GateVerdict, TrustError> {
        let mut v = evaluate_action_gate(agent_score, action, policy);
        let mut ev = NewEvent::new(
            EvidenceKind::SystemMessage,
            json!({
                "event": "action_gate",
                "agent_key": agent_key,
                "tool": action.tool,
                "verdict": v.verdict,
                "reason": v.reason,
                "effective_score": v.effective_score,
            }),
        )
        .tags(action.data_classes.iter().copied());
        if let Some(a) = actor_agent_key {
            ev = ev.actor(a);
        }
        let stored = self.append_event(tenant, invocation, ev)?;
        v.evidence_ref = Some(format!("{invocation}#{}", stored.seq));
        self.counters.incr(&gate_counter_name(v.verdict));
        for s in &v.signals {
            self.record_principal_signal(tenant, PrincipalKind::Agent, agent_key, *s, actor_agent_key)?;
        }
        Ok(v)
    }

    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.counters.snapshot()
    }

    /// Signal counter totals rebuilt from the stored signal chains.
    pub fn replay_counters(&self, tenant: &str) -> Result<BTreeMap<String, u64>, TrustError> {
        let mut out = BTreeMap::new();
        for kind in SignalKind::ALL {
            out.insert(counter_name(*kind).to_string(), 0);
        }
        for chain in self.chains(tenant)? {
            if !chain.starts_with("signals:") {
                continue;
            }
            for e in self.chain_events(tenant, &chain)? {
                if e.payload.get("role").and_then(Value::as_str) != Some("emitter") {
                    continue;
                }
                if let Some(s) = e.payload.get("signal").and_then(Value::as_str).and_then(|s| s.parse::<SignalKind>().ok()) {
                    *out.entry(counter_name(s).to_string()).or_default() += 1;
                }
            }
        }
        Ok(out)
    }
}
