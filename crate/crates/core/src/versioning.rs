//! Definition history, drift detection, lineage elevation, exercised-mode
//! tracking and definition signatures.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical::{definition_hash, project, CanonicalValue, DefinitionHash};
use crate::evidence::{EvidenceError, NewEvent};
use crate::model::{AgentDefinition, EvidenceKind, HumanLoop};
use crate::scoring::{MAX_GRAPH_NODES, MAX_HOPS};
use crate::storage::{StorageError, Store, SEP};
use crate::Kya;

#[derive(Debug, Error)]
pub enum VersioningError {
    #[error("no snapshot of {agent_key} has hash {hash}")]
    DeclaredHashUnknown { agent_key: String, hash: DefinitionHash },
    #[error("{agent_key} has no version {version}")]
    VersionNotFound { agent_key: String, version: u64 },
    #[error("signature must be 64 bytes, got {0}")]
    MalformedSignature(usize),
    #[error("unknown human_loop mode: {0}")]
    UnknownMode(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSnapshot {
    pub tenant_id: String,
    pub agent_key: String,
    pub version_no: u64,
    pub definition: AgentDefinition,
    pub definition_hash: DefinitionHash,
    pub occurred_at: DateTime<Utc>,
    pub created_at: DateTime<Utc>,
    pub parent_agent_key: Option<String>,
    pub note: Option<String>,
}

impl VersionSnapshot {
    /// Ingest lag: storage time minus caller time.
    pub fn skew(&self) -> Duration {
        self.created_at - self.occurred_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    /// `field` itself, or `field[i]` for one list element.
    pub path: String,
    pub old: Value,
    pub new: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftDiff {
    pub declared_hash: DefinitionHash,
    pub current_hash: DefinitionHash,
    pub changed_fields: Vec<String>,
    pub changes: Vec<FieldChange>,
}

/// Field-by-field difference of two projections, in field order.
pub fn structural_diff(old: &BTreeMap<String, CanonicalValue>, new: &BTreeMap<String, CanonicalValue>) -> Vec<FieldChange> {
    let mut out = Vec::new();
    let keys: BTreeSet<&String> = old.keys().chain(new.keys()).collect();
    for field in keys {
        let a = old.get(field).unwrap_or(&CanonicalValue::Null);
        let b = new.get(field).unwrap_or(&CanonicalValue::Null);
        if a == b {
            continue;
        }
        match (a, b) {
            (CanonicalValue::List(xs), CanonicalValue::List(ys)) => {
                for i in 0..xs.len().max(ys.len()) {
                    let x = xs.get(i).unwrap_or(&CanonicalValue::Null);
                    let y = ys.get(i).unwrap_or(&CanonicalValue::Null);
                    if x != y {
                        out.push(FieldChange {
                            field: field.clone(),
                            path: format!("{field}[{i}]"),
                            old: x.to_display_json(),
                            new: y.to_display_json(),
                        });
                    }
                }
            }
            _ => out.push(FieldChange {
                field: field.clone(),
                path: field.clone(),
                old: a.to_display_json(),
                new: b.to_display_json(),
            }),
        }
    }
    out
}

/// Parent to children, from `parent_agent_key` links.
pub type LineageGraph = BTreeMap<String, Vec<String>>;

/// Elevation for a descendant `generation` steps below the changed agent.
pub fn lineage_increment(generation: usize) -> i64 {
    match generation {
        0 => 0,
        1 => 8,
        2 => 4,
        3 => 2,
        _ => 1,
    }
}

/// Every descendant of `parent` with its increment, nearest generation first.
/// Each descendant is counted once, at its shallowest generation.
pub fn propagate_lineage_elevation(parent: &str, graph: &LineageGraph) -> Vec<(String, i64)> {
    let mut seen = BTreeSet::from([parent.to_string()]);
    let mut queue = VecDeque::from([(parent.to_string(), 0usize)]);
    let mut out = Vec::new();
    while let Some((node, gen)) = queue.pop_front() {
        if gen >= MAX_HOPS {
            continue;
        }
        for child in graph.get(&node).into_iter().flatten() {
            if seen.len() >= MAX_GRAPH_NODES {
                return out;
            }
            if seen.insert(child.clone()) {
                out.push((child.clone(), lineage_increment(gen + 1)));
                queue.push_back((child.clone(), gen + 1));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeTally {
    pub configured: Option<HumanLoop>,
    pub counts: BTreeMap<HumanLoop, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub agent_key: String,
    pub configured: Option<HumanLoop>,
    pub distribution: BTreeMap<HumanLoop, f64>,
    pub total: u64,
    pub configured_share: Option<f64>,
    pub gap: bool,
}

fn version_key(agent: &str, version: u64) -> String {
    format!("{agent}{SEP}{version:010}")
}

fn agent_prefix(agent: &str) -> String {
    format!("{agent}{SEP}")
}

pub fn drift_chain(agent: &str) -> String {
    format!("drift:{agent}")
}

pub fn definition_chain(agent: &str) -> String {
    format!("definitions:{agent}")
}

impl Kya {
    /// Append the next version of `def`.
    pub fn snapshot(
        &self,
        tenant: &str,
        def: &AgentDefinition,
        occurred_at: DateTime<Utc>,
        parent_agent_key: Option<&str>,
    ) -> Result<VersionSnapshot, VersioningError> {
        self.append_version(tenant, def, occurred_at, parent_agent_key.map(str::to_string), None)
    }

    fn append_version(
        &self,
        tenant: &str,
        def: &AgentDefinition,
        occurred_at: DateTime<Utc>,
        parent: Option<String>,
        note: Option<String>,
    ) -> Result<VersionSnapshot, VersioningError> {
        let agent = &def.agent_key;
        self.storage.with_key_lock(&format!("versions{SEP}{tenant}{SEP}{agent}"), || {
            let next = self
                .storage
                .last_json::<VersionSnapshot>(Store::Versions, tenant, &agent_prefix(agent))?
                .map_or(1, |(_, s)| s.version_no + 1);
            let snap = VersionSnapshot {
                tenant_id: tenant.to_string(),
                agent_key: agent.clone(),
                version_no: next,
                definition: def.clone(),
                definition_hash: definition_hash(def),
                occurred_at,
                created_at: self.now(),
                parent_agent_key: parent,
                note,
            };
            self.storage.put_json(Store::Versions, tenant, &version_key(agent, next), &snap)?;
            Ok(snap)
        })
    }

    pub fn versions(&self, tenant: &str, agent: &str) -> Result<Vec<VersionSnapshot>, VersioningError> {
        Ok(self
            .storage
            .scan_json(Store::Versions, tenant, &agent_prefix(agent))?
            .into_iter()
            .map(|(_, s)| s)
            .collect())
    }

    pub fn version(&self, tenant: &str, agent: &str, version: u64) -> Result<Option<VersionSnapshot>, VersioningError> {
        Ok(self.storage.get_json(Store::Versions, tenant, &version_key(agent, version))?)
    }

    pub fn latest_version(&self, tenant: &str, agent: &str) -> Result<Option<VersionSnapshot>, VersioningError> {
        Ok(self
            .storage
            .last_json(Store::Versions, tenant, &agent_prefix(agent))?
            .map(|(_, s)| s))
    }

    /// Latest snapshot of every agent in the tenant.
    pub fn registered_agents(&self, tenant: &str) -> Result<Vec<VersionSnapshot>, VersioningError> {
        let mut latest: BTreeMap<String, VersionSnapshot> = BTreeMap::new();
        for (_, s) in self.storage.scan_json::<VersionSnapshot>(Store::Versions, tenant, "")? {
            latest.insert(s.agent_key.clone(), s);
        }
        Ok(latest.into_values().collect())
    }

    /// Most recent snapshot of `agent` with the given hash.
    pub fn lookup_by_hash(&self, tenant: &str, agent: &str, hash: &DefinitionHash) -> Result<Option<VersionSnapshot>, VersioningError> {
        Ok(self.versions(tenant, agent)?.into_iter().rev().find(|s| s.definition_hash == *hash))
    }

    /// `None` when `current` hashes to `declared`. Otherwise the diff against
    /// the declared snapshot, which is also chained as a drift event.
    pub fn detect_drift(
        &self,
        tenant: &str,
        declared: &DefinitionHash,
        current: &AgentDefinition,
    ) -> Result<Option<DriftDiff>, VersioningError> {
        let current_hash = definition_hash(current);
        if current_hash == *declared {
            return Ok(None);
        }
        let base = self
            .lookup_by_hash(tenant, &current.agent_key, declared)?
            .ok_or_else(|| VersioningError::DeclaredHashUnknown { agent_key: current.agent_key.clone(), hash: *declared })?;
        let changes = structural_diff(&project(&base.definition), &project(current));
        let mut fields: Vec<String> = changes.iter().map(|c| c.field.clone()).collect();
        fields.dedup();
        let diff = DriftDiff { declared_hash: *declared, current_hash, changed_fields: fields, changes };
        self.append_event(
            tenant,
            &drift_chain(&current.agent_key),
            NewEvent::new(
                EvidenceKind::SystemMessage,
                json!({
                    "event": "definition_drift",
                    "drift": true,
                    "agent_key": current.agent_key,
                    "declared_version": base.version_no,
                    "diff": diff,
                }),
            ),
        )?;
        Ok(Some(diff))
    }

    /// Append a copy of an old version as the newest one.
    pub fn rollback_to(&self, tenant: &str, agent: &str, version: u64) -> Result<VersionSnapshot, VersioningError> {
        let old = self
            .version(tenant, agent, version)?
            .ok_or_else(|| VersioningError::VersionNotFound { agent_key: agent.to_string(), version })?;
        self.append_version(
            tenant,
            &old.definition,
            self.now(),
            old.parent_agent_key.clone(),
            Some(format!("rollback to v{version}")),
        )
    }

    pub fn lineage_graph(&self, tenant: &str) -> Result<LineageGraph, VersioningError> {
        let mut g = LineageGraph::new();
        for s in self.registered_agents(tenant)? {
            if let Some(p) = s.parent_agent_key {
                g.entry(p).or_default().push(s.agent_key);
            }
        }
        Ok(g)
    }

    /// Queue elevations for every descendant of `parent`. A pending value is
    /// replaced only by a larger one and is consumed by the next score.
    pub fn elevate_lineage(&self, tenant: &str, parent: &str) -> Result<Vec<(String, i64)>, VersioningError> {
        let incs = propagate_lineage_elevation(parent, &self.lineage_graph(tenant)?);
        let mut pending = self.lineage.lock();
        for (agent, inc) in &incs {
            let slot = pending.entry((tenant.to_string(), agent.clone())).or_default();
            *slot = (*slot).max(*inc);
        }
        Ok(incs)
    }

    pub fn pending_lineage(&self, tenant: &str, agent: &str) -> i64 {
        self.lineage.lock().get(&(tenant.to_string(), agent.to_string())).copied().unwrap_or(0)
    }

    pub(crate) fn take_lineage(&self, tenant: &str, agent: &str) -> i64 {
        self.lineage.lock().remove(&(tenant.to_string(), agent.to_string())).unwrap_or(0)
    }

    pub fn record_invocation_mode(
        &self,
        tenant: &str,
        agent: &str,
        configured: HumanLoop,
        exercised: HumanLoop,
    ) -> Result<ModeTally, VersioningError> {
        Ok(self.storage.upsert_json(Store::Invocations, tenant, agent, |cur: Option<ModeTally>| {
            let mut t = cur.unwrap_or_default();
            t.configured = Some(configured);
            *t.counts.entry(exercised).or_default() += 1;
            t.total += 1;
            t
        })?)
    }

    pub fn record_invocation_mode_str(
        &self,
        tenant: &str,
        agent: &str,
        configured: &str,
        exercised: &str,
    ) -> Result<ModeTally, VersioningError> {
        let parse = |s: &str| s.parse::<HumanLoop>().map_err(|_| VersioningError::UnknownMode(s.to_string()));
        self.record_invocation_mode(tenant, agent, parse(configured)?, parse(exercised)?)
    }

    pub fn invocation_count(&self, tenant: &str, agent: &str) -> Result<u64, VersioningError> {
        Ok(self.storage.get_json::<ModeTally>(Store::Invocations, tenant, agent)?.map_or(0, |t| t.total))
    }

    pub fn mode_distribution(&self, tenant: &str, agent: &str) -> Result<ModeReport, VersioningError> {
        let t: ModeTally = self.storage.get_json(Store::Invocations, tenant, agent)?.unwrap_or_default();
        let distribution = t.counts.iter().map(|(m, c)| (*m, *c as f64 / t.total as f64)).collect();
        let configured_share = match (t.configured, t.total) {
            (Some(c), n) if n > 0 => Some(t.counts.get(&c).copied().unwrap_or(0) as f64 / n as f64),
            _ => None,
        };
        let gap = t.total >= self.config.mode_gap_min_invocations
            && configured_share.is_some_and(|s| s < self.config.mode_gap_share);
        Ok(ModeReport { agent_key: agent.to_string(), configured: t.configured, distribution, total: t.total, configured_share, gap })
    }

    /// Check an Ed25519 signature over the definition hash. A valid one is
    /// chained as a signing event.
    pub fn verify_definition_signature(
        &self,
        tenant: &str,
        def: &AgentDefinition,
        signature: &[u8],
        public_key: &VerifyingKey,
    ) -> Result<bool, VersioningError> {
        let sig: [u8; 64] = signature.try_into().map_err(|_| VersioningError::MalformedSignature(signature.len()))?;
        let hash = definition_hash(def);
        let ok = public_key.verify(&hash.0, &Signature::from_bytes(&sig)).is_ok();
        if ok {
            self.append_event(
                tenant,
                &definition_chain(&def.agent_key),
                NewEvent::new(
                    EvidenceKind::SystemMessage,
                    json!({
                        "event": "definition_signed",
                        "agent_key": def.agent_key,
                        "definition_hash": hash,
                        "public_key": hex::encode(public_key.as_bytes()),
                    }),
                ),
            )?;
        }
        Ok(ok)
    }
}
