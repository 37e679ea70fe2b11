//! HMAC-chained evidence logs, one chain per (tenant, invocation).
//!
//! Each event's `signed_hash` is `HMAC(key, prev_hash || canonical(body))`
//! where the body is every field except the two hashes. The first event of
//! a chain links to a fixed seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use hmac::{Hmac, Mac};
use parking_lot::RwLock;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::{canonical_bytes, CanonicalError, CanonicalValue};
use crate::compliance::ComplianceError;
use crate::model::{DataClass, EvidenceKind, UnknownEnumValue};
use crate::storage::{check_id, Storage, StorageError, Store, SEP};
use crate::Kya;

type HmacSha256 = Hmac<Sha256>;

pub const SEED_TAG: &[u8] = b"KYA-v1-evidence";
pub const ENV_SIGNING_KEY: &str = "KYA_EVIDENCE_SIGNING_KEY";
pub const ENV_KEY_PROVIDER: &str = "KYA_EVIDENCE_KEY_PROVIDER";

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("invalid evidence kind: {0}")]
    InvalidEvidenceKind(#[from] UnknownEnumValue),
    #[error("payload cannot be canonicalized: {0}")]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
}

/// A 32-byte hash, hex on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainHash(pub [u8; 32]);

impl ChainHash {
    pub fn seed() -> Self {
        ChainHash(Sha256::digest(SEED_TAG).into())
    }
}

impl fmt::Debug for ChainHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Display for ChainHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for ChainHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for ChainHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))?;
        Ok(ChainHash(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEvent {
    pub tenant_id: String,
    pub invocation_id: String,
    pub seq: u64,
    pub kind: EvidenceKind,
    pub payload: Value,
    pub occurred_at: DateTime<Utc>,
    pub prev_hash: ChainHash,
    pub signed_hash: ChainHash,
    pub sensitivity_tags: BTreeSet<DataClass>,
    pub actor_agent_key: Option<String>,
}

impl EvidenceEvent {
    fn body(&self) -> Result<Vec<u8>, CanonicalError> {
        let mut m = BTreeMap::new();
        m.insert("tenant_id".into(), CanonicalValue::str(&self.tenant_id));
        m.insert("invocation_id".into(), CanonicalValue::str(&self.invocation_id));
        m.insert("seq".into(), CanonicalValue::Int(self.seq as i64));
        m.insert("kind".into(), CanonicalValue::str(self.kind.as_str()));
        m.insert("payload".into(), CanonicalValue::from(&self.payload));
        m.insert("occurred_at".into(), CanonicalValue::Timestamp(self.occurred_at));
        m.insert(
            "sensitivity_tags".into(),
            CanonicalValue::string_set(self.sensitivity_tags.iter().map(|c| c.as_str())),
        );
        m.insert("actor_agent_key".into(), CanonicalValue::opt_str(self.actor_agent_key.as_deref()));
        canonical_bytes(&CanonicalValue::Map(m))
    }

    /// Recompute the MAC from `prev_hash` and the body.
    pub fn compute_hash(&self, key: &EvidenceKey) -> Result<ChainHash, CanonicalError> {
        let mut mac = HmacSha256::new_from_slice(&key.bytes).expect("hmac accepts any key length");
        mac.update(&self.prev_hash.0);
        mac.update(&self.body()?);
        Ok(ChainHash(mac.finalize().into_bytes().into()))
    }
}

/// What to append. `occurred_at` defaults to the kernel clock.
#[derive(Debug, Clone)]
pub struct NewEvent {
    pub kind: EvidenceKind,
    pub payload: Value,
    pub tags: BTreeSet<DataClass>,
    pub actor: Option<String>,
    pub occurred_at: Option<DateTime<Utc>>,
}

impl NewEvent {
    pub fn new(kind: EvidenceKind, payload: Value) -> Self {
        NewEvent { kind, payload, tags: BTreeSet::new(), actor: None, occurred_at: None }
    }

    pub fn tags(mut self, tags: impl IntoIterator<Item = DataClass>) -> Self {
        self.tags.extend(tags);
        self
    }

    pub fn actor(mut self, actor: impl Into<String>) -> Self {
        self.actor = Some(actor.into());
        self
    }

    pub fn at(mut self, t: DateTime<Utc>) -> Self {
        self.occurred_at = Some(t);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStatus {
    Valid,
    PayloadTamper,
    ChainBreak,
    CleanCut,
}

impl ChainStatus {
    pub fn is_tamper(self) -> bool {
        matches!(self, ChainStatus::PayloadTamper | ChainStatus::ChainBreak)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub status: ChainStatus,
    pub index: Option<u64>,
    pub detail: String,
    pub events_checked: usize,
}

/// Why a single event failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EventFailure {
    #[error("payload tamper")]
    PayloadTamper,
    #[error("chain break")]
    ChainBreak,
}

/// Pruning record used to tell a retention cut from a deletion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutRecord {
    pub tenant_id: String,
    pub invocation_id: String,
    pub cut_seq: u64,
    pub surviving_head_hash: ChainHash,
    pub pruned: u64,
    pub cut_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PruneReport {
    pub pruned: usize,
    pub cuts: Vec<CutRecord>,
}

/// Retention settings for one tenant. A tenant without settings is never
/// pruned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantRetention {
    pub regimes: BTreeSet<String>,
    pub retention_days: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyTier {
    Provider,
    Environment,
    Ephemeral,
}

/// The deployment-wide HMAC key.
#[derive(Clone)]
pub struct EvidenceKey {
    bytes: Vec<u8>,
    pub tier: KeyTier,
    pub warnings: Vec<String>,
}

impl fmt::Debug for EvidenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvidenceKey").field("tier", &self.tier).finish_non_exhaustive()
    }
}

impl EvidenceKey {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        EvidenceKey { bytes: bytes.into(), tier: KeyTier::Environment, warnings: Vec::new() }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

pub type KeyProvider = fn() -> Result<Vec<u8>, String>;

fn providers() -> &'static RwLock<HashMap<String, KeyProvider>> {
    static P: OnceLock<RwLock<HashMap<String, KeyProvider>>> = OnceLock::new();
    P.get_or_init(Default::default)
}

/// Register a key provider under a `module:function` name.
pub fn register_key_provider(name: &str, provider: KeyProvider) {
    providers().write().insert(name.to_string(), provider);
}

static EPHEMERAL_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// How many times the ephemeral-key warning has been logged in this process.
pub fn ephemeral_warning_count() -> usize {
    EPHEMERAL_WARNINGS.load(Ordering::SeqCst)
}

fn ephemeral_key() -> Vec<u8> {
    static KEY: OnceLock<Vec<u8>> = OnceLock::new();
    KEY.get_or_init(|| {
        EPHEMERAL_WARNINGS.fetch_add(1, Ordering::SeqCst);
        log::warn!(
            "no evidence signing key configured; using a process-local random key. \
             Chains written now cannot be verified by another process."
        );
        rand::random::<[u8; 32]>().to_vec()
    })
    .clone()
}

/// Resolve the signing key: registered provider, then base64 env var, then a
/// process-local random key.
pub fn resolve_signing_key(env: &dyn Fn(&str) -> Option<String>) -> EvidenceKey {
    let mut warnings = Vec::new();
    if let Some(name) = env(ENV_KEY_PROVIDER).filter(|s| !s.trim().is_empty()) {
        let name = name.trim();
        let loaded = if !name.contains(':') {
            Err(format!("provider reference {name:?} is not module:function"))
        } else {
            match providers().read().get(name) {
                Some(p) => p().map_err(|e| format!("provider {name} failed: {e}")),
                None => Err(format!("provider {name} is not registered")),
            }
        };
        match loaded {
            Ok(bytes) if !bytes.is_empty() => {
                return EvidenceKey { bytes, tier: KeyTier::Provider, warnings };
            }
            Ok(_) => warnings.push(format!("provider {name} returned an empty key")),
            Err(e) => warnings.push(e),
        }
        log::warn!("evidence key provider load failure: {}", warnings.last().unwrap());
    }
    if let Some(b64) = env(ENV_SIGNING_KEY).filter(|s| !s.trim().is_empty()) {
        match B64.decode(b64.trim()) {
            Ok(bytes) if !bytes.is_empty() => return EvidenceKey { bytes, tier: KeyTier::Environment, warnings },
            _ => {
                let msg = format!("{ENV_SIGNING_KEY} is not valid non-empty base64");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    EvidenceKey { bytes: ephemeral_key(), tier: KeyTier::Ephemeral, warnings }
}

pub fn resolve_signing_key_from_env() -> EvidenceKey {
    resolve_signing_key(&|name| std::env::var(name).ok())
}

fn event_key(invocation: &str, seq: u64) -> String {
    format!("{invocation}{SEP}{seq:020}")
}

fn chain_prefix(invocation: &str) -> String {
    format!("{invocation}{SEP}")
}

/// Check one event against its predecessor (or the seed when `None`).
/// Linkage is checked before the MAC.
pub fn verify_event(key: &EvidenceKey, event: &EvidenceEvent, predecessor: Option<&EvidenceEvent>) -> Result<(), EventFailure> {
    let expected_prev = predecessor.map_or_else(ChainHash::seed, |p| p.signed_hash);
    if event.prev_hash != expected_prev {
        return Err(EventFailure::ChainBreak);
    }
    verify_mac(key, event)
}

fn verify_mac(key: &EvidenceKey, event: &EvidenceEvent) -> Result<(), EventFailure> {
    match event.compute_hash(key) {
        Ok(h) if h == event.signed_hash => Ok(()),
        _ => Err(EventFailure::PayloadTamper),
    }
}

fn failure_status(f: EventFailure) -> ChainStatus {
    match f {
        EventFailure::PayloadTamper => ChainStatus::PayloadTamper,
        EventFailure::ChainBreak => ChainStatus::ChainBreak,
    }
}

impl Kya {
    pub fn evidence_key(&self) -> &EvidenceKey {
        &self.key
    }

    /// Append under the chain lock. The event gets the next seq and links to
    /// the current tail, or to the seed on an empty chain.
    pub fn append_event(&self, tenant: &str, invocation: &str, new: NewEvent) -> Result<EvidenceEvent, EvidenceError> {
        check_id(tenant)?;
        check_id(invocation)?;
        self.storage.with_chain_lock(tenant, invocation, || {
            let tail = self.storage.last_json::<EvidenceEvent>(Store::Evidence, tenant, &chain_prefix(invocation))?;
            let (seq, prev_hash) = match tail {
                Some((_, t)) => (t.seq + 1, t.signed_hash),
                None => (0, ChainHash::seed()),
            };
            let mut event = EvidenceEvent {
                tenant_id: tenant.to_string(),
                invocation_id: invocation.to_string(),
                seq,
                kind: new.kind,
                payload: new.payload,
                occurred_at: new.occurred_at.unwrap_or_else(|| self.now()),
                prev_hash,
                signed_hash: ChainHash([0; 32]),
                sensitivity_tags: new.tags,
                actor_agent_key: new.actor,
            };
            event.signed_hash = event.compute_hash(&self.key)?;
            self.storage.put_json(Store::Evidence, tenant, &event_key(invocation, seq), &event)?;
            Ok(event)
        })
    }

    /// Append with the kind given as a string.
    pub fn append_event_str(
        &self,
        tenant: &str,
        invocation: &str,
        kind: &str,
        payload: Value,
        tags: BTreeSet<DataClass>,
    ) -> Result<EvidenceEvent, EvidenceError> {
        let kind: EvidenceKind = kind.parse()?;
        self.append_event(tenant, invocation, NewEvent::new(kind, payload).tags(tags))
    }

    pub fn chain_events(&self, tenant: &str, invocation: &str) -> Result<Vec<EvidenceEvent>, EvidenceError> {
        Ok(self
            .storage
            .scan_json::<EvidenceEvent>(Store::Evidence, tenant, &chain_prefix(invocation))?
            .into_iter()
            .map(|(_, e)| e)
            .collect())
    }

    /// Invocation ids with at least one stored event.
    pub fn chains(&self, tenant: &str) -> Result<Vec<String>, EvidenceError> {
        let mut out: Vec<String> = Vec::new();
        for (k, _) in self.storage.scan_json::<Value>(Store::Evidence, tenant, "")? {
            let inv = k.rsplit_once(SEP).map_or(k.as_str(), |(i, _)| i);
            if out.last().map(String::as_str) != Some(inv) {
                out.push(inv.to_string());
            }
        }
        Ok(out)
    }

    pub fn cut_record(&self, tenant: &str, invocation: &str) -> Result<Option<CutRecord>, EvidenceError> {
        Ok(self.storage.get_json(Store::CutLedger, tenant, invocation)?)
    }

    /// Walk a chain. A gap at the head is a clean cut only when the cut
    /// ledger names that seq and the survivor's hash; any tamper found later
    /// takes precedence over the clean cut.
    pub fn verify_chain(&self, tenant: &str, invocation: &str) -> Result<VerificationReport, EvidenceError> {
        let events = self.chain_events(tenant, invocation)?;
        let n = events.len();
        let report = |status, index: Option<u64>, detail: String| VerificationReport {
            status,
            index,
            detail,
            events_checked: n,
        };
        let Some(first) = events.first() else {
            return Ok(report(ChainStatus::Valid, None, "empty chain".into()));
        };
        let mut cut = None;
        if first.seq == 0 {
            if let Err(f) = verify_event(&self.key, first, None) {
                return Ok(report(failure_status(f), Some(0), format!("{f} at seq 0")));
            }
        } else {
            if let Err(f) = verify_mac(&self.key, first) {
                return Ok(report(failure_status(f), Some(first.seq), format!("{f} at seq {}", first.seq)));
            }
            match self.cut_record(tenant, invocation)? {
                Some(c) if c.cut_seq == first.seq && c.surviving_head_hash == first.signed_hash => cut = Some(first.seq),
                _ => {
                    return Ok(report(
                        ChainStatus::ChainBreak,
                        Some(first.seq),
                        format!("chain starts at seq {} with no matching cut record", first.seq),
                    ))
                }
            }
        }
        for pair in events.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if cur.seq != prev.seq + 1 {
                return Ok(report(
                    ChainStatus::ChainBreak,
                    Some(cur.seq),
                    format!("seq gap: {} follows {}", cur.seq, prev.seq),
                ));
            }
            if let Err(f) = verify_event(&self.key, cur, Some(prev)) {
                return Ok(report(failure_status(f), Some(cur.seq), format!("{f} at seq {}", cur.seq)));
            }
        }
        Ok(match cut {
            Some(seq) => report(ChainStatus::CleanCut, Some(seq), format!("pruned before seq {seq}; remainder valid")),
            None => report(ChainStatus::Valid, None, format!("{n} events verified")),
        })
    }

    pub fn set_tenant_retention(&self, tenant: &str, policy: TenantRetention) {
        self.retention.write().insert(tenant.to_string(), policy);
    }

    pub fn tenant_retention(&self, tenant: &str) -> Option<TenantRetention> {
        self.retention.read().get(tenant).cloned()
    }

    fn event_floor(&self, policy: &TenantRetention, event: &EvidenceEvent) -> Result<Duration, EvidenceError> {
        let regulatory = self.regimes.required_retention(&policy.regimes, &event.sensitivity_tags)?;
        let configured = Duration::days(i64::from(policy.retention_days.unwrap_or(0)));
        Ok(regulatory.max(configured))
    }

    /// Drop each chain's expired prefix. An event is expired when its age
    /// exceeds the longest floor from the tenant's regimes, its own tags and
    /// the tenant's configured retention. The newest event always survives.
    pub fn prune_expired_evidence(&self, now: DateTime<Utc>) -> Result<PruneReport, EvidenceError> {
        let policies = self.retention.read().clone();
        let mut report = PruneReport::default();
        for (tenant, policy) in &policies {
            for invocation in self.chains(tenant)? {
                let cut = self.storage.with_chain_lock(tenant, &invocation, || -> Result<_, EvidenceError> {
                    let events = self.chain_events(tenant, &invocation)?;
                    let mut expired = 0;
                    for e in events.iter().take(events.len().saturating_sub(1)) {
                        if now - e.occurred_at > self.event_floor(policy, e)? {
                            expired += 1;
                        } else {
                            break;
                        }
                    }
                    if expired == 0 {
                        return Ok(None);
                    }
                    let survivor = &events[expired];
                    let record = CutRecord {
                        tenant_id: tenant.clone(),
                        invocation_id: invocation.clone(),
                        cut_seq: survivor.seq,
                        surviving_head_hash: survivor.signed_hash,
                        pruned: expired as u64,
                        cut_at: now,
                    };
                    let mut ops: Vec<(Store, String, String, Option<Vec<u8>>)> = events[..expired]
                        .iter()
                        .map(|e| (Store::Evidence, tenant.clone(), event_key(&invocation, e.seq), None))
                        .collect();
                    ops.push((
                        Store::CutLedger,
                        tenant.clone(),
                        invocation.clone(),
                        Some(Storage::encode_json(Store::CutLedger, &invocation, &record)?),
                    ));
                    self.storage.write_batch(ops)?;
                    Ok(Some(record))
                })?;
                if let Some(c) = cut {
                    report.pruned += c.pruned as usize;
                    report.cuts.push(c);
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let m: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| m.get(k).cloned()
    }

    #[test]
    fn first_event_links_to_seed() {
        let k = Kya::in_memory_for_tests();
        let e = k.append_event("t", "inv", NewEvent::new(EvidenceKind::Prompt, json!({"text": "hi"}))).unwrap();
        assert_eq!(e.seq, 0);
        assert_eq!(e.prev_hash, ChainHash::seed());
        assert_eq!(ChainHash::seed().0, <[u8; 32]>::from(Sha256::digest(b"KYA-v1-evidence")));
        let e1 = k.append_event("t", "inv", NewEvent::new(EvidenceKind::Response, json!(1))).unwrap();
        assert_eq!((e1.seq, e1.prev_hash), (1, e.signed_hash));
        assert_eq!(k.verify_chain("t", "inv").unwrap().status, ChainStatus::Valid);
    }

    #[test]
    fn string_kinds_outside_the_set_are_rejected() {
        let k = Kya::in_memory_for_tests();
        let err = k.append_event_str("t", "i", "drift", json!({}), BTreeSet::new()).unwrap_err();
        assert!(matches!(err, EvidenceError::InvalidEvidenceKind(_)));
    }

    #[test]
    fn verify_event_distinguishes_failures() {
        let k = Kya::in_memory_for_tests();
        let a = k.append_event("t", "i", NewEvent::new(EvidenceKind::Prompt, json!({"x": 1}))).unwrap();
        let b = k.append_event("t", "i", NewEvent::new(EvidenceKind::Response, json!({"y": 2}))).unwrap();
        assert_eq!(verify_event(k.evidence_key(), &b, Some(&a)), Ok(()));
        let mut p = b.clone();
        p.payload = json!({"y": 3});
        assert_eq!(verify_event(k.evidence_key(), &p, Some(&a)), Err(EventFailure::PayloadTamper));
        let mut l = b.clone();
        l.prev_hash = ChainHash([9; 32]);
        assert_eq!(verify_event(k.evidence_key(), &l, Some(&a)), Err(EventFailure::ChainBreak));
    }

    #[test]
    fn key_resolution_tiers() {
        let key = B64.encode([7u8; 32]);
        let k = resolve_signing_key(&env_of(&[(ENV_SIGNING_KEY, &key)]));
        assert_eq!((k.tier, k.bytes()), (KeyTier::Environment, &[7u8; 32][..]));
        assert!(k.warnings.is_empty());

        register_key_provider("tests:vault", || Ok(vec![1, 2, 3]));
        let k = resolve_signing_key(&env_of(&[(ENV_SIGNING_KEY, &key), (ENV_KEY_PROVIDER, "tests:vault")]));
        assert_eq!((k.tier, k.bytes()), (KeyTier::Provider, &[1u8, 2, 3][..]));

        let k = resolve_signing_key(&env_of(&[(ENV_SIGNING_KEY, &key), (ENV_KEY_PROVIDER, "tests:missing")]));
        assert_eq!(k.tier, KeyTier::Environment);
        assert_eq!(k.warnings.len(), 1);

        let a = resolve_signing_key(&env_of(&[]));
        let b = resolve_signing_key(&env_of(&[(ENV_SIGNING_KEY, "%%%")]));
        assert_eq!((a.tier, b.tier), (KeyTier::Ephemeral, KeyTier::Ephemeral));
        assert_eq!(a.bytes(), b.bytes());
        assert_eq!(ephemeral_warning_count(), 1);
    }
}
