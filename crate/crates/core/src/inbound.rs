//! Signed weight recommendations from an external collector.
//!
//! Every envelope passes four gates in order: signature, expiry at persist
//! time, only-tighten dominance, and operator approval (or auto-apply for
//! allowlisted tenant keys). Each outcome is stored and chained.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, Utc};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::canonical::{canonical_json, format_timestamp, CanonicalError};
use crate::evidence::{EvidenceError, NewEvent};
use crate::model::EvidenceKind;
use crate::storage::{StorageError, Store, PLATFORM_NS, SEP};
use crate::weights::{default_value, Channel, Scope, WeightKey, WeightsError};
use crate::Kya;

pub const ENV_INBOUND_KEYS: &str = "KYA_INBOUND_PUBLIC_KEY";
pub const INBOUND_CHAIN: &str = "governance:inbound";

#[derive(Debug, Error)]
pub enum InboundError {
    #[error("malformed trust anchor entry {0:?}")]
    MalformedAnchor(String),
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("key id {0} is not pinned")]
    UnknownKeyId(String),
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("inbound recommendations are disabled (no trust anchors)")]
    InboundDisabled,
    #[error("recommendation {0} is not pending")]
    NotPending(String),
    #[error("a reviewer identity is required")]
    MissingReviewer,
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Pinned collector keys by key id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustAnchorSet {
    keys: BTreeMap<String, VerifyingKey>,
}

impl TrustAnchorSet {
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn get(&self, key_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(key_id)
    }

    pub fn insert(&mut self, key_id: impl Into<String>, key: VerifyingKey) {
        self.keys.insert(key_id.into(), key);
    }

    pub fn key_ids(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    pub fn from_env() -> Result<Self, InboundError> {
        parse_trust_anchors(&std::env::var(ENV_INBOUND_KEYS).unwrap_or_default())
    }
}

/// Parse comma-separated `keyid:base64-pubkey` entries.
pub fn parse_trust_anchors(value: &str) -> Result<TrustAnchorSet, InboundError> {
    let mut set = TrustAnchorSet::default();
    for entry in value.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let bad = || InboundError::MalformedAnchor(entry.to_string());
        let (id, b64) = entry.split_once(':').ok_or_else(bad)?;
        if id.is_empty() {
            return Err(bad());
        }
        let bytes: [u8; 32] = B64.decode(b64.trim()).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        set.insert(id, VerifyingKey::from_bytes(&bytes).map_err(|_| bad())?);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationEnvelope {
    pub recommendation_id: String,
    pub key_id: String,
    pub expires_at: DateTime<Utc>,
    pub target: WeightKey,
    pub value: Decimal,
    /// `None` proposes a platform-level change.
    pub tenant_id: Option<String>,
    pub rationale: String,
}

impl RecommendationEnvelope {
    fn wire_fields(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("recommendation_id".into(), json!(self.recommendation_id));
        m.insert("key_id".into(), json!(self.key_id));
        m.insert("expires_at".into(), json!(format_timestamp(&self.expires_at)));
        m.insert(
            "target".into(),
            json!({"scope": self.target.scope.as_str(), "key": self.target.key, "value": self.value.to_string()}),
        );
        m.insert("tenant_id".into(), self.tenant_id.as_ref().map_or(Value::Null, |t| json!(t)));
        m.insert("rationale".into(), json!(self.rationale));
        m
    }

    pub fn namespace(&self) -> &str {
        self.tenant_id.as_deref().unwrap_or(PLATFORM_NS)
    }
}

/// An envelope together with the exact JSON object it arrived as.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedEnvelope {
    pub envelope: RecommendationEnvelope,
    pub wire: Map<String, Value>,
}

fn field<'a>(m: &'a Map<String, Value>, name: &str) -> Result<&'a Value, InboundError> {
    m.get(name).ok_or_else(|| InboundError::MalformedEnvelope(format!("missing {name}")))
}

fn str_field<'a>(m: &'a Map<String, Value>, name: &str) -> Result<&'a str, InboundError> {
    field(m, name)?.as_str().ok_or_else(|| InboundError::MalformedEnvelope(format!("{name} must be a string")))
}

impl SignedEnvelope {
    pub fn parse(json: &str) -> Result<Self, InboundError> {
        match serde_json::from_str::<Value>(json) {
            Ok(Value::Object(m)) => Self::from_wire(m),
            Ok(_) => Err(InboundError::MalformedEnvelope("envelope must be a JSON object".into())),
            Err(e) => Err(InboundError::MalformedEnvelope(e.to_string())),
        }
    }

    pub fn from_wire(wire: Map<String, Value>) -> Result<Self, InboundError> {
        let bad = |s: String| InboundError::MalformedEnvelope(s);
        let target = field(&wire, "target")?
            .as_object()
            .ok_or_else(|| bad("target must be an object".into()))?;
        let scope: Scope = str_field(target, "scope")?.parse().map_err(|_| bad("unknown target scope".into()))?;
        let value = match field(target, "value")? {
            Value::String(s) => s.parse::<Decimal>(),
            Value::Number(n) => n.to_string().parse::<Decimal>(),
            _ => return Err(bad("target value must be a decimal".into())),
        }
        .map_err(|e| bad(format!("target value: {e}")))?;
        let expires_at = DateTime::parse_from_rfc3339(str_field(&wire, "expires_at")?)
            .map_err(|e| bad(format!("expires_at: {e}")))?
            .with_timezone(&Utc);
        let tenant_id = match wire.get("tenant_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(bad("tenant_id must be a string or null".into())),
        };
        str_field(&wire, "signature")?;
        let envelope = RecommendationEnvelope {
            recommendation_id: str_field(&wire, "recommendation_id")?.to_string(),
            key_id: str_field(&wire, "key_id")?.to_string(),
            expires_at,
            target: WeightKey::new(scope, str_field(target, "key")?),
            value,
            tenant_id,
            rationale: wire.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
        };
        crate::storage::check_id(&envelope.recommendation_id).map_err(|e| bad(e.to_string()))?;
        Ok(SignedEnvelope { envelope, wire })
    }

    /// Sign `envelope` with `key`, producing its wire form.
    pub fn sign(envelope: RecommendationEnvelope, key: &SigningKey) -> Self {
        let mut wire = envelope.wire_fields();
        let bytes = canonical_json(&Value::Object(wire.clone())).expect("envelope fields are canonical");
        wire.insert("signature".into(), json!(B64.encode(key.sign(&bytes).to_bytes())));
        SignedEnvelope { envelope, wire }
    }

    /// Canonical encoding of the wire object without its signature.
    pub fn signing_bytes(&self) -> Result<Vec<u8>, InboundError> {
        let mut m = self.wire.clone();
        m.remove("signature");
        Ok(canonical_json(&Value::Object(m))?)
    }

    pub fn signature_b64(&self) -> &str {
        self.wire.get("signature").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        Value::Object(self.wire.clone()).to_string()
    }
}

pub fn verify_envelope(env: &SignedEnvelope, anchors: &TrustAnchorSet) -> Result<(), InboundError> {
    let key = anchors
        .get(&env.envelope.key_id)
        .ok_or_else(|| InboundError::UnknownKeyId(env.envelope.key_id.clone()))?;
    let raw = B64.decode(env.signature_b64()).map_err(|_| InboundError::SignatureInvalid)?;
    let sig: [u8; 64] = raw.try_into().map_err(|_| InboundError::SignatureInvalid)?;
    key.verify(&env.signing_bytes()?, &Signature::from_bytes(&sig))
        .map_err(|_| InboundError::SignatureInvalid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationStatus {
    Pending,
    Applied,
    AutoApplied,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Signature,
    Expiry,
    Dominance,
    Approval,
}

impl Gate {
    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRecommendation {
    pub recommendation_id: String,
    pub key_id: String,
    /// Absent when the signature failed; nothing unverified is kept.
    pub envelope: Option<RecommendationEnvelope>,
    pub status: RecommendationStatus,
    pub gate_rejected: Option<Gate>,
    pub reason: Option<String>,
    pub reviewed_by: Option<String>,
    pub received_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
}

impl PendingRecommendation {
    fn rejected(&mut self, gate: Gate, reason: String, at: DateTime<Utc>) {
        self.status = RecommendationStatus::Rejected;
        self.gate_rejected = Some(gate);
        self.reason = Some(reason);
        self.decided_at = Some(at);
    }
}

fn sigfail_key(id: &str, at: DateTime<Utc>) -> String {
    format!("sigfail{SEP}{id}{SEP}{:020}", at.timestamp_micros().max(0))
}

impl Kya {
    /// Run an envelope through the gates. Gate failures come back as a
    /// rejected record; errors are reserved for storage and evidence faults.
    pub fn ingest_recommendation(
        &self,
        env: &SignedEnvelope,
        anchors: &TrustAnchorSet,
        auto_apply: &BTreeSet<WeightKey>,
    ) -> Result<PendingRecommendation, InboundError> {
        if anchors.is_empty() {
            return Err(InboundError::InboundDisabled);
        }
        let e = &env.envelope;
        let ns = e.namespace();
        let now = self.now();
        let mut rec = PendingRecommendation {
            recommendation_id: e.recommendation_id.clone(),
            key_id: e.key_id.clone(),
            envelope: None,
            status: RecommendationStatus::Pending,
            gate_rejected: None,
            reason: None,
            reviewed_by: None,
            received_at: now,
            decided_at: None,
        };

        if let Err(err) = verify_envelope(env, anchors) {
            rec.rejected(Gate::Signature, err.to_string(), now);
            self.storage.put_json(Store::PendingRecommendations, ns, &sigfail_key(&rec.recommendation_id, now), &rec)?;
            self.chain_recommendation(ns, &rec, "ingest")?;
            return Ok(rec);
        }
        rec.envelope = Some(e.clone());

        self.storage.with_key_lock(&format!("rec:{}", e.recommendation_id), || {
            if let Some(existing) = self
                .storage
                .get_json::<PendingRecommendation>(Store::PendingRecommendations, ns, &e.recommendation_id)?
            {
                if existing.status != RecommendationStatus::Pending {
                    return Ok(existing);
                }
                rec.received_at = existing.received_at;
            }
            let now = self.now();
            if e.expires_at <= now {
                rec.rejected(Gate::Expiry, format!("expired at {}", format_timestamp(&e.expires_at)), now);
            } else if let Err(reason) = self.dominance_check(e) {
                rec.rejected(Gate::Dominance, reason, now);
            } else if e.tenant_id.is_some() && auto_apply.contains(&e.target) {
                match self.apply_envelope(e, &format!("inbound:{}", e.key_id)) {
                    Ok(()) => {
                        rec.status = RecommendationStatus::AutoApplied;
                        rec.decided_at = Some(now);
                    }
                    Err(InboundError::Weights(w @ WeightsError::OverrideLoosens { .. })) => {
                        rec.rejected(Gate::Dominance, w.to_string(), now)
                    }
                    Err(other) => return Err(other),
                }
            }
            self.storage.put_json(Store::PendingRecommendations, ns, &e.recommendation_id, &rec)?;
            self.chain_recommendation(ns, &rec, "ingest")?;
            Ok(rec.clone())
        })
    }

    /// Would this envelope, applied now, keep the key at or above platform?
    fn dominance_check(&self, e: &RecommendationEnvelope) -> Result<(), String> {
        if default_value(&e.target).is_none() {
            return Err(format!("unknown weight key {}", e.target));
        }
        let platform = self.effective_weight(None, &e.target).map_err(|x| x.to_string())?;
        if e.target.polarity().dominates(e.value, platform) {
            Ok(())
        } else {
            Err(WeightsError::OverrideLoosens { key: e.target.clone(), current_platform: platform, attempted: e.value }
                .to_string())
        }
    }

    fn apply_envelope(&self, e: &RecommendationEnvelope, by: &str) -> Result<(), InboundError> {
        self.set_override(e.tenant_id.as_deref(), &e.target, e.value, Channel::Recommendation, by)?;
        Ok(())
    }

    fn chain_recommendation(&self, ns: &str, rec: &PendingRecommendation, action: &str) -> Result<(), InboundError> {
        self.append_event(
            ns,
            INBOUND_CHAIN,
            NewEvent::new(
                EvidenceKind::SystemMessage,
                json!({
                    "event": "recommendation",
                    "action": action,
                    "recommendation_id": rec.recommendation_id,
                    "key_id": rec.key_id,
                    "status": rec.status,
                    "gate": rec.gate_rejected.map(Gate::number),
                    "reason": rec.reason,
                    "reviewed_by": rec.reviewed_by,
                    "target": rec.envelope.as_ref().map(|e| e.target.to_string()),
                    "value": rec.envelope.as_ref().map(|e| e.value.to_string()),
                }),
            ),
        )?;
        Ok(())
    }

    /// Apply a pending recommendation, re-checking dominance at apply time.
    pub fn approve_recommendation(
        &self,
        tenant: Option<&str>,
        id: &str,
        reviewer: &str,
    ) -> Result<PendingRecommendation, InboundError> {
        if reviewer.trim().is_empty() {
            return Err(InboundError::MissingReviewer);
        }
        let ns = tenant.unwrap_or(PLATFORM_NS);
        self.storage.with_key_lock(&format!("rec:{id}"), || {
            let mut rec = match self.storage.get_json::<PendingRecommendation>(Store::PendingRecommendations, ns, id)? {
                Some(r) if r.status == RecommendationStatus::Pending => r,
                _ => return Err(InboundError::NotPending(id.to_string())),
            };
            let env = rec.envelope.clone().ok_or_else(|| InboundError::NotPending(id.to_string()))?;
            let now = self.now();
            rec.reviewed_by = Some(reviewer.to_string());
            let outcome = self.apply_envelope(&env, reviewer);
            match &outcome {
                Ok(()) => {
                    rec.status = RecommendationStatus::Applied;
                    rec.decided_at = Some(now);
                }
                Err(InboundError::Weights(w @ WeightsError::OverrideLoosens { .. })) => {
                    rec.rejected(Gate::Dominance, w.to_string(), now);
                }
                Err(_) => {}
            }
            if rec.status != RecommendationStatus::Pending {
                self.storage.put_json(Store::PendingRecommendations, ns, id, &rec)?;
                self.chain_recommendation(ns, &rec, "approve")?;
            }
            outcome.map(|()| rec)
        })
    }

    pub fn reject_recommendation(
        &self,
        tenant: Option<&str>,
        id: &str,
        reviewer: &str,
    ) -> Result<PendingRecommendation, InboundError> {
        if reviewer.trim().is_empty() {
            return Err(InboundError::MissingReviewer);
        }
        let ns = tenant.unwrap_or(PLATFORM_NS);
        self.storage.with_key_lock(&format!("rec:{id}"), || {
            let mut rec = match self.storage.get_json::<PendingRecommendation>(Store::PendingRecommendations, ns, id)? {
                Some(r) if r.status == RecommendationStatus::Pending => r,
                _ => return Err(InboundError::NotPending(id.to_string())),
            };
            rec.reviewed_by = Some(reviewer.to_string());
            rec.rejected(Gate::Approval, "rejected by operator".into(), self.now());
            self.storage.put_json(Store::PendingRecommendations, ns, id, &rec)?;
            self.chain_recommendation(ns, &rec, "reject")?;
            Ok(rec)
        })
    }

    pub fn recommendation(&self, tenant: Option<&str>, id: &str) -> Result<Option<PendingRecommendation>, InboundError> {
        Ok(self.storage.get_json(Store::PendingRecommendations, tenant.unwrap_or(PLATFORM_NS), id)?)
    }

    /// Every stored record for the namespace, including signature rejections.
    pub fn list_recommendations(&self, tenant: Option<&str>) -> Result<Vec<PendingRecommendation>, InboundError> {
        Ok(self
            .storage
            .scan_json(Store::PendingRecommendations, tenant.unwrap_or(PLATFORM_NS), "")?
            .into_iter()
            .map(|(_, r)| r)
            .collect())
    }

    pub fn list_pending_recommendations(&self, tenant: Option<&str>) -> Result<Vec<PendingRecommendation>, InboundError> {
        Ok(self
            .list_recommendations(tenant)?
            .into_iter()
            .filter(|r| r.status == RecommendationStatus::Pending)
            .collect())
    }
}
