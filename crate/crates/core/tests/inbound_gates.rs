mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::Duration;
use ed25519_dalek::SigningKey;
use proptest::prelude::*;
use rust_decimal::Decimal;
use serde_json::json;

use common::kernel;
use kya_core::inbound::{
    Gate, InboundError, RecommendationEnvelope, RecommendationStatus, SignedEnvelope, TrustAnchorSet,
};
use kya_core::weights::{Channel, Scope, WeightKey};

fn signer() -> SigningKey {
    SigningKey::from_bytes(&[5u8; 32])
}

fn anchors() -> TrustAnchorSet {
    let mut a = TrustAnchorSet::default();
    a.insert("k1", signer().verifying_key());
    a
}

fn key() -> WeightKey {
    WeightKey::new(Scope::SignalDelta, "policy_violation")
}

fn envelope(id: &str, value: i64, expires_in: Duration, tenant: Option<&str>) -> RecommendationEnvelope {
    RecommendationEnvelope {
        recommendation_id: id.into(),
        key_id: "k1".into(),
        expires_at: kya_core::fixtures::reference_now() + expires_in,
        target: key(),
        value: Decimal::from(value),
        tenant_id: tenant.map(str::to_string),
        rationale: String::new(),
    }
}

fn corrupt(mut s: SignedEnvelope) -> SignedEnvelope {
    let mut raw = B64.decode(s.signature_b64()).unwrap();
    raw[7] ^= 0x10;
    s.wire.insert("signature".into(), json!(B64.encode(raw)));
    s
}

#[test]
fn earliest_failing_gate_is_recorded() {
    for mask in 0u8..16 {
        let (bad_sig, expired, loosens, needs_review) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0);
        let (kya, _) = kernel();
        let value = if loosens { 1 } else { 9 };
        let ttl = if expired { Duration::minutes(-1) } else { Duration::hours(1) };
        let mut signed = SignedEnvelope::sign(envelope(&format!("m{mask}"), value, ttl, Some("acme")), &signer());
        if bad_sig {
            signed = corrupt(signed);
        }
        let allow: BTreeSet<WeightKey> = if needs_review { BTreeSet::new() } else { [key()].into() };
        let rec = kya.ingest_recommendation(&signed, &anchors(), &allow).unwrap();
        let expected_gate = [(bad_sig, Gate::Signature), (expired, Gate::Expiry), (loosens, Gate::Dominance)]
            .into_iter()
            .find(|(fails, _)| *fails)
            .map(|(_, g)| g);
        match expected_gate {
            Some(g) => assert_eq!((rec.status, rec.gate_rejected), (RecommendationStatus::Rejected, Some(g)), "mask {mask:04b}"),
            None if needs_review => assert_eq!(rec.status, RecommendationStatus::Pending, "mask {mask:04b}"),
            None => assert_eq!(rec.status, RecommendationStatus::AutoApplied, "mask {mask:04b}"),
        }
        let applied = kya.effective_weight(Some("acme"), &key()).unwrap();
        assert_eq!(applied == Decimal::from(9), rec.status == RecommendationStatus::AutoApplied, "mask {mask:04b}");
    }
}

#[test]
fn unpinned_key_fails_the_signature_gate() {
    let (kya, _) = kernel();
    let mut env = envelope("x", 9, Duration::hours(1), Some("acme"));
    env.key_id = "rogue".into();
    let rec = kya.ingest_recommendation(&SignedEnvelope::sign(env, &signer()), &anchors(), &BTreeSet::new()).unwrap();
    assert_eq!(rec.gate_rejected, Some(Gate::Signature));
    assert!(rec.envelope.is_none());
    assert!(matches!(
        kya.ingest_recommendation(&SignedEnvelope::sign(envelope("y", 9, Duration::hours(1), None), &signer()), &TrustAnchorSet::default(), &BTreeSet::new()),
        Err(InboundError::InboundDisabled)
    ));
}

#[test]
fn approval_and_reingest_race_never_reopens_an_applied_record() {
    for round in 0..40 {
        let (kya, _) = kernel();
        let kya = Arc::new(kya);
        let id = format!("race{round}");
        let signed = SignedEnvelope::sign(envelope(&id, 9, Duration::hours(1), Some("acme")), &signer());
        let first = kya.ingest_recommendation(&signed, &anchors(), &BTreeSet::new()).unwrap();
        assert_eq!(first.status, RecommendationStatus::Pending);
        let allow: BTreeSet<WeightKey> = [key()].into();
        let (approved, reingested) = std::thread::scope(|s| {
            let a = s.spawn(|| kya.approve_recommendation(Some("acme"), &id, "ops"));
            let b = s.spawn(|| kya.ingest_recommendation(&signed, &anchors(), &allow));
            (a.join().unwrap(), b.join().unwrap().unwrap())
        });
        let stored = kya.recommendation(Some("acme"), &id).unwrap().unwrap();
        match approved {
            Ok(rec) => {
                assert_eq!(rec.status, RecommendationStatus::Applied);
                assert_eq!(stored.status, RecommendationStatus::Applied);
                assert_ne!(reingested.status, RecommendationStatus::AutoApplied);
            }
            Err(InboundError::NotPending(_)) => {
                assert_eq!(stored.status, RecommendationStatus::AutoApplied);
                assert_eq!(reingested.status, RecommendationStatus::AutoApplied);
            }
            Err(other) => panic!("{other}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn envelopes_never_loosen_below_platform(
        steps in proptest::collection::vec((any::<bool>(), -5i64..30, any::<bool>(), any::<bool>()), 1..12)
    ) {
        let (kya, _) = kernel();
        let allow: BTreeSet<WeightKey> = [key()].into();
        for (i, (platform_write, value, tenant_routed, approve)) in steps.into_iter().enumerate() {
            if platform_write {
                kya.set_override(None, &key(), Decimal::from(value), Channel::Platform, "ops").unwrap();
                continue;
            }
            let tenant = tenant_routed.then_some("acme");
            let id = format!("e{i}");
            let signed = SignedEnvelope::sign(envelope(&id, value, Duration::hours(1), tenant), &signer());
            let rec = kya.ingest_recommendation(&signed, &anchors(), &allow).unwrap();
            if approve && rec.status == RecommendationStatus::Pending {
                let _ = kya.approve_recommendation(tenant, &id, "ops");
            }
            let platform = kya.effective_weight(None, &key()).unwrap();
            let effective = kya.effective_weight(Some("acme"), &key()).unwrap();
            prop_assert!(key().polarity().dominates(effective, platform));
        }
    }
}
