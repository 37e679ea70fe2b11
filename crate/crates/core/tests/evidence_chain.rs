mod common;

use std::collections::BTreeSet;

use chrono::Duration;
use proptest::prelude::*;
use serde_json::json;

use common::kernel;
use kya_core::evidence::{ChainStatus, NewEvent, TenantRetention};
use kya_core::fixtures::reference_now;
use kya_core::model::{DataClass, EvidenceKind};

#[test]
fn append_then_verify() {
    for n in [0u64, 1, 2, 100] {
        let (kya, _) = kernel();
        for i in 0..n {
            kya.append_event("t", "inv", NewEvent::new(EvidenceKind::Prompt, json!({"i": i}))).unwrap();
        }
        let r = kya.verify_chain("t", "inv").unwrap();
        assert_eq!((r.status, r.events_checked as u64), (ChainStatus::Valid, n));
    }
}

#[test]
fn a_different_key_sees_tamper() {
    let (kya, _) = kernel();
    kya.append_event("t", "inv", NewEvent::new(EvidenceKind::Prompt, json!(1))).unwrap();
    let dump = kya.storage().dump_all().unwrap();
    let other = kya_core::Kya::builder()
        .key(kya_core::evidence::EvidenceKey::from_bytes(b"another key".to_vec()))
        .build();
    for rec in dump {
        let bytes = serde_json::to_vec(&rec.value).unwrap();
        other
            .storage()
            .write_batch(vec![(rec.store, rec.namespace, rec.key, Some(bytes))])
            .unwrap();
    }
    assert_eq!(other.verify_chain("t", "inv").unwrap().status, ChainStatus::PayloadTamper);
}

#[test]
fn deleting_the_head_without_a_cut_record_is_a_break() {
    let (kya, _) = kernel();
    for i in 0..3 {
        kya.append_event("t", "inv", NewEvent::new(EvidenceKind::Prompt, json!(i))).unwrap();
    }
    let key = format!("inv{}{:020}", kya_core::storage::SEP, 0);
    kya.storage()
        .write_batch(vec![(kya_core::storage::Store::Evidence, "t".into(), key, None)])
        .unwrap();
    assert_eq!(kya.verify_chain("t", "inv").unwrap().status, ChainStatus::ChainBreak);
}

#[test]
fn regulatory_floor_outlives_configured_retention() {
    let (kya, clock) = kernel();
    let start = reference_now() - Duration::days(365 * 7);
    let add = |tags: &[DataClass], days: i64| {
        kya.append_event("t", "inv", NewEvent::new(EvidenceKind::Prompt, json!(days)).tags(tags.iter().copied()).at(start + Duration::days(days)))
            .unwrap();
    };
    add(&[], 0);
    add(&[DataClass::Pii], 1);
    add(&[], 2);
    add(&[], 3);
    kya.set_tenant_retention("t", TenantRetention { regimes: BTreeSet::new(), retention_days: Some(30) });
    clock.set(start + Duration::days(365 * 5));
    let report = kya.prune_expired_evidence(kya.now()).unwrap();
    assert_eq!(report.pruned, 1);
    let r = kya.verify_chain("t", "inv").unwrap();
    assert_eq!((r.status, r.index), (ChainStatus::CleanCut, Some(1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prune_at_any_position_is_a_clean_cut(len in 2usize..40, k in 1usize..40) {
        let k = k.min(len - 1);
        let (kya, clock) = kernel();
        let start = reference_now();
        for i in 0..len {
            let at = if i < k { start } else { start + Duration::days(100) };
            kya.append_event("t", "inv", NewEvent::new(EvidenceKind::ToolCall, json!(i)).at(at)).unwrap();
        }
        kya.set_tenant_retention("t", TenantRetention { regimes: BTreeSet::new(), retention_days: Some(50) });
        clock.set(start + Duration::days(120));
        let report = kya.prune_expired_evidence(kya.now()).unwrap();
        prop_assert_eq!(report.pruned, k);
        let r = kya.verify_chain("t", "inv").unwrap();
        prop_assert_eq!((r.status, r.index, r.events_checked), (ChainStatus::CleanCut, Some(k as u64), len - k));
        let cut = kya.cut_record("t", "inv").unwrap().unwrap();
        prop_assert_eq!(cut.cut_seq, k as u64);
        kya.append_event("t", "inv", NewEvent::new(EvidenceKind::Response, json!("next"))).unwrap();
        prop_assert_eq!(kya.verify_chain("t", "inv").unwrap().status, ChainStatus::CleanCut);
    }
}
