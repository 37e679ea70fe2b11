mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use rust_decimal::Decimal;

use kya_core::clock::ManualClock;
use kya_core::evidence::{ChainStatus, EvidenceKey};
use kya_core::fixtures::{reference_definitions, reference_now};
use kya_core::model::{DataClass, PrincipalKind, SignalKind};
use kya_core::storage::Storage;
use kya_core::weights::{Channel, WeightKey};
use kya_core::Kya;

#[derive(Debug, Clone)]
enum Op {
    Register(usize),
    Signal(usize),
    Override(i64),
    Notify(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..6).prop_map(Op::Register),
        (0usize..6).prop_map(Op::Signal),
        (1i64..90).prop_map(Op::Override),
        any::<u8>().prop_map(Op::Notify),
    ]
}

fn apply(kya: &Kya, tenant: &str, op: &Op) {
    let defs = reference_definitions();
    match op {
        Op::Register(i) => {
            kya.snapshot(tenant, &defs[*i], kya.now(), None).unwrap();
        }
        Op::Signal(i) => {
            kya.record_principal_signal(tenant, PrincipalKind::Agent, &defs[*i].agent_key, SignalKind::ALL[*i], None)
                .unwrap();
        }
        Op::Override(v) => {
            let _ = kya.set_override(Some(tenant), &WeightKey::factor("data_class:pii"), Decimal::from(*v), Channel::Tenant, "p");
        }
        Op::Notify(n) => {
            kya.emit_breach_notifications(tenant, &format!("inc{n}"), &BTreeSet::from(["gdpr".to_string()]), &BTreeSet::new())
                .unwrap();
        }
    }
}

fn store_counts(kya: &Kya, tenant: &str) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in kya.storage().dump_namespace(tenant).unwrap() {
        assert_eq!(r.namespace, tenant);
        *out.entry(r.store.name().to_string()).or_default() += 1;
    }
    out
}

/// Everything a tenant can read back, minus storage keys.
fn tenant_view(kya: &Kya, tenant: &str) -> serde_json::Value {
    let changes: Vec<_> = kya.list_weight_changes(Some(tenant)).unwrap();
    serde_json::json!({
        "agents": kya.registered_agents(tenant).unwrap(),
        "principals": kya.list_principals(tenant).unwrap(),
        "changes": changes,
        "weights": kya.effective_table(Some(tenant)).unwrap().entries(),
        "notifications": kya.list_breach_notifications(tenant).unwrap(),
        "chains": kya.chains(tenant).unwrap(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tenants_never_see_each_other(
        workload in proptest::collection::vec((any::<bool>(), op()), 1..30)
    ) {
        let (shared, _) = common::kernel();
        let (solo, _) = common::kernel();
        for (to_a, op) in &workload {
            apply(&shared, if *to_a { "a" } else { "b" }, op);
            if *to_a {
                apply(&solo, "a", op);
            }
        }
        prop_assert_eq!(store_counts(&shared, "a"), store_counts(&solo, "a"));
        prop_assert_eq!(tenant_view(&shared, "a"), tenant_view(&solo, "a"));
        prop_assert!(shared.storage().dump_namespace("b").unwrap().iter().all(|r| r.namespace == "b"));
    }
}

#[test]
fn file_store_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let open = || {
        Kya::builder()
            .storage(Storage::open_dir(dir.path()).unwrap())
            .key(EvidenceKey::from_bytes(vec![0x33; 32]))
            .clock(Arc::new(ManualClock::new(reference_now())))
            .build()
    };
    let before = {
        let kya = open();
        for op in [Op::Register(0), Op::Register(5), Op::Signal(2), Op::Override(40), Op::Notify(1)] {
            apply(&kya, "acme", &op);
        }
        kya.emit_breach_notifications("acme", "x", &BTreeSet::new(), &BTreeSet::from([DataClass::Phi])).unwrap();
        serde_json::to_vec(&kya.storage().dump_all().unwrap()).unwrap()
    };
    let kya = open();
    assert_eq!(serde_json::to_vec(&kya.storage().dump_all().unwrap()).unwrap(), before);
    let chains = kya.chains("acme").unwrap();
    assert!(!chains.is_empty());
    for chain in chains {
        assert_eq!(kya.verify_chain("acme", &chain).unwrap().status, ChainStatus::Valid, "{chain}");
    }
}
