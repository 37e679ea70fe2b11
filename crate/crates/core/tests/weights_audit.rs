mod common;

use proptest::prelude::*;
use rust_decimal::Decimal;

use common::kernel;
use kya_core::fixtures::reference_definition;
use kya_core::weights::{Channel, Scope, SuggestionStatus, WeightKey, WeightsError};

fn keys() -> [WeightKey; 3] {
    [
        WeightKey::factor("data_class:phi"),
        WeightKey::new(Scope::BucketThreshold, "critical"),
        WeightKey::new(Scope::ToolMultiplier, "wire_transfer"),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_accepted_write_leaves_one_audit_row(
        writes in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3, -10i64..120), 1..20)
    ) {
        let (kya, _) = kernel();
        let tenants = ["a", "b", "c"];
        let mut accepted = 0;
        let mut last_tenant_row: std::collections::BTreeMap<(usize, usize), Decimal> = Default::default();
        for (channel, t, k, v) in writes {
            let key = &keys()[k];
            let (tenant, channel) = match channel {
                0 => (None, Channel::Platform),
                1 => (Some(tenants[t]), Channel::Tenant),
                _ => (Some(tenants[t]), Channel::Recommendation),
            };
            match kya.set_override(tenant, key, Decimal::from(v), channel, "prop") {
                Ok(row) => {
                    accepted += 1;
                    if channel == Channel::Tenant {
                        if let Some(prev) = last_tenant_row.insert((t, k), row.value) {
                            prop_assert!(key.polarity().dominates(row.value, prev), "tenant row loosened");
                        }
                    }
                }
                Err(WeightsError::OverrideLoosens { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
        let rows = kya.list_weight_changes(None).unwrap().len()
            + tenants.iter().map(|t| kya.list_weight_changes(Some(t)).unwrap().len()).sum::<usize>();
        prop_assert_eq!(rows, accepted);
    }
}

#[test]
fn suggestions_need_a_reviewer() {
    let (kya, _) = kernel();
    let def = reference_definition("self_hosted_pii").unwrap();
    let score = kya.score("t", &def).unwrap();
    let made = kya.propose_from_incident("t", &score.incident("inc", kya_core::weights::Severity::Critical)).unwrap();
    assert!(!made.is_empty());
    for s in &made {
        assert!(matches!(kya.approve_suggestion("t", &s.id, "  "), Err(WeightsError::MissingReviewer)));
    }
    assert_eq!(kya.list_suggestions("t", Some(SuggestionStatus::Pending)).unwrap().len(), made.len());
    let approved = kya.approve_suggestion("t", &made[0].id, "risk-officer").unwrap();
    assert_eq!(approved.reviewer.as_deref(), Some("risk-officer"));
    assert_eq!(kya.effective_weight(Some("t"), &approved.key).unwrap(), approved.proposed);
    let minor = kya.propose_from_incident("t", &score.incident("minor", kya_core::weights::Severity::High)).unwrap();
    assert!(minor.is_empty());
}
