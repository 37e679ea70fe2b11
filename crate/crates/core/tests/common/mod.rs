#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::Duration;
use proptest::prelude::*;
use proptest::sample::subsequence;
use rust_decimal::Decimal;

use kya_core::clock::ManualClock;
use kya_core::evidence::EvidenceKey;
use kya_core::fixtures::reference_now;
use kya_core::model::{
    AccessLevel, AgentDefinition, ApprovalStatus, AuditEvidence, AuditKind, DataClass, DeploymentEnv, HumanLoop,
    InputSource, ModelTrust, Provenance, SecurityCap, SupplyChainSource,
};
use kya_core::Kya;

pub const TOOL_POOL: [&str; 10] = [
    "read_docs",
    "search_kb",
    "send_email",
    "write_ledger",
    "delete_records",
    "deploy_service",
    "admin_console",
    "execute_code",
    "wire_transfer",
    "update_crm",
];

pub fn kernel() -> (Kya, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(reference_now()));
    let kya = Kya::builder()
        .key(EvidenceKey::from_bytes([0x33u8; 32]))
        .clock(clock.clone())
        .build();
    (kya, clock)
}

fn pick<T: Clone + std::fmt::Debug + 'static>(all: &'static [T]) -> impl Strategy<Value = T> {
    proptest::sample::select(all)
}

fn set_of<T: Ord + Clone + std::fmt::Debug + 'static>(all: &'static [T]) -> impl Strategy<Value = BTreeSet<T>> {
    subsequence(all.to_vec(), 0..=all.len()).prop_map(|v| v.into_iter().collect())
}

prop_compose! {
    fn arb_policy()(
        tools in subsequence(TOOL_POOL.to_vec(), 0..6),
        human_loop in pick(HumanLoop::ALL),
        access_level in pick(AccessLevel::ALL),
        can_override in any::<bool>(),
        can_revert in any::<bool>(),
        delegates in subsequence(vec!["helper_a", "helper_b", "helper_c"], 0..3),
        data_classes in set_of(DataClass::ALL),
        security_caps in set_of(SecurityCap::ALL),
        provenance in pick(Provenance::ALL),
        model_trust in pick(ModelTrust::ALL),
        scope in subsequence(vec!["gdpr", "hipaa", "nydfs", "sox", "eu_ai_act"], 0..3),
        prompt in "[a-z ]{0,24}",
    ) -> AgentDefinition {
        let mut d = AgentDefinition::minimal("generated");
        d.system_prompt = prompt;
        d.model = "frontier-large".into();
        d.tools = tools.into_iter().map(String::from).collect();
        d.human_loop = human_loop;
        d.access_level = access_level;
        d.can_override = can_override;
        d.can_revert = can_revert;
        d.can_delegate_to = delegates.into_iter().map(String::from).collect();
        d.data_classes = data_classes;
        d.security_caps = security_caps;
        d.provenance = provenance;
        d.model_trust = model_trust;
        d.compliance_scope = scope.into_iter().map(String::from).collect();
        d
    }
}

prop_compose! {
    /// Random definitions spanning every scored field.
    pub fn arb_definition()(
        base in arb_policy(),
        env in pick(DeploymentEnv::ALL),
        inputs in set_of(InputSource::ALL),
        supply in set_of(SupplyChainSource::ALL),
        deps in 0u32..300,
        approval in pick(ApprovalStatus::ALL),
        age_days in proptest::option::of(0i64..800),
        churn in 0u32..20,
        owned in any::<bool>(),
        signed in any::<bool>(),
        costs in (0i64..20_000, 0i64..500, proptest::option::of(1i64..20_000)),
        audits in subsequence(AuditKind::ALL.to_vec(), 0..=3),
    ) -> AgentDefinition {
        let now = reference_now();
        let mut d = base;
        d.deployment_env = env;
        d.input_sources = inputs;
        d.supply_chain = supply;
        d.dependency_count = deps;
        d.approval_status = approval;
        d.review_expires_at = Some(now + Duration::days(90));
        d.created_at = age_days.map(|a| now - Duration::days(a));
        d.version_count_30d = churn;
        d.owner = owned.then(|| "platform-team".into());
        d.definition_signed = signed;
        d.monthly_cost_avg = Decimal::from(costs.0);
        d.hourly_cost_peak = Decimal::from(costs.1);
        d.monthly_budget = costs.2.map(Decimal::from);
        d.audit_evidence = audits
            .into_iter()
            .map(|kind| AuditEvidence { kind, completed_at: now - Duration::days(30) })
            .collect();
        d
    }
}
