//! Deterministic replay of a topology attack on a four-agent loan fleet.
//!
//! A compromised sub-agent emits rogue signals on every invocation. With
//! actor attribution on, each signal also debits the orchestrator that
//! delegated the work; the trajectory records when the orchestrator's trust
//! crosses into the risky and blocked buckets.

use std::sync::Arc;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::clock::ManualClock;
use crate::evidence::EvidenceKey;
use crate::fixtures::reference_now;
use crate::model::{
    AccessLevel, AgentDefinition, ApprovalStatus, DataClass, DeploymentEnv, HumanLoop, InputSource, ModelTrust,
    PrincipalKind, Provenance, SignalKind,
};
use crate::scoring::{delegation_trust_premium, score_agent, DelegateObservation, ScoreContext};
use crate::trust::{bucket_for_trust, TrustBucket, START_TRUST};
use crate::{Kya, KyaError};

pub const SIM_TENANT: &str = "sim-bank";
pub const ORCHESTRATOR: &str = "triage";
pub const COMPROMISED: &str = "doc_verify";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSignal {
    pub invocation: u32,
    pub agent_key: String,
    pub signal: SignalKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetScenario {
    pub orchestrator: AgentDefinition,
    pub sub_agents: Vec<AgentDefinition>,
    pub invocations: u32,
    pub plan: Vec<PlannedSignal>,
    /// Debit the orchestrator for signals its delegates emit.
    pub attribution: bool,
    /// Include the delegation-trust premium in the orchestrator's static score.
    pub static_premium: bool,
}

fn agent(key: &str, name: &str) -> AgentDefinition {
    let mut d = AgentDefinition::minimal(key);
    d.name = name.into();
    d.model = "frontier-large".into();
    d.deployment_env = DeploymentEnv::Prod;
    d.approval_status = ApprovalStatus::Approved;
    d.owner = Some("lending-platform".into());
    d.definition_signed = true;
    d.created_at = Some(reference_now() - Duration::days(365));
    d.compliance_scope.insert("nydfs".into());
    d
}

/// Orchestrator plus its three sub-agents.
pub fn loan_fleet() -> (AgentDefinition, Vec<AgentDefinition>) {
    let mut triage = agent(ORCHESTRATOR, "Loan triage");
    triage.system_prompt = "Route each application to verification, screening and review.".into();
    triage.tools = vec!["route_application".into()];
    triage.can_delegate_to = vec![COMPROMISED.into(), "ofac_screen".into(), "risk_review".into()];
    triage.data_classes = [DataClass::Pii, DataClass::Financial].into();
    triage.human_loop = HumanLoop::OnLoop;
    triage.provenance = Provenance::Custom;

    let mut doc = agent(COMPROMISED, "Document verification");
    doc.system_prompt = "OCR the uploaded documents and match identity with the KYC provider.".into();
    doc.tools = vec!["ocr_document".into(), "kyc_match".into()];
    doc.data_classes = [DataClass::Pii].into();
    doc.input_sources = [InputSource::UserUpload].into();
    doc.provenance = Provenance::Builtin;
    doc.model_trust = ModelTrust::Enterprise;

    let mut ofac = agent("ofac_screen", "OFAC screening");
    ofac.system_prompt = "Screen the applicant against the sanctions list.".into();
    ofac.tools = vec!["sanctions_lookup".into()];
    ofac.data_classes = [DataClass::Pii].into();
    ofac.provenance = Provenance::Builtin;
    ofac.model_trust = ModelTrust::Enterprise;

    let mut review = agent("risk_review", "Risk review");
    review.system_prompt = "Apply credit policy and flag applications for underwriter review.".into();
    review.tools = vec!["read_credit_report".into(), "flag_application".into()];
    review.data_classes = [DataClass::Financial].into();
    review.access_level = AccessLevel::Read;
    review.provenance = Provenance::Builtin;
    review.model_trust = ModelTrust::Enterprise;

    (triage, vec![doc, ofac, review])
}

impl FleetScenario {
    /// The compromised sub-agent emits `signal` on every invocation.
    pub fn attack(signal: SignalKind, invocations: u32) -> Self {
        let (orchestrator, sub_agents) = loan_fleet();
        let plan = (1..=invocations)
            .map(|n| PlannedSignal { invocation: n, agent_key: COMPROMISED.into(), signal })
            .collect();
        FleetScenario { orchestrator, sub_agents, invocations, plan, attribution: true, static_premium: true }
    }

    /// Same fleet, no signals.
    pub fn control(invocations: u32) -> Self {
        FleetScenario { plan: Vec::new(), ..Self::attack(SignalKind::OosTool, invocations) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub invocation: u32,
    pub orchestrator_trust: i64,
    pub bucket: TrustBucket,
    pub premium: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub attribution: bool,
    pub static_premium: bool,
    pub orchestrator_static_score: i64,
    pub points: Vec<TrajectoryPoint>,
    pub risky_at: Option<u32>,
    pub blocked_at: Option<u32>,
}

/// First invocation at which `start - n*delta` drops below `threshold`.
pub fn predicted_crossing(delta: i64, threshold: i64) -> Option<u32> {
    if delta <= 0 {
        return None;
    }
    let n = (START_TRUST - threshold) / delta + 1;
    u32::try_from(n.max(1)).ok()
}

/// Replay `scenario` on a fresh in-memory kernel whose clock advances one
/// minute per invocation.
pub fn run_topology_attack(scenario: &FleetScenario) -> Result<Trajectory, KyaError> {
    let clock = Arc::new(ManualClock::new(reference_now()));
    let kya = Kya::builder()
        .key(EvidenceKey::from_bytes(b"attack-simulation-key".to_vec()))
        .clock(clock.clone())
        .build();
    let weights = kya.effective_table(Some(SIM_TENANT))?;
    let regimes = kya.regimes().clone();
    let registry = crate::scoring::InteractionRegistry::with_defaults();
    let gate = kya.config().observation_gate;

    let mut static_ctx = ScoreContext::at(reference_now());
    static_ctx.observation_gate = gate;
    let orchestrator_static = score_agent(&scenario.orchestrator, &weights, &registry, &regimes, &static_ctx);
    let delegate_buckets: Vec<(String, crate::scoring::RiskBucket)> = scenario
        .sub_agents
        .iter()
        .map(|d| (d.agent_key.clone(), score_agent(d, &weights, &registry, &regimes, &static_ctx).bucket))
        .collect();

    let orch = &scenario.orchestrator.agent_key;
    let mut points = Vec::with_capacity(scenario.invocations as usize);
    for n in 1..=scenario.invocations {
        clock.advance(Duration::minutes(1));
        for sub in &scenario.sub_agents {
            kya.record_invocation_mode(SIM_TENANT, &sub.agent_key, sub.human_loop, sub.human_loop)?;
        }
        for p in scenario.plan.iter().filter(|p| p.invocation == n) {
            let actor = scenario.attribution.then_some(orch.as_str());
            kya.record_principal_signal(SIM_TENANT, PrincipalKind::Agent, &p.agent_key, p.signal, actor)?;
        }
        let trust = kya
            .principal_trust(SIM_TENANT, PrincipalKind::Agent, orch)?
            .map_or(START_TRUST, |r| r.trust_score);
        let premium = if scenario.static_premium {
            let observed: Vec<DelegateObservation> = delegate_buckets
                .iter()
                .map(|(key, bucket)| DelegateObservation {
                    agent_key: key.clone(),
                    bucket: *bucket,
                    observations: kya.invocation_count(SIM_TENANT, key).unwrap_or(0),
                })
                .collect();
            delegation_trust_premium(&observed, &weights, gate).delta
        } else {
            0
        };
        points.push(TrajectoryPoint { invocation: n, orchestrator_trust: trust, bucket: bucket_for_trust(trust), premium });
    }
    let first = |pred: fn(TrustBucket) -> bool| points.iter().find(|p| pred(p.bucket)).map(|p| p.invocation);
    Ok(Trajectory {
        attribution: scenario.attribution,
        static_premium: scenario.static_premium,
        orchestrator_static_score: orchestrator_static.final_score,
        risky_at: first(|b| b <= TrustBucket::Risky),
        blocked_at: first(|b| b == TrustBucket::Blocked),
        points,
    })
}

pub fn run_matched_control(invocations: u32) -> Result<Trajectory, KyaError> {
    run_topology_attack(&FleetScenario::control(invocations))
}
