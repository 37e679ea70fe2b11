//! Reference agent definitions shipped with the crate.

use chrono::{DateTime, TimeZone, Utc};

use crate::model::{parse_definition, AgentDefinition};

/// Scoring instant the reference definitions are calibrated against.
pub fn reference_now() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap()
}

pub const REFERENCE_DEFINITIONS: [(&str, &str); 6] = [
    ("autonomous_writer", include_str!("../fixtures/autonomous_writer.json")),
    ("code_exec_hil", include_str!("../fixtures/code_exec_hil.json")),
    ("self_hosted_pii", include_str!("../fixtures/self_hosted_pii.json")),
    ("untrusted_chain", include_str!("../fixtures/untrusted_chain.json")),
    ("replit", include_str!("../fixtures/replit.json")),
    ("benign", include_str!("../fixtures/benign.json")),
];

pub fn reference_definition(name: &str) -> Option<AgentDefinition> {
    REFERENCE_DEFINITIONS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, json)| parse_definition(json).expect("bundled fixture is valid"))
}

pub fn reference_definitions() -> Vec<AgentDefinition> {
    REFERENCE_DEFINITIONS
        .iter()
        .map(|(_, json)| parse_definition(json).expect("bundled fixture is valid"))
        .collect()
}
