mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::arb_definition;
use kya_core::canonical::{definition_hash, hash_projection, project, HASHED_FIELDS};
use kya_core::model::{
    AccessLevel, AgentDefinition, DataClass, HumanLoop, ModelTrust, Provenance, SecurityCap,
};

/// Change exactly one hashed field, chosen by `which`.
fn mutate(def: &mut AgentDefinition, which: usize, salt: &str) {
    let flip = |s: &mut BTreeSet<String>| {
        if !s.remove(salt) {
            s.insert(salt.to_string());
        }
    };
    match HASHED_FIELDS[which] {
        "name" => def.name.push_str(salt),
        "description" => def.description.push_str(salt),
        "system_prompt" => def.system_prompt.push_str(salt),
        "model" => def.model.push_str(salt),
        "tools" => def.tools.push(format!("t_{salt}")),
        "denied_tools" => def.denied_tools.push(format!("d_{salt}")),
        "human_loop" => {
            def.human_loop = if def.human_loop == HumanLoop::None { HumanLoop::InLoop } else { HumanLoop::None }
        }
        "access_level" => {
            def.access_level = if def.access_level == AccessLevel::Admin { AccessLevel::Read } else { AccessLevel::Admin }
        }
        "can_override" => def.can_override = !def.can_override,
        "can_revert" => def.can_revert = !def.can_revert,
        "can_delegate_to" => def.can_delegate_to.push(format!("a_{salt}")),
        "required_roles" => def.required_roles.push(format!("r_{salt}")),
        "extends" => def.extends = if def.extends.is_some() { None } else { Some(salt.to_string()) },
        "data_classes" => {
            if !def.data_classes.remove(&DataClass::Itar) {
                def.data_classes.insert(DataClass::Itar);
            }
        }
        "security_caps" => {
            if !def.security_caps.remove(&SecurityCap::ShellAccess) {
                def.security_caps.insert(SecurityCap::ShellAccess);
            }
        }
        "provenance" => {
            def.provenance = if def.provenance == Provenance::Builtin { Provenance::Imported } else { Provenance::Builtin }
        }
        "model_trust" => {
            def.model_trust = if def.model_trust == ModelTrust::Open { ModelTrust::Enterprise } else { ModelTrust::Open }
        }
        "compliance_scope" => flip(&mut def.compliance_scope),
        other => unreachable!("{other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn single_field_changes_never_collide(def in arb_definition(), which in 0..HASHED_FIELDS.len(), salt in "[a-z]{1,6}") {
        let mut other = def.clone();
        mutate(&mut other, which, &salt);
        prop_assert_ne!(definition_hash(&def), definition_hash(&other), "{}", HASHED_FIELDS[which]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn hash_is_the_hash_of_the_projection(def in arb_definition()) {
        let p = project(&def);
        prop_assert_eq!(p.keys().map(String::as_str).collect::<Vec<_>>(), {
            let mut f = HASHED_FIELDS.to_vec();
            f.sort();
            f
        });
        prop_assert_eq!(definition_hash(&def), hash_projection(&p));
    }

    #[test]
    fn json_round_trip_preserves_the_hash(def in arb_definition()) {
        let text = def.to_json().to_string();
        let back = kya_core::model::parse_definition(&text).unwrap();
        prop_assert_eq!(definition_hash(&back), definition_hash(&def));
        prop_assert_eq!(back, def);
    }
}
