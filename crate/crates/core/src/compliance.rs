//! Regulatory regimes: retention floors, breach SLAs and notification fan-out.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentDefinition, DataClass};
use crate::storage::{Store, StorageError};
use crate::Kya;

const BUILTIN_REGIMES: &str = include_str!("../data/regimes.json");

pub const DAYS_PER_YEAR: i64 = 365;

#[derive(Debug, Error)]
pub enum ComplianceError {
    #[error("unknown regime {0:?}")]
    UnknownRegime(String),
    #[error("regime table: {0}")]
    Table(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub id: String,
    pub name: String,
    pub retention_years: u32,
    pub breach_sla_hours: Option<u32>,
    pub breach_format: Option<String>,
    pub tier_model: Option<String>,
    pub severity_factor: Decimal,
    pub controls: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub note: Option<String>,
}

impl Regime {
    pub fn retention(&self) -> Duration {
        Duration::days(DAYS_PER_YEAR * i64::from(self.retention_years))
    }

    pub fn breach_sla(&self) -> Option<Duration> {
        self.breach_sla_hours.map(|h| Duration::hours(i64::from(h)))
    }
}

#[derive(Deserialize)]
struct RegimeTable {
    class_regimes: BTreeMap<DataClass, Vec<String>>,
    class_regimes_when_in_scope: BTreeMap<DataClass, Vec<String>>,
    regimes: Vec<Regime>,
}

/// One row of [`RegimeRegistry::compliance_summary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplianceRow {
    pub regime: String,
    pub name: String,
    pub retention_years: u32,
    pub breach_sla_hours: Option<u32>,
    pub tier_model: Option<String>,
    pub controls: String,
    pub source: RegimeSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSource {
    Scope,
    DataClass,
}

/// Read-only regime table.
#[derive(Debug, Clone)]
pub struct RegimeRegistry {
    regimes: BTreeMap<String, Regime>,
    aliases: BTreeMap<String, String>,
    class_regimes: BTreeMap<DataClass, Vec<String>>,
    class_regimes_when_in_scope: BTreeMap<DataClass, Vec<String>>,
}

/// Lowercase and fold punctuation to `_`, so "NYDFS Part 500" finds `nydfs_part_500`.
fn normalize(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for c in id.trim().chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

impl RegimeRegistry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_REGIMES).expect("embedded regime table parses")
    }

    pub fn from_json(json: &str) -> Result<Self, ComplianceError> {
        let table: RegimeTable =
            serde_json::from_str(json).map_err(|e| ComplianceError::Table(e.to_string()))?;
        let mut regimes = BTreeMap::new();
        let mut aliases = BTreeMap::new();
        for r in table.regimes {
            if r.severity_factor < Decimal::ONE {
                return Err(ComplianceError::Table(format!("{}: severity factor below 1", r.id)));
            }
            aliases.insert(normalize(&r.name), r.id.clone());
            for a in &r.aliases {
                aliases.insert(normalize(a), r.id.clone());
            }
            if regimes.insert(r.id.clone(), r).is_some() {
                return Err(ComplianceError::Table("duplicate regime id".into()));
            }
        }
        let reg = RegimeRegistry {
            regimes,
            aliases,
            class_regimes: table.class_regimes,
            class_regimes_when_in_scope: table.class_regimes_when_in_scope,
        };
        for id in reg.class_regimes.values().chain(reg.class_regimes_when_in_scope.values()).flatten() {
            if !reg.regimes.contains_key(id) {
                return Err(ComplianceError::Table(format!("class map names unknown regime {id}")));
            }
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Regime> {
        self.regimes.values()
    }

    pub fn get(&self, id: &str) -> Option<&Regime> {
        if let Some(r) = self.regimes.get(id) {
            return Some(r);
        }
        let n = normalize(id);
        self.regimes
            .get(&n)
            .or_else(|| self.aliases.get(&n).and_then(|canon| self.regimes.get(canon)))
    }

    pub fn resolve(&self, id: &str) -> Result<&Regime, ComplianceError> {
        self.get(id).ok_or_else(|| ComplianceError::UnknownRegime(id.to_string()))
    }

    /// Regimes implied by data classes, given the declared scope.
    pub fn class_implied(&self, classes: &BTreeSet<DataClass>, scope: &BTreeSet<String>) -> BTreeSet<String> {
        let scoped: BTreeSet<&str> = scope.iter().filter_map(|s| self.get(s)).map(|r| r.id.as_str()).collect();
        let mut out = BTreeSet::new();
        for class in classes {
            if let Some(ids) = self.class_regimes.get(class) {
                out.extend(ids.iter().cloned());
            }
            if let Some(ids) = self.class_regimes_when_in_scope.get(class) {
                out.extend(ids.iter().filter(|id| scoped.contains(id.as_str())).cloned());
            }
        }
        out
    }

    /// Canonical ids of the scope plus class-implied regimes.
    pub fn applicable(
        &self,
        scope: &BTreeSet<String>,
        classes: &BTreeSet<DataClass>,
    ) -> Result<BTreeSet<String>, ComplianceError> {
        let mut out = BTreeSet::new();
        for id in scope {
            out.insert(self.resolve(id)?.id.clone());
        }
        out.extend(self.class_implied(classes, scope));
        Ok(out)
    }

    /// The longest floor over the given regimes and the regimes their data
    /// classes imply. Zero when nothing applies.
    pub fn required_retention(
        &self,
        regimes: &BTreeSet<String>,
        classes: &BTreeSet<DataClass>,
    ) -> Result<Duration, ComplianceError> {
        let ids = self.applicable(regimes, classes)?;
        Ok(ids
            .iter()
            .map(|id| self.regimes[id].retention())
            .max()
            .unwrap_or_else(Duration::zero))
    }

    /// Scope regimes (unknown ids skipped) followed by class-implied ones, by id.
    pub fn compliance_summary(&self, def: &AgentDefinition) -> Vec<ComplianceRow> {
        let scoped: BTreeSet<String> =
            def.compliance_scope.iter().filter_map(|s| self.get(s)).map(|r| r.id.clone()).collect();
        let implied = self.class_implied(&def.data_classes, &def.compliance_scope);
        scoped
            .iter()
            .map(|id| (id, RegimeSource::Scope))
            .chain(implied.difference(&scoped).map(|id| (id, RegimeSource::DataClass)))
            .map(|(id, source)| {
                let r = &self.regimes[id];
                ComplianceRow {
                    regime: r.id.clone(),
                    name: r.name.clone(),
                    retention_years: r.retention_years,
                    breach_sla_hours: r.breach_sla_hours,
                    tier_model: r.tier_model.clone(),
                    controls: r.controls.clone(),
                    source,
                }
            })
            .collect()
    }
}

impl Default for RegimeRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentNotification {
    pub incident_id: String,
    pub regime: String,
    pub format: String,
    pub due_at: DateTime<Utc>,
    pub emitted_at: DateTime<Utc>,
}

impl Kya {
    pub fn regimes(&self) -> &RegimeRegistry {
        &self.regimes
    }

    /// One notification per applicable regime that carries a breach SLA.
    /// Re-emitting an incident returns the rows stored the first time.
    pub fn emit_breach_notifications(
        &self,
        tenant: &str,
        incident_id: &str,
        regimes: &BTreeSet<String>,
        classes: &BTreeSet<DataClass>,
    ) -> Result<Vec<IncidentNotification>, ComplianceError> {
        let ids = self.regimes.applicable(regimes, classes)?;
        let now = self.now();
        let mut out = Vec::new();
        for id in ids {
            let r = &self.regimes.regimes[&id];
            let Some(sla) = r.breach_sla() else { continue };
            let fresh = IncidentNotification {
                incident_id: incident_id.to_string(),
                regime: id.clone(),
                format: r.breach_format.clone().unwrap_or_else(|| r.name.clone()),
                due_at: now + sla,
                emitted_at: now,
            };
            let key = format!("{incident_id}\u{1f}{id}");
            let (stored, _) =
                self.storage.insert_if_absent_json(Store::BreachNotifications, tenant, &key, &fresh)?;
            out.push(stored);
        }
        Ok(out)
    }

    pub fn list_breach_notifications(&self, tenant: &str) -> Result<Vec<IncidentNotification>, ComplianceError> {
        Ok(self
            .storage
            .scan_json::<IncidentNotification>(Store::BreachNotifications, tenant, "")?
            .into_iter()
            .map(|(_, n)| n)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn table_has_32_regimes() {
        let reg = RegimeRegistry::builtin();
        assert_eq!(reg.len(), 32);
        assert_eq!(reg.resolve("GDPR").unwrap().retention_years, 6);
        assert_eq!(reg.resolve("NYDFS Part 500").unwrap().id, "nydfs");
        assert_eq!(reg.resolve("dora").unwrap().breach_sla_hours, Some(24));
        assert!(matches!(reg.resolve("atlantis"), Err(ComplianceError::UnknownRegime(_))));
    }

    #[test]
    fn retention_examples() {
        let reg = RegimeRegistry::builtin();
        let none = BTreeSet::new();
        let y = |n: i64| Duration::days(365 * n);
        assert_eq!(reg.required_retention(&set(&["gdpr"]), &none).unwrap(), y(6));
        assert_eq!(reg.required_retention(&set(&["gdpr", "eu_ai_act"]), &none).unwrap(), y(10));
        let classified = BTreeSet::from([DataClass::UsClassified]);
        assert_eq!(reg.required_retention(&BTreeSet::new(), &classified).unwrap(), y(25));
        assert_eq!(reg.required_retention(&BTreeSet::new(), &none).unwrap(), Duration::zero());
    }

    #[test]
    fn financial_implies_nydfs_only_in_scope() {
        let reg = RegimeRegistry::builtin();
        let fin = BTreeSet::from([DataClass::Financial]);
        assert!(reg.class_implied(&fin, &BTreeSet::new()).is_empty());
        assert_eq!(reg.class_implied(&fin, &set(&["NYDFS"])), set(&["nydfs"]));
    }

    #[test]
    fn summary_rows() {
        let reg = RegimeRegistry::builtin();
        let mut clinical = AgentDefinition::minimal("clinical");
        clinical.data_classes.insert(DataClass::Phi);
        let rows = reg.compliance_summary(&clinical);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].regime.as_str(), rows[0].retention_years, rows[0].breach_sla_hours), ("hipaa", 6, Some(1440)));

        let mut public = AgentDefinition::minimal("p");
        public.data_classes.insert(DataClass::Public);
        assert!(reg.compliance_summary(&public).is_empty());

        let mut bank = AgentDefinition::minimal("bank");
        bank.data_classes.insert(DataClass::Pii);
        bank.compliance_scope.insert("nydfs".into());
        let ids: Vec<_> = reg.compliance_summary(&bank).into_iter().map(|r| r.regime).collect();
        assert_eq!(ids, vec!["nydfs", "gdpr"]);
    }
}
