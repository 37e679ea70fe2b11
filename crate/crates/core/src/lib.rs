//! Governance kernel for fleets of autonomous agents.
//!
//! The [`Kya`] handle owns storage, the evidence signing key, a clock and the
//! static registries. Each module adds its operations to it.

pub mod attacksim;
pub mod canonical;
pub mod clock;
pub mod compliance;
pub mod evidence;
pub mod fixtures;
pub mod inbound;
pub mod model;
pub mod scoring;
pub mod storage;
pub mod trust;
pub mod versioning;
pub mod weights;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};

use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::compliance::{ComplianceError, RegimeRegistry};
use crate::evidence::{EvidenceError, EvidenceKey, TenantRetention};
use crate::inbound::InboundError;
use crate::model::ValidationErrors;
use crate::scoring::{InteractionRegistry, ScoringError};
use crate::storage::{Storage, StorageError};
use crate::trust::{BurstWindow, Counters, TrustError};
use crate::versioning::VersioningError;
use crate::weights::WeightsError;

/// Any error the kernel can return.
#[derive(Debug, Error)]
pub enum KyaError {
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Trust(#[from] TrustError),
    #[error(transparent)]
    Versioning(#[from] VersioningError),
    #[error(transparent)]
    Inbound(#[from] InboundError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Tunables that have no natural home in the weight tables.
#[derive(Debug, Clone)]
pub struct KyaConfig {
    /// Trust points recovered per idle day, toward the starting score.
    pub decay_per_day: i64,
    pub rogue_window: chrono::Duration,
    pub burst_factor: f64,
    /// Minimum recorded invocations before a delegate can add a premium.
    pub observation_gate: u64,
    pub mode_gap_share: f64,
    pub mode_gap_min_invocations: u64,
}

impl Default for KyaConfig {
    fn default() -> Self {
        KyaConfig {
            decay_per_day: 1,
            rogue_window: chrono::Duration::hours(24),
            burst_factor: 3.0,
            observation_gate: 10,
            mode_gap_share: 0.5,
            mode_gap_min_invocations: 20,
        }
    }
}

pub struct Kya {
    storage: Storage,
    key: EvidenceKey,
    clock: Arc<dyn Clock>,
    regimes: RegimeRegistry,
    interactions: RwLock<Arc<InteractionRegistry>>,
    retention: RwLock<BTreeMap<String, TenantRetention>>,
    bursts: Mutex<BTreeMap<String, BurstWindow>>,
    lineage: Mutex<BTreeMap<(String, String), i64>>,
    counters: Counters,
    config: KyaConfig,
}

#[derive(Default)]
pub struct KyaBuilder {
    storage: Option<Storage>,
    key: Option<EvidenceKey>,
    clock: Option<Arc<dyn Clock>>,
    regimes: Option<RegimeRegistry>,
    interactions: Option<InteractionRegistry>,
    config: KyaConfig,
}

impl KyaBuilder {
    pub fn storage(mut self, storage: Storage) -> Self {
        self.storage = Some(storage);
        self
    }

    pub fn key(mut self, key: EvidenceKey) -> Self {
        self.key = Some(key);
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn regimes(mut self, regimes: RegimeRegistry) -> Self {
        self.regimes = Some(regimes);
        self
    }

    pub fn interactions(mut self, registry: InteractionRegistry) -> Self {
        self.interactions = Some(registry);
        self
    }

    pub fn config(mut self, config: KyaConfig) -> Self {
        self.config = config;
        self
    }

    /// Unset parts default to in-memory storage, the environment-resolved
    /// signing key, the system clock and the built-in registries.
    pub fn build(self) -> Kya {
        Kya {
            storage: self.storage.unwrap_or_else(Storage::in_memory),
            key: self.key.unwrap_or_else(evidence::resolve_signing_key_from_env),
            clock: self.clock.unwrap_or_else(|| Arc::new(SystemClock)),
            regimes: self.regimes.unwrap_or_default(),
            interactions: RwLock::new(Arc::new(self.interactions.unwrap_or_else(InteractionRegistry::with_defaults))),
            retention: RwLock::new(BTreeMap::new()),
            bursts: Mutex::new(BTreeMap::new()),
            lineage: Mutex::new(BTreeMap::new()),
            counters: Counters::default(),
            config: self.config,
        }
    }
}

impl Kya {
    pub fn builder() -> KyaBuilder {
        KyaBuilder::default()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn config(&self) -> &KyaConfig {
        &self.config
    }

    #[cfg(test)]
    pub(crate) fn in_memory_for_tests() -> Kya {
        use chrono::TimeZone;
        Kya::builder()
            .key(EvidenceKey::from_bytes([0x42u8; 32]))
            .clock(Arc::new(clock::ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap())))
            .build()
    }
}
