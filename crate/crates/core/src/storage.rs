//! Record stores behind a small key-value backend interface.
//!
//! Every record lives in one of the [`Store`]s under a namespace (a tenant id,
//! or [`PLATFORM_NS`]). Keys are `namespace \x1f key`, so a prefix scan inside
//! one namespace can never reach another.
//!
//! Locking is in-process only. Two processes opening the same data directory
//! are not coordinated.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use redb::{Database, ReadableTable, TableDefinition};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEP: char = '\u{1f}';
pub const PLATFORM_NS: &str = "_platform";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("backend: {0}")]
    Backend(String),
    #[error("record {store}/{key}: {reason}")]
    Codec { store: Store, key: String, reason: String },
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),
    #[error("timed out waiting for lock {0:?}")]
    LockTimeout(String),
    #[error("import line {line}: {reason}")]
    Import { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! backend_err {
    ($($t:ty),*) => {$(
        impl From<$t> for StorageError {
            fn from(e: $t) -> Self {
                StorageError::Backend(e.to_string())
            }
        }
    )*};
}

backend_err!(
    redb::Error,
    redb::DatabaseError,
    redb::TransactionError,
    redb::TableError,
    redb::StorageError,
    redb::CommitError
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Store {
    Versions,
    Invocations,
    PrincipalTrust,
    Evidence,
    WeightOverrides,
    WeightChanges,
    WeightSuggestions,
    PendingRecommendations,
    BreachNotifications,
    CutLedger,
}

impl Store {
    pub const ALL: [Store; 10] = [
        Store::Versions,
        Store::Invocations,
        Store::PrincipalTrust,
        Store::Evidence,
        Store::WeightOverrides,
        Store::WeightChanges,
        Store::WeightSuggestions,
        Store::PendingRecommendations,
        Store::BreachNotifications,
        Store::CutLedger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Store::Versions => "versions",
            Store::Invocations => "invocations",
            Store::PrincipalTrust => "principal_trust",
            Store::Evidence => "evidence",
            Store::WeightOverrides => "weight_overrides",
            Store::WeightChanges => "weight_changes",
            Store::WeightSuggestions => "weight_suggestions",
            Store::PendingRecommendations => "pending_recommendations",
            Store::BreachNotifications => "breach_notifications",
            Store::CutLedger => "cut_ledger",
        }
    }

    pub fn from_name(name: &str) -> Option<Store> {
        Store::ALL.into_iter().find(|s| s.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One write inside [`Backend::apply_batch`].
#[derive(Debug, Clone)]
pub enum BatchOp {
    Put { store: Store, key: String, value: Vec<u8> },
    Delete { store: Store, key: String },
}

pub type UpdateFn<'a> = dyn FnMut(Option<&[u8]>) -> Result<Option<Vec<u8>>, StorageError> + 'a;

/// Raw ordered key-value storage. Keys here are full (namespaced) keys.
pub trait Backend: Send + Sync {
    fn get(&self, store: Store, key: &str) -> Result<Option<Vec<u8>>, StorageError>;
    fn scan_prefix(&self, store: Store, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, StorageError>;
    fn last_with_prefix(&self, store: Store, prefix: &str) -> Result<Option<(String, Vec<u8>)>, StorageError>;
    /// Atomic read-modify-write. `f` returns the new value, or `None` to leave
    /// the key untouched; an error aborts without writing.
    fn update(&self, store: Store, key: &str, f: &mut UpdateFn<'_>) -> Result<Option<Vec<u8>>, StorageError>;
    fn apply_batch(&self, ops: Vec<BatchOp>) -> Result<(), StorageError>;
    fn flush(&self) -> Result<(), StorageError>;
}

/// Smallest string greater than every string that starts with `prefix`.
fn prefix_end(prefix: &str) -> Option<String> {
    let mut chars: Vec<char> = prefix.chars().collect();
    while let Some(last) = chars.pop() {
        let mut next = last as u32 + 1;
        if next == 0xD800 {
            next = 0xE000;
        }
        if let Some(c) = char::from_u32(next) {
            chars.push(c);
            return Some(chars.into_iter().collect());
        }
    }
    None
}

#[derive(Default)]
pub struct MemoryBackend {
    stores: RwLock<Vec<BTreeMap<String, Vec<u8>>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        MemoryBackend { stores: RwLock::new(vec![BTreeMap::new(); Store::ALL.len()]) }
    }
}

impl Backend for MemoryBackend {
    fn get(&self, store: Store, key: &str) -> Result<Option<Vec<u8>>, StorageError> {
        Ok(self.stores.read()[store.index()].get(key).cloned())
    }

    fn scan_prefix(&self, store: Store, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
        let guard = self.stores.read();
        let map = &guard[store.index()];
        let iter: Box<dyn Iterator<Item = (&String, &Vec<u8>)>> = match prefix_end(prefix) {
            Some(end) => Box::new(map.range(prefix.to_string()..end)),
            None => Box::new(map.range(prefix.to_string()..)),
        };
        Ok(iter.map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    fn last_with_prefix(&self, store: Store, prefix: &str) -> Result<Option<(String, Vec<u8>)>, StorageError> {
        let guard = self.stores.read();
        let map = &guard[store.index()];
        let last = match prefix_end(prefix) {
            Some(end) => map.range(prefix.to_string()..end).next_back(),
            None => map.range(prefix.to_string()..).next_back(),
        };
        Ok(last.map(|(k, v)| (k.clone(), v.clone())))
    }

    fn update(&self, store: Store, key: &str, f: &mut UpdateFn<'_>) -> Result<Option<Vec<u8>>, StorageError> {
        let mut guard = self.stores.write();
        let map = &mut guard[store.index()];
        match f(map.get(key).map(Vec::as_slice))? {
            Some(new) => {
                map.insert(key.to_string(), new.clone());
                Ok(Some(new))
            }
            None => Ok(map.get(key).cloned()),
        }
    }

    fn apply_batch(&self, ops: Vec<BatchOp>) -> Result<(), StorageError> {
        let mut guard = self.stores.write();
        for op in ops {
            match op {
                BatchOp::Put { store, key, value } => {
                    guard[store.index()].insert(key, value);
                }
                BatchOp::Delete { store, key } => {
                    guard[store.index()].remove(&key);
                }
            }
        }
        Ok(())
    }

    fn flush(&self) -> Result<(), StorageError> {
        Ok(())
    }
}

const fn table(store: Store) -> TableDefinition<'static, &'static str, &'static [u8]> {
    TableDefinition::new(match store {
        Store::Versions => "versions",
        Store::Invocations => "invocations",
        Store::PrincipalTrust => "principal_trust",
        Store::Evidence => "evidence",
        Store::WeightOverrides => "weight_overrides",
        Store::WeightChanges => "weight_changes",
        Store::WeightSuggestions => "weight_suggestions",
        Store::PendingRecommendations => "pending_recommendations",
        Store::BreachNotifications => "breach_notifications",
        Store::CutLedger => "cut_ledger",
    })
}

/// Durable backend: one redb file, one table per store.
pub struct RedbBackend {
    db: Database,
}

impl RedbBackend {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let db = Database::create(path)?;
        let txn = db.begin_write()?;
        for store in Store::ALL {
            txn.open_table(table(store))?;
        }
        txn.commit()?;
        Ok(RedbBackend { db })
    }
}

impl Backend for RedbBackend {
    fn get(&self, store: Store, key: &str) -> Result<Option<Vec<u8>>, StorageError> {
        let txn = self.db.begin_read()?;
        let t = txn.open_table(table(store))?;
        Ok(t.get(key)?.map(|v| v.value().to_vec()))
    }

    fn scan_prefix(&self, store: Store, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, StorageError> {
        let txn = self.db.begin_read()?;
        let t = txn.open_table(table(store))?;
        let end = prefix_end(prefix);
        let range = match &end {
            Some(end) => t.range::<&str>(prefix..end.as_str())?,
            None => t.range::<&str>(prefix..)?,
        };
        let mut out = Vec::new();
        for entry in range {
            let (k, v) = entry?;
            out.push((k.value().to_string(), v.value().to_vec()));
        }
        Ok(out)
    }

    fn last_with_prefix(&self, store: Store, prefix: &str) -> Result<Option<(String, Vec<u8>)>, StorageError> {
        let txn = self.db.begin_read()?;
        let t = txn.open_table(table(store))?;
        let end = prefix_end(prefix);
        let mut range = match &end {
            Some(end) => t.range::<&str>(prefix..end.as_str())?,
            None => t.range::<&str>(prefix..)?,
        };
        match range.next_back() {
            Some(entry) => {
                let (k, v) = entry?;
                Ok(Some((k.value().to_string(), v.value().to_vec())))
            }
            None => Ok(None),
        }
    }

    fn update(&self, store: Store, key: &str, f: &mut UpdateFn<'_>) -> Result<Option<Vec<u8>>, StorageError> {
        let txn = self.db.begin_write()?;
        let result = {
            let mut t = txn.open_table(table(store))?;
            let current = t.get(key)?.map(|v| v.value().to_vec());
            match f(current.as_deref())? {
                Some(new) => {
                    t.insert(key, new.as_slice())?;
                    Some(new)
                }
                None => current,
            }
        };
        txn.commit()?;
        Ok(result)
    }

    fn apply_batch(&self, ops: Vec<BatchOp>) -> Result<(), StorageError> {
        let txn = self.db.begin_write()?;
        for op in ops {
            match op {
                BatchOp::Put { store, key, value } => {
                    txn.open_table(table(store))?.insert(key.as_str(), value.as_slice())?;
                }
                BatchOp::Delete { store, key } => {
                    txn.open_table(table(store))?.remove(key.as_str())?;
                }
            }
        }
        txn.commit()?;
        Ok(())
    }

    fn flush(&self) -> Result<(), StorageError> {
        Ok(())
    }
}

/// Per-key exclusive locks, created on demand and dropped when unused.
pub struct KeyLocks {
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    timeout: Duration,
}

impl KeyLocks {
    pub fn new(timeout: Duration) -> Self {
        KeyLocks { locks: Mutex::new(HashMap::new()), timeout }
    }

    pub fn with_lock<R, E: From<StorageError>>(&self, key: &str, f: impl FnOnce() -> Result<R, E>) -> Result<R, E> {
        let entry = self.locks.lock().entry(key.to_string()).or_default().clone();
        let result = {
            let Some(_guard) = entry.try_lock_for(self.timeout) else {
                self.release(key, &entry);
                return Err(StorageError::LockTimeout(key.to_string()).into());
            };
            f()
        };
        self.release(key, &entry);
        result
    }

    fn release(&self, key: &str, entry: &Arc<Mutex<()>>) {
        let mut map = self.locks.lock();
        if Arc::strong_count(entry) == 2 {
            map.remove(key);
        }
    }
}

/// A record as it appears in exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub store: Store,
    pub namespace: String,
    pub key: String,
    pub value: serde_json::Value,
}

pub fn check_id(id: &str) -> Result<(), StorageError> {
    if id.is_empty() || id.chars().any(char::is_control) {
        Err(StorageError::InvalidIdentifier(id.to_string()))
    } else {
        Ok(())
    }
}

fn full_key(ns: &str, key: &str) -> Result<String, StorageError> {
    check_id(ns)?;
    Ok(format!("{ns}{SEP}{key}"))
}

fn split_key(full: &str) -> (&str, &str) {
    full.split_once(SEP).unwrap_or((full, ""))
}

/// Typed access to the stores.
pub struct Storage {
    backend: Box<dyn Backend>,
    locks: KeyLocks,
}

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(5);

impl Storage {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Storage { backend, locks: KeyLocks::new(DEFAULT_LOCK_TIMEOUT) }
    }

    pub fn in_memory() -> Self {
        Self::new(Box::new(MemoryBackend::new()))
    }

    /// Open (creating if needed) `kya.redb` inside `dir`.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, StorageError> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self::new(Box::new(RedbBackend::open(dir.as_ref().join("kya.redb"))?)))
    }

    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.locks = KeyLocks::new(timeout);
        self
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn with_key_lock<R, E: From<StorageError>>(&self, key: &str, f: impl FnOnce() -> Result<R, E>) -> Result<R, E> {
        self.locks.with_lock(key, f)
    }

    /// Exclusive access to one evidence chain's tail, whether or not the chain
    /// has any rows yet.
    pub fn with_chain_lock<R, E: From<StorageError>>(
        &self,
        tenant: &str,
        invocation: &str,
        f: impl FnOnce() -> Result<R, E>,
    ) -> Result<R, E> {
        self.locks.with_lock(&format!("chain{SEP}{tenant}{SEP}{invocation}"), f)
    }

    fn decode<T: DeserializeOwned>(store: Store, key: &str, bytes: &[u8]) -> Result<T, StorageError> {
        serde_json::from_slice(bytes).map_err(|e| StorageError::Codec {
            store,
            key: key.to_string(),
            reason: e.to_string(),
        })
    }

    fn encode<T: Serialize>(store: Store, key: &str, value: &T) -> Result<Vec<u8>, StorageError> {
        serde_json::to_vec(value).map_err(|e| StorageError::Codec {
            store,
            key: key.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn get_json<T: DeserializeOwned>(&self, store: Store, ns: &str, key: &str) -> Result<Option<T>, StorageError> {
        let full = full_key(ns, key)?;
        self.backend.get(store, &full)?.map(|b| Self::decode(store, &full, &b)).transpose()
    }

    pub fn put_json<T: Serialize>(&self, store: Store, ns: &str, key: &str, value: &T) -> Result<(), StorageError> {
        let full = full_key(ns, key)?;
        let bytes = Self::encode(store, &full, value)?;
        self.backend.apply_batch(vec![BatchOp::Put { store, key: full, value: bytes }])
    }

    /// Atomic insert-or-merge. `merge` sees the current record, if any.
    pub fn upsert_json<T, F>(&self, store: Store, ns: &str, key: &str, mut merge: F) -> Result<T, StorageError>
    where
        T: Serialize + DeserializeOwned,
        F: FnMut(Option<T>) -> T,
    {
        let full = full_key(ns, key)?;
        let mut f = |cur: Option<&[u8]>| -> Result<Option<Vec<u8>>, StorageError> {
            let current = cur.map(|b| Self::decode::<T>(store, &full, b)).transpose()?;
            Self::encode(store, &full, &merge(current)).map(Some)
        };
        let stored = self.backend.update(store, &full, &mut f)?;
        Self::decode(store, &full, &stored.expect("upsert always writes"))
    }

    /// Store `value` unless the key exists. Returns the stored record and
    /// whether this call inserted it.
    pub fn insert_if_absent_json<T>(&self, store: Store, ns: &str, key: &str, value: &T) -> Result<(T, bool), StorageError>
    where
        T: Serialize + DeserializeOwned,
    {
        let full = full_key(ns, key)?;
        let mut inserted = false;
        let mut f = |cur: Option<&[u8]>| -> Result<Option<Vec<u8>>, StorageError> {
            if cur.is_some() {
                return Ok(None);
            }
            inserted = true;
            Self::encode(store, &full, value).map(Some)
        };
        let stored = self.backend.update(store, &full, &mut f)?;
        Ok((Self::decode(store, &full, &stored.expect("present after insert"))?, inserted))
    }

    /// Records whose key (inside `ns`) starts with `prefix`, in key order.
    /// Returned keys have the namespace stripped.
    pub fn scan_json<T: DeserializeOwned>(&self, store: Store, ns: &str, prefix: &str) -> Result<Vec<(String, T)>, StorageError> {
        let full = full_key(ns, prefix)?;
        self.backend
            .scan_prefix(store, &full)?
            .into_iter()
            .map(|(k, v)| {
                let rec = Self::decode(store, &k, &v)?;
                Ok((split_key(&k).1.to_string(), rec))
            })
            .collect()
    }

    pub fn last_json<T: DeserializeOwned>(&self, store: Store, ns: &str, prefix: &str) -> Result<Option<(String, T)>, StorageError> {
        let full = full_key(ns, prefix)?;
        match self.backend.last_with_prefix(store, &full)? {
            Some((k, v)) => Ok(Some((split_key(&k).1.to_string(), Self::decode(store, &k, &v)?))),
            None => Ok(None),
        }
    }

    /// Raw batch put/delete of namespaced keys, applied atomically.
    pub fn write_batch(&self, ops: Vec<(Store, String, String, Option<Vec<u8>>)>) -> Result<(), StorageError> {
        let ops = ops
            .into_iter()
            .map(|(store, ns, key, value)| {
                let key = full_key(&ns, &key)?;
                Ok(match value {
                    Some(value) => BatchOp::Put { store, key, value },
                    None => BatchOp::Delete { store, key },
                })
            })
            .collect::<Result<Vec<_>, StorageError>>()?;
        self.backend.apply_batch(ops)
    }

    pub fn encode_json<T: Serialize>(store: Store, key: &str, value: &T) -> Result<Vec<u8>, StorageError> {
        Self::encode(store, key, value)
    }

    pub fn flush(&self) -> Result<(), StorageError> {
        self.backend.flush()
    }

    fn export_records(&self, store: Store, ns: Option<&str>) -> Result<Vec<ExportRecord>, StorageError> {
        let prefix = match ns {
            Some(ns) => full_key(ns, "")?,
            None => String::new(),
        };
        self.backend
            .scan_prefix(store, &prefix)?
            .into_iter()
            .map(|(k, v)| {
                let (namespace, key) = split_key(&k);
                Ok(ExportRecord {
                    store,
                    namespace: namespace.to_string(),
                    key: key.to_string(),
                    value: Self::decode(store, &k, &v)?,
                })
            })
            .collect()
    }

    /// Every record of one namespace, across all stores.
    pub fn dump_namespace(&self, ns: &str) -> Result<Vec<ExportRecord>, StorageError> {
        let mut out = Vec::new();
        for store in Store::ALL {
            out.extend(self.export_records(store, Some(ns))?);
        }
        Ok(out)
    }

    pub fn dump_all(&self) -> Result<Vec<ExportRecord>, StorageError> {
        let mut out = Vec::new();
        for store in Store::ALL {
            out.extend(self.export_records(store, None)?);
        }
        Ok(out)
    }

    /// Write one store as newline-delimited JSON. Returns the record count.
    pub fn export_ndjson(&self, store: Store, out: &mut dyn Write) -> Result<usize, StorageError> {
        let records = self.export_records(store, None)?;
        for rec in &records {
            serde_json::to_writer(&mut *out, rec).map_err(|e| StorageError::Backend(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(records.len())
    }

    /// Load records written by [`Storage::export_ndjson`]. Existing keys are
    /// overwritten. Returns the record count.
    pub fn import_ndjson(&self, input: &mut dyn BufRead) -> Result<usize, StorageError> {
        let mut ops = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExportRecord = serde_json::from_str(&line)
                .map_err(|e| StorageError::Import { line: i + 1, reason: e.to_string() })?;
            let key = full_key(&rec.namespace, &rec.key)?;
            let value = Self::encode(rec.store, &key, &rec.value)?;
            ops.push(BatchOp::Put { store: rec.store, key, value });
        }
        let n = ops.len();
        self.backend.apply_batch(ops)?;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::thread;

    fn backends() -> Vec<(Storage, Option<tempfile::TempDir>)> {
        let dir = tempfile::tempdir().unwrap();
        let redb = Storage::open_dir(dir.path()).unwrap();
        vec![(Storage::in_memory(), None), (redb, Some(dir))]
    }

    #[test]
    fn prefix_end_bounds() {
        assert_eq!(prefix_end("a\u{1f}").as_deref(), Some("a "));
        assert_eq!(prefix_end("").as_deref(), None);
    }

    #[test]
    fn namespaces_do_not_leak() {
        for (s, _dir) in backends() {
            s.put_json(Store::Versions, "t1", "a", &1).unwrap();
            s.put_json(Store::Versions, "t1x", "a", &2).unwrap();
            s.put_json(Store::Versions, "t2", "a", &3).unwrap();
            let t1: Vec<(String, i32)> = s.scan_json(Store::Versions, "t1", "").unwrap();
            assert_eq!(t1, vec![("a".to_string(), 1)]);
            assert!(s.dump_namespace("t1").unwrap().iter().all(|r| r.namespace == "t1"));
        }
    }

    #[test]
    fn last_with_prefix_picks_greatest_key() {
        for (s, _dir) in backends() {
            for seq in [0u64, 1, 2, 10] {
                s.put_json(Store::Evidence, "t", &format!("inv{SEP}{seq:020}"), &seq).unwrap();
            }
            s.put_json(Store::Evidence, "t", &format!("inw{SEP}{:020}", 99), &99u64).unwrap();
            let (_, last): (String, u64) = s.last_json(Store::Evidence, "t", &format!("inv{SEP}")).unwrap().unwrap();
            assert_eq!(last, 10);
            assert!(s.last_json::<u64>(Store::Evidence, "t", "nothing").unwrap().is_none());
        }
    }

    #[test]
    fn insert_if_absent_keeps_first() {
        for (s, _dir) in backends() {
            assert_eq!(s.insert_if_absent_json(Store::CutLedger, "t", "k", &1).unwrap(), (1, true));
            assert_eq!(s.insert_if_absent_json(Store::CutLedger, "t", "k", &2).unwrap(), (1, false));
        }
    }

    // Linearizability oracle: 20 concurrent debits equal the serial replay.
    #[test]
    fn concurrent_upserts_lose_nothing() {
        for (s, _dir) in backends() {
            let s = Arc::new(s);
            let handles: Vec<_> = (0..20)
                .map(|_| {
                    let s = s.clone();
                    thread::spawn(move || {
                        s.upsert_json(Store::PrincipalTrust, "t", "p", |cur: Option<i64>| (cur.unwrap_or(50) - 3).max(0))
                            .unwrap();
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
            let serial = (0..20).fold(50i64, |acc, _| (acc - 3).max(0));
            assert_eq!(s.get_json::<i64>(Store::PrincipalTrust, "t", "p").unwrap(), Some(serial));
        }
    }

    #[test]
    fn lock_released_when_action_fails() {
        let s = Storage::in_memory();
        let r: Result<(), StorageError> = s.with_chain_lock("t", "i", || Err(StorageError::Backend("boom".into())));
        assert!(r.is_err());
        let ok: Result<u8, StorageError> = s.with_chain_lock("t", "i", || Ok(7));
        assert_eq!(ok.unwrap(), 7);
    }

    #[test]
    fn lock_times_out() {
        let s = Arc::new(Storage::in_memory().with_lock_timeout(Duration::from_millis(20)));
        let (tx, rx) = std::sync::mpsc::channel();
        let (done_tx, done_rx) = std::sync::mpsc::channel::<()>();
        let s2 = s.clone();
        let h = thread::spawn(move || {
            s2.with_key_lock::<_, StorageError>("k", || {
                tx.send(()).unwrap();
                done_rx.recv().unwrap();
                Ok(())
            })
            .unwrap();
        });
        rx.recv().unwrap();
        let r: Result<(), StorageError> = s.with_key_lock("k", || Ok(()));
        assert!(matches!(r, Err(StorageError::LockTimeout(_))));
        done_tx.send(()).unwrap();
        h.join().unwrap();
    }

    #[test]
    fn durable_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let s = Storage::open_dir(dir.path()).unwrap();
            s.put_json(Store::WeightOverrides, "t", "a", &json!({"v": 1})).unwrap();
            s.put_json(Store::Evidence, "u", "b", &json!([1, 2])).unwrap();
            s.dump_all().unwrap()
        };
        let s = Storage::open_dir(dir.path()).unwrap();
        assert_eq!(s.dump_all().unwrap(), before);
    }

    #[test]
    fn ndjson_round_trip() {
        let a = Storage::in_memory();
        a.put_json(Store::Versions, "t", "k1", &json!({"x": "é"})).unwrap();
        a.put_json(Store::Versions, "u", "k2", &json!(3)).unwrap();
        let mut buf = Vec::new();
        assert_eq!(a.export_ndjson(Store::Versions, &mut buf).unwrap(), 2);
        let b = Storage::in_memory();
        assert_eq!(b.import_ndjson(&mut buf.as_slice()).unwrap(), 2);
        assert_eq!(a.dump_all().unwrap(), b.dump_all().unwrap());
    }

    #[test]
    fn control_chars_rejected_in_namespace() {
        let s = Storage::in_memory();
        assert!(matches!(
            s.put_json(Store::Versions, "bad\u{1f}ns", "k", &1),
            Err(StorageError::InvalidIdentifier(_))
        ));
    }
}
