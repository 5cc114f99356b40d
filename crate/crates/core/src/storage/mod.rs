//! Transactional table store.
//!
//! Three named tables (`meta`, `log`, `subs`) hold string rows keyed by
//! string keys. Writers are serialized; each committed transaction becomes a
//! new version and readers either see the latest version or pin an older one
//! through a [`SnapshotView`]. Rows keep a short version chain so that open
//! views keep seeing the state of the instant they were opened.
//!
//! The `log` table is special: rows are appended through
//! [`Txn::append_log`], which hands out dense sequence numbers. Because only
//! one writer runs at a time, an aborted transaction never burns a number.
//!
//! Durability is delegated to a backend: [`Backend::Memory`] keeps nothing,
//! [`file::FileBackend`] appends every commit to a checksummed log file and
//! periodically checkpoints.

pub mod file;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Bound;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use file::{FileBackend, FileOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Table {
    Meta,
    Log,
    Subs,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Meta, Table::Log, Table::Subs];

    fn idx(self) -> usize {
        match self {
            Table::Meta => 0,
            Table::Log => 1,
            Table::Subs => 2,
        }
    }
}

/// Key of a log row. Zero padding keeps byte order equal to numeric order.
pub fn log_key(seq: u64) -> String {
    format!("{seq:020}")
}

pub fn parse_log_key(key: &str) -> Option<u64> {
    key.parse().ok()
}

/// Read access shared by transactions and snapshot views.
pub trait ReadView {
    fn get(&self, table: Table, key: &str) -> Option<Arc<str>>;

    /// Visits rows with key `>= start` in ascending key order until `visit`
    /// returns false. `visit` must not call back into the store.
    fn scan_from(&self, table: Table, start: &str, visit: &mut dyn FnMut(&str, &Arc<str>) -> bool);

    /// Highest log sequence number committed as of this view.
    fn log_watermark(&self) -> u64;

    fn scan_prefix(&self, table: Table, prefix: &str) -> Vec<(String, Arc<str>)> {
        let mut out = Vec::new();
        self.scan_from(table, prefix, &mut |k, v| {
            if !k.starts_with(prefix) {
                return false;
            }
            out.push((k.to_string(), v.clone()));
            true
        });
        out
    }

    fn has_prefix(&self, table: Table, prefix: &str) -> bool {
        let mut found = false;
        self.scan_from(table, prefix, &mut |k, _| {
            found = k.starts_with(prefix);
            false
        });
        found
    }

    /// Log rows with sequence `>= from_seq`, ascending, at most `limit`.
    fn scan_logs(&self, from_seq: u64, limit: usize) -> Vec<(u64, Arc<str>)> {
        let mut out = Vec::new();
        if limit == 0 {
            return out;
        }
        self.scan_from(Table::Log, &log_key(from_seq.max(1)), &mut |k, v| {
            if let Some(seq) = parse_log_key(k) {
                out.push((seq, v.clone()));
            }
            out.len() < limit
        });
        out
    }
}

/// One committed transaction as handed to a durability backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommitBatch {
    #[serde(rename = "v")]
    pub version: u64,
    #[serde(rename = "wm")]
    pub watermark: u64,
    #[serde(rename = "w")]
    pub writes: Vec<(Table, String, Option<String>)>,
}

/// Full latest state of every table, used for checkpoints and recovery.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StateImage {
    #[serde(rename = "v")]
    pub version: u64,
    #[serde(rename = "wm")]
    pub watermark: u64,
    pub tables: Vec<(Table, Vec<(String, String)>)>,
}

pub enum Backend {
    Memory,
    File(FileBackend),
}

impl Backend {
    fn persist(&mut self, batch: &CommitBatch) -> Result<()> {
        match self {
            Backend::Memory => Ok(()),
            Backend::File(f) => f.append(batch),
        }
    }

    fn wants_checkpoint(&self) -> bool {
        match self {
            Backend::Memory => false,
            Backend::File(f) => f.wants_checkpoint(),
        }
    }

    fn checkpoint(&mut self, image: &StateImage) -> Result<()> {
        match self {
            Backend::Memory => Ok(()),
            Backend::File(f) => f.checkpoint(image),
        }
    }
}

type Chain = Vec<(u64, Option<Arc<str>>)>;

#[derive(Default)]
struct State {
    tables: [BTreeMap<String, Chain>; 3],
    version: u64,
    watermark: u64,
    /// Open snapshot views by pinned version.
    views: BTreeMap<u64, usize>,
    /// Rows whose chains may still hold versions only a view needed.
    dirty: BTreeSet<(Table, String)>,
}

impl State {
    fn latest(&self, table: Table, key: &str) -> Option<Arc<str>> {
        self.tables[table.idx()].get(key).and_then(|c| c.last()).and_then(|(_, v)| v.clone())
    }

    fn at(chain: &Chain, version: u64) -> Option<&Arc<str>> {
        chain.iter().rev().find(|(ver, _)| *ver <= version).and_then(|(_, v)| v.as_ref())
    }

    fn prune(&mut self, table: Table, key: &str) -> bool {
        let oldest = self.views.keys().next().copied();
        let map = &mut self.tables[table.idx()];
        let Some(chain) = map.get_mut(key) else { return false };
        let keep_from = match oldest {
            None => chain.len() - 1,
            Some(pin) => chain.iter().rposition(|(ver, _)| *ver <= pin).unwrap_or(0),
        };
        chain.drain(..keep_from);
        if chain.len() == 1 && chain[0].1.is_none() {
            map.remove(key);
            return false;
        }
        chain.len() > 1
    }

    fn sweep_dirty(&mut self) {
        let dirty = std::mem::take(&mut self.dirty);
        for (table, key) in dirty {
            if self.prune(table, &key) {
                self.dirty.insert((table, key));
            }
        }
    }

    fn image(&self) -> StateImage {
        StateImage {
            version: self.version,
            watermark: self.watermark,
            tables: Table::ALL
                .iter()
                .map(|&t| {
                    let rows = self.tables[t.idx()]
                        .iter()
                        .filter_map(|(k, c)| c.last().and_then(|(_, v)| v.as_ref()).map(|v| (k.clone(), v.to_string())))
                        .collect();
                    (t, rows)
                })
                .collect(),
        }
    }

    fn from_image(image: StateImage) -> State {
        let mut state = State { version: image.version, watermark: image.watermark, ..State::default() };
        for (table, rows) in image.tables {
            for (k, v) in rows {
                state.tables[table.idx()].insert(k, vec![(image.version, Some(Arc::from(v)))]);
            }
        }
        state
    }

    fn apply(&mut self, batch: &CommitBatch) {
        self.version = batch.version;
        self.watermark = batch.watermark;
        let pinned = !self.views.is_empty();
        for (table, key, value) in &batch.writes {
            let chain = self.tables[table.idx()].entry(key.clone()).or_default();
            chain.push((batch.version, value.as_deref().map(Arc::from)));
            if self.prune(*table, key) && pinned {
                self.dirty.insert((*table, key.clone()));
            }
        }
    }
}

struct Writer {
    backend: Backend,
    failed: Option<String>,
}

struct Shared {
    state: RwLock<State>,
    writer: Mutex<Writer>,
}

/// Handle to a store. Cloning shares the same underlying tables.
#[derive(Clone)]
pub struct Store {
    shared: Arc<Shared>,
}

impl Store {
    pub fn memory() -> Store {
        Store::with_backend(State::default(), Backend::Memory)
    }

    /// Opens (recovering if needed) a file backed store in `dir`.
    pub fn open_file(dir: impl AsRef<std::path::Path>, opts: FileOptions) -> Result<Store> {
        let (backend, image) = FileBackend::open(dir.as_ref(), opts)?;
        Ok(Store::with_backend(State::from_image(image), Backend::File(backend)))
    }

    fn with_backend(state: State, backend: Backend) -> Store {
        Store {
            shared: Arc::new(Shared {
                state: RwLock::new(state),
                writer: Mutex::new(Writer { backend, failed: None }),
            }),
        }
    }

    fn lock_writer(&self) -> Result<MutexGuard<'_, Writer>> {
        let guard = self
            .shared
            .writer
            .lock()
            .map_err(|_| Error::StorageFailure("writer lock poisoned".into()))?;
        if let Some(reason) = &guard.failed {
            return Err(Error::StorageFailure(reason.clone()));
        }
        Ok(guard)
    }

    /// Starts a write transaction. Blocks while another writer is active.
    pub fn begin(&self) -> Result<Txn<'_>> {
        let guard = self.lock_writer()?;
        let watermark = self.shared.state.read().expect("state lock").watermark;
        Ok(Txn {
            store: self,
            guard: Some(guard),
            writes: Default::default(),
            base_watermark: watermark,
            next_log: watermark + 1,
        })
    }

    /// Runs `work` in a transaction: commits on success, rolls back on
    /// error. `Conflict` errors are retried a few times.
    pub fn with_transaction<T>(&self, mut work: impl FnMut(&mut Txn<'_>) -> Result<T>) -> Result<T> {
        const ATTEMPTS: usize = 4;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut txn = self.begin()?;
            match work(&mut txn) {
                Ok(value) => {
                    txn.commit()?;
                    return Ok(value);
                }
                Err(Error::Conflict) if attempt < ATTEMPTS => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Consistent read view frozen at this instant, plus the log watermark.
    pub fn open_snapshot_view(&self) -> SnapshotView {
        let mut state = self.shared.state.write().expect("state lock");
        let version = state.version;
        let watermark = state.watermark;
        *state.views.entry(version).or_insert(0) += 1;
        SnapshotView { shared: self.shared.clone(), version, watermark }
    }

    /// Latest committed log sequence number.
    pub fn log_watermark(&self) -> u64 {
        self.shared.state.read().expect("state lock").watermark
    }

    pub fn version(&self) -> u64 {
        self.shared.state.read().expect("state lock").version
    }

    /// Marks the store failed as after a crash; every later transaction
    /// reports `StorageFailure`.
    pub fn is_failed(&self) -> bool {
        self.shared.writer.lock().map(|w| w.failed.is_some()).unwrap_or(true)
    }

    /// Bytes the durability backend has written since open (0 in memory).
    pub fn bytes_written(&self) -> u64 {
        match self.shared.writer.lock() {
            Ok(w) => match &w.backend {
                Backend::Memory => 0,
                Backend::File(f) => f.bytes_written(),
            },
            Err(_) => 0,
        }
    }

    /// Forces a checkpoint on file backed stores.
    pub fn checkpoint(&self) -> Result<()> {
        let mut writer = self.lock_writer()?;
        let image = self.shared.state.read().expect("state lock").image();
        let res = writer.backend.checkpoint(&image);
        if let Err(e) = &res {
            writer.failed = Some(e.to_string());
        }
        res
    }

    /// Number of row versions held, including ones kept for open views.
    pub fn retained_versions(&self) -> usize {
        let state = self.shared.state.read().expect("state lock");
        state.tables.iter().flat_map(|t| t.values()).map(Vec::len).sum()
    }
}

impl ReadView for Store {
    fn get(&self, table: Table, key: &str) -> Option<Arc<str>> {
        self.shared.state.read().expect("state lock").latest(table, key)
    }

    fn scan_from(&self, table: Table, start: &str, visit: &mut dyn FnMut(&str, &Arc<str>) -> bool) {
        let state = self.shared.state.read().expect("state lock");
        for (k, chain) in state.tables[table.idx()].range::<str, _>((Bound::Included(start), Bound::Unbounded)) {
            if let Some((_, Some(v))) = chain.last() {
                if !visit(k, v) {
                    break;
                }
            }
        }
    }

    fn log_watermark(&self) -> u64 {
        Store::log_watermark(self)
    }
}

/// A write transaction. Dropping it without [`Txn::commit`] rolls back.
pub struct Txn<'a> {
    store: &'a Store,
    guard: Option<MutexGuard<'a, Writer>>,
    writes: [BTreeMap<String, Option<Arc<str>>>; 3],
    base_watermark: u64,
    next_log: u64,
}

impl<'a> Txn<'a> {
    pub fn put(&mut self, table: Table, key: impl Into<String>, value: impl Into<String>) {
        let value: String = value.into();
        self.writes[table.idx()].insert(key.into(), Some(Arc::from(value)));
    }

    pub fn delete(&mut self, table: Table, key: impl Into<String>) {
        self.writes[table.idx()].insert(key.into(), None);
    }

    /// Appends a log row and returns its sequence number.
    pub fn append_log(&mut self, value: impl Into<String>) -> u64 {
        let seq = self.next_log;
        self.next_log += 1;
        self.put(Table::Log, log_key(seq), value);
        seq
    }

    /// Sequence the next [`Txn::append_log`] call will receive.
    pub fn next_log_seq(&self) -> u64 {
        self.next_log
    }

    pub fn is_empty(&self) -> bool {
        self.writes.iter().all(BTreeMap::is_empty)
    }

    pub fn commit(mut self) -> Result<()> {
        let mut guard = self.guard.take().expect("transaction already finished");
        if self.is_empty() {
            return Ok(());
        }
        let writes: Vec<(Table, String, Option<String>)> = Table::ALL
            .iter()
            .flat_map(|&t| {
                std::mem::take(&mut self.writes[t.idx()])
                    .into_iter()
                    .map(move |(k, v)| (t, k, v.map(|s| s.to_string())))
            })
            .collect();
        let version = self.store.shared.state.read().expect("state lock").version + 1;
        let batch = CommitBatch { version, watermark: self.next_log - 1, writes };
        if let Err(e) = guard.backend.persist(&batch) {
            guard.failed = Some(e.to_string());
            return Err(e);
        }
        let mut state = self.store.shared.state.write().expect("state lock");
        state.apply(&batch);
        if guard.backend.wants_checkpoint() {
            let image = state.image();
            drop(state);
            // The commit is already durable in the log file; a failed
            // checkpoint only poisons the store for later writers.
            if let Err(e) = guard.backend.checkpoint(&image) {
                guard.failed = Some(e.to_string());
            }
        }
        Ok(())
    }

    pub fn rollback(mut self) {
        self.guard.take();
    }
}

impl ReadView for Txn<'_> {
    fn get(&self, table: Table, key: &str) -> Option<Arc<str>> {
        if let Some(v) = self.writes[table.idx()].get(key) {
            return v.clone();
        }
        self.store.shared.state.read().expect("state lock").latest(table, key)
    }

    fn scan_from(&self, table: Table, start: &str, visit: &mut dyn FnMut(&str, &Arc<str>) -> bool) {
        let state = self.store.shared.state.read().expect("state lock");
        let range = (Bound::Included(start), Bound::Unbounded);
        let mut base = state.tables[table.idx()]
            .range::<str, _>(range)
            .filter_map(|(k, c)| c.last().map(|(_, v)| (k.as_str(), v.as_ref())))
            .peekable();
        let mut overlay = self.writes[table.idx()]
            .range::<str, _>(range)
            .map(|(k, v)| (k.as_str(), v.as_ref()))
            .peekable();
        loop {
            let next = match (base.peek(), overlay.peek()) {
                (None, None) => break,
                (Some(_), None) => base.next(),
                (None, Some(_)) => overlay.next(),
                (Some((bk, _)), Some((ok, _))) => match bk.cmp(ok) {
                    std::cmp::Ordering::Less => base.next(),
                    std::cmp::Ordering::Greater => overlay.next(),
                    std::cmp::Ordering::Equal => {
                        base.next();
                        overlay.next()
                    }
                },
            };
            if let Some((k, Some(v))) = next {
                if !visit(k, v) {
                    break;
                }
            }
        }
    }

    fn log_watermark(&self) -> u64 {
        self.base_watermark
    }
}

/// Read-only view pinned to the version current when it was opened.
pub struct SnapshotView {
    shared: Arc<Shared>,
    version: u64,
    watermark: u64,
}

impl SnapshotView {
    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

impl ReadView for SnapshotView {
    fn get(&self, table: Table, key: &str) -> Option<Arc<str>> {
        let state = self.shared.state.read().expect("state lock");
        state.tables[table.idx()].get(key).and_then(|c| State::at(c, self.version)).cloned()
    }

    fn scan_from(&self, table: Table, start: &str, visit: &mut dyn FnMut(&str, &Arc<str>) -> bool) {
        let state = self.shared.state.read().expect("state lock");
        for (k, chain) in state.tables[table.idx()].range::<str, _>((Bound::Included(start), Bound::Unbounded)) {
            if let Some(v) = State::at(chain, self.version) {
                if !visit(k, v) {
                    break;
                }
            }
        }
    }

    fn log_watermark(&self) -> u64 {
        self.watermark
    }
}

impl Drop for SnapshotView {
    fn drop(&mut self) {
        let Ok(mut state) = self.shared.state.write() else { return };
        if let Some(n) = state.views.get_mut(&self.version) {
            *n -= 1;
            if *n == 0 {
                state.views.remove(&self.version);
            }
        }
        state.sweep_dirty();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put_meta_and_log(store: &Store, key: &str, value: &str) -> u64 {
        let mut txn = store.begin().unwrap();
        txn.put(Table::Meta, key, value);
        let seq = txn.append_log(format!("set {key}"));
        txn.commit().unwrap();
        seq
    }

    #[test]
    fn commit_makes_writes_visible() {
        let store = Store::memory();
        put_meta_and_log(&store, "k", "v");
        assert_eq!(store.get(Table::Meta, "k").as_deref(), Some("v"));
        assert_eq!(store.log_watermark(), 1);
    }

    #[test]
    fn rollback_discards_writes_and_sequence_numbers() {
        let store = Store::memory();
        let mut txn = store.begin().unwrap();
        txn.put(Table::Meta, "k", "v");
        assert_eq!(txn.append_log("x"), 1);
        txn.rollback();
        assert_eq!(store.get(Table::Meta, "k"), None);
        assert_eq!(store.log_watermark(), 0);
        assert_eq!(put_meta_and_log(&store, "k", "v"), 1);
    }

    #[test]
    fn failing_work_rolls_back() {
        let store = Store::memory();
        let res: Result<()> = store.with_transaction(|txn| {
            txn.put(Table::Meta, "k", "v");
            txn.append_log("x");
            Err(Error::NotFound)
        });
        assert_eq!(res, Err(Error::NotFound));
        assert_eq!(store.get(Table::Meta, "k"), None);
        assert!(store.scan_logs(1, 10).is_empty());
    }

    #[test]
    fn conflict_is_retried() {
        let store = Store::memory();
        let mut calls = 0;
        store
            .with_transaction(|txn| {
                calls += 1;
                if calls < 3 {
                    return Err(Error::Conflict);
                }
                txn.put(Table::Meta, "k", "v");
                Ok(())
            })
            .unwrap();
        assert_eq!(calls, 3);
    }

    #[test]
    fn snapshot_view_is_frozen() {
        let store = Store::memory();
        assert_eq!(store.open_snapshot_view().watermark(), 0);
        put_meta_and_log(&store, "a", "1");
        let view = store.open_snapshot_view();
        put_meta_and_log(&store, "a", "2");
        put_meta_and_log(&store, "b", "3");
        let mut txn = store.begin().unwrap();
        txn.delete(Table::Meta, "a");
        txn.commit().unwrap();
        assert_eq!(view.get(Table::Meta, "a").as_deref(), Some("1"));
        assert_eq!(view.get(Table::Meta, "b"), None);
        assert_eq!(view.watermark(), 1);
        assert_eq!(view.scan_logs(1, 10).len(), 1);
        assert_eq!(store.get(Table::Meta, "a"), None);
        drop(view);
        // With the view gone old versions are released.
        assert_eq!(store.retained_versions(), 4);
    }

    #[test]
    fn scan_logs_ranges() {
        let store = Store::memory();
        assert!(store.scan_logs(1, 10).is_empty());
        for i in 0..5 {
            put_meta_and_log(&store, &format!("k{i}"), "v");
        }
        let seqs: Vec<u64> = store.scan_logs(3, 10).into_iter().map(|(s, _)| s).collect();
        assert_eq!(seqs, vec![3, 4, 5]);
        let seqs: Vec<u64> = store.scan_logs(1, 2).into_iter().map(|(s, _)| s).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn txn_scan_merges_overlay() {
        let store = Store::memory();
        let mut txn = store.begin().unwrap();
        for k in ["p/a", "p/c", "p/e"] {
            txn.put(Table::Meta, k, k);
        }
        txn.commit().unwrap();
        let mut txn = store.begin().unwrap();
        txn.put(Table::Meta, "p/b", "new");
        txn.delete(Table::Meta, "p/c");
        txn.put(Table::Meta, "p/e", "changed");
        let rows: Vec<(String, String)> = txn
            .scan_prefix(Table::Meta, "p/")
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect();
        assert_eq!(
            rows,
            vec![
                ("p/a".to_string(), "p/a".to_string()),
                ("p/b".to_string(), "new".to_string()),
                ("p/e".to_string(), "changed".to_string()),
            ]
        );
        assert!(txn.has_prefix(Table::Meta, "p/"));
        assert!(!txn.has_prefix(Table::Meta, "q/"));
    }

    #[test]
    fn concurrent_commit_and_scan_stay_ordered() {
        let store = Store::memory();
        let writer = {
            let store = store.clone();
            std::thread::spawn(move || {
                for i in 0..2000 {
                    put_meta_and_log(&store, &format!("k{i}"), "v");
                }
            })
        };
        let mut checks = 0;
        while checks < 200 {
            let view = store.open_snapshot_view();
            let seqs: Vec<u64> = view.scan_logs(1, usize::MAX).into_iter().map(|(s, _)| s).collect();
            let expected: Vec<u64> = (1..=view.watermark()).collect();
            assert_eq!(seqs, expected);
            checks += 1;
        }
        writer.join().unwrap();
        assert_eq!(store.log_watermark(), 2000);
    }
}
