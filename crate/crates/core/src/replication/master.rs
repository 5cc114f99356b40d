//! Master side of replication.
//!
//! Subscriptions are rows `s:<sub_id>` in the `subs` table, so they share
//! the store's transactional and durability guarantees. Liveness (whether
//! a subscriber is currently talking to us, and how far it has been
//! shipped) is volatile and lives in [`Master`]; after a restart every
//! subscription starts out offline until its slave resumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::log::{Filter, LogRecord};
use super::{ShipBatch, Snapshot};
use crate::catalog::{self, Command, Effect};
use crate::error::{Error, Result};
use crate::path::Path;
use crate::protocol::{Request, Verb};
use crate::storage::{log_key, ReadView, Store, Table, Txn};

const SUB_PREFIX: &str = "s:";

fn sub_key(sub_id: &str) -> String {
    format!("{SUB_PREFIX}{sub_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubState {
    Connected,
    Offline,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: String,
    pub root: Path,
    pub cond: Option<String>,
    pub last_acked: u64,
    pub state: SubState,
    pub offline_since: Option<u64>,
}

impl Subscription {
    pub fn filter(&self) -> Result<Filter> {
        Filter::parse(&self.root.to_string(), self.cond.as_deref())
    }

    pub fn is_live(&self) -> bool {
        self.state != SubState::Expired
    }
}

fn load_subs(view: &(impl ReadView + ?Sized)) -> Result<Vec<Subscription>> {
    view.scan_prefix(Table::Subs, SUB_PREFIX)
        .into_iter()
        .map(|(_, raw)| {
            serde_json::from_str(&raw).map_err(|e| Error::StorageFailure(format!("corrupt subscription: {e}")))
        })
        .collect()
}

fn load_sub(view: &(impl ReadView + ?Sized), sub_id: &str) -> Result<Option<Subscription>> {
    view.get(Table::Subs, &sub_key(sub_id))
        .map(|raw| {
            serde_json::from_str(&raw).map_err(|e| Error::StorageFailure(format!("corrupt subscription: {e}")))
        })
        .transpose()
}

fn save_sub(txn: &mut Txn<'_>, sub: &Subscription) {
    txn.put(Table::Subs, sub_key(&sub.sub_id), serde_json::to_string(sub).expect("subscription serializes"));
}

/// Appends a log record for `cmd` when its directory lies under the root
/// of some live subscription. Must run inside the transaction that applied
/// the command. Returns the sequence number, or 0 when nothing was logged.
pub fn record_log(txn: &mut Txn<'_>, cmd: &Command, effect: &Effect, ts: u64) -> Result<u64> {
    let dir = cmd.dir();
    let wanted = load_subs(txn)?.iter().any(|s| s.is_live() && dir.starts_with(&s.root));
    if !wanted {
        return Ok(0);
    }
    let seq = txn.next_log_seq();
    let record = LogRecord { seq, dir: dir.clone(), command: cmd.to_line(), ts, effect: effect.clone() };
    Ok(txn.append_log(record.encode()))
}

#[derive(Debug, Clone)]
pub struct MasterConfig {
    /// A connected subscriber silent for longer than this goes offline.
    pub liveness_ms: u64,
    /// Offline subscribers are discarded after this long.
    pub expiry_ms: u64,
    /// Offline subscribers are discarded once more records than this wait
    /// for them.
    pub pending_limit: u64,
    /// Largest `LOG` batch served, whatever the slave asks for.
    pub max_batch: usize,
    /// Minimum time between two log collections run from [`Master::tick`].
    pub gc_interval_ms: u64,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig { liveness_ms: 5_000, expiry_ms: 24 * 3600 * 1000, pending_limit: 100_000, max_batch: 256, gc_interval_ms: 1_000 }
    }
}

#[derive(Debug, Clone)]
struct Session {
    /// Highest sequence already shipped.
    cursor: u64,
    last_seen: u64,
}

/// Incremental count of records waiting for an offline subscriber.
#[derive(Debug, Clone, Default)]
struct PendingCount {
    scanned_upto: u64,
    count: u64,
}

/// Counters used by the benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MasterStats {
    pub logged: u64,
    pub shipped: u64,
    pub collected: u64,
}

pub struct Master {
    store: Store,
    config: MasterConfig,
    sessions: BTreeMap<String, Session>,
    pending: BTreeMap<String, PendingCount>,
    last_gc: Option<u64>,
    gc_memo: Option<GcMemo>,
    pub stats: MasterStats,
}

/// What the previous collection pass saw. While the live subscriptions and
/// their acks stay the same, records it kept are still needed.
struct GcMemo {
    live: Vec<(String, u64)>,
    scanned_upto: u64,
}

fn parse_seq(token: &str) -> Result<u64> {
    token.parse().map_err(|_| Error::BadArguments(format!("not a sequence number: {token}")))
}

impl Master {
    /// Loads subscriptions; any left connected by a previous run becomes
    /// offline as of `now`.
    pub fn open(store: Store, config: MasterConfig, now: u64) -> Result<Master> {
        store.with_transaction(|txn| {
            for mut sub in load_subs(txn)? {
                if sub.state == SubState::Connected {
                    sub.state = SubState::Offline;
                    sub.offline_since = Some(now);
                    save_sub(txn, &sub);
                }
            }
            Ok(())
        })?;
        Ok(Master {
            store,
            config,
            sessions: BTreeMap::new(),
            pending: BTreeMap::new(),
            last_gc: None,
            gc_memo: None,
            stats: Default::default(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &MasterConfig {
        &self.config
    }

    pub fn subscription(&self, sub_id: &str) -> Result<Option<Subscription>> {
        load_sub(&self.store, sub_id)
    }

    pub fn subscriptions(&self) -> Result<Vec<Subscription>> {
        load_subs(&self.store)
    }

    fn require(&self, sub_id: &str) -> Result<Subscription> {
        self.subscription(sub_id)?.ok_or(Error::NoSuchSubscription)
    }

    fn require_live(&self, sub_id: &str) -> Result<Subscription> {
        let sub = self.require(sub_id)?;
        if !sub.is_live() {
            return Err(Error::SubscriptionExpired);
        }
        Ok(sub)
    }

    fn update(&self, sub_id: &str, change: impl Fn(&mut Subscription) -> Result<()>) -> Result<Subscription> {
        self.store.with_transaction(|txn| {
            let mut sub = load_sub(txn, sub_id)?.ok_or(Error::NoSuchSubscription)?;
            change(&mut sub)?;
            save_sub(txn, &sub);
            Ok(sub)
        })
    }

    fn connect(&mut self, sub_id: &str, cursor: u64, now: u64) -> Result<Subscription> {
        let sub = self.update(sub_id, |s| {
            s.state = SubState::Connected;
            s.offline_since = None;
            Ok(())
        })?;
        self.sessions.insert(sub_id.to_string(), Session { cursor, last_seen: now });
        self.pending.remove(sub_id);
        Ok(sub)
    }

    /// Registers a subscription. An expired subscription with the same id
    /// is replaced; a live one is a duplicate.
    pub fn subscribe(&mut self, sub_id: &str, filter: &Filter, now: u64) -> Result<Subscription> {
        let sub = self.store.with_transaction(|txn| {
            if !catalog::dir_exists(txn, &filter.root)? {
                return Err(Error::NotFound);
            }
            if load_sub(txn, sub_id)?.is_some_and(|s| s.is_live()) {
                return Err(Error::DuplicateSubscription);
            }
            let sub = Subscription {
                sub_id: sub_id.to_string(),
                root: filter.root.clone(),
                cond: filter.cond_text(),
                last_acked: txn.log_watermark(),
                state: SubState::Connected,
                offline_since: None,
            };
            save_sub(txn, &sub);
            Ok(sub)
        })?;
        self.sessions.insert(sub_id.to_string(), Session { cursor: sub.last_acked, last_seen: now });
        self.pending.remove(sub_id);
        Ok(sub)
    }

    pub fn unsubscribe(&mut self, sub_id: &str) -> Result<()> {
        self.store.with_transaction(|txn| {
            load_sub(txn, sub_id)?.ok_or(Error::NoSuchSubscription)?;
            txn.delete(Table::Subs, sub_key(sub_id));
            Ok(())
        })?;
        self.sessions.remove(sub_id);
        self.pending.remove(sub_id);
        Ok(())
    }

    /// Dumps the subscribed subtree from a consistent view. Shipping then
    /// continues right after the view's watermark. A root that no longer
    /// exists yields an empty snapshot.
    pub fn serve_snapshot(&mut self, sub_id: &str, now: u64) -> Result<Snapshot> {
        let sub = self.require_live(sub_id)?;
        let filter = sub.filter()?;
        let view = self.store.open_snapshot_view();
        let watermark = view.watermark();
        let commands = match catalog::dump_filtered(&view, &filter.root, filter.cond.as_ref()) {
            Ok(c) => c,
            Err(Error::NotFound) => Vec::new(),
            Err(e) => return Err(e),
        };
        drop(view);
        self.update(sub_id, |s| {
            s.last_acked = s.last_acked.max(watermark);
            Ok(())
        })?;
        self.connect(sub_id, watermark, now)?;
        Ok(Snapshot { sub_id: sub_id.to_string(), commands, watermark })
    }

    /// Next batch of records the subscriber needs, at most `max` of them.
    pub fn ship_pending(&mut self, sub_id: &str, max: usize, now: u64) -> Result<ShipBatch> {
        let sub = self.require_live(sub_id)?;
        let Some(session) = self.sessions.get(sub_id).cloned() else {
            return Err(Error::NotConnected);
        };
        if sub.state != SubState::Connected {
            return Err(Error::NotConnected);
        }
        let filter = sub.filter()?;
        let max = max.clamp(1, self.config.max_batch.max(1));
        let view = self.store.open_snapshot_view();
        let watermark = view.watermark();
        let from = session.cursor + 1;
        let mut upto = watermark.max(session.cursor);
        let mut records = Vec::new();
        let mut shipped = 0;
        let mut next = from;
        'scan: while next <= watermark {
            let chunk = view.scan_logs(next, 512);
            if chunk.is_empty() {
                break;
            }
            for (seq, raw) in chunk {
                if seq > watermark {
                    break 'scan;
                }
                next = seq + 1;
                let record = LogRecord::decode(&raw)?;
                let cmds = filter.translate(&record)?;
                if cmds.is_empty() {
                    continue;
                }
                records.extend(cmds.into_iter().map(|c| (seq, record.dir.clone(), c)));
                shipped += 1;
                if shipped == max {
                    upto = seq;
                    break 'scan;
                }
            }
        }
        self.stats.shipped += shipped as u64;
        let s = self.sessions.get_mut(sub_id).expect("session checked above");
        s.cursor = upto;
        s.last_seen = now;
        Ok(ShipBatch { from, upto, records })
    }

    /// Records that the subscriber has applied everything up to `seq`.
    pub fn acknowledge(&mut self, sub_id: &str, seq: u64, now: u64) -> Result<()> {
        let watermark = self.store.log_watermark();
        if seq > watermark {
            return Err(Error::BadArguments(format!("ack {seq} is beyond the last log {watermark}")));
        }
        let sub = self.require_live(sub_id)?;
        if seq < sub.last_acked {
            return Err(Error::RegressingAck);
        }
        if seq > sub.last_acked {
            self.update(sub_id, |s| {
                if !s.is_live() {
                    return Err(Error::SubscriptionExpired);
                }
                s.last_acked = seq;
                Ok(())
            })?;
            self.pending.remove(sub_id);
        }
        if let Some(s) = self.sessions.get_mut(sub_id) {
            s.last_seen = now;
            s.cursor = s.cursor.max(seq);
        }
        Ok(())
    }

    /// Reconnects a subscriber that has applied everything below
    /// `first_needed`.
    pub fn resume(&mut self, sub_id: &str, first_needed: u64, now: u64) -> Result<()> {
        let sub = self.require_live(sub_id)?;
        let cursor = first_needed.saturating_sub(1);
        if cursor < sub.last_acked {
            // The slave lost state it had already confirmed; records it
            // would need may be gone.
            return Err(Error::RegressingAck);
        }
        if cursor > self.store.log_watermark() {
            return Err(Error::BadArguments(format!("resume point {first_needed} is beyond the log")));
        }
        self.connect(sub_id, cursor, now)?;
        Ok(())
    }

    /// Marks a subscriber offline, e.g. when its connection closes.
    pub fn disconnect(&mut self, sub_id: &str, now: u64) -> Result<()> {
        if self.sessions.remove(sub_id).is_none() {
            return Ok(());
        }
        self.pending.remove(sub_id);
        match self.update(sub_id, |s| {
            if s.state == SubState::Connected {
                s.state = SubState::Offline;
                s.offline_since = Some(now);
            }
            Ok(())
        }) {
            Ok(_) | Err(Error::NoSuchSubscription) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Takes silent subscribers offline. Returns their ids.
    pub fn check_liveness(&mut self, now: u64) -> Result<Vec<String>> {
        let stale: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| now.saturating_sub(s.last_seen) > self.config.liveness_ms)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &stale {
            self.disconnect(id, now)?;
        }
        Ok(stale)
    }

    /// Records waiting for `sub_id`: those it needs past its last ack.
    pub fn pending(&mut self, sub_id: &str) -> Result<u64> {
        let sub = self.require(sub_id)?;
        let filter = sub.filter()?;
        let watermark = self.store.log_watermark();
        let entry = self.pending.entry(sub_id.to_string()).or_insert_with(|| PendingCount {
            scanned_upto: sub.last_acked,
            count: 0,
        });
        let mut next = entry.scanned_upto + 1;
        while next <= watermark {
            let chunk = self.store.scan_logs(next, 1024);
            if chunk.is_empty() {
                break;
            }
            for (seq, raw) in chunk {
                if seq > watermark {
                    break;
                }
                next = seq + 1;
                if filter.matches(&LogRecord::decode(&raw)?)? {
                    entry.count += 1;
                }
            }
        }
        entry.scanned_upto = watermark.max(entry.scanned_upto);
        Ok(entry.count)
    }

    /// Expires offline subscriptions that have been away too long or have
    /// too much backlog.
    pub fn expire_subscriptions(&mut self, now: u64) -> Result<Vec<String>> {
        let mut expired = Vec::new();
        for sub in self.subscriptions()? {
            if sub.state != SubState::Offline {
                continue;
            }
            let since = sub.offline_since.unwrap_or(now);
            let too_old = now.saturating_sub(since) > self.config.expiry_ms;
            if too_old || self.pending(&sub.sub_id)? > self.config.pending_limit {
                self.update(&sub.sub_id, |s| {
                    s.state = SubState::Expired;
                    Ok(())
                })?;
                self.pending.remove(&sub.sub_id);
                self.sessions.remove(&sub.sub_id);
                expired.push(sub.sub_id);
            }
        }
        if !expired.is_empty() {
            tracing::info!(?expired, "expired subscriptions");
        }
        Ok(expired)
    }

    /// Deletes every record no live subscriber still needs.
    pub fn garbage_collect_logs(&mut self) -> Result<usize> {
        let subs: Vec<Subscription> = self.subscriptions()?.into_iter().filter(Subscription::is_live).collect();
        let key: Vec<(String, u64)> = subs.iter().map(|s| (s.sub_id.clone(), s.last_acked)).collect();
        let live: Vec<(Filter, u64)> = subs.iter().map(|s| Ok((s.filter()?, s.last_acked))).collect::<Result<_>>()?;
        let floor = live.iter().map(|(_, a)| *a).min().unwrap_or(u64::MAX);
        let mut next = match &self.gc_memo {
            Some(m) if m.live == key => m.scanned_upto + 1,
            _ => 1,
        };
        let watermark = self.store.log_watermark();
        let mut doomed = Vec::new();
        loop {
            let chunk = self.store.scan_logs(next, 1024);
            let Some(&(last, _)) = chunk.last() else { break };
            for (seq, raw) in chunk {
                if seq <= floor {
                    doomed.push(seq);
                    continue;
                }
                let record = LogRecord::decode(&raw)?;
                let mut needed = false;
                for (filter, acked) in &live {
                    if seq > *acked && filter.matches(&record)? {
                        needed = true;
                        break;
                    }
                }
                if !needed {
                    doomed.push(seq);
                }
            }
            next = last + 1;
        }
        if !doomed.is_empty() {
            self.store.with_transaction(|txn| {
                for seq in &doomed {
                    txn.delete(Table::Log, log_key(*seq));
                }
                Ok(())
            })?;
        }
        self.gc_memo = Some(GcMemo { live: key, scanned_upto: watermark.max(next.saturating_sub(1)) });
        self.stats.collected += doomed.len() as u64;
        Ok(doomed.len())
    }

    /// Periodic housekeeping: liveness, expiry, then log collection.
    pub fn tick(&mut self, now: u64) -> Result<()> {
        self.check_liveness(now)?;
        let expired = self.expire_subscriptions(now)?;
        let due = self.last_gc.is_none_or(|t| now.saturating_sub(t) >= self.config.gc_interval_ms);
        if due || !expired.is_empty() {
            self.garbage_collect_logs()?;
            self.last_gc = Some(now);
        }
        Ok(())
    }

    /// Serves one replication request.
    pub fn handle(&mut self, req: &Request, now: u64) -> Result<Vec<String>> {
        match req.verb {
            Verb::Subscribe => {
                req.expect_args(2, 3)?;
                let filter = Filter::parse(req.arg(1)?, req.args.get(2).map(String::as_str))?;
                self.subscribe(req.arg(0)?, &filter, now)?;
                Ok(Vec::new())
            }
            Verb::Unsubscribe => {
                req.expect_args(1, 1)?;
                self.unsubscribe(req.arg(0)?)?;
                Ok(Vec::new())
            }
            Verb::SnapshotBegin => {
                req.expect_args(1, 1)?;
                Ok(self.serve_snapshot(req.arg(0)?, now)?.to_rows())
            }
            Verb::SnapshotEnd => Err(Error::BadArguments("SNAPSHOT_END only appears in snapshot streams".into())),
            Verb::Log => {
                req.expect_args(1, 2)?;
                let max = match req.args.get(1) {
                    Some(t) => parse_seq(t)? as usize,
                    None => self.config.max_batch,
                };
                Ok(self.ship_pending(req.arg(0)?, max, now)?.to_rows())
            }
            Verb::Ack => {
                req.expect_args(2, 2)?;
                self.acknowledge(req.arg(0)?, parse_seq(req.arg(1)?)?, now)?;
                Ok(Vec::new())
            }
            Verb::Resume => {
                req.expect_args(2, 2)?;
                self.resume(req.arg(0)?, parse_seq(req.arg(1)?)?, now)?;
                Ok(Vec::new())
            }
            _ => Err(Error::BadArguments(format!("{} is not a replication verb", req.verb))),
        }
    }
}
