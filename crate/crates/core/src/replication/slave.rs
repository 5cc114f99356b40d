//! Slave side of replication.
//!
//! [`Replica`] is a sans-IO state machine: the owner asks it for the next
//! request with [`Replica::poll`], sends that request to the master however
//! it likes, and feeds the outcome back through [`Replica::on_response`].
//! Time is always passed in explicitly so the same code runs under the
//! simulator's virtual clock and under a real one.
//!
//! Progress (`next_seq`, last ack, whether a snapshot was installed) is the
//! row `r:<sub_id>` in the `subs` table and is written in the same
//! transaction as the commands it accounts for.

use serde::{Deserialize, Serialize};

use super::{ShipBatch, Snapshot};
use crate::catalog::{self, request_path};
use crate::error::{Error, Result};
use crate::path::Path;
use crate::protocol::{Request, Verb};
use crate::storage::{ReadView, Store, Table, Txn};

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub sub_id: String,
    pub root: Path,
    pub cond: Option<String>,
    pub master_node: String,
    pub master_addr: String,
    pub poll_interval_ms: u64,
    pub batch: usize,
    pub ack_every: u64,
    pub ack_interval_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Skip applying shipped commands; only track and acknowledge them.
    pub discard: bool,
}

impl ReplicaConfig {
    pub fn new(sub_id: impl Into<String>, root: Path, master_node: impl Into<String>, master_addr: impl Into<String>) -> Self {
        ReplicaConfig {
            sub_id: sub_id.into(),
            root,
            cond: None,
            master_node: master_node.into(),
            master_addr: master_addr.into(),
            poll_interval_ms: 100,
            batch: 256,
            ack_every: 64,
            ack_interval_ms: 500,
            backoff_base_ms: 1_000,
            backoff_cap_ms: 60_000,
            discard: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bootstrapping,
    Streaming,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Subscribe,
    Snapshot,
    Resume,
    Log,
    Ack(u64),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Progress {
    next_seq: u64,
    acked: u64,
    bootstrapped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    pub records_applied: u64,
    pub bootstraps: u64,
    pub gaps: u64,
    pub apply_failures: u64,
    pub reconnects: u64,
}

pub struct Replica {
    config: ReplicaConfig,
    store: Store,
    mode: Mode,
    /// What to send next while bootstrapping or disconnected.
    next_step: Step,
    progress: Progress,
    unacked: u64,
    last_ack_at: u64,
    in_flight: Option<Step>,
    wake_at: u64,
    backoff_ms: u64,
    pub stats: ReplicaStats,
}

fn progress_key(sub_id: &str) -> String {
    format!("r:{sub_id}")
}

fn save_progress(txn: &mut Txn<'_>, sub_id: &str, p: &Progress) {
    txn.put(Table::Subs, progress_key(sub_id), serde_json::to_string(p).expect("progress serializes"));
}

impl Replica {
    /// Restores a replica from its persisted progress. A replica that had
    /// installed a snapshot resumes; otherwise it bootstraps.
    pub fn open(store: Store, config: ReplicaConfig, now: u64) -> Result<Replica> {
        let progress: Progress = match store.get(Table::Subs, &progress_key(&config.sub_id)) {
            Some(raw) => serde_json::from_str(&raw).map_err(|e| Error::StorageFailure(e.to_string()))?,
            None => Progress::default(),
        };
        let (mode, next_step) = if progress.bootstrapped {
            (Mode::Disconnected, Step::Resume)
        } else {
            (Mode::Bootstrapping, Step::Subscribe)
        };
        Ok(Replica {
            backoff_ms: config.backoff_base_ms,
            config,
            store,
            mode,
            next_step,
            progress,
            unacked: 0,
            last_ack_at: now,
            in_flight: None,
            wake_at: now,
            stats: ReplicaStats::default(),
        })
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn root(&self) -> &Path {
        &self.config.root
    }

    /// First master sequence number not yet processed.
    pub fn next_seq(&self) -> u64 {
        self.progress.next_seq
    }

    pub fn acked(&self) -> u64 {
        self.progress.acked
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.progress.bootstrapped
    }

    /// Earliest time at which [`Replica::poll`] may produce a request, or
    /// `None` while a request is outstanding.
    pub fn next_wakeup(&self) -> Option<u64> {
        match self.in_flight {
            Some(_) => None,
            None => Some(self.wake_at),
        }
    }

    /// Rejects writes aimed at the replicated subtree.
    pub fn guard_write(&self, req: &Request) -> Result<()> {
        if !req.verb.is_mutating() {
            return Ok(());
        }
        match request_path(req) {
            Ok(Some(path)) if path.starts_with(&self.config.root) => Err(Error::Redirect {
                node: self.config.master_node.clone(),
                addr: self.config.master_addr.clone(),
            }),
            _ => Ok(()),
        }
    }

    /// The next request to send, if one is due.
    pub fn poll(&mut self, now: u64) -> Option<Request> {
        if self.in_flight.is_some() || now < self.wake_at {
            return None;
        }
        let c = &self.config;
        let step = match self.mode {
            Mode::Bootstrapping | Mode::Disconnected => self.next_step,
            Mode::Streaming => {
                let applied = self.progress.next_seq.saturating_sub(1);
                let due = self.unacked >= c.ack_every
                    || (self.unacked > 0 && now.saturating_sub(self.last_ack_at) >= c.ack_interval_ms);
                if due && applied > self.progress.acked {
                    Step::Ack(applied)
                } else {
                    Step::Log
                }
            }
        };
        let id = c.sub_id.clone();
        let req = match step {
            Step::Subscribe => {
                let mut args = vec![id, c.root.to_string()];
                args.extend(c.cond.clone());
                Request::new(Verb::Subscribe, args)
            }
            Step::Snapshot => Request::new(Verb::SnapshotBegin, [id]),
            Step::Resume => Request::new(Verb::Resume, [id, self.progress.next_seq.to_string()]),
            Step::Log => Request::new(Verb::Log, [id, c.batch.to_string()]),
            Step::Ack(seq) => Request::new(Verb::Ack, [id, seq.to_string()]),
        };
        self.in_flight = Some(step);
        Some(req)
    }

    /// Handles the outcome of the request last returned by `poll`.
    /// `Err(MasterUnreachable)` stands for a transport failure; any other
    /// error is the master's answer.
    pub fn on_response(&mut self, now: u64, result: Result<Vec<String>>) {
        let Some(step) = self.in_flight.take() else { return };
        if let Err(Error::MasterUnreachable | Error::OwnerUnreachable) = result {
            self.back_off(now);
            return;
        }
        match (step, result) {
            (Step::Subscribe, Ok(_) | Err(Error::DuplicateSubscription)) => {
                self.next_step = Step::Snapshot;
                self.wake_at = now;
            }
            (Step::Snapshot, Ok(rows)) => match self.install_snapshot(&rows) {
                Ok(()) => {
                    self.mode = Mode::Streaming;
                    self.backoff_ms = self.config.backoff_base_ms;
                    self.unacked = 0;
                    self.last_ack_at = now;
                    self.wake_at = now;
                    self.stats.bootstraps += 1;
                }
                Err(e) => {
                    tracing::warn!(sub = %self.config.sub_id, error = %e, "snapshot install failed");
                    self.back_off(now);
                    self.next_step = Step::Snapshot;
                }
            },
            (Step::Resume, Ok(_)) => {
                self.mode = Mode::Streaming;
                self.backoff_ms = self.config.backoff_base_ms;
                self.wake_at = now;
                self.stats.reconnects += 1;
            }
            (Step::Log, Ok(rows)) => self.on_batch(now, &rows),
            (Step::Ack(seq), Ok(_) | Err(Error::RegressingAck)) => {
                self.progress.acked = self.progress.acked.max(seq);
                self.unacked = 0;
                self.last_ack_at = now;
                self.wake_at = now;
            }
            (_, Err(Error::SubscriptionExpired | Error::NoSuchSubscription)) => self.rebootstrap(now, Step::Subscribe),
            (Step::Resume, Err(Error::RegressingAck)) => self.rebootstrap(now, Step::Snapshot),
            (Step::Log | Step::Ack(_), Err(Error::NotConnected)) => {
                self.mode = Mode::Disconnected;
                self.next_step = Step::Resume;
                self.wake_at = now;
            }
            (_, Err(e)) => {
                tracing::debug!(sub = %self.config.sub_id, error = %e, "replication request failed");
                self.back_off(now);
            }
        }
    }

    fn back_off(&mut self, now: u64) {
        if self.mode == Mode::Streaming {
            self.mode = Mode::Disconnected;
        }
        self.next_step = match (self.mode, self.next_step) {
            (Mode::Bootstrapping, s) => s,
            _ if self.progress.bootstrapped => Step::Resume,
            _ => {
                self.mode = Mode::Bootstrapping;
                Step::Subscribe
            }
        };
        self.wake_at = now + self.backoff_ms;
        self.backoff_ms = (self.backoff_ms * 2).min(self.config.backoff_cap_ms);
    }

    fn rebootstrap(&mut self, now: u64, step: Step) {
        self.mode = Mode::Bootstrapping;
        self.next_step = step;
        self.wake_at = now;
        self.progress.bootstrapped = false;
        let progress = self.progress.clone();
        let id = self.config.sub_id.clone();
        if let Err(e) = self.store.with_transaction(|txn| {
            save_progress(txn, &id, &progress);
            Ok(())
        }) {
            tracing::error!(sub = %id, error = %e, "could not persist replica state");
        }
    }

    fn install_snapshot(&mut self, rows: &[String]) -> Result<()> {
        let snap = Snapshot::from_rows(rows)?;
        let progress = Progress { next_seq: snap.watermark + 1, acked: snap.watermark, bootstrapped: true };
        if !self.config.discard {
            let root = self.config.root.clone();
            let id = self.config.sub_id.clone();
            self.store.with_transaction(|txn| {
                catalog::purge_subtree(txn, &root)?;
                catalog::ensure_ancestors(txn, &root)?;
                for cmd in &snap.commands {
                    catalog::apply(txn, cmd).map_err(|e| Error::ApplyFailed(format!("{}: {e}", cmd.to_line())))?;
                }
                save_progress(txn, &id, &progress);
                Ok(())
            })?;
        }
        self.progress = progress;
        Ok(())
    }

    fn on_batch(&mut self, now: u64, rows: &[String]) {
        let batch = match ShipBatch::from_rows(rows) {
            Ok(b) => b,
            Err(e) => {
                self.stats.apply_failures += 1;
                tracing::warn!(sub = %self.config.sub_id, error = %e, "unreadable log batch");
                self.rebootstrap(now, Step::Snapshot);
                return;
            }
        };
        if batch.from > self.progress.next_seq {
            self.stats.gaps += 1;
            tracing::warn!(
                sub = %self.config.sub_id,
                error = %Error::GapDetected { expected: self.progress.next_seq, got: batch.from },
                "resuming"
            );
            self.mode = Mode::Disconnected;
            self.next_step = Step::Resume;
            self.wake_at = now;
            return;
        }
        let fresh: Vec<_> = batch.records.iter().filter(|(seq, _, _)| *seq >= self.progress.next_seq).collect();
        let mut distinct = 0;
        let mut last = 0;
        for (seq, _, _) in &fresh {
            if *seq != last {
                distinct += 1;
                last = *seq;
            }
        }
        let progress = Progress { next_seq: self.progress.next_seq.max(batch.upto + 1), ..self.progress.clone() };
        if !self.config.discard && (!fresh.is_empty() || progress.next_seq != self.progress.next_seq) {
            let id = self.config.sub_id.clone();
            let res = self.store.with_transaction(|txn| {
                for (_, _, cmd) in &fresh {
                    catalog::apply(txn, cmd).map_err(|e| Error::ApplyFailed(format!("{}: {e}", cmd.to_line())))?;
                }
                save_progress(txn, &id, &progress);
                Ok(())
            });
            if let Err(e) = res {
                self.stats.apply_failures += 1;
                tracing::error!(sub = %self.config.sub_id, error = %e, "apply failed, re-bootstrapping");
                self.rebootstrap(now, Step::Snapshot);
                return;
            }
        }
        self.progress = progress;
        self.stats.records_applied += distinct;
        self.unacked += distinct;
        let full = batch.records.iter().map(|r| r.0).collect::<std::collections::BTreeSet<_>>().len() >= self.config.batch;
        self.wake_at = if full { now } else { now + self.config.poll_interval_ms };
        // An idle slave still acks the range it skipped so the master can
        // collect records it never needed.
        if self.unacked == 0 && self.progress.next_seq.saturating_sub(1) > self.progress.acked {
            self.unacked = 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{apply, dump_lines, Command};
    use crate::replication::master::{record_log, Master, MasterConfig};

    fn exec(store: &Store, line: &str) {
        let cmd = Command::parse_line(line).unwrap();
        store
            .with_transaction(|txn| {
                let effect = apply(txn, &cmd)?;
                record_log(txn, &cmd, &effect, 0)
            })
            .unwrap();
    }

    /// Drives a replica against an in-process master for a few seconds of
    /// virtual time.
    fn pump(replica: &mut Replica, master: &mut Master, now: &mut u64, up: bool) {
        let end = *now + if up { 3_000 } else { 200_000 };
        while *now < end {
            match replica.poll(*now) {
                Some(req) => {
                    let res = if up { master.handle(&req, *now) } else { Err(Error::MasterUnreachable) };
                    replica.on_response(*now, res);
                }
                None => *now = replica.next_wakeup().unwrap_or(*now).max(*now + 1),
            }
        }
    }

    fn pair() -> (Store, Master, Store, Replica) {
        let ms = Store::memory();
        exec(&ms, "CREATEDIR /a run:INT");
        let master = Master::open(ms.clone(), MasterConfig::default(), 0).unwrap();
        let ss = Store::memory();
        let cfg = ReplicaConfig::new("s1", Path::parse("/a").unwrap(), "M", "m:1");
        let replica = Replica::open(ss.clone(), cfg, 0).unwrap();
        (ms, master, ss, replica)
    }

    fn same(ms: &Store, ss: &Store) {
        let root = Path::parse("/a").unwrap();
        assert_eq!(dump_lines(ms, &root, None).unwrap(), dump_lines(ss, &root, None).unwrap());
    }

    #[test]
    fn bootstrap_then_stream() {
        let (ms, mut master, ss, mut replica) = pair();
        exec(&ms, "ADDENTRY /a/pre 1");
        let mut now = 0;
        pump(&mut replica, &mut master, &mut now, true);
        assert_eq!(replica.mode(), Mode::Streaming);
        same(&ms, &ss);
        for i in 0..100 {
            exec(&ms, &format!("ADDENTRY /a/e{i} {i}"));
        }
        pump(&mut replica, &mut master, &mut now, true);
        same(&ms, &ss);
        assert_eq!(replica.next_seq(), ms.log_watermark() + 1);
        assert_eq!(master.subscription("s1").unwrap().unwrap().last_acked, ms.log_watermark());
    }

    #[test]
    fn outage_backs_off_and_resumes() {
        let (ms, mut master, ss, mut replica) = pair();
        let mut now = 0;
        pump(&mut replica, &mut master, &mut now, true);
        exec(&ms, "ADDENTRY /a/x 1");
        let start = now;
        pump(&mut replica, &mut master, &mut now, false);
        assert_eq!(replica.mode(), Mode::Disconnected);
        assert!(replica.backoff_ms <= 60_000 && now > start);
        assert_eq!(dump_lines(&ss, &Path::parse("/a").unwrap(), None).unwrap(), ["CREATEDIR /a run:INT"]);
        pump(&mut replica, &mut master, &mut now, true);
        same(&ms, &ss);
    }

    #[test]
    fn duplicate_and_gap_handling() {
        let (ms, mut master, ss, mut replica) = pair();
        let mut now = 0;
        pump(&mut replica, &mut master, &mut now, true);
        exec(&ms, "ADDENTRY /a/x 1");
        let rows = master.ship_pending("s1", 10, now).unwrap().to_rows();
        replica.in_flight = Some(Step::Log);
        replica.on_response(now, Ok(rows.clone()));
        replica.in_flight = Some(Step::Log);
        replica.on_response(now, Ok(rows));
        same(&ms, &ss);
        let gap = ShipBatch { from: replica.next_seq() + 3, upto: replica.next_seq() + 3, records: vec![] };
        replica.in_flight = Some(Step::Log);
        replica.on_response(now, Ok(gap.to_rows()));
        assert_eq!(replica.stats.gaps, 1);
        assert_eq!(replica.poll(now).unwrap().verb, Verb::Resume);
    }

    #[test]
    fn guard_write_redirects() {
        let (_, _, _, replica) = pair();
        let req = |l: &str| crate::protocol::parse_request(l).unwrap();
        assert_eq!(
            replica.guard_write(&req("ADDENTRY /a/x 1")),
            Err(Error::Redirect { node: "M".into(), addr: "m:1".into() })
        );
        assert!(replica.guard_write(&req("ADDENTRY /b/x 1")).is_ok());
        assert!(replica.guard_write(&req("GETATTR /a/x")).is_ok());
    }

    #[test]
    fn restart_resumes_from_persisted_progress() {
        let (ms, mut master, ss, mut replica) = pair();
        let mut now = 0;
        pump(&mut replica, &mut master, &mut now, true);
        exec(&ms, "ADDENTRY /a/x 1");
        pump(&mut replica, &mut master, &mut now, true);
        let next = replica.next_seq();
        drop(replica);
        let cfg = ReplicaConfig::new("s1", Path::parse("/a").unwrap(), "M", "m:1");
        let mut replica = Replica::open(ss.clone(), cfg, now).unwrap();
        assert_eq!((replica.mode(), replica.next_seq()), (Mode::Disconnected, next));
        exec(&ms, "ADDENTRY /a/y 1");
        pump(&mut replica, &mut master, &mut now, true);
        same(&ms, &ss);
        assert_eq!(replica.stats.bootstraps, 0);
    }
}
