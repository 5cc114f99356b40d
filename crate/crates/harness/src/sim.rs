//! Deterministic in-process cluster.
//!
//! Every node runs in one thread against a virtual millisecond clock.
//! Replication requests travel as timed events over links with configurable
//! latency and loss; partitions and crashes make them time out. Client
//! requests issued by the driver are executed immediately, forwarding
//! synchronously when federation routing asks for it. Given the same
//! sequence of driver calls and the same seed, a run is reproducible event
//! for event.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use metacat_core::catalog;
use metacat_core::node::{Node, NodeConfig, Outcome};
use metacat_core::path::Path;
use metacat_core::protocol::{Request, Response};
use metacat_core::replication::slave::Mode;
use metacat_core::storage::Store;
use metacat_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub latency_ms: u64,
    pub drop: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec { latency_ms: 0, drop: 0.0 }
    }
}

struct SimNode {
    config: NodeConfig,
    store: Store,
    node: Option<Node>,
    /// Bumped on every crash so stale deliveries are discarded.
    epoch: u64,
    /// Real time spent inside request handling and housekeeping.
    busy: Duration,
}

enum Event {
    Request { from: String, epoch: u64, replica: usize, to: String, req: Request, sent_at: u64 },
    Response { to: String, epoch: u64, replica: usize, result: Result<Vec<String>> },
}

pub struct Sim {
    now: u64,
    rng: ChaCha8Rng,
    nodes: BTreeMap<String, SimNode>,
    links: BTreeMap<(String, String), LinkSpec>,
    partitions: BTreeSet<(String, String)>,
    queue: BTreeMap<(u64, u64), Event>,
    event_seq: u64,
    next_tick: u64,
    pub rpc_timeout_ms: u64,
    pub tick_ms: u64,
    pub tracing: bool,
    pub trace: Vec<String>,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Sim {
    pub fn new(seed: u64) -> Sim {
        Sim {
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            partitions: BTreeSet::new(),
            queue: BTreeMap::new(),
            event_seq: 0,
            next_tick: 0,
            rpc_timeout_ms: 2_000,
            tick_ms: 250,
            tracing: true,
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.tracing {
            let text = line();
            self.trace.push(format!("{:>9} {text}", self.now));
        }
    }

    /// Adds a node with a fresh in-memory store. Its address is its id.
    pub fn add_node(&mut self, config: NodeConfig) {
        let id = config.id.clone();
        self.nodes.insert(id, SimNode { config, store: Store::memory(), node: None, epoch: 0, busy: Duration::ZERO });
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }

    /// Boots (or reboots) a node from its store.
    pub fn start(&mut self, id: &str) -> Result<()> {
        let now = self.now;
        let sn = self.nodes.get_mut(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        sn.node = Some(Node::open(sn.store.clone(), &sn.config, now)?);
        self.log(|| format!("START {id}"));
        Ok(())
    }

    pub fn start_all(&mut self) -> Result<()> {
        for id in self.node_ids() {
            self.start(&id)?;
        }
        Ok(())
    }

    /// Stops a node abruptly. Its store survives, volatile state does not.
    pub fn crash(&mut self, id: &str) -> Result<()> {
        let sn = self.nodes.get_mut(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        sn.node = None;
        sn.epoch += 1;
        self.log(|| format!("CRASH {id}"));
        Ok(())
    }

    pub fn is_up(&self, id: &str) -> bool {
        self.nodes.get(id).is_some_and(|n| n.node.is_some())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id).and_then(|n| n.node.as_ref())
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.get_mut(id).and_then(|n| n.node.as_mut())
    }

    /// Real time the node spent serving requests and ticking. Not part of
    /// the trace, so determinism is unaffected.
    pub fn busy(&self, id: &str) -> Duration {
        self.nodes.get(id).map(|n| n.busy).unwrap_or_default()
    }

    /// Handles a request on `id`, charging the time to that node.
    fn handle_on(&mut self, id: &str, req: &Request, via: Option<&str>) -> Option<Outcome> {
        let now = self.now;
        let sn = self.nodes.get_mut(id)?;
        let node = sn.node.as_mut()?;
        let started = Instant::now();
        let out = node.handle(req, via, now);
        sn.busy += started.elapsed();
        Some(out)
    }

    pub fn store(&self, id: &str) -> Option<&Store> {
        self.nodes.get(id).map(|n| &n.store)
    }

    pub fn set_link(&mut self, a: &str, b: &str, spec: LinkSpec) {
        self.links.insert((a.to_string(), b.to_string()), spec);
        self.links.insert((b.to_string(), a.to_string()), spec);
    }

    pub fn partition(&mut self, a: &str, b: &str) {
        self.partitions.insert(pair(a, b));
        self.log(|| format!("PARTITION {a} {b}"));
    }

    pub fn heal(&mut self, a: &str, b: &str) {
        self.partitions.remove(&pair(a, b));
        self.log(|| format!("HEAL {a} {b}"));
    }

    pub fn heal_all(&mut self) {
        self.partitions.clear();
        self.log(|| "HEAL".to_string());
    }

    fn connected(&self, a: &str, b: &str) -> bool {
        a == b || !self.partitions.contains(&pair(a, b))
    }

    fn link(&self, a: &str, b: &str) -> LinkSpec {
        self.links.get(&(a.to_string(), b.to_string())).copied().unwrap_or_default()
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.event_seq += 1;
        self.queue.insert((at, self.event_seq), event);
    }

    /// Executes a client request at `node` right now.
    pub fn client(&mut self, node: &str, req: &Request) -> Response {
        let outcome = match self.handle_on(node, req, None) {
            Some(o) => o,
            None => return Error::OwnerUnreachable.into(),
        };
        let resp = match outcome {
            Outcome::Reply(r) => r,
            Outcome::Forward { node: target, request, .. } => {
                if !self.connected(node, &target) {
                    Error::OwnerUnreachable.into()
                } else {
                    match self.handle_on(&target, &request, Some(node)) {
                        None => Error::OwnerUnreachable.into(),
                        Some(Outcome::Reply(r)) => r,
                        Some(Outcome::Forward { .. }) => Error::ForwardingLoop.into(),
                    }
                }
            }
        };
        self.log(|| {
            let status = match &resp {
                Response::Ok(rows) => format!("OK rows={}", rows.len()),
                Response::Err { code, message } => format!("ERR {code} {message}"),
            };
            format!("CLIENT {node} {} -> {status}", req.to_line())
        });
        resp
    }

    fn pump_polls(&mut self) {
        let now = self.now;
        let mut sends = Vec::new();
        for (id, sn) in self.nodes.iter_mut() {
            if let Some(node) = sn.node.as_mut() {
                for out in node.poll_replication(now) {
                    sends.push((id.clone(), sn.epoch, out));
                }
            }
        }
        for (from, epoch, out) in sends {
            let to = out.master_addr.clone();
            let at = now + self.link(&from, &to).latency_ms;
            self.log(|| format!("{from}->{to} {}", out.request.to_line()));
            self.schedule(at, Event::Request { from, epoch, replica: out.replica, to, req: out.request, sent_at: now });
        }
    }

    fn dropped(&mut self, a: &str, b: &str) -> bool {
        let p = self.link(a, b).drop;
        !self.connected(a, b) || (p > 0.0 && self.rng.gen::<f64>() < p)
    }

    fn process(&mut self, event: Event) {
        let now = self.now;
        match event {
            Event::Request { from, epoch, replica, to, req, sent_at } => {
                let reachable = self.is_up(&to) && !self.dropped(&from, &to);
                if !reachable {
                    let at = (sent_at + self.rpc_timeout_ms).max(now);
                    self.schedule(at, Event::Response { to: from, epoch, replica, result: Err(Error::MasterUnreachable) });
                    return;
                }
                let outcome = self.handle_on(&to, &req, None).expect("checked above");
                let result = match outcome {
                    Outcome::Reply(r) => r.into_result(),
                    Outcome::Forward { .. } => Err(Error::ForwardingLoop),
                };
                if self.dropped(&to, &from) {
                    let at = (sent_at + self.rpc_timeout_ms).max(now);
                    self.schedule(at, Event::Response { to: from, epoch, replica, result: Err(Error::MasterUnreachable) });
                } else {
                    let at = now + self.link(&to, &from).latency_ms;
                    self.schedule(at, Event::Response { to: from, epoch, replica, result });
                }
            }
            Event::Response { to, epoch, replica, result } => {
                let Some(sn) = self.nodes.get_mut(&to) else { return };
                if sn.epoch != epoch {
                    return;
                }
                if let Some(node) = sn.node.as_mut() {
                    if self.tracing {
                        let status = match &result {
                            Ok(rows) => format!("OK rows={}", rows.len()),
                            Err(e) => format!("ERR {} {e}", e.code()),
                        };
                        self.trace.push(format!("{:>9} {to}<- {status}", now));
                    }
                    node.replication_response(replica, now, result);
                }
            }
        }
    }

    /// Advances virtual time to `t_end`, processing every event on the way.
    pub fn run_until(&mut self, t_end: u64) {
        loop {
            self.pump_polls();
            let next_event = self.queue.keys().next().map(|k| k.0).unwrap_or(u64::MAX);
            let next_wake = self
                .nodes
                .values()
                .filter_map(|n| n.node.as_ref().and_then(Node::next_wakeup))
                .min()
                .unwrap_or(u64::MAX);
            let next = next_event.min(next_wake).min(self.next_tick);
            if next > t_end {
                self.now = self.now.max(t_end);
                return;
            }
            self.now = self.now.max(next);
            if self.next_tick <= self.now {
                let now = self.now;
                for sn in self.nodes.values_mut() {
                    if let Some(node) = sn.node.as_mut() {
                        let started = Instant::now();
                        if let Err(e) = node.tick(now) {
                            tracing::warn!(node = %sn.config.id, error = %e, "tick failed");
                        }
                        sn.busy += started.elapsed();
                    }
                }
                self.next_tick = now + self.tick_ms;
            }
            while let Some(entry) = self.queue.first_entry() {
                if entry.key().0 > self.now {
                    break;
                }
                let event = entry.remove();
                self.process(event);
            }
        }
    }

    pub fn advance(&mut self, ms: u64) {
        let t = self.now + ms;
        self.run_until(t);
    }

    /// True when every replica on a live node whose master is also live has
    /// applied and acknowledged everything its master logged.
    pub fn quiescent(&self) -> bool {
        for sn in self.nodes.values() {
            let Some(node) = sn.node.as_ref() else { continue };
            for r in node.replicas() {
                let Some(master) = self.node(&r.config().master_addr) else { continue };
                let wm = master.store().log_watermark();
                let settled = r.mode() == Mode::Streaming
                    && r.next_seq() == wm + 1
                    && r.acked() == wm
                    && r.next_wakeup().is_some();
                if !settled {
                    return false;
                }
            }
        }
        true
    }

    /// Runs until [`Sim::quiescent`] or until `limit_ms` elapse. Returns
    /// whether quiescence was reached.
    pub fn drain(&mut self, limit_ms: u64) -> bool {
        let deadline = self.now + limit_ms;
        while self.now < deadline {
            if self.quiescent() {
                return true;
            }
            let step = (self.now + 50).min(deadline);
            self.run_until(step);
        }
        let ok = self.quiescent();
        if !ok {
            self.log(|| "DRAIN timed out".to_string());
        }
        ok
    }

    /// Differences between each replica's subtree and what its master's
    /// filter selects. Empty when everything converged.
    pub fn divergences(&self, only: Option<(&str, &str)>) -> Vec<String> {
        let mut out = Vec::new();
        for (id, sn) in &self.nodes {
            let Some(node) = sn.node.as_ref() else { continue };
            for r in node.replicas() {
                let cfg = r.config();
                if let Some((n, s)) = only {
                    if n != id || s != cfg.sub_id {
                        continue;
                    }
                }
                let Some(master) = self.store(&cfg.master_addr) else {
                    out.push(format!("{id}/{}: unknown master {}", cfg.sub_id, cfg.master_addr));
                    continue;
                };
                let cond = match cfg.cond.as_deref().map(metacat_core::condition::Condition::parse).transpose() {
                    Ok(c) => c,
                    Err(e) => {
                        out.push(format!("{id}/{}: {e}", cfg.sub_id));
                        continue;
                    }
                };
                let want = dump_or_empty(master, &cfg.root, cond.as_ref());
                let got = dump_or_empty(&sn.store, &cfg.root, None);
                if want != got {
                    out.push(format!("{id}/{}: {}", cfg.sub_id, diff(&want, &got)));
                }
            }
        }
        out
    }
}

/// Dump lines of a subtree, empty when the root does not exist.
pub fn dump_or_empty(store: &Store, root: &Path, cond: Option<&metacat_core::condition::Condition>) -> Vec<String> {
    catalog::dump_lines(&store.open_snapshot_view(), root, cond).unwrap_or_default()
}

/// Short description of how two dumps differ.
pub fn diff(want: &[String], got: &[String]) -> String {
    let w: BTreeSet<&String> = want.iter().collect();
    let g: BTreeSet<&String> = got.iter().collect();
    let missing: Vec<_> = w.difference(&g).take(5).collect();
    let extra: Vec<_> = g.difference(&w).take(5).collect();
    if missing.is_empty() && extra.is_empty() {
        return "same lines in a different order".to_string();
    }
    format!("missing {missing:?} extra {extra:?} (want {} lines, got {})", want.len(), got.len())
}
