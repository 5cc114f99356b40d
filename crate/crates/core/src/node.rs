//! One catalog server: request dispatch over the local catalog, the
//! replication master, any replicas, and federation routing.
//!
//! A [`Node`] does no I/O of its own. Requests that must travel to another
//! node come back as [`Outcome::Forward`]; replication traffic is pulled
//! out with [`Node::poll_replication`]. The TCP server and the simulator
//! both drive nodes this way, which keeps forwarding outside any lock.

use crate::catalog::{self, request_path, Command};
use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::federation::{route, MastershipMap, Route};
use crate::path::Path;
use crate::protocol::{join_tokens, Request, Response, Verb};
use crate::replication::master::{record_log, Master, MasterConfig, MasterStats};
use crate::replication::slave::{Replica, ReplicaConfig};
use crate::storage::Store;

/// Anything that can carry one request to another node and bring back its
/// response. `via` names the originating node for forwarded client
/// requests. Transport failures are reported as `OwnerUnreachable`.
pub trait Transport {
    fn call(&self, addr: &str, via: Option<&str>, req: &Request) -> Result<Vec<String>>;
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: String,
    pub map: MastershipMap,
    pub master: MasterConfig,
    /// Replicas configured explicitly (plain master/slave setups).
    pub replicas: Vec<ReplicaConfig>,
    /// Template for replicas derived from physical roots in the map.
    pub replica_defaults: ReplicaConfig,
}

impl NodeConfig {
    pub fn new(id: impl Into<String>) -> NodeConfig {
        let id = id.into();
        NodeConfig {
            map: MastershipMap::local(id.clone()),
            id,
            master: MasterConfig::default(),
            replicas: Vec::new(),
            replica_defaults: ReplicaConfig::new("", Path::root(), "", ""),
        }
    }

    /// Every replica this node runs: explicit ones plus one per physical
    /// root owned elsewhere.
    pub fn all_replicas(&self) -> Result<Vec<ReplicaConfig>> {
        let mut out = self.replicas.clone();
        for r in self.map.physical_replicas() {
            let mut cfg = self.replica_defaults.clone();
            cfg.sub_id = format!("{}@{}", self.id, r.root);
            cfg.root = r.root.clone();
            cfg.master_node = r.owner.clone();
            cfg.master_addr = self.map.addr(&r.owner)?.to_string();
            out.push(cfg);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Reply(Response),
    Forward { node: String, addr: String, request: Request },
}

/// A replication request a replica wants sent to its master.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub replica: usize,
    pub master_addr: String,
    pub request: Request,
}

pub struct Node {
    id: String,
    store: Store,
    map: MastershipMap,
    master: Master,
    replicas: Vec<Replica>,
}

impl Node {
    pub fn open(store: Store, config: &NodeConfig, now: u64) -> Result<Node> {
        crate::federation::validate_map(&config.map)?;
        let master = Master::open(store.clone(), config.master.clone(), now)?;
        let replicas = config
            .all_replicas()?
            .into_iter()
            .map(|cfg| Replica::open(store.clone(), cfg, now))
            .collect::<Result<_>>()?;
        Ok(Node { id: config.id.clone(), store, map: config.map.clone(), master, replicas })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut Master {
        &mut self.master
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn stats(&self) -> MasterStats {
        self.master.stats
    }

    /// Handles one request. `via` is the origin node of a forwarded one.
    pub fn handle(&mut self, req: &Request, via: Option<&str>, now: u64) -> Outcome {
        match self.dispatch(req, via, now) {
            Ok(Some(rows)) => Outcome::Reply(Response::Ok(rows)),
            Ok(None) => match self.forward_target(req, via) {
                Ok((node, addr)) => Outcome::Forward { node, addr, request: req.clone() },
                Err(e) => Outcome::Reply(e.into()),
            },
            Err(e) => Outcome::Reply(e.into()),
        }
    }

    fn forward_target(&self, req: &Request, via: Option<&str>) -> Result<(String, String)> {
        let path = request_path(req)?.ok_or(Error::UnknownVerb)?;
        match route(&self.map, req.verb, &path, via.is_some())? {
            Route::Forward { node, addr } => Ok((node, addr)),
            Route::Local => Err(Error::BadArguments("request does not need forwarding".into())),
        }
    }

    /// `Ok(None)` means the request must be forwarded.
    fn dispatch(&mut self, req: &Request, via: Option<&str>, now: u64) -> Result<Option<Vec<String>>> {
        match req.verb {
            Verb::Ping | Verb::Quit => {
                req.expect_args(0, 0)?;
                return Ok(Some(Vec::new()));
            }
            Verb::Via => return Err(Error::BadArguments("VIA must precede a request line".into())),
            v if v.is_replication() => return self.master.handle(req, now).map(Some),
            _ => {}
        }
        let path = request_path(req)?.ok_or(Error::UnknownVerb)?;
        if let Route::Forward { .. } = route(&self.map, req.verb, &path, via.is_some())? {
            return Ok(None);
        }
        for replica in &self.replicas {
            replica.guard_write(req)?;
        }
        self.execute(req, now).map(Some)
    }

    /// Runs a client request against the local catalog.
    pub fn execute(&mut self, req: &Request, now: u64) -> Result<Vec<String>> {
        match req.verb {
            v if v.is_mutating() => {
                let cmd = Command::from_request(req)?;
                let seq = self.store.with_transaction(|txn| {
                    let effect = catalog::apply(txn, &cmd)?;
                    record_log(txn, &cmd, &effect, now)
                })?;
                if seq > 0 {
                    self.master.stats.logged += 1;
                }
                Ok(Vec::new())
            }
            Verb::GetAttr => {
                req.expect_args(1, 1)?;
                let (dir, name) = Path::parse(req.arg(0)?)?.split_entry()?;
                let view = self.store.open_snapshot_view();
                Ok(catalog::read_entry(&view, &dir, &name)?
                    .into_iter()
                    .map(|(attr, value)| join_tokens(&[attr, value.to_token()]))
                    .collect())
            }
            Verb::Find => {
                req.expect_args(1, 2)?;
                let dir = Path::parse(req.arg(0)?)?;
                let cond = Condition::parse(req.args.get(1).map(String::as_str).unwrap_or(""))?;
                catalog::find_entries(&self.store.open_snapshot_view(), &dir, &cond)
            }
            Verb::Dump => {
                req.expect_args(1, 1)?;
                let root = Path::parse(req.arg(0)?)?;
                catalog::dump_lines(&self.store.open_snapshot_view(), &root, None)
            }
            _ => Err(Error::UnknownVerb),
        }
    }

    /// Master housekeeping.
    pub fn tick(&mut self, now: u64) -> Result<()> {
        self.master.tick(now)
    }

    /// A client connection that issued replication requests for these
    /// subscriptions has closed.
    pub fn session_closed<'a>(&mut self, sub_ids: impl IntoIterator<Item = &'a String>, now: u64) {
        for id in sub_ids {
            if let Err(e) = self.master.disconnect(id, now) {
                tracing::warn!(sub = %id, error = %e, "could not mark subscription offline");
            }
        }
    }

    /// Replication requests due at `now`.
    pub fn poll_replication(&mut self, now: u64) -> Vec<Outbound> {
        self.replicas
            .iter_mut()
            .enumerate()
            .filter_map(|(i, r)| {
                r.poll(now).map(|request| Outbound {
                    replica: i,
                    master_addr: r.config().master_addr.clone(),
                    request,
                })
            })
            .collect()
    }

    pub fn replication_response(&mut self, replica: usize, now: u64, result: Result<Vec<String>>) {
        if let Some(r) = self.replicas.get_mut(replica) {
            r.on_response(now, result);
        }
    }

    /// Earliest time any replica wants to send.
    pub fn next_wakeup(&self) -> Option<u64> {
        self.replicas.iter().filter_map(Replica::next_wakeup).min()
    }
}

/// Runs request lines through `node` as one client session and returns the
/// transcript (`> request` followed by the encoded response) and the
/// number of exchanges. Line `i` runs at `start_ms + i`. Forwarded
/// requests are answered with `OwnerUnreachable`.
pub fn run_session(node: &mut Node, lines: &str, start_ms: u64) -> (String, usize) {
    let mut out = String::new();
    let mut count = 0;
    for (i, line) in lines.lines().enumerate() {
        let resp = match crate::protocol::parse_request(line) {
            Ok(req) => match node.handle(&req, None, start_ms + i as u64) {
                Outcome::Reply(r) => r,
                Outcome::Forward { .. } => Error::OwnerUnreachable.into(),
            },
            Err(e) => Response::from(e),
        };
        out.push_str("> ");
        out.push_str(line);
        out.push('\n');
        out.push_str(&resp.encode());
        count += 1;
    }
    (out, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{ReplicaMode, RootAssignment};
    use crate::protocol::parse_request;

    fn reply(node: &mut Node, line: &str) -> Response {
        match node.handle(&parse_request(line).unwrap(), None, 0) {
            Outcome::Reply(r) => r,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn local_catalog_commands() {
        let mut node = Node::open(Store::memory(), &NodeConfig::new("A"), 0).unwrap();
        assert_eq!(reply(&mut node, "PING"), Response::ok());
        assert_eq!(reply(&mut node, "CREATEDIR /exp run:INT tag:STRING"), Response::ok());
        assert_eq!(reply(&mut node, "ADDENTRY /exp/f1 3 \"x y\""), Response::ok());
        assert_eq!(reply(&mut node, "GETATTR /exp/f1"), Response::Ok(vec!["run 3".into(), "tag \"x y\"".into()]));
        assert_eq!(reply(&mut node, "FIND /exp \"run > 2\""), Response::Ok(vec!["f1".into()]));
        assert_eq!(reply(&mut node, "FIND /exp"), Response::Ok(vec!["f1".into()]));
        assert_eq!(reply(&mut node, "GETATTR /exp/none"), Error::NotFound.into());
        assert_eq!(reply(&mut node, "VIA B"), Error::BadArguments("VIA must precede a request line".into()).into());
        assert_eq!(node.stats().logged, 0);
    }

    #[test]
    fn federation_routing() {
        let mut cfg = NodeConfig::new("A");
        cfg.map.nodes.insert("A".into(), "a:1".into());
        cfg.map.nodes.insert("B".into(), "b:1".into());
        cfg.map.roots.push(RootAssignment { root: Path::parse("/b").unwrap(), owner: "B".into(), mode: ReplicaMode::Virtual });
        let mut node = Node::open(Store::memory(), &cfg, 0).unwrap();
        let req = parse_request("GETATTR /b/x").unwrap();
        assert_eq!(
            node.handle(&req, None, 0),
            Outcome::Forward { node: "B".into(), addr: "b:1".into(), request: req.clone() }
        );
        assert_eq!(node.handle(&req, Some("C"), 0), Outcome::Reply(Error::ForwardingLoop.into()));
    }

    #[test]
    fn physical_roots_create_replicas() {
        let mut cfg = NodeConfig::new("A");
        cfg.map.nodes.insert("B".into(), "b:1".into());
        cfg.map.roots.push(RootAssignment {
            root: Path::parse("/b").unwrap(),
            owner: "B".into(),
            mode: ReplicaMode::Physical,
        });
        let mut node = Node::open(Store::memory(), &cfg, 0).unwrap();
        assert_eq!(node.replicas().len(), 1);
        let out = node.poll_replication(0);
        assert_eq!(out[0].request.to_line(), "SUBSCRIBE A@/b /b");
        assert_eq!(
            reply(&mut node, "CREATEDIR /b/x"),
            Error::Redirect { node: "B".into(), addr: "b:1".into() }.into()
        );
    }
}
