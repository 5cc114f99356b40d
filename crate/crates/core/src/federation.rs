//! Several catalogs composed into one namespace.
//!
//! A [`MastershipMap`] hands non-overlapping subtree roots to owning nodes.
//! Paths under no root belong to whichever node is asked. For a root owned
//! elsewhere, the local node is either a physical replica (it holds a copy
//! kept current by replication) or a virtual one (it holds nothing and
//! forwards).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::path::Path;
use crate::protocol::Verb;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaMode {
    Physical,
    Virtual,
}

impl FromStr for ReplicaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReplicaMode> {
        match s {
            "PHYSICAL" => Ok(ReplicaMode::Physical),
            "VIRTUAL" => Ok(ReplicaMode::Virtual),
            _ => Err(Error::BadArguments(format!("unknown replica mode {s}"))),
        }
    }
}

impl fmt::Display for ReplicaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplicaMode::Physical => "PHYSICAL",
            ReplicaMode::Virtual => "VIRTUAL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootAssignment {
    pub root: Path,
    pub owner: String,
    pub mode: ReplicaMode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MastershipMap {
    pub self_id: String,
    /// Node id to `host:port`.
    pub nodes: BTreeMap<String, String>,
    pub roots: Vec<RootAssignment>,
}

/// Who answers for a path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Owner {
    /// No root covers the path.
    Local,
    Node { id: String, mode: ReplicaMode },
}

/// What a node does with a client request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Local,
    Forward { node: String, addr: String },
}

impl MastershipMap {
    pub fn local(self_id: impl Into<String>) -> MastershipMap {
        MastershipMap { self_id: self_id.into(), ..Default::default() }
    }

    /// Parses the federation file: one `<root> <node_id> <host:port>
    /// <PHYSICAL|VIRTUAL>` line per root. Blank lines and `#` comments are
    /// ignored. The result is validated.
    pub fn parse(self_id: &str, text: &str) -> Result<MastershipMap> {
        let mut map = MastershipMap::local(self_id);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::BadArguments(format!("line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [root, owner, addr, mode] = fields[..] else {
                return Err(bad("expected <root> <node> <host:port> <mode>"));
            };
            if let Some(prev) = map.nodes.insert(owner.to_string(), addr.to_string()) {
                if prev != addr {
                    return Err(bad(&format!("node {owner} has two addresses")));
                }
            }
            map.roots.push(RootAssignment { root: Path::parse(root)?, owner: owner.to_string(), mode: mode.parse()? });
        }
        validate_map(&map)?;
        Ok(map)
    }

    pub fn addr(&self, node: &str) -> Result<&str> {
        self.nodes.get(node).map(String::as_str).ok_or_else(|| Error::UnknownNode(node.to_string()))
    }

    /// Remote roots this node keeps a physical copy of.
    pub fn physical_replicas(&self) -> impl Iterator<Item = &RootAssignment> {
        self.roots.iter().filter(|r| r.owner != self.self_id && r.mode == ReplicaMode::Physical)
    }
}

/// Checks that roots are pairwise disjoint and that every owner has an
/// address.
pub fn validate_map(map: &MastershipMap) -> Result<()> {
    for (i, a) in map.roots.iter().enumerate() {
        for b in &map.roots[i + 1..] {
            if a.root.overlaps(&b.root) {
                return Err(Error::OverlappingRoots(a.root.to_string(), b.root.to_string()));
            }
        }
        if !map.nodes.contains_key(&a.owner) {
            return Err(Error::UnknownNode(a.owner.clone()));
        }
    }
    Ok(())
}

/// The owner of the root covering `path`. Roots are disjoint, so at most
/// one matches.
pub fn resolve_owner(map: &MastershipMap, path: &Path) -> Owner {
    match map.roots.iter().find(|r| path.starts_with(&r.root)) {
        Some(r) => Owner::Node { id: r.owner.clone(), mode: r.mode },
        None => Owner::Local,
    }
}

/// Decides where a client request runs. `forwarded` marks a request that
/// already came from another node; it may not travel again.
pub fn route(map: &MastershipMap, verb: Verb, path: &Path, forwarded: bool) -> Result<Route> {
    let (owner, mode) = match resolve_owner(map, path) {
        Owner::Local => return Ok(Route::Local),
        Owner::Node { id, .. } if id == map.self_id => return Ok(Route::Local),
        Owner::Node { id, mode } => (id, mode),
    };
    let addr = map.addr(&owner)?.to_string();
    match (mode, verb.is_mutating()) {
        (ReplicaMode::Physical, false) => Ok(Route::Local),
        (ReplicaMode::Physical, true) => Err(Error::Redirect { node: owner, addr }),
        (ReplicaMode::Virtual, _) if forwarded => Err(Error::ForwardingLoop),
        (ReplicaMode::Virtual, _) => Ok(Route::Forward { node: owner, addr }),
    }
}
