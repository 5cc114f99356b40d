//! Server configuration file.
//!
//! ```toml
//! id = "A"
//! listen = "127.0.0.1:7001"
//! storage = "data/a"          # omitted: in-memory store
//! federation = "federation.conf"
//!
//! [replication]
//! poll_interval_ms = 100
//! expiry_ms = 86400000
//!
//! [[replica]]
//! sub_id = "a-exp"
//! root = "/exp"
//! master_node = "M"
//! master_addr = "127.0.0.1:7000"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path as FsPath, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::federation::MastershipMap;
use crate::node::NodeConfig;
use crate::path::Path;
use crate::replication::master::MasterConfig;
use crate::replication::slave::ReplicaConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub id: String,
    pub listen: String,
    pub storage: Option<PathBuf>,
    pub federation: Option<PathBuf>,
    #[serde(default = "yes")]
    pub sync: bool,
    #[serde(default)]
    pub replication: ReplicationSettings,
    #[serde(default, rename = "replica")]
    pub replicas: Vec<ReplicaEntry>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationSettings {
    pub poll_interval_ms: u64,
    pub batch: usize,
    pub ack_every: u64,
    pub ack_interval_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub liveness_ms: u64,
    pub expiry_ms: u64,
    pub pending_limit: u64,
}

impl Default for ReplicationSettings {
    fn default() -> Self {
        let r = ReplicaConfig::new("", Path::root(), "", "");
        let m = MasterConfig::default();
        ReplicationSettings {
            poll_interval_ms: r.poll_interval_ms,
            batch: r.batch,
            ack_every: r.ack_every,
            ack_interval_ms: r.ack_interval_ms,
            backoff_base_ms: r.backoff_base_ms,
            backoff_cap_ms: r.backoff_cap_ms,
            liveness_ms: m.liveness_ms,
            expiry_ms: m.expiry_ms,
            pending_limit: m.pending_limit,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaEntry {
    pub sub_id: String,
    pub root: String,
    pub cond: Option<String>,
    pub master_node: String,
    pub master_addr: String,
}

impl ServeConfig {
    pub fn parse(text: &str, base_dir: &FsPath) -> Result<ServeConfig> {
        let mut cfg: ServeConfig =
            toml::from_str(text).map_err(|e| Error::BadArguments(format!("config: {}", e.message())))?;
        cfg.storage = cfg.storage.map(|p| base_dir.join(p));
        cfg.federation = cfg.federation.map(|p| base_dir.join(p));
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<ServeConfig> {
        let text = std::fs::read_to_string(path)?;
        ServeConfig::parse(&text, path.parent().unwrap_or(FsPath::new(".")))
    }

    pub fn node_config(&self) -> Result<NodeConfig> {
        let s = &self.replication;
        let mut node = NodeConfig::new(self.id.clone());
        node.master = MasterConfig {
            liveness_ms: s.liveness_ms,
            expiry_ms: s.expiry_ms,
            pending_limit: s.pending_limit,
            ..MasterConfig::default()
        };
        let template = ReplicaConfig {
            poll_interval_ms: s.poll_interval_ms,
            batch: s.batch,
            ack_every: s.ack_every,
            ack_interval_ms: s.ack_interval_ms,
            backoff_base_ms: s.backoff_base_ms,
            backoff_cap_ms: s.backoff_cap_ms,
            ..ReplicaConfig::new("", Path::root(), "", "")
        };
        if let Some(path) = &self.federation {
            let text = std::fs::read_to_string(path)?;
            node.map = MastershipMap::parse(&self.id, &text)?;
        }
        for r in &self.replicas {
            let mut cfg = template.clone();
            cfg.sub_id = r.sub_id.clone();
            cfg.root = Path::parse(&r.root)?;
            cfg.cond = r.cond.clone();
            cfg.master_node = r.master_node.clone();
            cfg.master_addr = r.master_addr.clone();
            node.replicas.push(cfg);
        }
        node.replica_defaults = template;
        Ok(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("fed.conf"), "/a A 127.0.0.1:1 PHYSICAL\n/b B 127.0.0.1:2 PHYSICAL\n").unwrap();
        let text = r#"
            id = "A"
            listen = "127.0.0.1:1"
            storage = "data"
            federation = "fed.conf"
            [replication]
            poll_interval_ms = 50
            [[replica]]
            sub_id = "x"
            root = "/exp"
            master_node = "M"
            master_addr = "127.0.0.1:9"
        "#;
        let cfg = ServeConfig::parse(text, dir.path()).unwrap();
        assert_eq!(cfg.storage.as_deref(), Some(dir.path().join("data").as_path()));
        assert!(cfg.sync);
        let node = cfg.node_config().unwrap();
        let replicas = node.all_replicas().unwrap();
        assert_eq!(replicas.len(), 2);
        assert!(replicas.iter().all(|r| r.poll_interval_ms == 50));
        assert_eq!(replicas[1].root.to_string(), "/b");
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ServeConfig::parse("id = \"A\"\nlisten = \"x\"\nbogus = 1\n", FsPath::new(".")).is_err());
    }
}
