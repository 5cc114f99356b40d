//! Hierarchical metadata catalog with subtree replication and federation.
//!
//! The crate is organised bottom up: [`path`], [`value`] and [`condition`]
//! define the data model vocabulary, [`protocol`] the line oriented wire
//! format, [`storage`] a small transactional key/value store, and
//! [`catalog`] the directory/entry operations built on it. [`replication`]
//! and [`federation`] distribute a catalog over several [`node::Node`]s,
//! which [`net`] serves over TCP.

pub mod catalog;
pub mod condition;
pub mod config;
pub mod error;
pub mod federation;
pub mod net;
pub mod node;
pub mod path;
pub mod protocol;
pub mod replication;
pub mod storage;
pub mod value;

pub use error::{Error, Result};
