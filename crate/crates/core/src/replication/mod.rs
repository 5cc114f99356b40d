//! Master/slave replication of catalog subtrees.
//!
//! The master writes a [`log::LogRecord`] in the same transaction as every
//! mutation under a subscribed root. Slaves pull: they subscribe, fetch a
//! snapshot paired with a log watermark, then poll for records past it and
//! acknowledge what they applied. The exchange is plain request/response
//! over the client protocol:
//!
//! ```text
//! SUBSCRIBE <sub_id> <root> [<cond>]   -> OK
//! SNAPSHOT_BEGIN <sub_id>              -> |SNAPSHOT_BEGIN <sub_id>, |<command>..., |SNAPSHOT_END <watermark>
//! LOG <sub_id> <max>                   -> |FROM <a>, |LOG <seq> <dir> <command>..., |UPTO <b>
//! ACK <sub_id> <seq>                   -> OK
//! RESUME <sub_id> <first_needed>       -> OK
//! UNSUBSCRIBE <sub_id>                 -> OK
//! ```
//!
//! A `LOG` batch covers the closed range `a..=b` of master sequence
//! numbers: every record in it the subscriber needs is included, so a
//! slave that has processed everything below `a` can move its cursor to
//! `b + 1`. One record may expand to several rows with the same sequence.

pub mod log;
pub mod master;
pub mod slave;

use crate::catalog::Command;
use crate::error::{Error, Result};
use crate::path::Path;
use crate::protocol::{join_tokens, tokenize};

pub use log::{Filter, LogRecord};
pub use master::{Master, MasterConfig, SubState, Subscription};
pub use slave::{Mode, Replica, ReplicaConfig};

/// Records shipped to one subscriber in one `LOG` exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShipBatch {
    pub from: u64,
    pub upto: u64,
    pub records: Vec<(u64, Path, Command)>,
}

fn parse_num(token: Option<&String>) -> Result<u64> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::MalformedLine("expected a sequence number".into()))
}

impl ShipBatch {
    pub fn to_rows(&self) -> Vec<String> {
        let mut rows = Vec::with_capacity(self.records.len() + 2);
        rows.push(format!("FROM {}", self.from));
        for (seq, dir, cmd) in &self.records {
            rows.push(join_tokens(&[String::from("LOG"), seq.to_string(), dir.to_string(), cmd.to_line()]));
        }
        rows.push(format!("UPTO {}", self.upto));
        rows
    }

    pub fn from_rows(rows: &[String]) -> Result<ShipBatch> {
        let bad = || Error::MalformedLine("malformed LOG batch".into());
        let (first, rest) = rows.split_first().ok_or_else(bad)?;
        let (last, body) = rest.split_last().ok_or_else(bad)?;
        let from = match tokenize(first)?.as_slice() {
            [kw, n] if kw == "FROM" => parse_num(Some(n))?,
            _ => return Err(bad()),
        };
        let upto = match tokenize(last)?.as_slice() {
            [kw, n] if kw == "UPTO" => parse_num(Some(n))?,
            _ => return Err(bad()),
        };
        let mut records = Vec::with_capacity(body.len());
        for row in body {
            let toks = tokenize(row)?;
            if toks.len() != 4 || toks[0] != "LOG" {
                return Err(bad());
            }
            let seq = parse_num(toks.get(1))?;
            let dir = Path::parse(&toks[2])?;
            let cmd = Command::parse_line(&toks[3]).map_err(|e| Error::ApplyFailed(e.to_string()))?;
            if seq < from || seq > upto || records.last().is_some_and(|(s, _, _)| *s > seq) {
                return Err(bad());
            }
            records.push((seq, dir, cmd));
        }
        Ok(ShipBatch { from, upto, records })
    }
}

/// A subtree snapshot as replayable commands plus the log watermark it
/// was taken at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub sub_id: String,
    pub commands: Vec<Command>,
    pub watermark: u64,
}

impl Snapshot {
    pub fn to_rows(&self) -> Vec<String> {
        let mut rows = Vec::with_capacity(self.commands.len() + 2);
        rows.push(join_tokens(&["SNAPSHOT_BEGIN", self.sub_id.as_str()]));
        rows.extend(self.commands.iter().map(Command::to_line));
        rows.push(format!("SNAPSHOT_END {}", self.watermark));
        rows
    }

    /// Parses a snapshot stream. A stream without its end marker was cut
    /// short and is rejected as a whole.
    pub fn from_rows(rows: &[String]) -> Result<Snapshot> {
        let (first, rest) = rows.split_first().ok_or(Error::SnapshotAborted)?;
        let (last, body) = rest.split_last().ok_or(Error::SnapshotAborted)?;
        let sub_id = match tokenize(first)?.as_slice() {
            [kw, id] if kw == "SNAPSHOT_BEGIN" => id.clone(),
            _ => return Err(Error::SnapshotAborted),
        };
        let watermark = match tokenize(last)?.as_slice() {
            [kw, n] if kw == "SNAPSHOT_END" => parse_num(Some(n))?,
            _ => return Err(Error::SnapshotAborted),
        };
        let commands = body.iter().map(|r| Command::parse_line(r)).collect::<Result<_>>()?;
        Ok(Snapshot { sub_id, commands, watermark })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_rows_round_trip() {
        let batch = ShipBatch {
            from: 3,
            upto: 9,
            records: vec![
                (4, Path::parse("/a").unwrap(), Command::parse_line("ADDENTRY /a/f \"x y\"").unwrap()),
                (4, Path::parse("/a").unwrap(), Command::parse_line("DELENTRY /a/g").unwrap()),
                (7, Path::parse("/a/b").unwrap(), Command::parse_line("CREATEDIR /a/b").unwrap()),
            ],
        };
        assert_eq!(ShipBatch::from_rows(&batch.to_rows()).unwrap(), batch);
        let mut rows = batch.to_rows();
        rows.pop();
        assert!(ShipBatch::from_rows(&rows).is_err());
    }

    #[test]
    fn snapshot_rows_round_trip() {
        let snap = Snapshot {
            sub_id: "s1".into(),
            commands: vec![Command::parse_line("CREATEDIR /a x:INT").unwrap()],
            watermark: 12,
        };
        let rows = snap.to_rows();
        assert_eq!(rows, ["SNAPSHOT_BEGIN s1", "CREATEDIR /a x:INT", "SNAPSHOT_END 12"]);
        assert_eq!(Snapshot::from_rows(&rows).unwrap(), snap);
        assert_eq!(Snapshot::from_rows(&rows[..2]), Err(Error::SnapshotAborted));
    }
}
