//! Replication log records and subscriber filters.
//!
//! A record keeps the original command line plus the before/after images
//! of every entry the command touched. Subtree subscribers receive the
//! command verbatim. Subscribers with a condition receive a translation
//! that keeps their replica equal to the filtered view of the master: an
//! entry that starts matching arrives as a full `ADDENTRY`, an entry that
//! stops matching arrives as a `DELENTRY`.

use serde::{Deserialize, Serialize};

use crate::catalog::{Command, Effect};
use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::path::Path;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub dir: Path,
    pub command: String,
    /// Commit time in milliseconds on the master's clock.
    pub ts: u64,
    pub effect: Effect,
}

impl LogRecord {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }

    pub fn decode(raw: &str) -> Result<LogRecord> {
        serde_json::from_str(raw).map_err(|e| Error::StorageFailure(format!("corrupt log record: {e}")))
    }

    pub fn parsed_command(&self) -> Result<Command> {
        Command::parse_line(&self.command)
    }
}

/// Which part of the catalog a subscriber receives.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub root: Path,
    pub cond: Option<Condition>,
}

impl Filter {
    pub fn subtree(root: Path) -> Filter {
        Filter { root, cond: None }
    }

    /// Parses the wire form. An empty condition means a plain subtree.
    pub fn parse(root: &str, cond: Option<&str>) -> Result<Filter> {
        let root = Path::parse(root)?;
        let cond = match cond.map(Condition::parse).transpose()? {
            Some(c) if !c.is_true() => Some(c),
            _ => None,
        };
        Ok(Filter { root, cond })
    }

    pub fn cond_text(&self) -> Option<String> {
        self.cond.as_ref().map(|c| c.to_string())
    }

    pub fn covers(&self, dir: &Path) -> bool {
        dir.starts_with(&self.root)
    }

    fn entry_matches(&self, schema: &[crate::value::AttributeDef], values: Option<&Vec<Value>>) -> bool {
        match (values, &self.cond) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(v), Some(c)) => c.eval(schema, v),
        }
    }

    /// Commands this subscriber must run to follow `record`. Empty when
    /// the record does not concern it.
    pub fn translate(&self, record: &LogRecord) -> Result<Vec<Command>> {
        if !self.covers(&record.dir) {
            return Ok(Vec::new());
        }
        let cmd = record.parsed_command()?;
        if self.cond.is_none() {
            return Ok(vec![cmd]);
        }
        let effect = &record.effect;
        let mut out = Vec::new();
        let schema_change = cmd.is_schema_change();
        if schema_change {
            out.push(cmd.clone());
        }
        for change in &effect.entries {
            let before = self.entry_matches(&effect.schema_before, change.before.as_ref());
            let after = self.entry_matches(&effect.schema_after, change.after.as_ref());
            match (before, after) {
                (false, true) => out.push(Command::AddEntry {
                    dir: record.dir.clone(),
                    name: change.name.clone(),
                    values: change.after.iter().flatten().map(Value::to_token).collect(),
                }),
                (true, false) => out.push(Command::DelEntry { dir: record.dir.clone(), name: change.name.clone() }),
                (true, true) if !schema_change => out.push(cmd.clone()),
                _ => {}
            }
        }
        Ok(out)
    }

    /// True when `translate` would produce at least one command.
    pub fn matches(&self, record: &LogRecord) -> Result<bool> {
        if !self.covers(&record.dir) {
            return Ok(false);
        }
        if self.cond.is_none() {
            return Ok(true);
        }
        Ok(!self.translate(record)?.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::EntryChange;
    use crate::value::{AttrType, AttributeDef};

    fn record(cmd: &str, changes: Vec<EntryChange>) -> LogRecord {
        let c = Command::parse_line(cmd).unwrap();
        let schema = vec![AttributeDef::new("run", AttrType::Int).unwrap()];
        LogRecord {
            seq: 1,
            dir: c.dir().clone(),
            command: cmd.into(),
            ts: 0,
            effect: Effect { schema_before: schema.clone(), schema_after: schema, entries: changes },
        }
    }

    fn change(before: Option<i64>, after: Option<i64>) -> EntryChange {
        EntryChange {
            name: "f".into(),
            before: before.map(|v| vec![Value::Int(v)]),
            after: after.map(|v| vec![Value::Int(v)]),
        }
    }

    #[test]
    fn subtree_filter_passes_commands_through() {
        let f = Filter::parse("/a", None).unwrap();
        let r = record("SETATTR /a/x/f run 3", vec![change(Some(1), Some(3))]);
        assert_eq!(f.translate(&r).unwrap(), vec![Command::parse_line("SETATTR /a/x/f run 3").unwrap()]);
        let other = record("SETATTR /b/f run 3", vec![change(Some(1), Some(3))]);
        assert!(f.translate(&other).unwrap().is_empty());
        assert!(Filter::parse("/a", Some("")).unwrap().cond.is_none());
    }

    #[test]
    fn condition_transitions() {
        let f = Filter::parse("/a", Some("run > 2")).unwrap();
        let lines = |r: &LogRecord| f.translate(r).unwrap().iter().map(Command::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&record("SETATTR /a/f run 3", vec![change(Some(1), Some(3))])), ["ADDENTRY /a/f 3"]);
        assert_eq!(lines(&record("SETATTR /a/f run 1", vec![change(Some(3), Some(1))])), ["DELENTRY /a/f"]);
        assert_eq!(lines(&record("SETATTR /a/f run 4", vec![change(Some(3), Some(4))])), ["SETATTR /a/f run 4"]);
        assert!(lines(&record("SETATTR /a/f run 0", vec![change(Some(1), Some(0))])).is_empty());
        assert!(lines(&record("ADDENTRY /a/f 1", vec![change(None, Some(1))])).is_empty());
        assert_eq!(lines(&record("DELENTRY /a/f", vec![change(Some(5), None)])), ["DELENTRY /a/f"]);
        assert_eq!(lines(&record("CREATEDIR /a/s", vec![])), ["CREATEDIR /a/s"]);
    }

    #[test]
    fn schema_change_emits_fixups() {
        let f = Filter::parse("/a", Some("run > 2")).unwrap();
        let mut r = record("REMOVEATTR /a run", vec![change(Some(5), None)]);
        r.effect.schema_after.clear();
        r.effect.entries[0].after = Some(vec![]);
        let out: Vec<_> = f.translate(&r).unwrap().iter().map(Command::to_line).collect();
        assert_eq!(out, ["REMOVEATTR /a run", "DELENTRY /a/f"]);
    }

    #[test]
    fn record_json_round_trip() {
        let r = record("ADDENTRY /a/f 1", vec![change(None, Some(1))]);
        assert_eq!(LogRecord::decode(&r.encode()).unwrap(), r);
    }
}
