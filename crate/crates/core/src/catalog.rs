//! The metadata data model.
//!
//! Directories double as schemas: each holds an ordered list of typed
//! attribute definitions, a set of child directories and a set of entries.
//! Entries carry one value (or NULL) per attribute of their directory.
//! Entry names and child directory names share one namespace per directory.
//!
//! State lives in the `meta` table of a [`Store`]:
//!
//! * `d:<path>`: a directory row (schema and child names). The root row is
//!   implicit until something is written to it.
//! * `e:<dir>|<name>`: an entry row (the value vector).
//!
//! Mutations go through [`apply`], which executes one [`Command`] inside a
//! caller supplied transaction and reports an [`Effect`] describing what
//! changed. Reads take any [`ReadView`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::path::{valid_name, Path};
use crate::protocol::{Request, Verb};
use crate::storage::{ReadView, Store, Table, Txn};
use crate::value::{AttributeDef, Value};

/// Schema and child names of one directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirRow {
    pub attrs: Vec<AttributeDef>,
    pub children: BTreeSet<String>,
}

impl DirRow {
    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a.name == name)
    }
}

fn dir_key(path: &Path) -> String {
    format!("d:{path}")
}

fn entry_prefix(dir: &Path) -> String {
    format!("e:{dir}|")
}

fn entry_key(dir: &Path, name: &str) -> String {
    format!("e:{dir}|{name}")
}

fn decode<T: for<'de> Deserialize<'de>>(raw: &str) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| Error::StorageFailure(format!("corrupt row: {e}")))
}

fn encode<T: Serialize>(row: &T) -> String {
    serde_json::to_string(row).expect("rows always serialize")
}

/// Directory row, `None` when the directory does not exist.
pub fn dir_row(view: &(impl ReadView + ?Sized), path: &Path) -> Result<Option<DirRow>> {
    match view.get(Table::Meta, &dir_key(path)) {
        Some(raw) => Ok(Some(decode(&raw)?)),
        None if path.is_root() => Ok(Some(DirRow::default())),
        None => Ok(None),
    }
}

fn require_dir(view: &(impl ReadView + ?Sized), path: &Path) -> Result<DirRow> {
    dir_row(view, path)?.ok_or(Error::NotFound)
}

pub fn dir_exists(view: &(impl ReadView + ?Sized), path: &Path) -> Result<bool> {
    Ok(dir_row(view, path)?.is_some())
}

fn entry_row(view: &(impl ReadView + ?Sized), dir: &Path, name: &str) -> Result<Option<Vec<Value>>> {
    view.get(Table::Meta, &entry_key(dir, name)).map(|raw| decode(&raw)).transpose()
}

/// All entries of a directory in name order.
pub fn entries(view: &(impl ReadView + ?Sized), dir: &Path) -> Result<Vec<(String, Vec<Value>)>> {
    let prefix = entry_prefix(dir);
    view.scan_prefix(Table::Meta, &prefix)
        .into_iter()
        .map(|(k, v)| Ok((k[prefix.len()..].to_string(), decode(&v)?)))
        .collect()
}

fn has_entries(view: &(impl ReadView + ?Sized), dir: &Path) -> bool {
    view.has_prefix(Table::Meta, &entry_prefix(dir))
}

/// A mutating metadata command, the unit that replication logs carry.
///
/// Entry values stay as wire tokens until they are applied, because their
/// interpretation depends on the target directory's schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    CreateDir { path: Path, attrs: Vec<AttributeDef> },
    RemoveDir { path: Path },
    AddAttr { dir: Path, def: AttributeDef },
    RemoveAttr { dir: Path, name: String },
    AddEntry { dir: Path, name: String, values: Vec<String> },
    SetAttr { dir: Path, name: String, assignments: Vec<(String, String)> },
    DelEntry { dir: Path, name: String },
}

fn entry_path(arg: &str) -> Result<(Path, String)> {
    let path = Path::parse(arg)?;
    path.split_entry()
}

impl Command {
    pub fn from_request(req: &Request) -> Result<Command> {
        let cmd = match req.verb {
            Verb::CreateDir => {
                req.expect_args(1, usize::MAX)?;
                Command::CreateDir {
                    path: Path::parse(req.arg(0)?)?,
                    attrs: req.args[1..].iter().map(|a| a.parse()).collect::<Result<_>>()?,
                }
            }
            Verb::RemoveDir => {
                req.expect_args(1, 1)?;
                Command::RemoveDir { path: Path::parse(req.arg(0)?)? }
            }
            Verb::AddAttr => {
                req.expect_args(2, 2)?;
                Command::AddAttr { dir: Path::parse(req.arg(0)?)?, def: req.arg(1)?.parse()? }
            }
            Verb::RemoveAttr => {
                req.expect_args(2, 2)?;
                Command::RemoveAttr { dir: Path::parse(req.arg(0)?)?, name: req.arg(1)?.to_string() }
            }
            Verb::AddEntry => {
                req.expect_args(1, usize::MAX)?;
                let (dir, name) = entry_path(req.arg(0)?)?;
                Command::AddEntry { dir, name, values: req.args[1..].to_vec() }
            }
            Verb::SetAttr => {
                req.expect_args(3, usize::MAX)?;
                if !(req.args.len() - 1).is_multiple_of(2) {
                    return Err(Error::BadArguments("SETATTR takes attribute/value pairs".into()));
                }
                let (dir, name) = entry_path(req.arg(0)?)?;
                let assignments = req.args[1..].chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
                Command::SetAttr { dir, name, assignments }
            }
            Verb::DelEntry => {
                req.expect_args(1, 1)?;
                let (dir, name) = entry_path(req.arg(0)?)?;
                Command::DelEntry { dir, name }
            }
            _ => return Err(Error::BadArguments(format!("{} is not a mutating command", req.verb))),
        };
        Ok(cmd)
    }

    pub fn to_request(&self) -> Request {
        let entry = |dir: &Path, name: &str| {
            if dir.is_root() {
                format!("/{name}")
            } else {
                format!("{dir}/{name}")
            }
        };
        match self {
            Command::CreateDir { path, attrs } => Request::new(
                Verb::CreateDir,
                std::iter::once(path.to_string()).chain(attrs.iter().map(|a| a.to_string())),
            ),
            Command::RemoveDir { path } => Request::new(Verb::RemoveDir, [path.to_string()]),
            Command::AddAttr { dir, def } => Request::new(Verb::AddAttr, [dir.to_string(), def.to_string()]),
            Command::RemoveAttr { dir, name } => Request::new(Verb::RemoveAttr, [dir.to_string(), name.clone()]),
            Command::AddEntry { dir, name, values } => {
                Request::new(Verb::AddEntry, std::iter::once(entry(dir, name)).chain(values.iter().cloned()))
            }
            Command::SetAttr { dir, name, assignments } => Request::new(
                Verb::SetAttr,
                std::iter::once(entry(dir, name))
                    .chain(assignments.iter().flat_map(|(a, v)| [a.clone(), v.clone()])),
            ),
            Command::DelEntry { dir, name } => Request::new(Verb::DelEntry, [entry(dir, name)]),
        }
    }

    pub fn to_line(&self) -> String {
        self.to_request().to_line()
    }

    pub fn parse_line(line: &str) -> Result<Command> {
        Command::from_request(&crate::protocol::parse_request(line)?)
    }

    /// The directory whose contents the command changes. For directory
    /// creation and removal this is the directory itself.
    pub fn dir(&self) -> &Path {
        match self {
            Command::CreateDir { path, .. } | Command::RemoveDir { path } => path,
            Command::AddAttr { dir, .. }
            | Command::RemoveAttr { dir, .. }
            | Command::AddEntry { dir, .. }
            | Command::SetAttr { dir, .. }
            | Command::DelEntry { dir, .. } => dir,
        }
    }

    /// Full path the command addresses (entry path for entry commands).
    pub fn target(&self) -> Path {
        match self {
            Command::AddEntry { dir, name, .. }
            | Command::SetAttr { dir, name, .. }
            | Command::DelEntry { dir, name } => dir.child(name).unwrap_or_else(|_| dir.clone()),
            other => other.dir().clone(),
        }
    }

    pub fn is_schema_change(&self) -> bool {
        matches!(
            self,
            Command::CreateDir { .. } | Command::RemoveDir { .. } | Command::AddAttr { .. } | Command::RemoveAttr { .. }
        )
    }
}

/// The catalog path a client request addresses: the directory for
/// directory level verbs, the entry path for entry verbs. `None` for verbs
/// that do not address the catalog.
pub fn request_path(req: &Request) -> Result<Option<Path>> {
    match req.verb {
        Verb::CreateDir
        | Verb::RemoveDir
        | Verb::AddAttr
        | Verb::RemoveAttr
        | Verb::AddEntry
        | Verb::SetAttr
        | Verb::DelEntry
        | Verb::GetAttr
        | Verb::Find
        | Verb::Dump => Ok(Some(Path::parse(req.arg(0)?)?)),
        _ => Ok(None),
    }
}

/// Before/after images of one entry touched by a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryChange {
    pub name: String,
    pub before: Option<Vec<Value>>,
    pub after: Option<Vec<Value>>,
}

/// What a command did to its directory. Replication uses it to decide
/// which filtered subscribers are affected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub schema_before: Vec<AttributeDef>,
    pub schema_after: Vec<AttributeDef>,
    pub entries: Vec<EntryChange>,
}

pub fn create_directory(txn: &mut Txn<'_>, path: &Path, attrs: &[AttributeDef]) -> Result<Effect> {
    let Some(parent) = path.parent() else {
        return Err(Error::AlreadyExists);
    };
    let mut parent_row = dir_row(txn, &parent)?.ok_or(Error::ParentNotFound)?;
    let name = path.name().unwrap_or_default();
    if parent_row.children.contains(name) || entry_row(txn, &parent, name)?.is_some() {
        return Err(Error::AlreadyExists);
    }
    let mut seen = BTreeSet::new();
    if !attrs.iter().all(|a| seen.insert(a.name.as_str())) {
        return Err(Error::DuplicateAttribute);
    }
    parent_row.children.insert(name.to_string());
    txn.put(Table::Meta, dir_key(&parent), encode(&parent_row));
    let row = DirRow { attrs: attrs.to_vec(), children: BTreeSet::new() };
    txn.put(Table::Meta, dir_key(path), encode(&row));
    Ok(Effect { schema_before: Vec::new(), schema_after: attrs.to_vec(), entries: Vec::new() })
}

pub fn remove_directory(txn: &mut Txn<'_>, path: &Path) -> Result<Effect> {
    let Some(parent) = path.parent() else {
        return Err(Error::CannotRemoveRoot);
    };
    let row = require_dir(txn, path)?;
    if !row.children.is_empty() || has_entries(txn, path) {
        return Err(Error::NotEmpty);
    }
    let mut parent_row = require_dir(txn, &parent)?;
    parent_row.children.remove(path.name().unwrap_or_default());
    txn.put(Table::Meta, dir_key(&parent), encode(&parent_row));
    txn.delete(Table::Meta, dir_key(path));
    Ok(Effect { schema_before: row.attrs, schema_after: Vec::new(), entries: Vec::new() })
}

pub fn define_attribute(txn: &mut Txn<'_>, dir: &Path, def: &AttributeDef) -> Result<Effect> {
    let mut row = require_dir(txn, dir)?;
    if row.attr_index(&def.name).is_some() {
        return Err(Error::DuplicateAttribute);
    }
    let schema_before = row.attrs.clone();
    row.attrs.push(def.clone());
    let mut changes = Vec::new();
    for (name, values) in entries(txn, dir)? {
        let mut after = values.clone();
        after.push(Value::Null);
        txn.put(Table::Meta, entry_key(dir, &name), encode(&after));
        changes.push(EntryChange { name, before: Some(values), after: Some(after) });
    }
    txn.put(Table::Meta, dir_key(dir), encode(&row));
    Ok(Effect { schema_before, schema_after: row.attrs, entries: changes })
}

pub fn undefine_attribute(txn: &mut Txn<'_>, dir: &Path, name: &str) -> Result<Effect> {
    let mut row = require_dir(txn, dir)?;
    let idx = row.attr_index(name).ok_or(Error::NoSuchAttribute)?;
    let schema_before = row.attrs.clone();
    row.attrs.remove(idx);
    let mut changes = Vec::new();
    for (entry, values) in entries(txn, dir)? {
        let mut after = values.clone();
        after.remove(idx);
        txn.put(Table::Meta, entry_key(dir, &entry), encode(&after));
        changes.push(EntryChange { name: entry, before: Some(values), after: Some(after) });
    }
    txn.put(Table::Meta, dir_key(dir), encode(&row));
    Ok(Effect { schema_before, schema_after: row.attrs, entries: changes })
}

pub fn insert_entry(txn: &mut Txn<'_>, dir: &Path, name: &str, values: &[Value]) -> Result<Effect> {
    let row = require_dir(txn, dir)?;
    if !valid_name(name) {
        return Err(Error::BadName);
    }
    if row.children.contains(name) || entry_row(txn, dir, name)?.is_some() {
        return Err(Error::AlreadyExists);
    }
    if values.len() != row.attrs.len() {
        return Err(Error::ArityMismatch);
    }
    if !values.iter().zip(&row.attrs).all(|(v, a)| v.conforms(a.ty)) {
        return Err(Error::TypeMismatch);
    }
    txn.put(Table::Meta, entry_key(dir, name), encode(&values));
    Ok(Effect {
        schema_before: row.attrs.clone(),
        schema_after: row.attrs,
        entries: vec![EntryChange { name: name.to_string(), before: None, after: Some(values.to_vec()) }],
    })
}

pub fn update_entry(txn: &mut Txn<'_>, dir: &Path, name: &str, assignments: &[(String, Value)]) -> Result<Effect> {
    let row = require_dir(txn, dir)?;
    let before = entry_row(txn, dir, name)?.ok_or(Error::NotFound)?;
    let mut after = before.clone();
    for (attr, value) in assignments {
        let idx = row.attr_index(attr).ok_or(Error::NoSuchAttribute)?;
        if !value.conforms(row.attrs[idx].ty) {
            return Err(Error::TypeMismatch);
        }
        after[idx] = value.clone();
    }
    txn.put(Table::Meta, entry_key(dir, name), encode(&after));
    Ok(Effect {
        schema_before: row.attrs.clone(),
        schema_after: row.attrs,
        entries: vec![EntryChange { name: name.to_string(), before: Some(before), after: Some(after) }],
    })
}

pub fn delete_entry(txn: &mut Txn<'_>, dir: &Path, name: &str) -> Result<Effect> {
    let row = require_dir(txn, dir)?;
    let before = entry_row(txn, dir, name)?.ok_or(Error::NotFound)?;
    txn.delete(Table::Meta, entry_key(dir, name));
    Ok(Effect {
        schema_before: row.attrs.clone(),
        schema_after: row.attrs,
        entries: vec![EntryChange { name: name.to_string(), before: Some(before), after: None }],
    })
}

/// Executes one command inside `txn`.
pub fn apply(txn: &mut Txn<'_>, cmd: &Command) -> Result<Effect> {
    match cmd {
        Command::CreateDir { path, attrs } => create_directory(txn, path, attrs),
        Command::RemoveDir { path } => remove_directory(txn, path),
        Command::AddAttr { dir, def } => define_attribute(txn, dir, def),
        Command::RemoveAttr { dir, name } => undefine_attribute(txn, dir, name),
        Command::AddEntry { dir, name, values } => {
            let row = require_dir(txn, dir)?;
            if values.len() != row.attrs.len() {
                // Existence and name checks come first so the error order
                // matches insert_entry.
                if !valid_name(name) {
                    return Err(Error::BadName);
                }
                if row.children.contains(name.as_str()) || entry_row(txn, dir, name)?.is_some() {
                    return Err(Error::AlreadyExists);
                }
                return Err(Error::ArityMismatch);
            }
            let typed = values
                .iter()
                .zip(&row.attrs)
                .map(|(tok, def)| Value::parse_token(tok, def.ty))
                .collect::<Result<Vec<_>>>();
            match typed {
                Ok(typed) => insert_entry(txn, dir, name, &typed),
                Err(e) => {
                    if !valid_name(name) {
                        return Err(Error::BadName);
                    }
                    if row.children.contains(name.as_str()) || entry_row(txn, dir, name)?.is_some() {
                        return Err(Error::AlreadyExists);
                    }
                    Err(e)
                }
            }
        }
        Command::SetAttr { dir, name, assignments } => {
            let row = require_dir(txn, dir)?;
            if entry_row(txn, dir, name)?.is_none() {
                return Err(Error::NotFound);
            }
            let typed = assignments
                .iter()
                .map(|(attr, tok)| {
                    let idx = row.attr_index(attr).ok_or(Error::NoSuchAttribute)?;
                    Ok((attr.clone(), Value::parse_token(tok, row.attrs[idx].ty)?))
                })
                .collect::<Result<Vec<_>>>()?;
            update_entry(txn, dir, name, &typed)
        }
        Command::DelEntry { dir, name } => delete_entry(txn, dir, name),
    }
}

/// Full attribute vector of an entry, in schema order.
pub fn read_entry(view: &(impl ReadView + ?Sized), dir: &Path, name: &str) -> Result<Vec<(String, Value)>> {
    let row = require_dir(view, dir)?;
    let values = entry_row(view, dir, name)?.ok_or(Error::NotFound)?;
    Ok(row.attrs.into_iter().map(|a| a.name).zip(values).collect())
}

/// Names of entries in `dir` satisfying `cond`, in name order.
pub fn find_entries(view: &(impl ReadView + ?Sized), dir: &Path, cond: &Condition) -> Result<Vec<String>> {
    let row = require_dir(view, dir)?;
    cond.check(&row.attrs)?;
    Ok(entries(view, dir)?
        .into_iter()
        .filter(|(_, values)| cond.eval(&row.attrs, values))
        .map(|(name, _)| name)
        .collect())
}

/// The subtree rooted at `root` as replayable commands: each directory is
/// created with its schema before its entries, and parents come before
/// children. The root directory itself is implicit, so its schema is
/// emitted as `ADDATTR` commands instead.
pub fn dump_subtree(view: &(impl ReadView + ?Sized), root: &Path) -> Result<Vec<Command>> {
    dump_filtered(view, root, None)
}

/// Like [`dump_subtree`] but keeps only entries satisfying `cond`.
/// Directories and schemas are always included.
pub fn dump_filtered(view: &(impl ReadView + ?Sized), root: &Path, cond: Option<&Condition>) -> Result<Vec<Command>> {
    let row = require_dir(view, root)?;
    let mut out = Vec::new();
    dump_dir(view, root, row, cond, &mut out)?;
    Ok(out)
}

fn dump_dir(
    view: &(impl ReadView + ?Sized),
    path: &Path,
    row: DirRow,
    cond: Option<&Condition>,
    out: &mut Vec<Command>,
) -> Result<()> {
    if path.is_root() {
        out.extend(row.attrs.iter().map(|def| Command::AddAttr { dir: path.clone(), def: def.clone() }));
    } else {
        out.push(Command::CreateDir { path: path.clone(), attrs: row.attrs.clone() });
    }
    for (name, values) in entries(view, path)? {
        if cond.is_none_or(|c| c.eval(&row.attrs, &values)) {
            out.push(Command::AddEntry {
                dir: path.clone(),
                name,
                values: values.iter().map(Value::to_token).collect(),
            });
        }
    }
    for child in &row.children {
        let child_path = path.child(child)?;
        let child_row = require_dir(view, &child_path)?;
        dump_dir(view, &child_path, child_row, cond, out)?;
    }
    Ok(())
}

/// Deletes the subtree at `root` (the root directory itself included unless
/// it is `/`). Used when a replica re-bootstraps over stale local state.
pub fn purge_subtree(txn: &mut Txn<'_>, root: &Path) -> Result<()> {
    let Some(row) = dir_row(txn, root)? else { return Ok(()) };
    for child in &row.children {
        purge_subtree(txn, &root.child(child)?)?;
    }
    for (name, _) in entries(txn, root)? {
        txn.delete(Table::Meta, entry_key(root, &name));
    }
    if root.is_root() {
        txn.put(Table::Meta, dir_key(root), encode(&DirRow::default()));
    } else {
        if let Some(parent) = root.parent() {
            if let Some(mut parent_row) = dir_row(txn, &parent)? {
                parent_row.children.remove(root.name().unwrap_or_default());
                txn.put(Table::Meta, dir_key(&parent), encode(&parent_row));
            }
        }
        txn.delete(Table::Meta, dir_key(root));
    }
    Ok(())
}

/// Creates any missing ancestors of `path` as directories without
/// attributes.
pub fn ensure_ancestors(txn: &mut Txn<'_>, path: &Path) -> Result<()> {
    for ancestor in path.ancestors().skip(1) {
        if !dir_exists(txn, &ancestor)? {
            create_directory(txn, &ancestor, &[])?;
        }
    }
    Ok(())
}

/// Dump text, one command line per row. Two catalogs hold equal subtrees
/// exactly when these listings are equal.
pub fn dump_lines(view: &(impl ReadView + ?Sized), root: &Path, cond: Option<&Condition>) -> Result<Vec<String>> {
    Ok(dump_filtered(view, root, cond)?.iter().map(Command::to_line).collect())
}

/// Convenience wrapper running each operation in its own transaction, with
/// no replication logging. Useful for tests, tools and standalone use.
#[derive(Clone)]
pub struct Catalog {
    store: Store,
}

impl Catalog {
    pub fn new(store: Store) -> Catalog {
        Catalog { store }
    }

    pub fn in_memory() -> Catalog {
        Catalog::new(Store::memory())
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn execute(&self, cmd: &Command) -> Result<Effect> {
        self.store.with_transaction(|txn| apply(txn, cmd))
    }

    pub fn execute_line(&self, line: &str) -> Result<Effect> {
        self.execute(&Command::parse_line(line)?)
    }

    pub fn create_directory(&self, path: &str, attrs: &[AttributeDef]) -> Result<()> {
        let path = Path::parse(path)?;
        self.store.with_transaction(|txn| create_directory(txn, &path, attrs)).map(drop)
    }

    pub fn read_entry(&self, dir: &str, name: &str) -> Result<Vec<(String, Value)>> {
        read_entry(&self.store.open_snapshot_view(), &Path::parse(dir)?, name)
    }

    pub fn find_entries(&self, dir: &str, cond: &str) -> Result<Vec<String>> {
        let cond = Condition::parse(cond)?;
        find_entries(&self.store.open_snapshot_view(), &Path::parse(dir)?, &cond)
    }

    pub fn dump_subtree(&self, root: &str) -> Result<Vec<Command>> {
        dump_subtree(&self.store.open_snapshot_view(), &Path::parse(root)?)
    }

    pub fn dump_lines(&self, root: &str) -> Result<Vec<String>> {
        dump_lines(&self.store.open_snapshot_view(), &Path::parse(root)?, None)
    }

    pub fn directory(&self, path: &str) -> Result<DirRow> {
        require_dir(&self.store.open_snapshot_view(), &Path::parse(path)?)
    }

    pub fn entries(&self, dir: &str) -> Result<Vec<(String, Vec<Value>)>> {
        let view = self.store.open_snapshot_view();
        let dir = Path::parse(dir)?;
        require_dir(&view, &dir)?;
        entries(&view, &dir)
    }

    /// Replays commands in order, stopping at the first failure.
    pub fn replay<'c>(&self, cmds: impl IntoIterator<Item = &'c Command>) -> Result<()> {
        for cmd in cmds {
            self.execute(cmd)?;
        }
        Ok(())
    }

    /// Checks the schema alignment and namespace invariants over the whole
    /// catalog. Returns a description of the first violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        check_invariants(&self.store.open_snapshot_view())
    }
}

/// Verifies schema alignment (every entry has one value per attribute, each
/// conforming to its type) and namespace soundness (parents exist, child
/// names do not collide with entry names).
pub fn check_invariants(view: &(impl ReadView + ?Sized)) -> std::result::Result<(), String> {
    let dirs = view.scan_prefix(Table::Meta, "d:");
    let mut known = BTreeSet::new();
    known.insert(Path::root());
    for (key, _) in &dirs {
        known.insert(Path::parse(&key[2..]).map_err(|e| format!("bad dir key {key}: {e}"))?);
    }
    for path in &known {
        let row = dir_row(view, path).map_err(|e| e.to_string())?.ok_or("dir vanished")?;
        if let Some(parent) = path.parent() {
            let prow = dir_row(view, &parent).map_err(|e| e.to_string())?;
            match prow {
                Some(p) if p.children.contains(path.name().unwrap_or_default()) => {}
                _ => return Err(format!("{path} is not linked from its parent")),
            }
        }
        for child in &row.children {
            let cp = path.child(child).map_err(|e| e.to_string())?;
            if !known.contains(&cp) {
                return Err(format!("{path} lists missing child {child}"));
            }
        }
        for (name, values) in entries(view, path).map_err(|e| e.to_string())? {
            if values.len() != row.attrs.len() {
                return Err(format!("{path}/{name} has {} values for {} attributes", values.len(), row.attrs.len()));
            }
            if !values.iter().zip(&row.attrs).all(|(v, a)| v.conforms(a.ty)) {
                return Err(format!("{path}/{name} holds a value of the wrong type"));
            }
            if row.children.contains(&name) {
                return Err(format!("{path}/{name} is both an entry and a directory"));
            }
        }
    }
    Ok(())
}
