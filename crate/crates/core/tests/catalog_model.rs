//! Model-based tests: random command sequences run against the catalog and
//! against a small in-memory model written from the command semantics.

use std::collections::{BTreeMap, BTreeSet};

use metacat_core::catalog::Catalog;
use metacat_core::value::Value;
use proptest::prelude::*;

const DIRS: [&str; 6] = ["/", "/d0", "/d1", "/d0/d0", "/d0/d1", "/d1/d0"];
const NAMES: [&str; 4] = ["e0", "e1", "e2", "d0"];
const ATTRS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, Clone)]
enum Op {
    CreateDir(usize, Vec<usize>),
    RemoveDir(usize),
    AddAttr(usize, usize),
    RemoveAttr(usize, usize),
    AddEntry(usize, usize, Vec<Option<i64>>),
    SetAttr(usize, usize, Vec<(usize, Option<i64>)>),
    DelEntry(usize, usize),
}

fn token(v: &Option<i64>) -> String {
    v.map_or("NULL".to_string(), |n| n.to_string())
}

fn entry_path(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

impl Op {
    fn line(&self) -> String {
        match self {
            Op::CreateDir(d, attrs) => {
                let mut s = format!("CREATEDIR {}", DIRS[*d]);
                for a in attrs {
                    s.push_str(&format!(" {}:INT", ATTRS[*a]));
                }
                s
            }
            Op::RemoveDir(d) => format!("REMOVEDIR {}", DIRS[*d]),
            Op::AddAttr(d, a) => format!("ADDATTR {} {}:INT", DIRS[*d], ATTRS[*a]),
            Op::RemoveAttr(d, a) => format!("REMOVEATTR {} {}", DIRS[*d], ATTRS[*a]),
            Op::AddEntry(d, n, vals) => {
                let mut s = format!("ADDENTRY {}", entry_path(DIRS[*d], NAMES[*n]));
                for v in vals {
                    s.push(' ');
                    s.push_str(&token(v));
                }
                s
            }
            Op::SetAttr(d, n, sets) => {
                let mut s = format!("SETATTR {}", entry_path(DIRS[*d], NAMES[*n]));
                for (a, v) in sets {
                    s.push_str(&format!(" {} {}", ATTRS[*a], token(v)));
                }
                s
            }
            Op::DelEntry(d, n) => format!("DELENTRY {}", entry_path(DIRS[*d], NAMES[*n])),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Dir {
    attrs: Vec<&'static str>,
    children: BTreeSet<&'static str>,
    entries: BTreeMap<&'static str, Vec<Option<i64>>>,
}

#[derive(Debug, Clone)]
struct Model {
    dirs: BTreeMap<&'static str, Dir>,
}

fn split(path: &'static str) -> (&'static str, &'static str) {
    let i = path.rfind('/').expect("absolute");
    (if i == 0 { "/" } else { &path[..i] }, &path[i + 1..])
}

impl Model {
    fn new() -> Model {
        Model { dirs: BTreeMap::from([("/", Dir::default())]) }
    }

    fn apply(&mut self, op: &Op) -> Result<(), u16> {
        match op {
            Op::CreateDir(d, attrs) => {
                let path = DIRS[*d];
                let (parent, name) = split(path);
                let p = self.dirs.get(parent).ok_or(414u16)?;
                if p.children.contains(name) || p.entries.contains_key(name) {
                    return Err(405);
                }
                let attrs: Vec<&str> = attrs.iter().map(|&a| ATTRS[a]).collect();
                if attrs.iter().collect::<BTreeSet<_>>().len() != attrs.len() {
                    return Err(408);
                }
                self.dirs.get_mut(parent).expect("checked").children.insert(name);
                self.dirs.insert(path, Dir { attrs, ..Dir::default() });
            }
            Op::RemoveDir(d) => {
                let path = DIRS[*d];
                if path == "/" {
                    return Err(413);
                }
                let dir = self.dirs.get(path).ok_or(404u16)?;
                if !dir.children.is_empty() || !dir.entries.is_empty() {
                    return Err(406);
                }
                self.dirs.remove(path);
                let (parent, name) = split(path);
                self.dirs.get_mut(parent).expect("parent exists").children.remove(name);
            }
            Op::AddAttr(d, a) => {
                let dir = self.dirs.get_mut(DIRS[*d]).ok_or(404u16)?;
                if dir.attrs.contains(&ATTRS[*a]) {
                    return Err(408);
                }
                dir.attrs.push(ATTRS[*a]);
                dir.entries.values_mut().for_each(|v| v.push(None));
            }
            Op::RemoveAttr(d, a) => {
                let dir = self.dirs.get_mut(DIRS[*d]).ok_or(404u16)?;
                let idx = dir.attrs.iter().position(|x| *x == ATTRS[*a]).ok_or(409u16)?;
                dir.attrs.remove(idx);
                dir.entries.values_mut().for_each(|v| {
                    v.remove(idx);
                });
            }
            Op::AddEntry(d, n, vals) => {
                let dir = self.dirs.get_mut(DIRS[*d]).ok_or(404u16)?;
                let name = NAMES[*n];
                if dir.children.contains(name) || dir.entries.contains_key(name) {
                    return Err(405);
                }
                if vals.len() != dir.attrs.len() {
                    return Err(410);
                }
                dir.entries.insert(name, vals.clone());
            }
            Op::SetAttr(d, n, sets) => {
                let dir = self.dirs.get_mut(DIRS[*d]).ok_or(404u16)?;
                let attrs = dir.attrs.clone();
                let row = dir.entries.get_mut(NAMES[*n]).ok_or(404u16)?;
                let mut next = row.clone();
                for (a, v) in sets {
                    let idx = attrs.iter().position(|x| *x == ATTRS[*a]).ok_or(409u16)?;
                    next[idx] = *v;
                }
                *row = next;
            }
            Op::DelEntry(d, n) => {
                let dir = self.dirs.get_mut(DIRS[*d]).ok_or(404u16)?;
                dir.entries.remove(NAMES[*n]).ok_or(404u16)?;
            }
        }
        Ok(())
    }
}

fn arb_value() -> impl Strategy<Value = Option<i64>> {
    prop_oneof![1 => Just(None), 4 => (-3i64..6).prop_map(Some)]
}

fn arb_op() -> impl Strategy<Value = Op> {
    let d = 0..DIRS.len();
    let n = 0..NAMES.len();
    let a = 0..ATTRS.len();
    prop_oneof![
        3 => (1..DIRS.len(), proptest::collection::vec(a.clone(), 0..3)).prop_map(|(d, attrs)| Op::CreateDir(d, attrs)),
        1 => d.clone().prop_map(Op::RemoveDir),
        2 => (d.clone(), a.clone()).prop_map(|(d, a)| Op::AddAttr(d, a)),
        1 => (d.clone(), a.clone()).prop_map(|(d, a)| Op::RemoveAttr(d, a)),
        5 => (d.clone(), n.clone(), proptest::collection::vec(arb_value(), 0..4)).prop_map(|(d, n, v)| Op::AddEntry(d, n, v)),
        4 => (d.clone(), n.clone(), proptest::collection::vec((a, arb_value()), 1..3)).prop_map(|(d, n, s)| Op::SetAttr(d, n, s)),
        2 => (d, n).prop_map(|(d, n)| Op::DelEntry(d, n)),
    ]
}

/// Small condition trees with a direct evaluator.
#[derive(Debug, Clone)]
enum Cond {
    Gt(usize, i64),
    Le(usize, i64),
    Eq(usize, i64),
    Not(Box<Cond>),
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
}

impl Cond {
    fn text(&self) -> String {
        match self {
            Cond::Gt(a, k) => format!("{} > {k}", ATTRS[*a]),
            Cond::Le(a, k) => format!("{} <= {k}", ATTRS[*a]),
            Cond::Eq(a, k) => format!("{} = {k}", ATTRS[*a]),
            Cond::Not(c) => format!("NOT ({})", c.text()),
            Cond::And(x, y) => format!("({}) AND ({})", x.text(), y.text()),
            Cond::Or(x, y) => format!("({}) OR ({})", x.text(), y.text()),
        }
    }

    fn holds(&self, attrs: &[&str], row: &[Option<i64>]) -> bool {
        let get = |a: usize| attrs.iter().position(|x| *x == ATTRS[a]).and_then(|i| row[i]);
        match self {
            Cond::Gt(a, k) => get(*a).is_some_and(|v| v > *k),
            Cond::Le(a, k) => get(*a).is_some_and(|v| v <= *k),
            Cond::Eq(a, k) => get(*a).is_some_and(|v| v == *k),
            Cond::Not(c) => !c.holds(attrs, row),
            Cond::And(x, y) => x.holds(attrs, row) && y.holds(attrs, row),
            Cond::Or(x, y) => x.holds(attrs, row) || y.holds(attrs, row),
        }
    }

    fn attrs(&self, out: &mut BTreeSet<&'static str>) {
        match self {
            Cond::Gt(a, _) | Cond::Le(a, _) | Cond::Eq(a, _) => {
                out.insert(ATTRS[*a]);
            }
            Cond::Not(c) => c.attrs(out),
            Cond::And(x, y) | Cond::Or(x, y) => {
                x.attrs(out);
                y.attrs(out);
            }
        }
    }
}

fn arb_cond() -> impl Strategy<Value = Cond> {
    let leaf = (0..ATTRS.len(), -2i64..5).prop_flat_map(|(a, k)| {
        prop_oneof![Just(Cond::Gt(a, k)), Just(Cond::Le(a, k)), Just(Cond::Eq(a, k))]
    });
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|c| Cond::Not(Box::new(c))),
            (inner.clone(), inner.clone()).prop_map(|(x, y)| Cond::And(Box::new(x), Box::new(y))),
            (inner.clone(), inner).prop_map(|(x, y)| Cond::Or(Box::new(x), Box::new(y))),
        ]
    })
}

fn to_option(v: &Value) -> Option<i64> {
    match v {
        Value::Null => None,
        Value::Int(n) => Some(*n),
        other => panic!("unexpected value {other:?}"),
    }
}

fn assert_same_state(cat: &Catalog, model: &Model) -> Result<(), TestCaseError> {
    for path in DIRS {
        match (cat.directory(path), model.dirs.get(path)) {
            (Ok(row), Some(dir)) => {
                let attrs: Vec<&str> = row.attrs.iter().map(|a| a.name.as_str()).collect();
                prop_assert_eq!(&attrs, &dir.attrs, "schema of {}", path);
                let children: BTreeSet<&str> = row.children.iter().map(String::as_str).collect();
                prop_assert_eq!(&children, &dir.children, "children of {}", path);
                let got: BTreeMap<String, Vec<Option<i64>>> = cat
                    .entries(path)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?
                    .into_iter()
                    .map(|(n, vals)| (n, vals.iter().map(to_option).collect()))
                    .collect();
                let want: BTreeMap<String, Vec<Option<i64>>> =
                    dir.entries.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
                prop_assert_eq!(got, want, "entries of {}", path);
            }
            (Err(e), None) => prop_assert_eq!(e.code(), 404),
            (got, want) => prop_assert!(false, "{}: catalog {:?}, model {:?}", path, got.is_ok(), want.is_some()),
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn catalog_follows_the_model(ops in proptest::collection::vec(arb_op(), 1..60)) {
        let cat = Catalog::in_memory();
        let mut model = Model::new();
        for op in &ops {
            let line = op.line();
            let got = cat.execute_line(&line).map(drop).map_err(|e| e.code());
            let want = model.apply(op);
            prop_assert_eq!(got, want, "{}", line);
            prop_assert!(cat.check_invariants().is_ok(), "after {}: {:?}", line, cat.check_invariants());
        }
        assert_same_state(&cat, &model)?;
    }

    #[test]
    fn find_matches_brute_force(ops in proptest::collection::vec(arb_op(), 1..60), cond in arb_cond()) {
        let cat = Catalog::in_memory();
        let mut model = Model::new();
        for op in &ops {
            let _ = cat.execute_line(&op.line());
            let _ = model.apply(op);
        }
        let mut used = BTreeSet::new();
        cond.attrs(&mut used);
        for (path, dir) in &model.dirs {
            let got = cat.find_entries(path, &cond.text());
            if used.iter().all(|a| dir.attrs.contains(a)) {
                let want: Vec<String> = dir
                    .entries
                    .iter()
                    .filter(|(_, row)| cond.holds(&dir.attrs, row))
                    .map(|(n, _)| n.to_string())
                    .collect();
                prop_assert_eq!(got.map_err(|e| e.to_string()), Ok(want), "FIND {} {}", path, cond.text());
            } else {
                prop_assert_eq!(got.map_err(|e| e.code()), Err(412), "FIND {} {}", path, cond.text());
            }
        }
    }

    #[test]
    fn dump_replays_to_the_same_catalog(ops in proptest::collection::vec(arb_op(), 1..60), root in 0..DIRS.len()) {
        let cat = Catalog::in_memory();
        for op in &ops {
            let _ = cat.execute_line(&op.line());
        }
        let Ok(dump) = cat.dump_subtree(DIRS[root]) else {
            return Ok(());
        };
        let copy = Catalog::in_memory();
        for ancestor in ["/d0", "/d1"].iter().filter(|a| DIRS[root].starts_with(&format!("{}/", a))) {
            copy.execute_line(&format!("CREATEDIR {ancestor}")).expect("ancestor");
        }
        copy.replay(&dump).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(copy.dump_lines(DIRS[root]).ok(), cat.dump_lines(DIRS[root]).ok());
        prop_assert!(copy.check_invariants().is_ok());
    }
}
