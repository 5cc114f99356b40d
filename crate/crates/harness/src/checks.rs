//! End-to-end checks used by the acceptance suite.
//!
//! Each check returns `Ok(summary)` or `Err(reason)`. The oracles here are
//! deliberately naive: brute-force replays, full-table scans and
//! character-level decoders, kept independent of the code paths they judge.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use metacat_core::catalog::{self, Catalog};
use metacat_core::condition::Condition;
use metacat_core::federation::{validate_map, MastershipMap};
use metacat_core::node::{run_session, Node, NodeConfig};
use metacat_core::path::Path;
use metacat_core::protocol::{parse_request, parse_response, Request, Response, Verb};
use metacat_core::replication::log::{Filter, LogRecord};
use metacat_core::replication::master::{Master, MasterConfig, SubState};
use metacat_core::replication::slave::ReplicaConfig;
use metacat_core::storage::{FileOptions, ReadView, Store, Table};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{fit_linear, sweep, to_table};
use crate::scenario::run_scenario_text;
use crate::sim::{dump_or_empty, LinkSpec, Sim};

pub type CheckOutcome = Result<String, String>;

fn scenario_files(dir: &FsPath) -> Result<Vec<PathBuf>, String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    files.sort();
    Ok(files)
}

fn run_files(files: &[PathBuf], seeds: &[u64]) -> Result<usize, String> {
    let mut checks = 0;
    for file in files {
        let text = std::fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
        for &seed in seeds {
            let report = run_scenario_text(&text, seed).map_err(|e| format!("{}: {e}", file.display()))?;
            if let Some(f) = report.failures().first() {
                return Err(format!("{} seed {seed} line {}: {} ({})", file.display(), f.line, f.what, f.detail));
            }
            checks += report.checks.len();
        }
    }
    Ok(checks)
}

/// Every scenario converges under several seeds.
pub fn convergence_suite(dir: &FsPath, seeds: &[u64]) -> CheckOutcome {
    let files = scenario_files(dir)?;
    let converging: Vec<PathBuf> = files
        .iter()
        .filter(|f| std::fs::read_to_string(f).is_ok_and(|t| t.contains("CHECK CONVERGED")))
        .cloned()
        .collect();
    if converging.len() < 20 {
        return Err(format!("only {} scenarios check convergence", converging.len()));
    }
    let checks = run_files(&converging, seeds)?;
    Ok(format!("{} scenarios x {} seeds, {checks} assertions", converging.len(), seeds.len()))
}

// ---------------------------------------------------------------------------
// Crash injection

type Contents = Vec<(Table, String, String)>;

fn crash_workload() -> Vec<String> {
    let mut w = vec![
        "CREATEDIR /exp run:INT tag:STRING".to_string(),
        "CREATEDIR /exp/raw size:INT".to_string(),
        "ADDATTR / site:STRING".to_string(),
    ];
    w.extend((0..20).map(|i| format!("ADDENTRY /exp/e{i} {i} \"tag {i}\"")));
    w.extend((0..10).map(|i| format!("ADDENTRY /exp/raw/r{i} {}", i * 100)));
    w.extend((0..20).step_by(3).map(|i| format!("SETATTR /exp/e{i} run {} tag NULL", i + 1000)));
    w.push("ADDATTR /exp note:STRING".to_string());
    w.extend((0..10).map(|i| format!("DELENTRY /exp/raw/r{i}")));
    w.push("REMOVEDIR /exp/raw".to_string());
    w.push("REMOVEATTR /exp tag".to_string());
    w
}

fn file_opts(crash: Option<u64>) -> FileOptions {
    FileOptions { sync: false, checkpoint_every: 6, crash_after_bytes: crash }
}

fn contents(store: &Store) -> Contents {
    let view = store.open_snapshot_view();
    Table::ALL
        .iter()
        .flat_map(|&t| view.scan_prefix(t, "").into_iter().map(move |(k, v)| (t, k, v.to_string())))
        .collect()
}

/// Subscribes a catch-all subscriber and runs the workload until the first
/// failure. Returns the number of acknowledged commits, the state after
/// each, and the bytes written.
fn crash_run(dir: &FsPath, crash: Option<u64>) -> Result<(usize, Vec<Contents>, u64), String> {
    let store = Store::open_file(dir, file_opts(crash)).map_err(|e| e.to_string())?;
    let mut states = vec![contents(&store)];
    let Ok(mut node) = Node::open(store.clone(), &NodeConfig::new("N"), 0) else {
        return Ok((0, states, store.bytes_written()));
    };
    if node.master_mut().subscribe("all", &Filter::subtree(Path::root()), 0).is_err() {
        return Ok((0, states, store.bytes_written()));
    }
    states.push(contents(&store));
    let mut done = 1;
    for (i, line) in crash_workload().iter().enumerate() {
        let req = parse_request(line).map_err(|e| e.to_string())?;
        if node.execute(&req, 10 + i as u64).is_err() {
            break;
        }
        states.push(contents(&store));
        done += 1;
    }
    Ok((done, states, store.bytes_written()))
}

/// Replays the logged commands on an empty catalog and compares the result
/// with the recovered catalog rows.
fn log_matches_effects(store: &Store) -> Result<(), String> {
    let view = store.open_snapshot_view();
    let mut logs = Vec::new();
    for (_, raw) in view.scan_prefix(Table::Log, "") {
        logs.push(LogRecord::decode(&raw).map_err(|e| e.to_string())?);
    }
    for (i, r) in logs.iter().enumerate() {
        if r.seq != i as u64 + 1 {
            return Err(format!("log has a hole before {}", r.seq));
        }
    }
    if view.log_watermark() != logs.len() as u64 {
        return Err(format!("watermark {} with {} records", view.log_watermark(), logs.len()));
    }
    let fresh = Catalog::new(Store::memory());
    for r in &logs {
        let cmd = r.parsed_command().map_err(|e| e.to_string())?;
        fresh.execute(&cmd).map_err(|e| format!("replaying {}: {e}", r.command))?;
    }
    let replayed = catalog::dump_lines(&fresh.store().open_snapshot_view(), &Path::root(), None).map_err(|e| e.to_string())?;
    let recovered = catalog::dump_lines(&view, &Path::root(), None).map_err(|e| e.to_string())?;
    if replayed != recovered {
        return Err("catalog rows and log records disagree".to_string());
    }
    catalog::check_invariants(&view)
}

/// Crashes the file store at `points` byte offsets spread over a full run.
pub fn crash_injection(points: u64) -> CheckOutcome {
    let clean = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (steps, reference, total) = crash_run(clean.path(), None)?;
    if steps != crash_workload().len() + 1 {
        return Err(format!("clean run stopped after {steps} steps"));
    }
    let store = Store::open_file(clean.path(), file_opts(None)).map_err(|e| e.to_string())?;
    log_matches_effects(&store)?;
    let mut interrupted = 0;
    for j in 0..points {
        let budget = j * (total + 1) / points;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (done, _, _) = crash_run(dir.path(), Some(budget))?;
        let recovered = Store::open_file(dir.path(), file_opts(None)).map_err(|e| format!("budget {budget}: {e}"))?;
        if contents(&recovered) != reference[done] {
            return Err(format!("budget {budget}: recovered state is not the state after {done} commits"));
        }
        log_matches_effects(&recovered).map_err(|e| format!("budget {budget}: {e}"))?;
        if done < steps {
            interrupted += 1;
        }
    }
    if interrupted * 2 < points {
        return Err(format!("only {interrupted} of {points} crash points interrupted the workload"));
    }
    Ok(format!("{points} crash points over {total} bytes, {interrupted} mid-workload, 0 inconsistent states"))
}

// ---------------------------------------------------------------------------
// Benchmark

pub fn benchmark_linearity(entries: u64, rate: f64, max_slaves: usize) -> CheckOutcome {
    let reports = sweep(0..=max_slaves, entries, rate, 1);
    let table = to_table(&reports);
    for r in &reports {
        if r.logged != entries {
            return Err(format!("N={}: logged {} of {entries}\n{table}", r.slave_count, r.logged));
        }
        if r.shipped != entries * r.slave_count as u64 {
            return Err(format!("N={}: shipped {}\n{table}", r.slave_count, r.shipped));
        }
        if r.lag_ms.contains(&u64::MAX) {
            return Err(format!("N={}: a slave never caught up\n{table}", r.slave_count));
        }
    }
    if reports[0].offline_pending != Some(entries) {
        return Err(format!("offline subscriber has {:?} pending, expected {entries}", reports[0].offline_pending));
    }
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.slave_count as f64, r.work_units() as f64)).collect();
    let (a, b, worst) = fit_linear(&points);
    if b <= 0.0 || worst >= 0.1 * b {
        return Err(format!("work = {a:.1} + {b:.1} N, worst residual {worst:.1}\n{table}"));
    }
    let last = reports.last().expect("at least one point");
    if !last.sustained() {
        return Err(format!("master could not sustain {rate}/s with {max_slaves} slaves\n{table}"));
    }
    Ok(format!("work = {a:.0} + {b:.0} N, worst residual {worst:.2}\n{table}"))
}

// ---------------------------------------------------------------------------
// Random catalog traffic shared by the filter and GC checks

const BASE_DIRS: [&str; 3] = ["/a", "/a/b", "/c"];
const ROOTS: [&str; 4] = ["/", "/a", "/a/b", "/c"];

fn base_node() -> Node {
    let mut node = Node::open(Store::memory(), &NodeConfig::new("M"), 0).expect("node opens");
    for dir in BASE_DIRS {
        let req = Request::new(Verb::CreateDir, [dir, "n:INT", "s:STRING"]);
        node.execute(&req, 0).expect("base directory");
    }
    for (i, dir) in BASE_DIRS.iter().enumerate() {
        let req = Request::new(Verb::AddEntry, [format!("{dir}/base{i}"), i.to_string(), "v0".to_string()]);
        node.execute(&req, 0).expect("base entry");
    }
    node
}

fn random_condition(rng: &mut ChaCha8Rng) -> String {
    let k = rng.gen_range(0..10);
    let choices = [
        String::new(),
        format!("n > {k}"),
        format!("n <= {k} AND s LIKE 'v%'"),
        format!("NOT s = 'v{k}'"),
        format!("x >= {k} OR n = {k}"),
        format!("s LIKE '%{k}'"),
        format!("(n < {k} OR x = 1) AND NOT n = 2"),
    ];
    choices.choose(rng).expect("non-empty").clone()
}

fn random_value(rng: &mut ChaCha8Rng, ty: &str) -> String {
    if rng.gen_ratio(1, 10) {
        return "NULL".to_string();
    }
    match ty {
        "STRING" => format!("v{}", rng.gen_range(0..10)),
        _ => rng.gen_range(0..10).to_string(),
    }
}

/// A random, usually valid, catalog command.
fn random_command(rng: &mut ChaCha8Rng, node: &Node) -> Request {
    let view = node.store().open_snapshot_view();
    let mut dirs: Vec<String> = BASE_DIRS.iter().map(|s| s.to_string()).collect();
    let extra: Vec<String> = (0..3).map(|k| format!("/a/b/d{k}")).collect();
    for d in &extra {
        if catalog::dir_exists(&view, &Path::parse(d).expect("valid")).unwrap_or(false) {
            dirs.push(d.clone());
        }
    }
    let dir = dirs.choose(rng).expect("non-empty").clone();
    let schema = catalog::dir_row(&view, &Path::parse(&dir).expect("valid")).ok().flatten().map(|r| r.attrs).unwrap_or_default();
    let name = format!("{dir}/e{}", rng.gen_range(0..12));
    match rng.gen_range(0..100) {
        0..=34 => {
            let mut args = vec![name];
            args.extend(schema.iter().map(|a| random_value(rng, &a.ty.to_string())));
            Request::new(Verb::AddEntry, args)
        }
        35..=64 => {
            let mut args = vec![name];
            for a in &schema {
                if !rng.gen_bool(0.6) {
                    continue;
                }
                args.push(a.name.clone());
                args.push(random_value(rng, &a.ty.to_string()));
            }
            if args.len() == 1 {
                args.push("n".into());
                args.push(random_value(rng, "INT"));
            }
            Request::new(Verb::SetAttr, args)
        }
        65..=79 => Request::new(Verb::DelEntry, [name]),
        80..=85 => Request::new(Verb::AddAttr, [dir, "x:INT".to_string()]),
        86..=89 => Request::new(Verb::RemoveAttr, [dir, "x".to_string()]),
        90..=94 => Request::new(Verb::CreateDir, [extra.choose(rng).expect("non-empty").clone(), "n:INT".to_string()]),
        _ => Request::new(Verb::RemoveDir, [extra.choose(rng).expect("non-empty").clone()]),
    }
}

/// Directory a request changes: the directory itself for schema verbs, the
/// containing directory for entry verbs.
fn touched_dir(req: &Request) -> Path {
    let p = Path::parse(&req.args[0]).expect("generated paths are valid");
    match req.verb {
        Verb::CreateDir | Verb::RemoveDir | Verb::AddAttr | Verb::RemoveAttr => p,
        _ => p.parent().unwrap_or_else(Path::root),
    }
}

fn entry_selected(view: &(impl ReadView + ?Sized), req: &Request, cond: &Condition) -> bool {
    let Ok((dir, name)) = Path::parse(&req.args[0]).and_then(|p| p.split_entry()) else { return false };
    let Ok(Some(row)) = catalog::dir_row(view, &dir) else { return false };
    let Ok(values) = catalog::read_entry(view, &dir, &name) else { return false };
    let values: Vec<_> = values.into_iter().map(|(_, v)| v).collect();
    cond.eval(&row.attrs, &values)
}

// ---------------------------------------------------------------------------
// Filter equivalence

fn ship_all(master: &mut Master, sub: &str, now: u64) -> Result<Vec<(u64, Path, metacat_core::catalog::Command)>, String> {
    let mut out = Vec::new();
    loop {
        let wm = master.store().log_watermark();
        let batch = master.ship_pending(sub, 64, now).map_err(|e| e.to_string())?;
        let done = batch.upto >= wm;
        out.extend(batch.records);
        if done {
            return Ok(out);
        }
    }
}

fn seqs<T>(records: &[(u64, T, metacat_core::catalog::Command)]) -> Vec<u64> {
    let set: BTreeSet<u64> = records.iter().map(|r| r.0).collect();
    set.into_iter().collect()
}

/// One fuzzed (log, filter) pair. Returns the number of shipped records.
fn filter_case(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut node = base_node();
    let root = ROOTS.choose(rng).expect("non-empty").to_string();
    let cond_text = random_condition(rng);
    let filter = Filter::parse(&root, Some(&cond_text)).map_err(|e| e.to_string())?;
    let root_path = filter.root.clone();
    let m = node.master_mut();
    m.subscribe("all", &Filter::subtree(Path::root()), 0).map_err(|e| e.to_string())?;
    m.subscribe("f", &filter, 0).map_err(|e| e.to_string())?;
    m.subscribe("t", &Filter::subtree(root_path.clone()), 0).map_err(|e| e.to_string())?;
    m.subscribe("u", &Filter::parse(&root, Some("")).map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
    let snapshot = m.serve_snapshot("f", 0).map_err(|e| e.to_string())?;

    // Brute force: replay every command on a private catalog and decide
    // relevance from the states before and after it.
    let oracle = Catalog::new(Store::memory());
    oracle.replay(&catalog::dump_subtree(&node.store().open_snapshot_view(), &Path::root()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let cond = Condition::parse(&cond_text).map_err(|e| e.to_string())?;
    let mut expected = Vec::new();
    let mut expected_all = Vec::new();
    for i in 0..rng.gen_range(30..90) {
        let req = random_command(rng, &node);
        let before = oracle.store().open_snapshot_view();
        let logged_before = node.store().log_watermark();
        let result = node.execute(&req, 1 + i);
        let mirrored = metacat_core::catalog::Command::from_request(&req).and_then(|c| oracle.execute(&c));
        if result.is_ok() != mirrored.is_ok() {
            return Err(format!("{} succeeded on one catalog only", req.to_line()));
        }
        if result.is_err() {
            continue;
        }
        let seq = logged_before + 1;
        let after = oracle.store().open_snapshot_view();
        if !touched_dir(&req).starts_with(&root_path) {
            continue;
        }
        expected_all.push(seq);
        let schema = matches!(req.verb, Verb::CreateDir | Verb::RemoveDir | Verb::AddAttr | Verb::RemoveAttr);
        if cond.is_true() || schema || entry_selected(&before, &req, &cond) || entry_selected(&after, &req, &cond) {
            expected.push(seq);
        }
    }

    let m = node.master_mut();
    let shipped = ship_all(m, "f", 100)?;
    if seqs(&shipped) != expected {
        return Err(format!("root {root} cond {cond_text:?}: shipped {:?}, brute force {expected:?}", seqs(&shipped)));
    }
    let plain = ship_all(m, "t", 100)?;
    let empty_cond = ship_all(m, "u", 100)?;
    if seqs(&plain) != expected_all || plain != empty_cond {
        return Err(format!("root {root}: subtree filter and condition-free filter disagree"));
    }

    // The shipped commands, applied to the snapshot, rebuild the filtered
    // view of the master.
    let replica = Catalog::new(Store::memory());
    for ancestor in root_path.ancestors().skip(1) {
        replica.execute_line(&format!("CREATEDIR {ancestor}")).map_err(|e| e.to_string())?;
    }
    replica.replay(&snapshot.commands).map_err(|e| format!("snapshot: {e}"))?;
    for (seq, _, cmd) in &shipped {
        replica.execute(cmd).map_err(|e| format!("applying record {seq} {}: {e}", cmd.to_line()))?;
    }
    let want = catalog::dump_lines(&node.store().open_snapshot_view(), &root_path, filter.cond.as_ref()).map_err(|e| e.to_string())?;
    let got = catalog::dump_lines(&replica.store().open_snapshot_view(), &root_path, None).map_err(|e| e.to_string())?;
    if want != got {
        return Err(format!("root {root} cond {cond_text:?}: replica state {}", crate::sim::diff(&want, &got)));
    }
    Ok(expected.len())
}

pub fn filter_equivalence(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shipped = 0;
    for case in 0..cases {
        shipped += filter_case(&mut rng).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("{cases} (log, filter) pairs, {shipped} records shipped"))
}

// ---------------------------------------------------------------------------
// GC schedules

struct Tracked {
    id: String,
    filter: Filter,
    shipped_upto: u64,
}

fn gc_run(rng: &mut ChaCha8Rng) -> Result<(usize, usize), String> {
    let mut node = base_node();
    let config = MasterConfig { expiry_ms: u64::MAX / 4, pending_limit: u64::MAX, ..MasterConfig::default() };
    let mut master = Master::open(node.store().clone(), config, 0).map_err(|e| e.to_string())?;
    let mut subs = Vec::new();
    for i in 0..rng.gen_range(2..5) {
        let root = ROOTS.choose(rng).expect("non-empty");
        let filter = Filter::parse(root, Some(&random_condition(rng))).map_err(|e| e.to_string())?;
        let id = format!("s{i}");
        master.subscribe(&id, &filter, 0).map_err(|e| e.to_string())?;
        subs.push(Tracked { id, filter, shipped_upto: 0 });
    }
    let mut model: BTreeMap<u64, LogRecord> = BTreeMap::new();
    let mut gcs = 0;
    let mut now = 1;
    for _ in 0..250 {
        now += 10;
        match rng.gen_range(0..100) {
            0..=44 => {
                let req = random_command(rng, &node);
                // The node's own master is unused; records land in the
                // shared store and `master` serves them.
                let _ = node.execute(&req, now);
            }
            45..=64 => {
                let s = subs.choose_mut(rng).expect("non-empty");
                let n = rng.gen_range(1..20);
                if let Ok(b) = master.ship_pending(&s.id, n, now) {
                    s.shipped_upto = s.shipped_upto.max(b.upto);
                }
            }
            65..=79 => {
                let s = subs.choose(rng).expect("non-empty");
                let acked = master.subscription(&s.id).map_err(|e| e.to_string())?.map_or(0, |x| x.last_acked);
                if s.shipped_upto >= acked {
                    let to = rng.gen_range(acked..=s.shipped_upto);
                    let _ = master.acknowledge(&s.id, to, now);
                }
            }
            80..=87 => {
                let s = subs.choose(rng).expect("non-empty");
                master.disconnect(&s.id, now).map_err(|e| e.to_string())?;
            }
            88..=93 => {
                let s = subs.choose_mut(rng).expect("non-empty");
                let acked = master.subscription(&s.id).map_err(|e| e.to_string())?.map_or(0, |x| x.last_acked);
                if master.resume(&s.id, acked + 1, now).is_ok() {
                    s.shipped_upto = acked;
                }
            }
            _ => {
                let view = node.store().open_snapshot_view();
                for (_, raw) in view.scan_prefix(Table::Log, "") {
                    let r = LogRecord::decode(&raw).map_err(|e| e.to_string())?;
                    model.entry(r.seq).or_insert(r);
                }
                drop(view);
                master.garbage_collect_logs().map_err(|e| e.to_string())?;
                gcs += 1;
                let view = node.store().open_snapshot_view();
                for s in &subs {
                    let sub = master.subscription(&s.id).map_err(|e| e.to_string())?.ok_or("subscription vanished")?;
                    if !matches!(sub.state, SubState::Connected | SubState::Offline) {
                        continue;
                    }
                    for (seq, r) in model.range(sub.last_acked + 1..) {
                        let needed = s.filter.matches(r).map_err(|e| e.to_string())?;
                        if needed && view.get(Table::Log, &metacat_core::storage::log_key(*seq)).is_none() {
                            return Err(format!("record {seq} deleted while {} still needed it", s.id));
                        }
                    }
                }
            }
        }
    }

    // Liveness: reconnect, drain and acknowledge everyone; one collection
    // cycle empties the log.
    now += 10;
    for s in &subs {
        let acked = master.subscription(&s.id).map_err(|e| e.to_string())?.map_or(0, |x| x.last_acked);
        master.resume(&s.id, acked + 1, now).map_err(|e| format!("resume {}: {e}", s.id))?;
        ship_all(&mut master, &s.id, now)?;
        let wm = node.store().log_watermark();
        master.acknowledge(&s.id, wm, now).map_err(|e| e.to_string())?;
    }
    master.tick(now + master.config().gc_interval_ms).map_err(|e| e.to_string())?;
    let left = node.store().open_snapshot_view().scan_prefix(Table::Log, "").len();
    if left != 0 {
        return Err(format!("{left} records left after everyone acknowledged"));
    }
    Ok((gcs, model.len()))
}

pub fn gc_schedules(runs: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gcs, mut records) = (0, 0);
    for run in 0..runs {
        let (g, r) = gc_run(&mut rng).map_err(|e| format!("run {run}: {e}"))?;
        gcs += g;
        records += r;
    }
    Ok(format!("{runs} schedules, {gcs} collections over {records} records"))
}

// ---------------------------------------------------------------------------
// Subscription lifecycle

pub fn subscription_lifecycle(scenario_dir: &FsPath) -> CheckOutcome {
    // Persistence across a restart of the file-backed master.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = FileOptions { sync: false, ..FileOptions::default() };
    {
        let store = Store::open_file(dir.path(), opts.clone()).map_err(|e| e.to_string())?;
        let mut node = Node::open(store, &NodeConfig::new("M"), 0).map_err(|e| e.to_string())?;
        node.execute(&parse_request("CREATEDIR /exp n:INT").map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
        let m = node.master_mut();
        m.subscribe("keep", &Filter::subtree(Path::parse("/exp").expect("valid")), 0).map_err(|e| e.to_string())?;
        for i in 0..5 {
            node.execute(&Request::new(Verb::AddEntry, [format!("/exp/e{i}"), i.to_string()]), 1).map_err(|e| e.to_string())?;
        }
        node.master_mut().serve_snapshot("keep", 2).map_err(|e| e.to_string())?;
        node.execute(&Request::new(Verb::AddEntry, ["/exp/late", "9"]), 3).map_err(|e| e.to_string())?;
        node.master_mut().acknowledge("keep", 6, 4).map_err(|e| e.to_string())?;
    }
    let store = Store::open_file(dir.path(), opts).map_err(|e| e.to_string())?;
    let master = Master::open(store, MasterConfig::default(), 100).map_err(|e| e.to_string())?;
    let sub = master.subscription("keep").map_err(|e| e.to_string())?.ok_or("subscription lost in restart")?;
    if sub.last_acked != 6 || sub.state != SubState::Offline || sub.offline_since != Some(100) {
        return Err(format!("after restart: {sub:?}"));
    }

    // Expiry on the timeout, exactly at the boundary.
    let config = MasterConfig { expiry_ms: 1_000, ..MasterConfig::default() };
    let mut node = base_node();
    let mut m = Master::open(node.store().clone(), config, 0).map_err(|e| e.to_string())?;
    m.subscribe("t", &Filter::subtree(Path::parse("/a").expect("valid")), 0).map_err(|e| e.to_string())?;
    m.disconnect("t", 50).map_err(|e| e.to_string())?;
    m.tick(1_050).map_err(|e| e.to_string())?;
    let state = |m: &Master, id: &str| m.subscription(id).ok().flatten().map(|s| s.state);
    if state(&m, "t") != Some(SubState::Offline) {
        return Err("expired before the timeout".into());
    }
    m.tick(1_051).map_err(|e| e.to_string())?;
    if state(&m, "t") != Some(SubState::Expired) {
        return Err("did not expire after the timeout".into());
    }

    // Expiry on backlog: K pending is fine, K + 1 is not.
    let config = MasterConfig { pending_limit: 3, ..MasterConfig::default() };
    let mut m = Master::open(node.store().clone(), config, 0).map_err(|e| e.to_string())?;
    m.subscribe("p", &Filter::subtree(Path::parse("/c").expect("valid")), 0).map_err(|e| e.to_string())?;
    m.disconnect("p", 0).map_err(|e| e.to_string())?;
    for i in 0..4 {
        node.execute(&Request::new(Verb::AddEntry, [format!("/c/k{i}"), i.to_string(), "v".to_string()]), 1)
            .map_err(|e| e.to_string())?;
        node.execute(&Request::new(Verb::AddEntry, [format!("/a/k{i}"), i.to_string(), "v".to_string()]), 1)
            .map_err(|e| e.to_string())?;
        m.tick(10).map_err(|e| e.to_string())?;
        let want = if i < 3 { SubState::Offline } else { SubState::Expired };
        if state(&m, "p") != Some(want) {
            return Err(format!("with {} pending: {:?}", i + 1, state(&m, "p")));
        }
    }

    // Restarts and re-bootstrap through the simulator.
    let files: Vec<PathBuf> = ["master_crash_restart.scn", "expiry_timeout.scn", "expiry_pending.scn"]
        .iter()
        .map(|f| scenario_dir.join(f))
        .collect();
    let checks = run_files(&files, &[1, 7])?;
    Ok(format!("restart keeps subscriptions, expiry by time and backlog, {checks} scenario assertions"))
}

// ---------------------------------------------------------------------------
// Read availability

type RowCheck<'a> = Box<dyn Fn(&[String]) -> bool + 'a>;

pub fn read_availability(reads: usize, writes: usize, seed: u64) -> CheckOutcome {
    let mut sim = Sim::new(seed);
    sim.tracing = false;
    sim.add_node(NodeConfig::new("M"));
    let mut s = NodeConfig::new("S");
    s.replicas.push(ReplicaConfig::new("s", Path::parse("/exp").expect("valid"), "M", "M"));
    sim.add_node(s);
    sim.set_link("M", "S", LinkSpec { latency_ms: 5, drop: 0.0 });
    sim.start_all().map_err(|e| e.to_string())?;
    let run = |sim: &mut Sim, node: &str, line: &str| sim.client(node, &parse_request(line).expect("valid request"));
    run(&mut sim, "M", "CREATEDIR /exp run:INT");
    run(&mut sim, "M", "CREATEDIR /exp/sub");
    for k in 0..100 {
        run(&mut sim, "M", &format!("ADDENTRY /exp/e{k} {k}"));
    }
    if !sim.drain(120_000) {
        return Err("replica never caught up".into());
    }
    sim.partition("M", "S");
    sim.advance(10_000);
    let master_dump = dump_or_empty(sim.store("M").expect("exists"), &Path::parse("/exp").expect("valid"), None);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok_reads = 0;
    for _ in 0..reads {
        let k = rng.gen_range(0..100);
        let (line, check): (String, RowCheck) = match rng.gen_range(0..3) {
            0 => (format!("GETATTR /exp/e{k}"), Box::new(move |rows: &[String]| rows == [format!("run {k}")])),
            1 => (format!("FIND /exp \"run < {k}\""), Box::new(move |rows: &[String]| rows.len() == k)),
            _ => ("DUMP /exp".to_string(), Box::new(|rows: &[String]| rows == master_dump.as_slice())),
        };
        match run(&mut sim, "S", &line) {
            Response::Ok(rows) if check(&rows) => ok_reads += 1,
            other => return Err(format!("read {line} failed: {other:?}")),
        }
    }
    let mut redirected = 0;
    for i in 0..writes {
        let k = rng.gen_range(0..100);
        let line = match rng.gen_range(0..7) {
            0 => format!("ADDENTRY /exp/new{i} 1"),
            1 => format!("SETATTR /exp/e{k} run 0"),
            2 => format!("DELENTRY /exp/e{k}"),
            3 => format!("CREATEDIR /exp/d{i}"),
            4 => format!("ADDATTR /exp z{i}:INT"),
            5 => "REMOVEATTR /exp run".to_string(),
            _ => "REMOVEDIR /exp/sub".to_string(),
        };
        match run(&mut sim, "S", &line) {
            Response::Err { code: 403, message } if message.split(' ').any(|w| w == "M") => redirected += 1,
            other => return Err(format!("write {line} was not redirected: {other:?}")),
        }
    }
    sim.heal_all();
    if !sim.drain(300_000) || !sim.divergences(None).is_empty() {
        return Err("replica did not converge after healing".into());
    }
    Ok(format!("{ok_reads}/{reads} reads served, {redirected}/{writes} writes redirected to M"))
}

// ---------------------------------------------------------------------------
// Federation

fn federated_pair(mode: &str, seed: u64) -> Result<Sim, String> {
    let text = format!("/a A A {mode}\n/b B B {mode}\n");
    let mut sim = Sim::new(seed);
    sim.tracing = false;
    for id in ["A", "B"] {
        let mut cfg = NodeConfig::new(id);
        cfg.map = MastershipMap::parse(id, &text).map_err(|e| e.to_string())?;
        sim.add_node(cfg);
    }
    sim.set_link("A", "B", LinkSpec { latency_ms: 20, drop: 0.0 });
    sim.start_all().map_err(|e| e.to_string())?;
    Ok(sim)
}

pub fn federation(scenario_dir: &FsPath, seed: u64) -> CheckOutcome {
    let mut compared = 0;
    for mode in ["PHYSICAL", "VIRTUAL"] {
        let mut sim = federated_pair(mode, seed)?;
        let run = |sim: &mut Sim, node: &str, line: &str| sim.client(node, &parse_request(line).expect("valid request"));
        // Each node writes into both subtrees; PHYSICAL writes to the other
        // subtree are redirected, so send them to the owner instead.
        for (node, other) in [("A", "B"), ("B", "A")] {
            let own = node.to_ascii_lowercase();
            let theirs = other.to_ascii_lowercase();
            let at = if mode == "VIRTUAL" { other } else { node };
            if !run(&mut sim, node, &format!("CREATEDIR /{own} n:INT")).is_ok() {
                return Err(format!("{mode}: {node} could not create /{own}"));
            }
            let _ = (at, theirs);
        }
        for i in 0..40 {
            let (writer, dir) = if i % 2 == 0 { ("A", "a") } else { ("B", "b") };
            let writer = if mode == "VIRTUAL" && i % 4 < 2 { if writer == "A" { "B" } else { "A" } } else { writer };
            let r = run(&mut sim, writer, &format!("ADDENTRY /{dir}/e{i} {i}"));
            if !r.is_ok() {
                return Err(format!("{mode}: write at {writer} to /{dir} failed: {r:?}"));
            }
        }
        if mode == "PHYSICAL" {
            let r = run(&mut sim, "A", "ADDENTRY /b/x 1");
            if !matches!(r, Response::Err { code: 403, .. }) {
                return Err(format!("PHYSICAL write at a non-owner was not redirected: {r:?}"));
            }
        }
        if !sim.drain(300_000) {
            return Err(format!("{mode}: did not quiesce"));
        }
        for line in ["DUMP /a", "DUMP /b", "FIND /a \"n > 10\"", "FIND /b", "GETATTR /a/e4", "GETATTR /b/e7", "GETATTR /b/none"] {
            let ra = run(&mut sim, "A", line);
            let rb = run(&mut sim, "B", line);
            if ra != rb {
                return Err(format!("{mode}: {line} differs: {ra:?} vs {rb:?}"));
            }
            compared += 1;
        }
        if mode == "PHYSICAL" {
            // Each node's local store holds the whole federated catalog.
            let a = dump_or_empty(sim.store("A").expect("exists"), &Path::root(), None);
            let b = dump_or_empty(sim.store("B").expect("exists"), &Path::root(), None);
            if a != b || a.len() != 42 {
                return Err(format!("PHYSICAL: local views differ or are incomplete ({} vs {} lines)", a.len(), b.len()));
            }
        }
    }
    for text in ["/a A a:1 PHYSICAL\n/a/b B b:1 PHYSICAL\n", "/x A a:1 VIRTUAL\n/x B b:1 VIRTUAL\n", "/ A a:1 PHYSICAL\n/c B b:1 VIRTUAL\n"] {
        match MastershipMap::parse("A", text) {
            Err(e) if e.code() == 426 => {}
            Ok(map) => match validate_map(&map) {
                Err(e) if e.code() == 426 => {}
                other => return Err(format!("overlapping map accepted: {text:?} -> {other:?}")),
            },
            Err(e) => return Err(format!("overlapping map rejected for the wrong reason: {e}")),
        }
    }
    let files: Vec<PathBuf> = ["federation_physical.scn", "federation_virtual.scn", "federation_partition.scn"]
        .iter()
        .map(|f| scenario_dir.join(f))
        .collect();
    let checks = run_files(&files, &[seed])?;
    Ok(format!("{compared} identical reads across both modes, overlaps rejected, {checks} scenario assertions"))
}

// ---------------------------------------------------------------------------
// Protocol

const ALPHABET: &[char] = &['a', 'Z', '0', '/', ' ', '"', '\\', '|', '.', ':', '\'', 'é', '\t', '-'];

fn random_token(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..12);
    (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

/// Character-level decoder for encoded request lines.
fn naive_split(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c == ' ' {
            chars.next();
            continue;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            while let Some(c) = chars.next() {
                match c {
                    '\\' => tok.extend(chars.next()),
                    '"' => break,
                    other => tok.push(other),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == ' ' {
                    break;
                }
                tok.push(c);
                chars.next();
            }
        }
        out.push(tok);
    }
    out
}

pub fn codec_fuzz(requests: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..requests {
        let verb = Verb::ALL[rng.gen_range(0..Verb::ALL.len())];
        let args: Vec<String> = (0..rng.gen_range(0..6)).map(|_| random_token(&mut rng)).collect();
        let req = Request::new(verb, args);
        let line = req.to_line();
        let back = parse_request(&line).map_err(|e| format!("{line:?}: {e}"))?;
        let mut tokens = vec![verb.as_str().to_string()];
        tokens.extend(req.args.iter().cloned());
        if back != req || line.contains('\n') || naive_split(&line) != tokens {
            return Err(format!("round trip failed for {line:?}"));
        }
        let resp = if rng.gen_bool(0.3) {
            Response::Err { code: rng.gen_range(400..600), message: random_token(&mut rng) }
        } else {
            Response::Ok(req.args.clone())
        };
        if parse_response(&resp.encode()).map_err(|e| e.to_string())? != resp {
            return Err(format!("response round trip failed for {resp:?}"));
        }
    }
    Ok(())
}

pub fn protocol(golden_dir: &FsPath, fuzz: usize, seed: u64) -> CheckOutcome {
    let mut exchanges = 0;
    let mut files = 0;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(golden_dir)
        .map_err(|e| format!("{}: {e}", golden_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "req"))
        .collect();
    entries.sort();
    for req in entries {
        let text = std::fs::read_to_string(&req).map_err(|e| e.to_string())?;
        let want = std::fs::read_to_string(req.with_extension("golden")).map_err(|e| format!("{}: {e}", req.display()))?;
        let mut node = Node::open(Store::memory(), &NodeConfig::new("N"), 1_000).map_err(|e| e.to_string())?;
        let (got, n) = run_session(&mut node, &text, 1_000);
        if got != want {
            let line = got.lines().zip(want.lines()).position(|(a, b)| a != b).unwrap_or(0) + 1;
            return Err(format!("{} differs from its golden file at line {line}", req.display()));
        }
        exchanges += n;
        files += 1;
    }
    if exchanges < 50 {
        return Err(format!("only {exchanges} golden exchanges"));
    }
    codec_fuzz(fuzz, seed)?;
    Ok(format!("{exchanges} golden exchanges in {files} files, {fuzz} fuzzed round trips"))
}

/// Runs a check and reports how long it took.
pub fn timed(check: impl FnOnce() -> CheckOutcome) -> (CheckOutcome, std::time::Duration) {
    let started = Instant::now();
    let out = check();
    (out, started.elapsed())
}
