//! Scenario scripts for the simulator.
//!
//! One step per line, `#` starts a comment. Arguments are tokenized like
//! protocol requests, so values with spaces are written in double quotes.
//!
//! Setup (before the first action):
//!
//! ```text
//! NODE <id>
//! REPLICA <node> <sub_id> <root> <master> [<condition>]
//! MAP <root> <owner> PHYSICAL|VIRTUAL
//! SET <key> <value>
//! ```
//!
//! Actions:
//!
//! ```text
//! LINK <a> <b> <latency_ms> [<drop probability>]
//! CLIENT <node> <request...>
//! EXPECT OK | EXPECT ERR <code> | EXPECT ROWS <n> | EXPECT ROW <text>
//! REPEAT <n> <step...>            {i} in the step becomes 0..n-1
//! CRASH <node> | RESTART <node>
//! PARTITION <a> <b> | HEAL [<a> <b>]
//! ADVANCE <ms> | DRAIN [<limit ms>]
//! CHECK CONVERGED [<node> <sub_id>]
//! CHECK SAME <a> <b> <request...>
//! CHECK LOGEMPTY <node> | CHECK LOGCOUNT <node> <n>
//! CHECK SUB <node> <sub_id> CONNECTED|OFFLINE|EXPIRED|ABSENT
//! CHECK PENDING <node> <sub_id> <n>
//! CHECK MODE <node> <sub_id> BOOTSTRAPPING|STREAMING|DISCONNECTED
//! CHECK BOOTSTRAPS <node> <sub_id> <n>
//! ```
//!
//! `EXPECT` looks at the response of the latest `CLIENT` step. Every
//! `CHECK` also re-verifies catalog invariants on all live nodes and that
//! no replica is ahead of its master's log.

use std::collections::BTreeMap;

use metacat_core::catalog;
use metacat_core::federation::{MastershipMap, ReplicaMode, RootAssignment};
use metacat_core::node::NodeConfig;
use metacat_core::path::Path;
use metacat_core::protocol::{parse_request, tokenize, Request, Response};
use metacat_core::replication::master::{MasterConfig, SubState};
use metacat_core::replication::slave::{Mode, Replica, ReplicaConfig};
use metacat_core::storage::{ReadView, Table};

use crate::sim::{diff, LinkSpec, Sim};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

fn malformed(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Malformed { line, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Link { a: String, b: String, spec: LinkSpec },
    Client { node: String, req: Request },
    Expect(Expectation),
    Repeat { count: u64, template: String },
    Crash(String),
    Restart(String),
    Partition(String, String),
    Heal(Option<(String, String)>),
    Advance(u64),
    Drain(u64),
    Check(Check),
}

#[derive(Debug, Clone, PartialEq)]
enum Expectation {
    Ok,
    Err(u16),
    Rows(usize),
    Row(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Check {
    Converged(Option<(String, String)>),
    Same { a: String, b: String, req: Request },
    LogCount { node: String, count: u64 },
    Sub { node: String, sub_id: String, state: Option<SubState> },
    Pending { node: String, sub_id: String, count: u64 },
    Mode { node: String, sub_id: String, mode: Mode },
    Bootstraps { node: String, sub_id: String, count: u64 },
}

#[derive(Debug, Clone)]
struct ReplicaDecl {
    node: String,
    sub_id: String,
    root: Path,
    master: String,
    cond: Option<String>,
}

/// A parsed scenario.
#[derive(Debug, Clone, Default)]
pub struct Scenario {
    nodes: Vec<String>,
    replicas: Vec<ReplicaDecl>,
    roots: Vec<RootAssignment>,
    settings: BTreeMap<String, u64>,
    steps: Vec<(usize, Step)>,
}

const SETTINGS: &[&str] = &[
    "liveness_ms",
    "expiry_ms",
    "pending_limit",
    "max_batch",
    "gc_interval_ms",
    "poll_interval_ms",
    "batch",
    "ack_every",
    "ack_interval_ms",
    "backoff_base_ms",
    "backoff_cap_ms",
    "rpc_timeout_ms",
    "tick_ms",
];

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ScenarioError> {
    s.parse().map_err(|_| malformed(line, format!("expected a number, got {s:?}")))
}

fn nargs(line: usize, args: &[String], min: usize, max: usize) -> Result<(), ScenarioError> {
    if args.len() < min || args.len() > max {
        return Err(malformed(line, format!("expected {min}..={max} arguments, got {}", args.len())));
    }
    Ok(())
}

/// Splits off the first `n` tokens of a line and returns them with the
/// untouched remainder.
fn split_words(text: &str, n: usize) -> (Vec<&str>, &str) {
    let mut words = Vec::new();
    let mut rest = text.trim_start();
    for _ in 0..n {
        if rest.is_empty() {
            break;
        }
        let end = rest.find(' ').unwrap_or(rest.len());
        words.push(&rest[..end]);
        rest = rest[end..].trim_start();
    }
    (words, rest)
}

fn request(line: usize, text: &str) -> Result<Request, ScenarioError> {
    parse_request(text).map_err(|e| malformed(line, format!("bad request {text:?}: {e}")))
}

fn parse_action(line: usize, text: &str) -> Result<Step, ScenarioError> {
    let (head, rest) = split_words(text, 1);
    let verb = head.first().copied().unwrap_or("").to_ascii_uppercase();
    match verb.as_str() {
        "CLIENT" => {
            let (w, req) = split_words(rest, 1);
            let node = w.first().ok_or_else(|| malformed(line, "CLIENT needs a node"))?;
            Ok(Step::Client { node: node.to_string(), req: request(line, req)? })
        }
        "REPEAT" => {
            let (w, template) = split_words(rest, 1);
            let count = num(line, w.first().copied().unwrap_or(""))?;
            if template.is_empty() {
                return Err(malformed(line, "REPEAT needs a step"));
            }
            // Validate the template once with a sample index.
            let inner = parse_action(line, &template.replace("{i}", "0"))?;
            if matches!(inner, Step::Repeat { .. }) {
                return Err(malformed(line, "REPEAT cannot nest"));
            }
            Ok(Step::Repeat { count, template: template.to_string() })
        }
        "CHECK" => {
            let (w, req) = split_words(rest, 3);
            if w.first().map(|s| s.to_ascii_uppercase()).as_deref() == Some("SAME") {
                if w.len() < 3 {
                    return Err(malformed(line, "CHECK SAME <a> <b> <request>"));
                }
                return Ok(Step::Check(Check::Same { a: w[1].into(), b: w[2].into(), req: request(line, req)? }));
            }
            parse_check(line, rest)
        }
        _ => {
            let args = tokenize(text).map_err(|e| malformed(line, e.to_string()))?;
            let args = &args[1..];
            match verb.as_str() {
                "LINK" => {
                    nargs(line, args, 3, 4)?;
                    let drop: f64 = args.get(3).map(|s| num(line, s)).transpose()?.unwrap_or(0.0);
                    if !(0.0..=1.0).contains(&drop) {
                        return Err(malformed(line, "drop probability must be within 0..=1"));
                    }
                    let spec = LinkSpec { latency_ms: num(line, &args[2])?, drop };
                    Ok(Step::Link { a: args[0].clone(), b: args[1].clone(), spec })
                }
                "EXPECT" => {
                    nargs(line, args, 1, 2)?;
                    let e = match (args[0].to_ascii_uppercase().as_str(), args.get(1)) {
                        ("OK", None) => Expectation::Ok,
                        ("ERR", Some(c)) => Expectation::Err(num(line, c)?),
                        ("ROWS", Some(n)) => Expectation::Rows(num(line, n)?),
                        ("ROW", Some(r)) => Expectation::Row(r.clone()),
                        _ => return Err(malformed(line, "EXPECT OK | ERR <code> | ROWS <n> | ROW <text>")),
                    };
                    Ok(Step::Expect(e))
                }
                "CRASH" | "RESTART" => {
                    nargs(line, args, 1, 1)?;
                    Ok(if verb == "CRASH" { Step::Crash(args[0].clone()) } else { Step::Restart(args[0].clone()) })
                }
                "PARTITION" => {
                    nargs(line, args, 2, 2)?;
                    Ok(Step::Partition(args[0].clone(), args[1].clone()))
                }
                "HEAL" => match args {
                    [] => Ok(Step::Heal(None)),
                    [a, b] => Ok(Step::Heal(Some((a.clone(), b.clone())))),
                    _ => Err(malformed(line, "HEAL takes no arguments or two nodes")),
                },
                "ADVANCE" => {
                    nargs(line, args, 1, 1)?;
                    Ok(Step::Advance(num(line, &args[0])?))
                }
                "DRAIN" => {
                    nargs(line, args, 0, 1)?;
                    Ok(Step::Drain(args.first().map(|s| num(line, s)).transpose()?.unwrap_or(300_000)))
                }
                "" => Err(malformed(line, "empty step")),
                other => Err(malformed(line, format!("unknown step {other}"))),
            }
        }
    }
}

fn parse_check(line: usize, rest: &str) -> Result<Step, ScenarioError> {
    let args = tokenize(rest).map_err(|e| malformed(line, e.to_string()))?;
    let kind = args.first().map(|s| s.to_ascii_uppercase()).unwrap_or_default();
    let a = &args[1.min(args.len())..];
    let check = match kind.as_str() {
        "CONVERGED" => match a {
            [] => Check::Converged(None),
            [n, s] => Check::Converged(Some((n.clone(), s.clone()))),
            _ => return Err(malformed(line, "CHECK CONVERGED [<node> <sub_id>]")),
        },
        "LOGEMPTY" => {
            nargs(line, a, 1, 1)?;
            Check::LogCount { node: a[0].clone(), count: 0 }
        }
        "LOGCOUNT" => {
            nargs(line, a, 2, 2)?;
            Check::LogCount { node: a[0].clone(), count: num(line, &a[1])? }
        }
        "SUB" => {
            nargs(line, a, 3, 3)?;
            let state = match a[2].to_ascii_uppercase().as_str() {
                "CONNECTED" => Some(SubState::Connected),
                "OFFLINE" => Some(SubState::Offline),
                "EXPIRED" => Some(SubState::Expired),
                "ABSENT" => None,
                other => return Err(malformed(line, format!("unknown subscription state {other}"))),
            };
            Check::Sub { node: a[0].clone(), sub_id: a[1].clone(), state }
        }
        "PENDING" => {
            nargs(line, a, 3, 3)?;
            Check::Pending { node: a[0].clone(), sub_id: a[1].clone(), count: num(line, &a[2])? }
        }
        "MODE" => {
            nargs(line, a, 3, 3)?;
            let mode = match a[2].to_ascii_uppercase().as_str() {
                "BOOTSTRAPPING" => Mode::Bootstrapping,
                "STREAMING" => Mode::Streaming,
                "DISCONNECTED" => Mode::Disconnected,
                other => return Err(malformed(line, format!("unknown replica mode {other}"))),
            };
            Check::Mode { node: a[0].clone(), sub_id: a[1].clone(), mode }
        }
        "BOOTSTRAPS" => {
            nargs(line, a, 3, 3)?;
            Check::Bootstraps { node: a[0].clone(), sub_id: a[1].clone(), count: num(line, &a[2])? }
        }
        other => return Err(malformed(line, format!("unknown check {other}"))),
    };
    Ok(Step::Check(check))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let verb = body.split(' ').next().unwrap_or("").to_ascii_uppercase();
            let is_setup = matches!(verb.as_str(), "NODE" | "REPLICA" | "SUBSCRIBE" | "MAP" | "SET");
            if is_setup && !sc.steps.is_empty() {
                return Err(malformed(line, format!("{verb} must come before the first action")));
            }
            if !is_setup {
                let step = parse_action(line, body)?;
                sc.steps.push((line, step));
                continue;
            }
            let args = tokenize(body).map_err(|e| malformed(line, e.to_string()))?;
            let args = &args[1..];
            match verb.as_str() {
                "NODE" => {
                    nargs(line, args, 1, 1)?;
                    if sc.nodes.contains(&args[0]) {
                        return Err(malformed(line, format!("node {} declared twice", args[0])));
                    }
                    sc.nodes.push(args[0].clone());
                }
                "REPLICA" | "SUBSCRIBE" => {
                    nargs(line, args, 4, 5)?;
                    let root = Path::parse(&args[2]).map_err(|e| malformed(line, e.to_string()))?;
                    let cond = args.get(4).filter(|c| !c.is_empty()).cloned();
                    if let Some(c) = &cond {
                        metacat_core::condition::Condition::parse(c).map_err(|e| malformed(line, e.to_string()))?;
                    }
                    sc.replicas.push(ReplicaDecl {
                        node: args[0].clone(),
                        sub_id: args[1].clone(),
                        root,
                        master: args[3].clone(),
                        cond,
                    });
                }
                "MAP" => {
                    nargs(line, args, 3, 3)?;
                    let root = Path::parse(&args[0]).map_err(|e| malformed(line, e.to_string()))?;
                    let mode: ReplicaMode = args[2].parse().map_err(|e: metacat_core::Error| malformed(line, e.to_string()))?;
                    sc.roots.push(RootAssignment { root, owner: args[1].clone(), mode });
                }
                _ => {
                    nargs(line, args, 2, 2)?;
                    if !SETTINGS.contains(&args[0].as_str()) {
                        return Err(malformed(line, format!("unknown setting {}", args[0])));
                    }
                    sc.settings.insert(args[0].clone(), num(line, &args[1])?);
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let known = |n: &str| self.nodes.iter().any(|x| x == n);
        for r in &self.replicas {
            for n in [&r.node, &r.master] {
                if !known(n) {
                    return Err(malformed(0, format!("replica {} names unknown node {n}", r.sub_id)));
                }
            }
        }
        for r in &self.roots {
            if !known(&r.owner) {
                return Err(malformed(0, format!("root {} owned by unknown node {}", r.root, r.owner)));
            }
        }
        for (line, step) in &self.steps {
            let names: Vec<&String> = match step {
                Step::Link { a, b, .. } | Step::Partition(a, b) | Step::Heal(Some((a, b))) => vec![a, b],
                Step::Client { node, .. } | Step::Crash(node) | Step::Restart(node) => vec![node],
                Step::Check(Check::Same { a, b, .. }) => vec![a, b],
                Step::Check(Check::Converged(Some((n, _))))
                | Step::Check(Check::LogCount { node: n, .. })
                | Step::Check(Check::Sub { node: n, .. })
                | Step::Check(Check::Pending { node: n, .. })
                | Step::Check(Check::Mode { node: n, .. })
                | Step::Check(Check::Bootstraps { node: n, .. }) => vec![n],
                _ => vec![],
            };
            if let Some(n) = names.into_iter().find(|n| !known(n)) {
                return Err(malformed(*line, format!("unknown node {n}")));
            }
        }
        Ok(())
    }

    fn setting(&self, key: &str, default: u64) -> u64 {
        self.settings.get(key).copied().unwrap_or(default)
    }

    /// Node configurations derived from the declarations.
    pub fn node_configs(&self) -> Vec<NodeConfig> {
        let master_defaults = MasterConfig::default();
        let master = MasterConfig {
            liveness_ms: self.setting("liveness_ms", master_defaults.liveness_ms),
            expiry_ms: self.setting("expiry_ms", master_defaults.expiry_ms),
            pending_limit: self.setting("pending_limit", master_defaults.pending_limit),
            max_batch: self.setting("max_batch", master_defaults.max_batch as u64) as usize,
            gc_interval_ms: self.setting("gc_interval_ms", master_defaults.gc_interval_ms),
        };
        let base = ReplicaConfig::new("", Path::root(), "", "");
        let template = ReplicaConfig {
            poll_interval_ms: self.setting("poll_interval_ms", base.poll_interval_ms),
            batch: self.setting("batch", base.batch as u64) as usize,
            ack_every: self.setting("ack_every", base.ack_every),
            ack_interval_ms: self.setting("ack_interval_ms", base.ack_interval_ms),
            backoff_base_ms: self.setting("backoff_base_ms", base.backoff_base_ms),
            backoff_cap_ms: self.setting("backoff_cap_ms", base.backoff_cap_ms),
            ..base
        };
        let nodes: BTreeMap<String, String> = self.nodes.iter().map(|n| (n.clone(), n.clone())).collect();
        self.nodes
            .iter()
            .map(|id| {
                let mut cfg = NodeConfig::new(id.clone());
                cfg.master = master.clone();
                cfg.map = MastershipMap { self_id: id.clone(), nodes: nodes.clone(), roots: self.roots.clone() };
                cfg.replica_defaults = template.clone();
                for r in self.replicas.iter().filter(|r| &r.node == id) {
                    let mut rc = template.clone();
                    rc.sub_id = r.sub_id.clone();
                    rc.root = r.root.clone();
                    rc.cond = r.cond.clone();
                    rc.master_node = r.master.clone();
                    rc.master_addr = r.master.clone();
                    cfg.replicas.push(rc);
                }
                cfg
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub line: usize,
    pub what: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioReport {
    pub trace: Vec<String>,
    pub checks: Vec<CheckResult>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// The trace followed by one line per assertion.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.trace {
            out.push_str(t);
            out.push('\n');
        }
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{status} line {}: {}", c.line, c.what));
            if !c.detail.is_empty() {
                out.push_str(&format!(" ({})", c.detail));
            }
            out.push('\n');
        }
        out
    }
}

struct Runner {
    sim: Sim,
    last: Option<Response>,
    checks: Vec<CheckResult>,
}

/// Parses and runs a scenario.
pub fn run_scenario_text(text: &str, seed: u64) -> Result<ScenarioReport, ScenarioError> {
    run_scenario(&Scenario::parse(text)?, seed)
}

pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<ScenarioReport, ScenarioError> {
    let mut sim = Sim::new(seed);
    sim.rpc_timeout_ms = scenario.setting("rpc_timeout_ms", sim.rpc_timeout_ms);
    sim.tick_ms = scenario.setting("tick_ms", sim.tick_ms).max(1);
    if scenario.steps.is_empty() {
        return Ok(ScenarioReport::default());
    }
    for cfg in scenario.node_configs() {
        sim.add_node(cfg);
    }
    sim.start_all().map_err(|e| malformed(0, format!("cannot boot nodes: {e}")))?;
    let mut runner = Runner { sim, last: None, checks: Vec::new() };
    for (line, step) in &scenario.steps {
        runner.step(*line, step)?;
    }
    Ok(ScenarioReport { trace: runner.sim.trace, checks: runner.checks })
}

fn sub_replica<'a>(sim: &'a Sim, node: &str, sub_id: &str) -> Option<&'a Replica> {
    sim.node(node)?.replicas().iter().find(|r| r.config().sub_id == sub_id)
}

impl Runner {
    fn record(&mut self, line: usize, what: String, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        let status = if passed { "PASS" } else { "FAIL" };
        self.sim.trace.push(format!("{:>9} {status} {what}", self.sim.now()));
        self.checks.push(CheckResult { line, what, passed, detail });
    }

    fn step(&mut self, line: usize, step: &Step) -> Result<(), ScenarioError> {
        match step {
            Step::Link { a, b, spec } => self.sim.set_link(a, b, *spec),
            Step::Client { node, req } => self.last = Some(self.sim.client(node, req)),
            Step::Expect(e) => {
                let result = match &self.last {
                    None => Err("no CLIENT response yet".to_string()),
                    Some(resp) => expect(e, resp),
                };
                self.record(line, format!("EXPECT {e:?}"), result);
            }
            Step::Repeat { count, template } => {
                for i in 0..*count {
                    let inner = parse_action(line, &template.replace("{i}", &i.to_string()))?;
                    self.step(line, &inner)?;
                }
            }
            Step::Crash(n) => self.sim.crash(n).map_err(|e| malformed(line, e.to_string()))?,
            Step::Restart(n) => {
                if self.sim.is_up(n) {
                    self.sim.crash(n).map_err(|e| malformed(line, e.to_string()))?;
                }
                self.sim.start(n).map_err(|e| malformed(line, format!("restart failed: {e}")))?;
            }
            Step::Partition(a, b) => self.sim.partition(a, b),
            Step::Heal(Some((a, b))) => self.sim.heal(a, b),
            Step::Heal(None) => self.sim.heal_all(),
            Step::Advance(ms) => self.sim.advance(*ms),
            Step::Drain(limit) => {
                self.sim.drain(*limit);
            }
            Step::Check(c) => {
                let result = self.check(c);
                self.record(line, format!("CHECK {}", describe(c)), result);
                let inv = self.invariants();
                if inv.is_err() {
                    self.record(line, "invariants".to_string(), inv);
                }
            }
        }
        Ok(())
    }

    fn check(&mut self, c: &Check) -> Result<(), String> {
        match c {
            Check::Converged(only) => {
                let d = self.sim.divergences(only.as_ref().map(|(n, s)| (n.as_str(), s.as_str())));
                if let Some((n, s)) = only {
                    if sub_replica(&self.sim, n, s).is_none() {
                        return Err(format!("{n} is down or has no replica {s}"));
                    }
                }
                if d.is_empty() {
                    Ok(())
                } else {
                    Err(d.join("; "))
                }
            }
            Check::Same { a, b, req } => {
                let ra = self.sim.client(a, req);
                let rb = self.sim.client(b, req);
                if ra == rb {
                    Ok(())
                } else {
                    Err(format!("{a}: {} vs {b}: {}", ra.encode().trim_end(), rb.encode().trim_end()))
                }
            }
            Check::LogCount { node, count } => {
                let store = self.sim.store(node).ok_or("unknown node")?;
                let n = store.open_snapshot_view().scan_prefix(Table::Log, "").len() as u64;
                if n == *count {
                    Ok(())
                } else {
                    Err(format!("{n} log records"))
                }
            }
            Check::Sub { node, sub_id, state } => {
                let n = self.sim.node(node).ok_or_else(|| format!("{node} is down"))?;
                let sub = n.master().subscription(sub_id).map_err(|e| e.to_string())?;
                let got = sub.map(|s| s.state);
                if got == *state {
                    Ok(())
                } else {
                    Err(format!("state {}", state_word(got)))
                }
            }
            Check::Pending { node, sub_id, count } => {
                let n = self.sim.node_mut(node).ok_or_else(|| format!("{node} is down"))?;
                let p = n.master_mut().pending(sub_id).map_err(|e| e.to_string())?;
                if p == *count {
                    Ok(())
                } else {
                    Err(format!("{p} pending"))
                }
            }
            Check::Mode { node, sub_id, mode } => {
                let r = sub_replica(&self.sim, node, sub_id).ok_or("no such replica")?;
                if r.mode() == *mode {
                    Ok(())
                } else {
                    Err(format!("mode {:?}", r.mode()))
                }
            }
            Check::Bootstraps { node, sub_id, count } => {
                let r = sub_replica(&self.sim, node, sub_id).ok_or("no such replica")?;
                if r.stats.bootstraps == *count {
                    Ok(())
                } else {
                    Err(format!("{} bootstraps", r.stats.bootstraps))
                }
            }
        }
    }

    /// Catalog invariants on every live node, and no replica ahead of what
    /// its master has logged.
    fn invariants(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        for id in self.sim.node_ids() {
            let Some(node) = self.sim.node(&id) else { continue };
            if let Err(e) = catalog::check_invariants(&node.store().open_snapshot_view()) {
                problems.push(format!("{id}: {e}"));
            }
            for r in node.replicas() {
                let master = self.sim.store(&r.config().master_addr);
                if let Some(m) = master {
                    if r.next_seq() > m.log_watermark() + 1 {
                        problems.push(format!(
                            "{id}/{}: applied up to {} but master logged only {}",
                            r.config().sub_id,
                            r.next_seq() - 1,
                            m.log_watermark()
                        ));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

fn expect(e: &Expectation, resp: &Response) -> Result<(), String> {
    let shown = || resp.encode().lines().next().unwrap_or("").to_string();
    match (e, resp) {
        (Expectation::Ok, Response::Ok(_)) => Ok(()),
        (Expectation::Err(want), Response::Err { code, .. }) if code == want => Ok(()),
        (Expectation::Rows(n), Response::Ok(rows)) if rows.len() == *n => Ok(()),
        (Expectation::Row(r), Response::Ok(rows)) if rows.contains(r) => Ok(()),
        (Expectation::Rows(_) | Expectation::Row(_), Response::Ok(rows)) => Err(format!("rows {rows:?}")),
        _ => Err(format!("got {}", shown())),
    }
}

fn state_word(state: Option<SubState>) -> &'static str {
    match state {
        Some(SubState::Connected) => "CONNECTED",
        Some(SubState::Offline) => "OFFLINE",
        Some(SubState::Expired) => "EXPIRED",
        None => "ABSENT",
    }
}

fn describe(c: &Check) -> String {
    match c {
        Check::Converged(None) => "CONVERGED".into(),
        Check::Converged(Some((n, s))) => format!("CONVERGED {n} {s}"),
        Check::Same { a, b, req } => format!("SAME {a} {b} {}", req.to_line()),
        Check::LogCount { node, count } => format!("LOGCOUNT {node} {count}"),
        Check::Sub { node, sub_id, state } => format!("SUB {node} {sub_id} {}", state_word(*state)),
        Check::Pending { node, sub_id, count } => format!("PENDING {node} {sub_id} {count}"),
        Check::Mode { node, sub_id, mode } => format!("MODE {node} {sub_id} {}", format!("{mode:?}").to_ascii_uppercase()),
        Check::Bootstraps { node, sub_id, count } => format!("BOOTSTRAPS {node} {sub_id} {count}"),
    }
}

/// Compares two dumps for tests that want a readable failure.
pub fn compare_dumps(want: &[String], got: &[String]) -> Result<(), String> {
    if want == got {
        Ok(())
    } else {
        Err(diff(want, got))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "
        NODE M
        NODE S
        REPLICA S s1 /exp M
        CLIENT M CREATEDIR /exp run:INT
        EXPECT OK
        REPEAT 100 CLIENT M ADDENTRY /exp/e{i} {i}
        EXPECT OK
        DRAIN
        CHECK CONVERGED
        CHECK MODE S s1 STREAMING
        ADVANCE 2000
        CHECK LOGEMPTY M
    ";

    #[test]
    fn basic_scenario_passes() {
        let report = run_scenario_text(BASIC, 1).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.len(), 5);
    }

    #[test]
    fn empty_script_passes_with_nothing() {
        let report = run_scenario_text("NODE A\n# nothing\n", 1).unwrap();
        assert!(report.trace.is_empty());
        assert!(report.checks.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn deterministic_traces() {
        let text = format!("{BASIC}\nLINK M S 7 0.3\nREPEAT 30 CLIENT M ADDENTRY /exp/f{{i}} {{i}}\nDRAIN\nCHECK CONVERGED\n");
        let a = run_scenario_text(&text, 42).unwrap();
        let b = run_scenario_text(&text, 42).unwrap();
        assert_eq!(a.render(), b.render());
        assert!(a.passed(), "{}", a.render());
    }

    #[test]
    fn failing_check_reports_diff() {
        let text = "NODE M\nNODE S\nREPLICA S s1 /exp M\nLINK M S 50\nCLIENT M CREATEDIR /exp\nADVANCE 1\nCHECK CONVERGED\n";
        let report = run_scenario_text(text, 1).unwrap();
        assert!(!report.passed());
        assert!(report.failures()[0].detail.contains("missing"));
    }

    #[test]
    fn malformed_scenarios() {
        for (text, line) in [
            ("NODE A\nBOGUS\n", 2),
            ("NODE A\nCLIENT B PING\n", 2),
            ("NODE A\nADVANCE x\n", 2),
            ("NODE A\nADVANCE 1\nNODE B\n", 3),
            ("NODE A\nSET nonsense 1\n", 2),
            ("NODE A\nCHECK WHATEVER\n", 2),
            ("NODE A\nREPEAT 3 REPEAT 2 ADVANCE 1\n", 2),
            ("NODE A\nLINK A A 1 2\n", 2),
        ] {
            match Scenario::parse(text) {
                Err(ScenarioError::Malformed { line: l, .. }) => assert_eq!(l, line, "{text}"),
                Ok(_) => panic!("accepted {text:?}"),
            }
        }
        assert!(Scenario::parse("NODE A\nREPLICA A s /x B\n").is_err());
    }
}
