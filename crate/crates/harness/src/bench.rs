//! Replication scalability benchmark.
//!
//! One master ingests entries at a fixed rate while N slaves stream them in
//! discard mode, so only the master does real work. Everything runs in
//! virtual time on the simulator. With zero slaves a single subscription is
//! registered and left offline, so the master still pays for logging.

use std::time::{Duration, Instant};

use metacat_core::node::NodeConfig;
use metacat_core::path::Path;
use metacat_core::protocol::{Request, Verb};
use metacat_core::replication::log::Filter;
use metacat_core::replication::slave::ReplicaConfig;

use crate::sim::Sim;

pub const CSV_HEADER: &str = "slaves,entries,rate,lag_ms_p50,lag_ms_max,work_units,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub slaves: usize,
    pub entries: u64,
    /// Inserts per second.
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub slave_count: usize,
    pub insert_count: u64,
    pub insert_rate: f64,
    /// Per slave: virtual ms from the final commit until that slave applied it.
    pub lag_ms: Vec<u64>,
    pub logged: u64,
    pub shipped: u64,
    /// Records still waiting for the offline subscriber (zero-slave runs).
    pub offline_pending: Option<u64>,
    /// Real time the master spent serving and housekeeping.
    pub master_busy: Duration,
    /// Virtual time the ingest phase covered.
    pub ingest_ms: u64,
    pub wall_ms: u64,
}

impl BenchReport {
    /// Master work: commands logged plus records shipped.
    pub fn work_units(&self) -> u64 {
        self.logged + self.shipped
    }

    pub fn lag_p50(&self) -> u64 {
        percentile(&self.lag_ms, 50)
    }

    pub fn lag_max(&self) -> u64 {
        self.lag_ms.iter().copied().max().unwrap_or(0)
    }

    /// Whether the master kept up with the target rate: it spent no more
    /// real time working than the ingest phase lasted.
    pub fn sustained(&self) -> bool {
        self.master_busy.as_millis() as u64 <= self.ingest_ms.max(1)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.slave_count,
            self.insert_count,
            self.insert_rate,
            self.lag_p50(),
            self.lag_max(),
            self.work_units(),
            self.wall_ms
        )
    }
}

/// Nearest-rank percentile; 0 for an empty set.
pub fn percentile(values: &[u64], pct: u64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = (pct * v.len() as u64).div_ceil(100).max(1) as usize;
    v[rank - 1]
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// A plain text table for terminals.
pub fn to_table(reports: &[BenchReport]) -> String {
    let mut out = format!(
        "{:>6} {:>8} {:>7} {:>8} {:>8} {:>10} {:>8} {:>9}\n",
        "slaves", "entries", "rate", "lag_p50", "lag_max", "work", "wall_ms", "sustained"
    );
    for r in reports {
        out.push_str(&format!(
            "{:>6} {:>8} {:>7} {:>8} {:>8} {:>10} {:>8} {:>9}\n",
            r.slave_count,
            r.insert_count,
            r.insert_rate,
            r.lag_p50(),
            r.lag_max(),
            r.work_units(),
            r.wall_ms,
            if r.sustained() { "yes" } else { "NO" }
        ));
    }
    out
}

/// Least-squares line through `(x, y)` points: `(intercept, slope,
/// largest absolute residual)`.
pub fn fit_linear(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (points.first().map_or(0.0, |p| p.1), 0.0, 0.0);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let worst = points.iter().map(|p| (p.1 - intercept - slope * p.0).abs()).fold(0.0, f64::max);
    (intercept, slope, worst)
}

const MASTER: &str = "M";
const OFFLINE_SUB: &str = "offline";

/// Runs one benchmark point.
pub fn run_benchmark(cfg: BenchConfig) -> BenchReport {
    assert!(cfg.rate > 0.0, "rate must be positive");
    let started = Instant::now();
    let root = Path::parse("/bench").expect("valid path");
    let mut sim = Sim::new(cfg.seed);
    sim.tracing = false;
    sim.add_node(NodeConfig::new(MASTER));
    sim.start(MASTER).expect("master boots");
    let create = Request::new(Verb::CreateDir, ["/bench", "seq:INT", "host:STRING"]);
    assert!(sim.client(MASTER, &create).is_ok());

    if cfg.slaves == 0 {
        // Subscribed, never connects; liveness turns it OFFLINE.
        let now = sim.now();
        sim.node_mut(MASTER)
            .expect("master up")
            .master_mut()
            .subscribe(OFFLINE_SUB, &Filter::subtree(root.clone()), now)
            .expect("subscribe");
    }
    let slave_ids: Vec<String> = (0..cfg.slaves).map(|i| format!("S{i}")).collect();
    for (i, id) in slave_ids.iter().enumerate() {
        let mut node = NodeConfig::new(id.clone());
        let mut r = ReplicaConfig::new(format!("bench{i}"), root.clone(), MASTER, MASTER);
        r.discard = true;
        node.replicas.push(r);
        sim.add_node(node);
        sim.start(id).expect("slave boots");
    }
    // Let every slave finish its (empty) bootstrap before ingest starts.
    sim.drain(60_000);
    let busy_before = sim.busy(MASTER);
    let t0 = sim.now();

    let interval = 1000.0 / cfg.rate;
    for k in 0..cfg.entries {
        let due = t0 + (k as f64 * interval).round() as u64;
        sim.run_until(due);
        let req = Request::new(Verb::AddEntry, [format!("/bench/e{k}"), k.to_string(), format!("h{}", k % 17)]);
        let resp = sim.client(MASTER, &req);
        assert!(resp.is_ok(), "insert {k} failed: {resp:?}");
    }
    let t_last = sim.now();
    let final_seq = sim.store(MASTER).expect("master store").log_watermark();

    let mut lag: Vec<Option<u64>> = vec![None; cfg.slaves];
    let deadline = t_last + 600_000;
    loop {
        for (i, id) in slave_ids.iter().enumerate() {
            if lag[i].is_none() {
                let caught_up = sim.node(id).and_then(|n| n.replicas().first()).is_some_and(|r| r.next_seq() > final_seq);
                if caught_up {
                    lag[i] = Some(sim.now() - t_last);
                }
            }
        }
        if lag.iter().all(Option::is_some) || sim.now() >= deadline {
            break;
        }
        let step = sim.now() + 1;
        sim.run_until(step);
    }
    let ingest_ms = (t_last - t0).max((cfg.entries as f64 * interval) as u64);
    let master_busy = sim.busy(MASTER) - busy_before;

    let offline_pending = if cfg.slaves == 0 {
        sim.node_mut(MASTER).and_then(|n| n.master_mut().pending(OFFLINE_SUB).ok())
    } else {
        None
    };
    let stats = sim.node(MASTER).expect("master up").stats();
    BenchReport {
        slave_count: cfg.slaves,
        insert_count: cfg.entries,
        insert_rate: cfg.rate,
        lag_ms: lag.into_iter().map(|l| l.unwrap_or(u64::MAX)).collect(),
        logged: stats.logged,
        shipped: stats.shipped,
        offline_pending,
        master_busy,
        ingest_ms,
        wall_ms: started.elapsed().as_millis() as u64,
    }
}

/// Runs one point per slave count.
pub fn sweep(slaves: impl IntoIterator<Item = usize>, entries: u64, rate: f64, seed: u64) -> Vec<BenchReport> {
    slaves.into_iter().map(|n| run_benchmark(BenchConfig { slaves: n, entries, rate, seed })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_slaves_keeps_logs_for_the_offline_subscriber() {
        let r = run_benchmark(BenchConfig { slaves: 0, entries: 200, rate: 200.0, seed: 1 });
        assert_eq!(r.logged, 200);
        assert_eq!(r.shipped, 0);
        assert_eq!(r.offline_pending, Some(200));
        assert!(r.lag_ms.is_empty());
    }

    #[test]
    fn one_slave_no_entries() {
        let r = run_benchmark(BenchConfig { slaves: 1, entries: 0, rate: 90.0, seed: 1 });
        assert_eq!(r.lag_ms, vec![0]);
        assert_eq!(r.shipped, 0);
        assert_eq!(r.work_units(), 0);
    }

    #[test]
    fn each_slave_receives_every_record() {
        let r = run_benchmark(BenchConfig { slaves: 3, entries: 150, rate: 300.0, seed: 2 });
        assert_eq!(r.logged, 150);
        assert_eq!(r.shipped, 450);
        assert!(r.lag_max() < 1_000, "{:?}", r.lag_ms);
    }

    #[test]
    fn csv_shape() {
        let reports = sweep(0..3, 20, 100.0, 1);
        let csv = to_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[], 50), 0);
        assert_eq!(percentile(&[5], 50), 5);
        assert_eq!(percentile(&[4, 1, 3, 2], 50), 2);
        assert_eq!(percentile(&[4, 1, 3, 2], 100), 4);
    }

    #[test]
    fn exact_line_has_no_residual() {
        let pts: Vec<(f64, f64)> = (0..5).map(|x| (x as f64, 3.0 + 2.0 * x as f64)).collect();
        let (a, b, r) = fit_linear(&pts);
        assert!((a - 3.0).abs() < 1e-9 && (b - 2.0).abs() < 1e-9 && r < 1e-9);
    }
}
