//! A master and one replica driven by hand, with arbitrary interleavings of
//! writes, message loss, replica restarts and time steps. However the
//! schedule goes, once messages flow again the replica must hold exactly
//! the filtered view of the master.

use metacat_core::catalog;
use metacat_core::condition::Condition;
use metacat_core::error::Error;
use metacat_core::node::{Node, NodeConfig, Outcome};
use metacat_core::path::Path;
use metacat_core::protocol::{parse_request, Response};
use metacat_core::replication::slave::ReplicaConfig;
use metacat_core::storage::Store;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Write(u8, u8),
    Deliver,
    Lose,
    RestartReplica,
    Advance(u64),
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => (0u8..8, 0u8..12).prop_map(|(kind, k)| Step::Write(kind, k)),
        6 => Just(Step::Deliver),
        1 => Just(Step::Lose),
        1 => Just(Step::RestartReplica),
        2 => (1u64..3_000).prop_map(Step::Advance),
    ]
}

fn write_line(kind: u8, k: u8) -> String {
    match kind {
        0 | 1 => format!("ADDENTRY /exp/e{k} {k} s{k}"),
        2 => format!("SETATTR /exp/e{k} n {}", (k * 7) % 10),
        3 => format!("DELENTRY /exp/e{k}"),
        4 => format!("CREATEDIR /exp/sub{} n:INT", k % 3),
        5 => format!("ADDENTRY /exp/sub{}/x{k} {k}", k % 3),
        6 => format!("ADDENTRY /other/o{k} {k}"),
        _ => "ADDATTR /exp extra:INT".to_string(),
    }
}

struct Pair {
    master: Node,
    replica_store: Store,
    replica_cfg: NodeConfig,
    replica: Node,
    now: u64,
}

impl Pair {
    fn new(cond: Option<&str>) -> Pair {
        let mut master = Node::open(Store::memory(), &NodeConfig::new("M"), 0).unwrap();
        for line in ["CREATEDIR /exp n:INT s:STRING", "CREATEDIR /other n:INT", "ADDENTRY /exp/seed 1 a"] {
            master.execute(&parse_request(line).unwrap(), 0).unwrap();
        }
        let mut cfg = NodeConfig::new("S");
        let mut r = ReplicaConfig::new("s", Path::parse("/exp").unwrap(), "M", "M");
        r.cond = cond.map(str::to_string);
        r.batch = 4;
        r.ack_every = 3;
        cfg.replicas.push(r);
        let replica_store = Store::memory();
        let replica = Node::open(replica_store.clone(), &cfg, 0).unwrap();
        Pair { master, replica_store, replica_cfg: cfg, replica, now: 0 }
    }

    /// Sends whatever the replica wants sent; `lose` drops the replies.
    fn exchange(&mut self, lose: bool) {
        for out in self.replica.poll_replication(self.now) {
            let result = match self.master.handle(&out.request, None, self.now) {
                Outcome::Reply(Response::Ok(rows)) => Ok(rows),
                Outcome::Reply(Response::Err { code, message }) => Err(Error::from_wire(code, &message)),
                Outcome::Forward { .. } => panic!("replication requests are never forwarded"),
            };
            let result = if lose { Err(Error::MasterUnreachable) } else { result };
            self.replica.replication_response(out.replica, self.now, result);
        }
    }

    fn advance(&mut self, ms: u64) {
        self.now += ms;
        self.master.tick(self.now).unwrap();
    }

    fn settled(&self) -> bool {
        let wm = self.master.store().log_watermark();
        let r = &self.replica.replicas()[0];
        r.is_bootstrapped() && r.next_seq() > wm && r.acked() == wm
    }
}

fn run(steps: &[Step], cond: Option<&str>) -> Result<(), TestCaseError> {
    let mut pair = Pair::new(cond);
    for step in steps {
        match step {
            Step::Write(kind, k) => {
                let _ = pair.master.execute(&parse_request(&write_line(*kind, *k)).unwrap(), pair.now);
            }
            Step::Deliver => pair.exchange(false),
            Step::Lose => pair.exchange(true),
            Step::RestartReplica => {
                pair.replica = Node::open(pair.replica_store.clone(), &pair.replica_cfg, pair.now).unwrap();
            }
            Step::Advance(ms) => pair.advance(*ms),
        }
        let r = &pair.replica.replicas()[0];
        prop_assert!(r.acked() <= pair.master.store().log_watermark());
    }
    // Quiet period: every message gets through.
    for _ in 0..2_000 {
        if pair.settled() {
            break;
        }
        pair.advance(100);
        pair.exchange(false);
    }
    prop_assert!(pair.settled(), "replica did not catch up");
    let root = Path::parse("/exp").unwrap();
    let cond = cond.map(|c| Condition::parse(c).unwrap());
    let want = catalog::dump_lines(&pair.master.store().open_snapshot_view(), &root, cond.as_ref()).unwrap();
    let got = catalog::dump_lines(&pair.replica_store.open_snapshot_view(), &root, None).unwrap();
    prop_assert_eq!(got, want);
    let outside = catalog::dump_lines(&pair.replica_store.open_snapshot_view(), &Path::parse("/other").unwrap(), None);
    prop_assert_eq!(outside.map_err(|e| e.code()), Err(404));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn replica_converges_to_the_subtree(steps in proptest::collection::vec(arb_step(), 0..120)) {
        run(&steps, None)?;
    }

    #[test]
    fn filtered_replica_converges_to_the_filtered_view(steps in proptest::collection::vec(arb_step(), 0..120)) {
        run(&steps, Some("n > 3"))?;
    }
}

#[test]
fn writes_during_snapshot_transfer_are_not_lost() {
    let mut pair = Pair::new(None);
    for k in 0..12 {
        pair.master.execute(&parse_request(&write_line(0, k)).unwrap(), 0).unwrap();
    }
    // Subscribe and fetch the snapshot, then write before any shipping.
    pair.exchange(false);
    pair.exchange(false);
    for k in 0..12 {
        pair.master.execute(&parse_request(&write_line(2, k)).unwrap(), 1).unwrap();
    }
    for _ in 0..200 {
        if pair.settled() {
            break;
        }
        pair.advance(100);
        pair.exchange(false);
    }
    assert!(pair.settled());
    let root = Path::parse("/exp").unwrap();
    assert_eq!(
        catalog::dump_lines(&pair.replica_store.open_snapshot_view(), &root, None).unwrap(),
        catalog::dump_lines(&pair.master.store().open_snapshot_view(), &root, None).unwrap()
    );
}
