//! Byte-exact request/response transcripts.
//!
//! Each `golden/*.req` file is one session against a fresh node. The
//! expected transcript lives next to it as `*.golden`. Set
//! `METACAT_BLESS=1` to rewrite the expected files after an intended change.

use std::path::{Path, PathBuf};

use metacat_core::node::{run_session, Node, NodeConfig};
use metacat_core::storage::Store;

fn transcript(requests: &str) -> (String, usize) {
    let mut node = Node::open(Store::memory(), &NodeConfig::new("N"), 1_000).unwrap();
    run_session(&mut node, requests, 1_000)
}

fn corpus() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "req"))
        .collect();
    files.sort();
    files
}

#[test]
fn transcripts_match_golden_files() {
    let bless = std::env::var_os("METACAT_BLESS").is_some();
    let mut exchanges = 0;
    let mut mismatched = Vec::new();
    for req in corpus() {
        let (got, n) = transcript(&std::fs::read_to_string(&req).unwrap());
        exchanges += n;
        let golden = req.with_extension("golden");
        if bless {
            std::fs::write(&golden, &got).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&golden).unwrap_or_default();
        if want != got {
            mismatched.push(golden.display().to_string());
        }
    }
    assert!(exchanges >= 50, "only {exchanges} exchanges");
    assert!(mismatched.is_empty(), "transcripts differ: {mismatched:?}");
}
