//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Benchmark size can be reduced with METACAT_BENCH_ENTRIES and
//! METACAT_BENCH_RATE for quick local runs.

use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;

use metacat_harness::checks::{self, CheckOutcome};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> ExitCode {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let scenarios = here.join("scenarios");
    let golden = here.join("../core/tests/golden");
    let entries: u64 = env_or("METACAT_BENCH_ENTRIES", 10_000);
    let rate: f64 = env_or("METACAT_BENCH_RATE", 90.0);

    type Job = Box<dyn FnOnce() -> CheckOutcome + Send>;
    let criteria: Vec<(&str, Job)> = vec![
        ("replica convergence", {
            let dir = scenarios.clone();
            Box::new(move || checks::convergence_suite(&dir, &[1, 7, 1234]))
        }),
        ("crash consistency", Box::new(|| checks::crash_injection(1000))),
        ("scalability", Box::new(move || checks::benchmark_linearity(entries, rate, 10))),
        ("filter equivalence", Box::new(|| checks::filter_equivalence(100, 11))),
        ("log garbage collection", Box::new(|| checks::gc_schedules(60, 5))),
        ("subscription lifecycle", {
            let dir = scenarios.clone();
            Box::new(move || checks::subscription_lifecycle(&dir))
        }),
        ("read availability", Box::new(|| checks::read_availability(100, 100, 3))),
        ("federation", {
            let dir = scenarios.clone();
            Box::new(move || checks::federation(&dir, 9))
        }),
        ("protocol conformance", Box::new(move || checks::protocol(&golden, 10_000, 21))),
    ];

    let handles: Vec<_> = criteria
        .into_iter()
        .map(|(name, job)| (name, thread::spawn(move || checks::timed(job))))
        .collect();
    let mut failed = 0;
    for (i, (name, handle)) in handles.into_iter().enumerate() {
        let (outcome, took) = match handle.join() {
            Ok(r) => r,
            Err(_) => (Err("check panicked".to_string()), Default::default()),
        };
        match outcome {
            Ok(summary) => println!("criterion {} {name}: PASS ({:.1}s) {summary}", i + 1, took.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("criterion {} {name}: FAIL {reason}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
