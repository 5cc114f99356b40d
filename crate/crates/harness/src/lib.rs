//! Simulation and benchmark harness.

pub mod bench;
pub mod checks;
pub mod scenario;
pub mod sim;

pub use scenario::{run_scenario, run_scenario_text, Scenario, ScenarioError, ScenarioReport};
pub use bench::{run_benchmark, BenchConfig, BenchReport};
