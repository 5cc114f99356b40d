//! `metacat` command line: run a server, talk to one, replay simulator
//! scenarios, run the replication benchmark, dump and restore stores.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use metacat_core::catalog::{Catalog, Command};
use metacat_core::config::ServeConfig;
use metacat_core::net::{Client, Server, TcpTransport};
use metacat_core::node::Node;
use metacat_core::path::Path;
use metacat_core::storage::{FileOptions, Store};
use metacat_harness::bench::{sweep, to_csv, to_table};
use metacat_harness::run_scenario_text;

#[derive(Parser)]
#[command(name = "metacat", version, about = "Hierarchical metadata catalog with replication")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve a node described by a TOML config file.
    Serve { config: PathBuf },
    /// Send request lines from stdin to a server and print the responses.
    Client {
        #[arg(default_value = "127.0.0.1:7000")]
        addr: String,
        /// Send this request instead of reading stdin. Repeatable.
        #[arg(short, long = "exec")]
        exec: Vec<String>,
    },
    /// Replay a simulator scenario and print its report.
    Sim {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Replication benchmark sweep over slave counts.
    Bench {
        /// A count (`4`) or inclusive range (`0..10`).
        #[arg(long, default_value = "0..10")]
        slaves: String,
        #[arg(long, default_value_t = 10_000)]
        entries: u64,
        /// Inserts per second.
        #[arg(long, default_value_t = 90.0)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a subtree of a file store as replayable commands.
    Dump {
        storage: PathBuf,
        #[arg(default_value = "/")]
        root: String,
    },
    /// Apply a dump file to a file store, creating it if needed.
    Restore { storage: PathBuf, file: PathBuf },
}

fn parse_range(text: &str) -> anyhow::Result<std::ops::RangeInclusive<usize>> {
    let parsed = match text.split_once("..") {
        Some((a, b)) => (a.trim().parse()?, b.trim_start_matches('=').trim().parse()?),
        None => {
            let n = text.trim().parse()?;
            (n, n)
        }
    };
    if parsed.0 > parsed.1 {
        bail!("empty slave range {text}");
    }
    Ok(parsed.0..=parsed.1)
}

fn open_store(dir: &std::path::Path, sync: bool) -> metacat_core::Result<Store> {
    Store::open_file(dir, FileOptions { sync, ..FileOptions::default() })
}

fn serve(config: &std::path::Path) -> anyhow::Result<()> {
    let cfg = ServeConfig::load(config)?;
    let store = match &cfg.storage {
        Some(dir) => open_store(dir, cfg.sync)?,
        None => Store::memory(),
    };
    let node = Node::open(store, &cfg.node_config()?, metacat_core::net::wall_clock_ms())?;
    let transport = Arc::new(TcpTransport::new(Duration::from_secs(2)));
    let server = Server::start(&cfg.listen, node, transport).with_context(|| format!("listening on {}", cfg.listen))?;
    println!("{} listening on {}", cfg.id, server.addr);
    std::io::stdout().flush()?;
    loop {
        std::thread::park();
    }
}

fn client(addr: &str, exec: &[String]) -> anyhow::Result<bool> {
    let mut conn = Client::connect(addr, Duration::from_secs(5)).with_context(|| format!("connecting to {addr}"))?;
    let mut all_ok = true;
    let mut out = std::io::stdout().lock();
    let mut send = |line: &str| -> anyhow::Result<()> {
        if line.trim().is_empty() {
            return Ok(());
        }
        let resp = conn.send_line(line)?;
        all_ok &= resp.is_ok();
        out.write_all(resp.encode().as_bytes())?;
        out.flush()?;
        Ok(())
    };
    if exec.is_empty() {
        for line in std::io::stdin().lock().lines() {
            send(&line?)?;
        }
    } else {
        for line in exec {
            send(line)?;
        }
    }
    Ok(all_ok)
}

fn dump(storage: &std::path::Path, root: &str) -> anyhow::Result<()> {
    if !storage.is_dir() {
        bail!("{} is not a store directory", storage.display());
    }
    let catalog = Catalog::new(open_store(storage, true)?);
    let mut out = std::io::stdout().lock();
    for line in catalog.dump_lines(root)? {
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn restore(storage: &std::path::Path, file: &std::path::Path) -> anyhow::Result<usize> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let catalog = Catalog::new(open_store(storage, true)?);
    let mut applied = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cmd = Command::parse_line(line).with_context(|| format!("line {}", i + 1))?;
        catalog.execute(&cmd).with_context(|| format!("line {}: {line}", i + 1))?;
        applied += 1;
    }
    Ok(applied)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Cmd::Serve { config } => serve(&config).map(|_| true),
        Cmd::Client { addr, exec } => client(&addr, &exec),
        Cmd::Sim { file, seed } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let report = run_scenario_text(&text, seed)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
        Cmd::Bench { slaves, entries, rate, seed, csv } => {
            if rate.is_nan() || rate <= 0.0 {
                bail!("rate must be positive");
            }
            let reports = sweep(parse_range(&slaves)?, entries, rate, seed);
            print!("{}", to_table(&reports));
            if let Some(path) = csv {
                std::fs::write(&path, to_csv(&reports)).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(true)
        }
        Cmd::Dump { storage, root } => {
            Path::parse(&root)?;
            dump(&storage, &root).map(|_| true)
        }
        Cmd::Restore { storage, file } => {
            let n = restore(&storage, &file)?;
            eprintln!("applied {n} commands");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("METACAT_LOG"))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            match e.chain().find_map(|c| c.downcast_ref::<metacat_core::Error>()) {
                Some(err) => eprintln!("ERR {} {e:#}", err.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_range;

    #[test]
    fn slave_ranges() {
        assert_eq!(parse_range("4").unwrap(), 4..=4);
        assert_eq!(parse_range("0..10").unwrap(), 0..=10);
        assert_eq!(parse_range("2..=3").unwrap(), 2..=3);
        assert!(parse_range("5..1").is_err());
        assert!(parse_range("x").is_err());
    }
}
