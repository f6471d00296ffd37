//! Command-line entry points: `peer` runs one daemon over TCP, `sim` runs
//! a scenario script on the simulated (or socket) network, and `qsq-bench`
//! compares materialize-vs-delegate shipping for a selective query.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use crate::daemon::{DaemonConfig, PeerDaemon, SocketSystem};
use crate::metrics;
use crate::qsq::{render_qsq_csv, run_qsq, QsqConfig, QsqMode};
use crate::scenario::{load_scenario, run_scenario, System};
use crate::sim::SimSystem;
use crate::transport::{DeliveryPolicy, SimNetConfig};

#[derive(Parser)]
#[command(name = "webdamlog", version, about = "Distributed datalog peers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one peer as a long-lived daemon on a TCP listener.
    Peer {
        /// Peer name (the `p` in `m@p`).
        #[arg(long)]
        name: String,
        /// Listen address, e.g. 127.0.0.1:7001.
        #[arg(long)]
        listen: SocketAddr,
        /// Program file loaded at startup.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Where to reach other peers, as peer=addr. Repeatable.
        #[arg(long = "connect", value_name = "PEER=ADDR")]
        connect: Vec<String>,
        /// Idle wake-up (and send retry) cadence.
        #[arg(long, default_value_t = 50)]
        stage_interval_ms: u64,
    },
    /// Run a scenario script and enforce its expectations.
    Sim {
        /// Scenario file (.wds).
        #[arg(long)]
        scenario: PathBuf,
        /// Simulator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Delivery policy: fifo-per-link, random-order, adversarial-delay.
        #[arg(long, default_value = "fifo-per-link")]
        policy: String,
        /// Write the per-stage metrics CSV here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Report wall-clock microseconds instead of deterministic cost.
        #[arg(long)]
        wall: bool,
        /// Run over real local sockets instead of the simulator.
        #[arg(long)]
        sockets: bool,
    },
    /// Measure tuples shipped and wall time for a selective remote query.
    QsqBench {
        /// Selectivity percentages, e.g. 1,10,50,100.
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100")]
        selectivity: Vec<u32>,
        /// materialize or delegate; both when omitted.
        #[arg(long)]
        mode: Option<String>,
        /// Rows per source relation.
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        /// Dataset seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn request_shutdown(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    // SAFETY: request_shutdown only touches an atomic flag, which is
    // async-signal-safe.
    unsafe {
        let handler = request_shutdown as extern "C" fn(libc::c_int);
        libc::signal(libc::SIGTERM, handler as usize);
        libc::signal(libc::SIGINT, handler as usize);
    }
}

fn parse_connect(pairs: &[String]) -> anyhow::Result<std::collections::BTreeMap<String, SocketAddr>> {
    let mut out = std::collections::BTreeMap::new();
    for pair in pairs {
        let (peer, addr) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--connect wants peer=addr, got `{pair}`"))?;
        let addr: SocketAddr =
            addr.parse().with_context(|| format!("bad address in --connect {pair}"))?;
        out.insert(peer.to_string(), addr);
    }
    Ok(out)
}

fn cmd_peer(
    name: String,
    listen: SocketAddr,
    program: Option<PathBuf>,
    connect: Vec<String>,
    stage_interval_ms: u64,
) -> anyhow::Result<()> {
    let peers = parse_connect(&connect)?;
    let listener =
        TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let daemon = PeerDaemon::spawn(
        DaemonConfig {
            name: name.clone(),
            peers,
            stage_interval: Duration::from_millis(stage_interval_ms.max(1)),
        },
        listener,
    )
    .context("starting daemon threads")?;
    if let Some(path) = program {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let summary = daemon
            .with_peer(move |p| p.load_program(&text))
            .map_err(|e| anyhow!("{}: {e}", path.display()))?;
        eprintln!(
            "{name}: loaded {} declarations, {} facts, {} rules",
            summary.decls,
            summary.facts,
            summary.rules.len()
        );
    }
    install_signal_handlers();
    eprintln!("{name}: listening on {}", daemon.addr());
    while !SHUTDOWN.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    eprintln!("{name}: shutting down, flushing outbound messages");
    daemon.shutdown();
    Ok(())
}

fn cmd_sim(
    scenario_path: PathBuf,
    seed: u64,
    policy: String,
    metrics_out: Option<PathBuf>,
    wall: bool,
    sockets: bool,
) -> anyhow::Result<()> {
    let policy = DeliveryPolicy::parse(&policy)
        .ok_or_else(|| anyhow!("unknown policy `{policy}`"))?;
    let scenario = load_scenario(&scenario_path)?;
    let mut socket_system;
    let mut sim_system;
    let system: &mut dyn System = if sockets {
        socket_system = SocketSystem::new();
        &mut socket_system
    } else {
        sim_system = SimSystem::new(SimNetConfig { seed, policy, max_delay_ticks: 4 });
        &mut sim_system
    };
    let outcome = run_scenario(&scenario, system)?;
    let reports = system.reports();
    println!(
        "scenario ok: {} expectation(s) passed, {} stage(s) across {} peer(s)",
        outcome.expectations,
        reports.len(),
        reports.iter().map(|(n, _)| n.clone()).collect::<std::collections::BTreeSet<_>>().len()
    );
    let rows = metrics::breakdown(&reports, wall);
    if !rows.is_empty() {
        print!("{}", metrics::render_percentages(&rows));
    }
    if let Some(path) = metrics_out {
        std::fs::write(&path, metrics::render_csv(&reports, wall))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("metrics written to {}", path.display());
    }
    Ok(())
}

fn cmd_qsq_bench(
    selectivity: Vec<u32>,
    mode: Option<String>,
    rows: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let modes: Vec<QsqMode> = match mode.as_deref() {
        None => vec![QsqMode::Materialize, QsqMode::Delegate],
        Some(m) => {
            vec![QsqMode::parse(m).ok_or_else(|| anyhow!("unknown mode `{m}`"))?]
        }
    };
    let config = QsqConfig { rows, seed };
    let mut results = Vec::new();
    for &pct in &selectivity {
        if pct > 100 {
            bail!("selectivity {pct} is not a percentage");
        }
        if !(rows * pct as usize).is_multiple_of(100) {
            bail!("rows {rows} x {pct}% is not a whole number of matches");
        }
        for &mode in &modes {
            results.push(run_qsq(&config, pct, mode)?);
        }
    }
    print!("{}", render_qsq_csv(&results));
    Ok(())
}

pub fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Peer { name, listen, program, connect, stage_interval_ms } => {
            cmd_peer(name, listen, program, connect, stage_interval_ms)
        }
        Command::Sim { scenario, seed, policy, metrics, wall, sockets } => {
            cmd_sim(scenario, seed, policy, metrics, wall, sockets)
        }
        Command::QsqBench { selectivity, mode, rows, seed } => {
            cmd_qsq_bench(selectivity, mode, rows, seed)
        }
    }
}

pub fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
