//! Command-line front end: generate and check quorum tables, run scenario
//! files, enumerate delivery interleavings, and replay the bundled
//! executions against their golden records.
//!
//! Exit codes: 0 on success, 1 when a run, check or verdict comes back
//! negative (or an input fails to load), 2 for usage errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Parser, Subcommand};
use quorum_mutex::explorer::{self, DeadlockVerdict, ExploreConfig, SafetyVerdict};
use quorum_mutex::fixtures;
use quorum_mutex::quorum::build_quorums;
use quorum_mutex::simnet::{self, DEFAULT_STEP_LIMIT};
use quorum_mutex::{Algo, Outcome, ProcessId, QuorumSystem, Scenario};

#[derive(Parser)]
#[command(
    name = "quorum-mutex",
    version,
    about = "Quorum-based mutual exclusion toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a quorum system for n = k(k-1)+1 processes.
    QuorumGen {
        /// Number of processes; must satisfy n = k(k-1)+1 for some integer k.
        #[arg(long)]
        n: u32,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the four structural conditions of a quorum table.
    QuorumCheck {
        /// Quorum table to check.
        file: PathBuf,
    },
    /// Run a scenario file to completion and report how it ended.
    Run {
        /// Scenario file; its quorum table resolves relative to it.
        #[arg(long)]
        scenario: PathBuf,
        /// Write the delivery trace here as JSONL.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Write per-request statistics here as CSV.
        #[arg(long)]
        stats_out: Option<PathBuf>,
        /// Override the seed of a random delay model.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enumerate delivery interleavings and check safety and deadlock.
    Explore {
        /// Quorum table the processes run under.
        #[arg(long)]
        quorums: PathBuf,
        /// Protocol to explore: ring, maekawa-basic or maekawa-full.
        #[arg(long, value_parser = Algo::from_str)]
        algo: Algo,
        /// Comma-separated ids that request at the initial state, e.g. 2,9,13.
        #[arg(long)]
        requesters: String,
        /// Longest path followed from the initial state.
        #[arg(long)]
        depth: Option<u32>,
        /// Cap on distinct states before the frontier is truncated.
        #[arg(long)]
        states: Option<u64>,
        /// Also write the verdict here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a bundled execution and check it against its golden record.
    ReplayPaper {
        /// One of: section3b, fig4-basic, fig4-full, single-request.
        name: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::QuorumGen { n, out } => quorum_gen(n, out),
        Command::QuorumCheck { file } => quorum_check(&file),
        Command::Run {
            scenario,
            trace_out,
            stats_out,
            seed,
        } => run(&scenario, trace_out, stats_out, seed),
        Command::Explore {
            quorums,
            algo,
            requesters,
            depth,
            states,
            out,
        } => explore(&quorums, algo, &requesters, depth, states, out),
        Command::ReplayPaper { name } => replay_paper(&name),
    }
}

fn quorum_gen(n: u32, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let qs =
        build_quorums(n).with_context(|| format!("cannot build a quorum system for n = {n}"))?;
    match out {
        Some(path) => {
            qs.save(&path)
                .with_context(|| format!("cannot write {}", path.display()))?;
            println!(
                "wrote {} groups of size {} to {}",
                qs.n(),
                qs.k(),
                path.display()
            );
        }
        None => print!("{}", qs.to_json_string()),
    }
    Ok(ExitCode::SUCCESS)
}

fn quorum_check(file: &PathBuf) -> anyhow::Result<ExitCode> {
    let qs = QuorumSystem::load(file).with_context(|| format!("cannot load {}", file.display()))?;
    let report = qs.validate();
    print!("{report}");
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(
    scenario_path: &PathBuf,
    trace_out: Option<PathBuf>,
    stats_out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<ExitCode> {
    let (mut scenario, qs) = Scenario::load(scenario_path)
        .with_context(|| format!("cannot load {}", scenario_path.display()))?;
    if let Some(seed) = seed {
        scenario.override_seed(seed);
    }
    let report = simnet::run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT)?;

    if let Some(path) = &trace_out {
        fs::write(path, simnet::trace_to_jsonl(&report.trace))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &stats_out {
        fs::write(path, report.stats.to_csv())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }

    let completed = report
        .stats
        .per_request
        .iter()
        .filter(|r| r.cs_exit_tick.is_some())
        .count();
    println!(
        "requests: {}, completed: {}",
        report.stats.per_request.len(),
        completed
    );
    for row in &report.stats.per_request {
        println!(
            "node {}: requested t{}, entered {}, exited {}, messages {}, peak queue {}",
            row.origin,
            row.request_tick,
            row.cs_enter_tick
                .map(|t| format!("t{t}"))
                .unwrap_or_else(|| "never".into()),
            row.cs_exit_tick
                .map(|t| format!("t{t}"))
                .unwrap_or_else(|| "never".into()),
            row.messages_attributed,
            row.max_wait_queue,
        );
    }
    if !report.stats.totals_by_kind.is_empty() {
        let kinds: Vec<String> = report
            .stats
            .totals_by_kind
            .iter()
            .map(|(kind, count)| format!("{kind}={count}"))
            .collect();
        println!("messages by kind: {}", kinds.join(" "));
    }

    match &report.outcome {
        Outcome::Quiescent => {
            println!("outcome: quiescent");
            Ok(ExitCode::SUCCESS)
        }
        Outcome::QuiescenceWithWaiters { wait_for } => {
            println!("outcome: quiescence with waiters (deadlock)");
            for (waiter, holder) in wait_for {
                println!("  {waiter} waits for {holder}");
            }
            Ok(ExitCode::FAILURE)
        }
        Outcome::StepLimitExceeded => {
            println!("outcome: step limit exceeded");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn parse_requesters(text: &str) -> anyhow::Result<Vec<ProcessId>> {
    let ids: Vec<ProcessId> = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map(ProcessId)
                .with_context(|| format!("bad requester id {part:?}"))
        })
        .collect::<anyhow::Result<_>>()?;
    anyhow::ensure!(!ids.is_empty(), "at least one requester is required");
    Ok(ids)
}

fn explore(
    quorums: &PathBuf,
    algo: Algo,
    requesters: &str,
    depth: Option<u32>,
    states: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let qs = QuorumSystem::load(quorums)
        .with_context(|| format!("cannot load {}", quorums.display()))?;
    let mut cfg = ExploreConfig::new(algo, parse_requesters(requesters)?);
    if let Some(depth) = depth {
        cfg.max_depth = depth;
    }
    if let Some(states) = states {
        cfg.max_states = states;
    }
    let report = explorer::explore(&qs, &cfg)?;
    let rendered = serde_json::to_string_pretty(&report.verdict)?;
    println!("{rendered}");
    if let Some(path) = out {
        fs::write(&path, format!("{rendered}\n"))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    let clean = matches!(report.verdict.safety, SafetyVerdict::Ok)
        && matches!(report.verdict.deadlock, DeadlockVerdict::NoneFound);
    Ok(if clean {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn replay_paper(name: &str) -> anyhow::Result<ExitCode> {
    let replay = fixtures::replay_paper(name)?;
    println!("replaying {}", replay.id);

    let trace_path = PathBuf::from(format!("replay-{}.trace.jsonl", replay.id));
    let stats_path = PathBuf::from(format!("replay-{}.stats.csv", replay.id));
    fs::write(&trace_path, simnet::trace_to_jsonl(&replay.report.trace))
        .with_context(|| format!("cannot write {}", trace_path.display()))?;
    fs::write(&stats_path, replay.report.stats.to_csv())
        .with_context(|| format!("cannot write {}", stats_path.display()))?;
    println!(
        "wrote {} and {}",
        trace_path.display(),
        stats_path.display()
    );

    for check in &replay.checks {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", check.name, check.detail);
    }
    if replay.all_passed() {
        println!("replay OK ({} checks)", replay.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("replay FAILED");
        Ok(ExitCode::FAILURE)
    }
}
