// SPDX-License-Identifier: Apache-2.0

//! `venue-act`: validate, run and replay contact-tracing scenarios.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use venue_act_core::actors::TimePolicy;
use venue_act_sim::gen::{population, PopulationConfig};
use venue_act_sim::scenario::{event_offsets, line_of};
use venue_act_sim::{
    collect_metrics, run_protocol, validate, MetricFlags, Metrics, Protocol, Scenario, SimError,
    SimParams, SimulationTrace,
};

#[derive(Parser)]
#[command(name = "venue-act", version, about = "Venue check-in contact tracing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write metrics, event logs and a comparison table.
    Run(RunArgs),
    /// Check a scenario file without running it.
    Validate {
        scenario: PathBuf,
    },
    /// Verify an event log and recompute its metrics.
    Replay(ReplayArgs),
    /// Write a random population scenario.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Venue,
    Dp3t,
    Tracetogether,
    All,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Defaults to the protocol named in the scenario.
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "VENUE_ACT_OUT", default_value = "venue-act-out")]
    out: PathBuf,
    /// Parallel runs; each run has its own state.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    params: ParamFlags,
}

/// One flag per `params` key; a flag beats the value in the file.
#[derive(Args, Default)]
struct ParamFlags {
    #[arg(long)]
    epoch_length: Option<u64>,
    #[arg(long)]
    window_length: Option<u64>,
    #[arg(long)]
    bloom_fpr: Option<f64>,
    #[arg(long)]
    retention_days: Option<u32>,
    #[arg(long)]
    exposure_threshold: Option<u64>,
    #[arg(long)]
    proximity_distance: Option<f64>,
    #[arg(long)]
    digest_interval: Option<i64>,
    #[arg(long)]
    trace_interval: Option<i64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    arrival_time_extension: Option<bool>,
    #[arg(long)]
    clock_tolerance: Option<i64>,
    #[arg(long)]
    exclusion_tolerance: Option<i64>,
    #[arg(long)]
    min_trace_stay: Option<i64>,
    /// `same_date` or `within_hours:N`.
    #[arg(long, value_parser = parse_time_policy)]
    time_policy: Option<TimePolicy>,
    #[arg(long)]
    dp3t_epochs_per_day: Option<usize>,
}

impl ParamFlags {
    fn apply(&self, p: &mut SimParams) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { p.$f = v; } )*};
        }
        set!(
            epoch_length,
            window_length,
            bloom_fpr,
            retention_days,
            exposure_threshold,
            proximity_distance,
            digest_interval,
            trace_interval,
            arrival_time_extension,
            clock_tolerance,
            exclusion_tolerance,
            min_trace_stay,
            time_policy,
            dp3t_epochs_per_day
        );
    }
}

fn parse_time_policy(s: &str) -> Result<TimePolicy, String> {
    match s.split_once(':') {
        None if s == "same_date" => Ok(TimePolicy::SameDate),
        Some(("within_hours", h)) => h
            .parse()
            .map(TimePolicy::WithinHours)
            .map_err(|e| format!("bad hour count: {e}")),
        _ => Err("expected same_date or within_hours:N".into()),
    }
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    #[arg(long)]
    exposure_threshold: Option<u64>,
    #[arg(long)]
    proximity_distance: Option<f64>,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON population config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    venues: Option<usize>,
    #[arg(long)]
    days: Option<u32>,
    #[arg(long)]
    infected: Option<usize>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Write the scenario here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Input that failed checks; maps to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.trim_end())
    }
}

impl std::error::Error for Invalid {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Replay(a) => cmd_replay(&a),
        Command::Generate(a) => cmd_generate(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Invalid>() {
            Some(inv) => {
                eprintln!("{inv}");
                ExitCode::from(1)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}

/// Parses and validates, rendering every problem as `path:line: message`.
fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.display();
    let scenario = Scenario::from_json(&text).map_err(|e| {
        Invalid(format!("{name}:{}:{}: {e}", e.line(), e.column()))
    })?;
    check(&scenario, &text, &name.to_string())?;
    Ok(scenario)
}

fn check(s: &Scenario, text: &str, name: &str) -> Result<()> {
    let diags = validate(s);
    if diags.is_empty() {
        return Ok(());
    }
    let offsets = event_offsets(text);
    let mut msg = String::new();
    for d in &diags {
        let line = match (d.event, &offsets) {
            (Some(i), Some(o)) if i < o.len() => line_of(text, o[i]),
            _ => 1,
        };
        let _ = writeln!(msg, "{name}:{line}: {d}");
    }
    Err(Invalid(msg).into())
}

fn cmd_validate(path: &Path) -> Result<()> {
    load_scenario(path)?;
    println!("ok");
    Ok(())
}

impl ProtocolArg {
    fn single(self) -> Option<Protocol> {
        match self {
            ProtocolArg::Venue => Some(Protocol::Venue),
            ProtocolArg::Dp3t => Some(Protocol::Dp3t),
            ProtocolArg::Tracetogether => Some(Protocol::TraceTogether),
            ProtocolArg::All => None,
        }
    }
}

fn protocols(sel: Option<ProtocolArg>, s: &Scenario) -> Vec<Protocol> {
    match sel {
        None => vec![s.protocol],
        Some(p) => p.single().map_or(Protocol::ALL.to_vec(), |p| vec![p]),
    }
}

struct Outcome {
    trace: SimulationTrace,
    metrics: Metrics,
}

/// Runs every job on `jobs` threads. Results keep input order.
fn run_all(jobs: &[(Scenario, Protocol)], seed: u64, threads: usize) -> Result<Vec<Outcome>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Outcome, SimError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|sc| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((s, p)) = jobs.get(i) else { break };
                let r = run_protocol(s, *p, seed).map(|trace| {
                    let metrics = collect_metrics(&trace, &MetricFlags::default());
                    Outcome { trace, metrics }
                });
                slots.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| match r.expect("every job ran") {
            Ok(o) => Ok(o),
            Err(SimError::Invalid(d)) => Err(Invalid(
                d.iter().map(|d| format!("{d}\n")).collect::<String>(),
            )
            .into()),
            Err(e) => Err(anyhow!(e)),
        })
        .collect()
}

#[derive(Serialize)]
struct Row {
    protocol: Protocol,
    seed: u64,
    users: usize,
    infected: usize,
    truth_on_premise: usize,
    truth_off_premise: usize,
    notified: usize,
    true_positives: usize,
    false_positives: usize,
    recall_on_premise: Option<f64>,
    recall_off_premise: Option<f64>,
    precision: Option<f64>,
    data_minimisation_violations: usize,
    bystander_leaks: usize,
    reports_accepted: usize,
    reports_rejected: usize,
    linkage_duplicates: usize,
    linked_days_max: u32,
    duty_cycle_mean: f64,
    /// Pairs at risk only because of the adversary; empty without one.
    adversary_additional_at_risk: Option<usize>,
}

impl Row {
    fn new(m: &Metrics, clean: Option<&Metrics>) -> Self {
        let accepted = m.reports.get("accepted").copied().unwrap_or(0);
        let dup = m.reports.get("duplicate").copied().unwrap_or(0);
        let total: usize = m.reports.values().sum();
        Self {
            protocol: m.protocol,
            seed: m.seed,
            users: m.users,
            infected: m.infected,
            truth_on_premise: m.truth_on_premise,
            truth_off_premise: m.truth_off_premise,
            notified: m.notified,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            recall_on_premise: m.recall_on_premise,
            recall_off_premise: m.recall_off_premise,
            precision: m.precision,
            data_minimisation_violations: m.data_minimisation_violations,
            bystander_leaks: m.bystander_leaks,
            reports_accepted: accepted,
            reports_rejected: total - accepted - dup,
            linkage_duplicates: m.linkage_duplicates,
            linked_days_max: m.linked_days_max,
            duty_cycle_mean: m.duty_cycle_mean,
            adversary_additional_at_risk: clean.map(|c| m.additional_at_risk(c).len()),
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scenario)
        .with_context(|| format!("reading {}", a.scenario.display()))?;
    let name = a.scenario.display().to_string();
    let mut scenario = Scenario::from_json(&text)
        .map_err(|e| Invalid(format!("{name}:{}:{}: {e}", e.line(), e.column())))?;
    a.params.apply(&mut scenario.params);
    check(&scenario, &text, &name)?;

    let protos = protocols(a.protocol, &scenario);
    let adversarial = scenario.has_adversaries();
    let clean = scenario.without_adversaries();
    let mut jobs: Vec<(Scenario, Protocol)> = protos.iter().map(|p| (scenario.clone(), *p)).collect();
    if adversarial {
        jobs.extend(protos.iter().map(|p| (clean.clone(), *p)));
    }
    let results = run_all(&jobs, a.seed, a.jobs)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut table = csv::Writer::from_path(a.out.join("comparison.csv"))?;
    for (k, p) in protos.iter().enumerate() {
        let dir = if protos.len() == 1 { a.out.clone() } else { a.out.join(p.as_str()) };
        fs::create_dir_all(&dir)?;
        let o = &results[k];
        fs::write(dir.join("metrics.json"), o.metrics.to_json())?;
        fs::write(dir.join("events.ndjson"), o.trace.to_ndjson())?;
        let baseline = adversarial.then(|| &results[protos.len() + k].metrics);
        table.serialize(Row::new(&o.metrics, baseline))?;
        println!(
            "{p}: notified {} of {} exposed, {} false positives -> {}",
            o.metrics.true_positives,
            o.metrics.truth_on_premise + o.metrics.truth_off_premise,
            o.metrics.false_positives,
            dir.display()
        );
    }
    table.flush()?;
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let trace = SimulationTrace::from_ndjson(&text)
        .map_err(|e| Invalid(format!("{}: integrity check failed: {e}", a.log.display())))?;
    let flags = MetricFlags {
        exposure_threshold: a.exposure_threshold,
        proximity_distance: a.proximity_distance,
    };
    let json = collect_metrics(&trace, &flags).to_json();
    match &a.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg: PopulationConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Invalid(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column())))?
        }
        None => PopulationConfig::default(),
    };
    if let Some(v) = a.users {
        cfg.users = v;
    }
    if let Some(v) = a.venues {
        cfg.venues = v;
    }
    if let Some(v) = a.days {
        cfg.days = v;
    }
    if let Some(v) = a.infected {
        cfg.infected = v;
    }
    if let Some(p) = a.protocol {
        cfg.protocol = p
            .single()
            .ok_or_else(|| Invalid("generate needs a single protocol".into()))?;
    }
    let s = population(&cfg, a.seed);
    let text = s.to_json();
    check(&s, &text, "generated")?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
