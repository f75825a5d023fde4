//! `polifed`: drive policy-enforced federated learning from the command
//! line. One process hosts either the coordinator (`serve`) or a single
//! edge node (`edge`); `submit` talks to a running coordinator; `simulate`
//! runs a whole scenario in process; `policy check` steps a policy against
//! a trace; `report` reads a finished run directory.
//!
//! Exit codes: 0 on success, 3 when a run or trace is rejected by a budget
//! or policy gate, 1 otherwise (with a machine-readable JSON object on
//! stderr).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use polifed::dpp::{Payload, RestrictedProgram, Site};
use polifed::fl::codec;
use polifed::net::wire::{dpp_from_wire, FinalBody, SubmitBody};
use polifed::net::{
    register_with_coordinator, spawn_coordinator, spawn_edge, submit as submit_to_coordinator,
    NetError, OnSubmit,
};
use polifed::policy::{parse_policy, CommandInvocation, MacroTable};
use polifed::run::{self, RunError, ScenarioConfig};

const EXIT_REJECTED: i32 = 3;

#[derive(Parser)]
#[command(
    name = "polifed",
    version,
    about = "Policy-enforced federated learning over synthetic workloads"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Host the coordinator: accept node registrations and token-checked
    /// scenario submissions.
    Serve(ServeArgs),
    /// Host one edge node and register it with the coordinator.
    Edge(EdgeArgs),
    /// Submit a scenario to a running coordinator and save the released
    /// model.
    Submit(SubmitArgs),
    /// Run a scenario fully in process and write its run directory.
    Simulate(SimulateArgs),
    /// Policy utilities.
    Policy(PolicyArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// JSON file with `tokens` (service name to token) and an optional
    /// `out-dir` for per-submission run directories.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
}

#[derive(Args)]
struct EdgeArgs {
    /// JSON file with `scenario` (inline object or path), `user-index`,
    /// and an optional `bind` address.
    #[arg(long)]
    config: PathBuf,
    /// Coordinator address, `host:port`.
    #[arg(long)]
    coordinator: String,
}

#[derive(Args)]
struct SubmitArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Service token; falls back to the POLIFED_TOKEN environment
    /// variable.
    #[arg(long)]
    token: Option<String>,
    /// Coordinator address, `host:port`.
    #[arg(long)]
    coordinator: String,
    /// Where to save the released model.
    #[arg(long, default_value = "final.model")]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Run directory; overrides the scenario's `out-dir`, defaults to
    /// `./run`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PolicyArgs {
    #[command(subcommand)]
    cmd: PolicyCmd,
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Step a policy through a comma-separated command trace, printing the
    /// residual policy after each step and the final accept/reject.
    Check {
        /// Policy text, e.g. `get_data . runFL . return`.
        #[arg(long)]
        policy: String,
        /// Comma-separated bare command names, e.g. `get_data,runFL,return`.
        #[arg(long)]
        trace: String,
        /// Expand macros such as `runFL` before stepping.
        #[arg(long)]
        expand: bool,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory holding `report.json`.
    #[arg(long)]
    run: PathBuf,
    /// Print `metrics` or `timings` CSV instead of the JSON report.
    #[arg(long)]
    csv: Option<String>,
}

/// Machine-readable failure: `code` mirrors the wire error codes.
struct CliError {
    code: String,
    detail: String,
    exit: i32,
}

impl CliError {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            detail: detail.into(),
            exit: 1,
        }
    }

    fn rejected(detail: impl Into<String>) -> Self {
        CliError {
            code: "rejected".into(),
            detail: detail.into(),
            exit: EXIT_REJECTED,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("bad_json", e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match run_cmd(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"code": e.code, "detail": e.detail})
            );
            std::process::exit(e.exit);
        }
    }
}

fn run_cmd(cmd: Cmd) -> Result<i32, CliError> {
    match cmd {
        Cmd::Serve(args) => serve(args),
        Cmd::Edge(args) => edge(args),
        Cmd::Submit(args) => submit(args),
        Cmd::Simulate(args) => simulate(args),
        Cmd::Policy(args) => match args.cmd {
            PolicyCmd::Check {
                policy,
                trace,
                expand,
            } => policy_check(&policy, &trace, expand),
        },
        Cmd::Report(args) => report(args),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ServeConfig {
    /// Service name to token; only listed services may submit.
    tokens: BTreeMap<String, String>,
    /// Per-submission run directories land here when set.
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn serve(args: ServeArgs) -> Result<i32, CliError> {
    let config: ServeConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    let out_dir = config.out_dir.clone();
    let counter = Arc::new(AtomicU64::new(0));
    let on_submit: OnSubmit = Arc::new(move |sub, roster| {
        match handle_submission(&sub, &roster, out_dir.as_deref(), &counter) {
            Ok(body) => body,
            Err(e) => FinalBody::Rejection(format!("{}: {}", e.code(), e)),
        }
    });
    let handle = spawn_coordinator(
        &format!("{}:{}", args.bind, args.port),
        config.tokens,
        on_submit,
    )?;
    println!("coordinator listening on {}", handle.addr);
    std::io::stdout().flush().ok();
    handle.wait();
    Ok(0)
}

/// One submission end to end: parse and validate the scenario, provision
/// it, drive the registered edges, and persist artifacts when configured.
fn handle_submission(
    sub: &SubmitBody,
    roster: &BTreeMap<String, String>,
    out_dir: Option<&Path>,
    counter: &AtomicU64,
) -> Result<FinalBody, RunError> {
    let config = ScenarioConfig::from_json(&sub.scenario.to_string())?;
    let prepared = run::prepare_with_defaults(
        &config,
        explicit_program(&sub.local_program),
        explicit_program(&sub.global_program),
    )?;
    let outcome = run::execute_over_tcp(&prepared, roster)?;
    if let Some(dir) = out_dir {
        let n = counter.fetch_add(1, Ordering::SeqCst);
        run::write_run_dir(&dir.join(format!("submission-{n:03}")), &config, &outcome)?;
    }
    Ok(outcome.final_body)
}

/// Programs travel in every SUBMIT; an empty step list means "use the
/// scenario's own programs", keeping socketed runs identical to local
/// simulation.
fn explicit_program(p: &RestrictedProgram) -> Option<&RestrictedProgram> {
    (!p.steps.is_empty()).then_some(p)
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EdgeConfig {
    scenario: ScenarioRef,
    /// Which of the scenario's users this process hosts.
    user_index: usize,
    #[serde(default = "default_bind")]
    bind: String,
}

fn default_bind() -> String {
    "127.0.0.1:0".into()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioRef {
    Inline(Box<ScenarioConfig>),
    /// Path to a scenario file, relative to the edge config file.
    Path(PathBuf),
}

fn edge(args: EdgeArgs) -> Result<i32, CliError> {
    let config: EdgeConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    let scenario = match config.scenario {
        ScenarioRef::Inline(s) => {
            s.validate()?;
            *s
        }
        ScenarioRef::Path(p) => {
            let base = args.config.parent().unwrap_or(Path::new("."));
            ScenarioConfig::from_json(&fs::read_to_string(base.join(p))?)?
        }
    };
    let prepared = run::prepare(&scenario)?;
    if config.user_index >= prepared.node_ids.len() {
        return Err(CliError::new(
            "bad_config",
            format!(
                "user-index {} out of range for {} users",
                config.user_index,
                prepared.node_ids.len()
            ),
        ));
    }
    let node = Arc::new(prepared.make_node(config.user_index)?);
    let handle = spawn_edge(Arc::clone(&node), &config.bind)?;
    register_with_coordinator(&args.coordinator, node.node_id(), &handle.addr.to_string())?;
    println!("node {} serving on {}", node.node_id(), handle.addr);
    std::io::stdout().flush().ok();
    handle.wait();
    Ok(0)
}

fn submit(args: SubmitArgs) -> Result<i32, CliError> {
    let token = args
        .token
        .or_else(|| std::env::var("POLIFED_TOKEN").ok())
        .ok_or_else(|| {
            CliError::new("missing_token", "pass --token or set POLIFED_TOKEN")
        })?;
    let config = ScenarioConfig::from_json(&fs::read_to_string(&args.scenario)?)?;
    let body = SubmitBody {
        token,
        global_program: RestrictedProgram {
            role: Site::Global,
            steps: vec![],
        },
        local_program: RestrictedProgram {
            role: Site::Local,
            steps: vec![],
        },
        scenario: serde_json::to_value(&config)?,
    };
    let final_body = submit_to_coordinator(
        &args.coordinator,
        &body,
        Duration::from_secs(args.timeout_secs),
    )?;
    match final_body {
        FinalBody::Model(wire) => {
            let pair = dpp_from_wire(&wire)?;
            let params = match pair.released_payload() {
                Some(Payload::Model(m)) => m,
                _ => {
                    return Err(CliError::new(
                        "protocol",
                        "final message did not carry a released model",
                    ))
                }
            };
            fs::write(&args.out, codec::encode(params))?;
            println!(
                "{}",
                serde_json::json!({"status": "final", "model": args.out})
            );
            Ok(0)
        }
        FinalBody::Rejection(reason) => Err(CliError::rejected(reason)),
    }
}

fn simulate(args: SimulateArgs) -> Result<i32, CliError> {
    let config = ScenarioConfig::from_json(&fs::read_to_string(&args.scenario)?)?;
    let outcome = run::simulate(&config)?;
    let dir = args
        .out_dir
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    let report = run::write_run_dir(&dir, &config, &outcome)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    match report.verdict {
        run::ReportVerdict::Final => Ok(0),
        run::ReportVerdict::Rejected { reason } => Err(CliError::rejected(reason)),
    }
}

fn policy_check(policy: &str, trace: &str, expand: bool) -> Result<i32, CliError> {
    let parsed =
        parse_policy(policy).map_err(|e| CliError::new("bad_policy", e.to_string()))?;
    let mut residual = if expand {
        MacroTable::with_defaults()
            .expand(&parsed)
            .map_err(|e| CliError::new("bad_policy", e.to_string()))?
    } else {
        parsed
    }
    .reduce();
    for item in trace.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        residual = residual.derive(&CommandInvocation::bare(item)).reduce();
        println!("after {item}: {residual}");
    }
    if residual.accepts_empty() {
        println!("accept");
        Ok(0)
    } else {
        println!("reject");
        Err(CliError::rejected("trace rejected by policy"))
    }
}

fn report(args: ReportArgs) -> Result<i32, CliError> {
    match args.csv.as_deref() {
        None => {
            let text = fs::read_to_string(args.run.join("report.json"))?;
            let report: run::RunReport = serde_json::from_str(&text)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Some("metrics") => print!("{}", fs::read_to_string(args.run.join("metrics.csv"))?),
        Some("timings") => print!("{}", fs::read_to_string(args.run.join("timings.csv"))?),
        Some(other) => {
            return Err(CliError::new(
                "bad_config",
                format!("--csv takes `metrics` or `timings`, got `{other}`"),
            ))
        }
    }
    Ok(0)
}
