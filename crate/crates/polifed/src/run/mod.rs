//! Scenario-driven benchmark runs.
//!
//! A [`ScenarioConfig`] describes a synthetic federation as data: the task,
//! how many users hold how many rows, the policy groups with their noise
//! and budget settings, and the schedule strategy. This module provisions
//! everything deterministically from the scenario seed, drives the
//! schedule either in process ([`simulate`]) or over registered TCP edges
//! ([`execute_over_tcp`]), and reports the per-round metric, the privacy
//! spend of every group, timing, and the released model.
//!
//! Both drivers share [`execute`], so a socketed run and its in-process
//! replay produce byte-identical final messages.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{dirichlet_partition, generate_task, DataError, TaskKind, UserDataset};
use crate::dp::{DpError, PrivacyLedger, RoundCharge};
use crate::dpp::{
    builtin_registry, DataPolicyPair, Payload, ProgramStep, RestrictedProgram, Site,
};
use crate::fl::task::{accuracy, binary_auc, DifferentiableTask, Examples, LogisticRegression, Mlp};
use crate::fl::{codec, DpConfig, FlError, ModelParams, NoisePlacement};
use crate::net::wire::{dpp_to_wire, FinalBody};
use crate::net::{
    node_seed, EdgeNode, GroupPlan, InProcParticipant, NetError, Participant, SchedulePlan,
    ScheduleVerdict, TcpParticipant, TIMING_CSV_HEADER,
};
use crate::policy::{parse_policy, Value};

pub use config::{GroupConfig, ScenarioConfig, ScenarioDp, TrainSpec};

/// The service-side policy on the global model: it may be trained,
/// combined, averaged, and budget-checked any number of times, then
/// released once. User-data policies only ever tighten this through
/// intersection.
pub const MODEL_POLICY: &str = "(train_local + train_local_dp + accumulate + average + \
     enforce_dp_budget + enforce_privacy_budget + check_privacy_budget)* . return";

const HIDDEN_UNITS: usize = 32;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// Stable machine-readable identifier, mirroring the wire error codes.
    pub fn code(&self) -> &'static str {
        match self {
            RunError::Config(_) => "bad_config",
            RunError::Net(e) => e.code(),
            RunError::Data(_) => "bad_dataset",
            RunError::Fl(_) => "training_error",
            RunError::Dp(_) => "accounting_error",
            RunError::Io(_) => "io",
            RunError::Json(_) => "bad_json",
        }
    }
}

/// Which model quality number a scenario reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Binary ROC AUC of class 1; the two-class behavior task reports this.
    Auc,
    /// Argmax accuracy; the multiclass and sequence tasks report this.
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn evaluate(
        self,
        task: &dyn DifferentiableTask,
        params: &ModelParams,
        data: &Examples,
    ) -> f64 {
        match self {
            Metric::Auc => binary_auc(task, params, data).unwrap_or(f64::NAN),
            Metric::Accuracy => accuracy(task, params, data),
        }
    }
}

fn metric_for(kind: TaskKind) -> Metric {
    match kind {
        TaskKind::Classification2Class => Metric::Auc,
        TaskKind::Multiclass10 | TaskKind::SequenceNextToken => Metric::Accuracy,
    }
}

/// The model each task trains; dimensions come from the generated data.
fn make_task(kind: TaskKind, dim: usize) -> Box<dyn DifferentiableTask + Send + Sync> {
    match kind {
        TaskKind::Classification2Class => Box::new(LogisticRegression::new(dim)),
        TaskKind::Multiclass10 => Box::new(Mlp::new(dim, HIDDEN_UNITS, 10)),
        TaskKind::SequenceNextToken => Box::new(Mlp::new(dim, HIDDEN_UNITS, 8)),
    }
}

/// The standard per-round member program for a group without an explicit
/// one: read the local dataset, then one training step whose arguments
/// encode the group's noise settings.
pub fn default_local_program(dp: Option<&ScenarioDp>, config: &ScenarioConfig) -> RestrictedProgram {
    let mut args: BTreeMap<String, Value> = BTreeMap::new();
    args.insert("lr".into(), config.train.lr.into());
    args.insert("epochs".into(), i64::from(config.train.epochs).into());
    if let Some(bs) = config.train.batch_size {
        args.insert("batch_size".into(), (bs as i64).into());
    }
    let train = match dp {
        None => ProgramStep {
            cmd: "train_local".into(),
            args,
            inputs: vec!["model".into(), "d".into()],
            output: "u".into(),
        },
        Some(dp) => {
            args.insert("clip_bound".into(), dp.clip_bound.into());
            args.insert("noise_sigma".into(), dp.noise_sigma.into());
            args.insert("round_size".into(), (config.round_size as i64).into());
            if dp.placement == NoisePlacement::Server {
                args.insert("placement".into(), "server".into());
            }
            ProgramStep {
                cmd: "train_local_dp".into(),
                args,
                inputs: vec!["model".into(), "d".into()],
                output: "u".into(),
            }
        }
    };
    RestrictedProgram {
        role: Site::Local,
        steps: vec![
            ProgramStep {
                cmd: "get_data".into(),
                args: BTreeMap::new(),
                inputs: vec!["data".into()],
                output: "d".into(),
            },
            train,
        ],
    }
}

/// Everything a run needs, provisioned deterministically from the config:
/// per-user datasets, group membership, the schedule plan, and the pooled
/// evaluation view.
pub struct Prepared {
    pub config: ScenarioConfig,
    /// `edge-000`, `edge-001`, ... one per user, in group order.
    pub node_ids: Vec<String>,
    pub datasets: Vec<UserDataset>,
    /// Node index to group index.
    pub group_of: Vec<usize>,
    pub plan: SchedulePlan,
    pub metric: Metric,
    pub input_dim: usize,
    /// Pooled training rows (unfiltered) used for per-round evaluation.
    pub eval: Examples,
}

impl Prepared {
    pub fn make_task(&self) -> Box<dyn DifferentiableTask + Send + Sync> {
        make_task(self.config.task_kind, self.input_dim)
    }

    /// The edge node for user `i`: its dataset under its group's policy.
    pub fn make_node(&self, i: usize) -> Result<EdgeNode, RunError> {
        let group = &self.config.groups[self.group_of[i]];
        Ok(EdgeNode::from_policy_text(
            &self.node_ids[i],
            self.datasets[i].clone(),
            &group.policy,
            self.make_task(),
        )?)
    }

    /// The service's initial global model under [`MODEL_POLICY`].
    pub fn model_pair(&self) -> DataPolicyPair {
        let init = self
            .make_task()
            .init_params(node_seed(self.config.seed, 0, "service/model-init"));
        DataPolicyPair::new(
            "service/model",
            Payload::Model(init),
            parse_policy(MODEL_POLICY).expect("model policy parses"),
        )
    }
}

/// Provisions a scenario with no external program defaults; groups without
/// explicit programs get [`default_local_program`].
pub fn prepare(config: &ScenarioConfig) -> Result<Prepared, RunError> {
    prepare_with_defaults(config, None, None)
}

/// Provisions a scenario. `default_local` fills in for groups without an
/// explicit program (submitted programs land here); `default_global` fills
/// the terminal slot when the scenario has none.
pub fn prepare_with_defaults(
    config: &ScenarioConfig,
    default_local: Option<&RestrictedProgram>,
    default_global: Option<&RestrictedProgram>,
) -> Result<Prepared, RunError> {
    config.validate()?;
    let datasets = provision_datasets(config)?;
    let node_ids: Vec<String> = (0..config.n_users).map(|i| format!("edge-{i:03}")).collect();
    let counts = config.group_counts();
    let mut group_of = Vec::with_capacity(config.n_users);
    for (g, &c) in counts.iter().enumerate() {
        group_of.extend(std::iter::repeat(g).take(c));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for d in &datasets {
        let ex = d.to_examples()?;
        for (row, y) in ex.rows() {
            features.push(row.to_vec());
            labels.push(y);
        }
    }
    let eval = Examples::new(features, labels)?;
    let input_dim = eval.dim();
    if input_dim == 0 {
        return Err(RunError::Config(
            "generated datasets carry no feature columns".into(),
        ));
    }

    let mut start = 0usize;
    let mut groups = Vec::with_capacity(config.groups.len());
    for (gi, g) in config.groups.iter().enumerate() {
        let members = node_ids[start..start + counts[gi]].to_vec();
        start += counts[gi];
        let dp = g.dp.as_ref().map(|d| DpConfig {
            clip_bound: d.clip_bound,
            noise_sigma: d.noise_sigma,
            round_size: config.round_size,
        });
        let placement = g.dp.as_ref().map(|d| d.placement).unwrap_or_default();
        let local_program = g
            .local_program
            .clone()
            .or_else(|| default_local.cloned())
            .unwrap_or_else(|| default_local_program(g.dp.as_ref(), config));
        groups.push(GroupPlan {
            group_id: g.name.clone(),
            members,
            rounds: config.rounds,
            round_size: config.round_size,
            dp,
            placement,
            max_epsilon: g.max_epsilon,
            local_program,
        });
    }
    let plan = SchedulePlan {
        strategy: config.strategy,
        groups,
        eta: config.eta,
        divisor: config.divisor,
        timeout: Duration::from_millis(config.timeout_ms),
        master_seed: config.seed,
        global_program: config.global_program.clone().or_else(|| default_global.cloned()),
    };

    Ok(Prepared {
        config: config.clone(),
        node_ids,
        datasets,
        group_of,
        plan,
        metric: metric_for(config.task_kind),
        input_dim,
        eval,
    })
}

fn provision_datasets(config: &ScenarioConfig) -> Result<Vec<UserDataset>, RunError> {
    match config.dirichlet_alpha {
        None => Ok(generate_task(
            config.task_kind,
            config.n_users,
            config.rows_per_user,
            config.seed,
        )?),
        Some(alpha) => {
            let pooled = generate_task(
                config.task_kind,
                1,
                config.n_users * config.rows_per_user,
                config.seed,
            )?
            .pop()
            .expect("one pooled dataset");
            let labels: Vec<usize> = pooled.to_examples()?.rows().map(|(_, y)| y).collect();
            let mut assignment = dirichlet_partition(&labels, config.n_users, alpha, config.seed)?;
            rebalance_empty_shards(&mut assignment)?;
            Ok(pooled.split_by_assignment(&assignment, "edge")?)
        }
    }
}

/// Label-skew draws can leave a user with nothing, and every user must be
/// able to train; singleton transfers from the largest shard fix that.
fn rebalance_empty_shards(assignment: &mut [Vec<usize>]) -> Result<(), RunError> {
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            return Ok(());
        };
        let donor = (0..assignment.len())
            .max_by_key(|&i| assignment[i].len())
            .expect("nonempty assignment");
        if assignment[donor].len() < 2 {
            return Err(RunError::Config(
                "too few rows to give every user at least one".into(),
            ));
        }
        let moved = assignment[donor].pop().expect("donor has rows");
        assignment[empty].push(moved);
    }
}

/// One per-round quality reading, taken on the model right after averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: u64,
    pub group: String,
    pub value: f64,
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ReportVerdict {
    /// The model passed every gate and was released.
    Final,
    /// A budget or policy gate refused release; nothing left the run.
    Rejected { reason: String },
}

/// The run as an operator reads it: metric series, privacy spend, timing,
/// and the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunReport {
    /// `auc` or `accuracy`, fixed by the task.
    pub metric: String,
    pub verdict: ReportVerdict,
    pub rounds_completed: u64,
    /// One row per completed round, in order.
    pub metrics: Vec<MetricRow>,
    /// Spent epsilon of every group after each completed round; each
    /// series has `rounds_completed` entries.
    pub spent_epsilon: BTreeMap<String, Vec<f64>>,
    /// Relative path of the timing CSV inside the run directory, set once
    /// artifacts are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_csv: Option<String>,
}

/// Everything a finished run produced, before any files are written.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Exactly what a submitting service receives.
    pub final_body: FinalBody,
    /// The released parameters, absent on rejection.
    pub final_model: Option<ModelParams>,
    /// Timing CSV rows (without the header), one per participant exchange.
    pub timing_rows: Vec<String>,
    /// The privacy ledger's charge records, in order.
    pub charges: Vec<RoundCharge>,
}

/// Drives a prepared scenario over any roster of participants. The
/// schedule, observation, and reporting are identical for in-process and
/// TCP transports.
pub fn execute(
    prepared: &Prepared,
    roster: &BTreeMap<String, &dyn Participant>,
) -> Result<RunOutcome, RunError> {
    let registry = builtin_registry();
    let mut ledger = PrivacyLedger::new(prepared.config.target_delta)?;
    let task = prepared.make_task();
    let group_names: Vec<String> = prepared.config.groups.iter().map(|g| g.name.clone()).collect();

    let mut metrics = Vec::new();
    let mut spent: BTreeMap<String, Vec<f64>> = group_names
        .iter()
        .map(|g| (g.clone(), Vec::new()))
        .collect();
    let mut timing_rows = Vec::new();
    let mut observe_err: Option<DpError> = None;

    let outcome = crate::net::run_schedule(
        &registry,
        &prepared.plan,
        roster,
        prepared.model_pair(),
        &mut ledger,
        |obs| {
            let value = match obs.model.payload_internal() {
                Payload::Model(m) => prepared.metric.evaluate(task.as_ref(), m, &prepared.eval),
                _ => f64::NAN,
            };
            metrics.push(MetricRow {
                round: obs.round,
                group: obs.group.to_string(),
                value,
            });
            for g in &group_names {
                match obs.ledger.spent_epsilon(g) {
                    Ok((eps, _)) => spent.get_mut(g).expect("known group").push(eps),
                    Err(e) => observe_err = Some(e),
                }
            }
            timing_rows.extend(obs.timing.csv_rows());
        },
    )?;
    if let Some(e) = observe_err {
        return Err(e.into());
    }

    let (verdict, final_body, final_model) = match outcome.verdict {
        ScheduleVerdict::Final(pair) => {
            let params = match pair.released_payload() {
                Some(Payload::Model(m)) => Some(m.clone()),
                _ => None,
            };
            (ReportVerdict::Final, FinalBody::Model(dpp_to_wire(&pair)), params)
        }
        ScheduleVerdict::Rejected(reason) => (
            ReportVerdict::Rejected {
                reason: reason.clone(),
            },
            FinalBody::Rejection(reason),
            None,
        ),
    };

    Ok(RunOutcome {
        report: RunReport {
            metric: prepared.metric.name().to_string(),
            verdict,
            rounds_completed: outcome.rounds_completed,
            metrics,
            spent_epsilon: spent,
            timings_csv: None,
        },
        final_body,
        final_model,
        timing_rows,
        charges: ledger.records().to_vec(),
    })
}

/// Runs a scenario entirely in process: every user becomes an in-memory
/// edge node behind the same frame codec the TCP transport uses.
pub fn simulate(config: &ScenarioConfig) -> Result<RunOutcome, RunError> {
    simulate_prepared(&prepare(config)?)
}

pub fn simulate_prepared(prepared: &Prepared) -> Result<RunOutcome, RunError> {
    let nodes: Vec<Arc<EdgeNode>> = (0..prepared.node_ids.len())
        .map(|i| prepared.make_node(i).map(Arc::new))
        .collect::<Result<_, _>>()?;
    let participants: Vec<InProcParticipant> = nodes
        .iter()
        .map(|n| InProcParticipant::new(Arc::clone(n)))
        .collect();
    let roster: BTreeMap<String, &dyn Participant> = prepared
        .node_ids
        .iter()
        .zip(&participants)
        .map(|(id, p)| (id.clone(), p as &dyn Participant))
        .collect();
    execute(prepared, &roster)
}

/// Runs a prepared scenario against registered TCP edges; `addrs` maps
/// node ids to their task addresses, as collected by the coordinator's
/// registration roster.
pub fn execute_over_tcp(
    prepared: &Prepared,
    addrs: &BTreeMap<String, String>,
) -> Result<RunOutcome, RunError> {
    let participants: Vec<TcpParticipant> = prepared
        .node_ids
        .iter()
        .map(|id| {
            addrs
                .get(id)
                .map(|a| TcpParticipant::new(id, a))
                .ok_or_else(|| {
                    RunError::Config(format!("node `{id}` has not registered an address"))
                })
        })
        .collect::<Result<_, _>>()?;
    let roster: BTreeMap<String, &dyn Participant> = prepared
        .node_ids
        .iter()
        .zip(&participants)
        .map(|(id, p)| (id.clone(), p as &dyn Participant))
        .collect();
    execute(prepared, &roster)
}

/// Writes the run directory: `config.json`, `timings.csv`, `metrics.csv`,
/// `ledger.jsonl`, `final.model` (when released), and `report.json`.
/// Returns the report as written, with its timing path set.
pub fn write_run_dir(
    dir: &Path,
    config: &ScenarioConfig,
    outcome: &RunOutcome,
) -> Result<RunReport, RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json_pretty() + "\n")?;

    let mut timings = String::with_capacity(64 * (outcome.timing_rows.len() + 1));
    timings.push_str(TIMING_CSV_HEADER);
    timings.push('\n');
    for row in &outcome.timing_rows {
        timings.push_str(row);
        timings.push('\n');
    }
    fs::write(dir.join("timings.csv"), timings)?;

    let mut metrics = format!("round,group,{}\n", outcome.report.metric);
    for row in &outcome.report.metrics {
        metrics.push_str(&format!("{},{},{}\n", row.round, row.group, row.value));
    }
    fs::write(dir.join("metrics.csv"), metrics)?;

    let mut ledger = String::new();
    for charge in &outcome.charges {
        ledger.push_str(&serde_json::to_string(charge)?);
        ledger.push('\n');
    }
    fs::write(dir.join("ledger.jsonl"), ledger)?;

    if let Some(model) = &outcome.final_model {
        fs::write(dir.join("final.model"), codec::encode(model))?;
    }

    let mut report = outcome.report.clone();
    report.timings_csv = Some("timings.csv".into());
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_program_encodes_the_group_noise_settings() {
        let cfg = ScenarioConfig::from_json(
            &serde_json::json!({
                "task-kind": "classification-2class",
                "n-users": 4,
                "groups": [{"name": "g", "policy": "get_data . runFL . return", "fraction": 1.0,
                            "dp": {"clip-bound": 0.5, "noise-sigma": 1.5, "placement": "server"}}],
                "strategy": "cascaded",
                "rounds": 1,
                "round-size": 2,
                "eta": 1.0,
                "train": {"lr": 0.1, "epochs": 2, "batch-size": 8},
                "seed": 3
            })
            .to_string(),
        )
        .unwrap();
        let prog = default_local_program(cfg.groups[0].dp.as_ref(), &cfg);
        assert_eq!(prog.role, Site::Local);
        assert_eq!(prog.steps[0].cmd, "get_data");
        let train = &prog.steps[1];
        assert_eq!(train.cmd, "train_local_dp");
        assert_eq!(train.args["clip_bound"], Value::from(0.5));
        assert_eq!(train.args["noise_sigma"], Value::from(1.5));
        assert_eq!(train.args["round_size"], Value::from(2i64));
        assert_eq!(train.args["placement"], Value::from("server"));
        assert_eq!(train.args["batch_size"], Value::from(8i64));

        let plain = default_local_program(None, &cfg);
        assert_eq!(plain.steps[1].cmd, "train_local");
        assert!(!plain.steps[1].args.contains_key("clip_bound"));
    }

    #[test]
    fn rebalancing_fills_empty_shards_from_the_largest() {
        let mut a = vec![vec![0, 1, 2, 3], vec![], vec![4], vec![]];
        rebalance_empty_shards(&mut a).unwrap();
        assert!(a.iter().all(|s| !s.is_empty()));
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 5);

        let mut too_small = vec![vec![0], vec![]];
        assert!(rebalance_empty_shards(&mut too_small).is_err());
    }

    #[test]
    fn preparation_assigns_members_in_group_order() {
        let cfg = ScenarioConfig::from_json(
            &serde_json::json!({
                "task-kind": "classification-2class",
                "n-users": 6,
                "rows-per-user": 5,
                "groups": [
                    {"name": "strict", "policy": "get_data . runFL . return", "fraction": 0.5},
                    {"name": "open", "policy": "get_data . runFL . return", "fraction": 0.5}
                ],
                "strategy": "cascaded",
                "rounds": 1,
                "round-size": 2,
                "eta": 1.0,
                "train": {"lr": 0.1},
                "seed": 9
            })
            .to_string(),
        )
        .unwrap();
        let prepared = prepare(&cfg).unwrap();
        assert_eq!(prepared.node_ids.len(), 6);
        assert_eq!(prepared.group_of, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(prepared.plan.groups[0].members, &prepared.node_ids[..3]);
        assert_eq!(prepared.plan.groups[1].members, &prepared.node_ids[3..]);
        assert_eq!(prepared.input_dim, 6);
        assert_eq!(prepared.metric, Metric::Auc);
        assert_eq!(prepared.eval.len(), 30);
        // Evaluation rows match the datasets' own width, so padding is a
        // no-op for unfiltered groups.
        assert_eq!(prepared.eval.dim(), prepared.input_dim);
    }

    #[test]
    fn dirichlet_provisioning_keeps_every_user_trainable() {
        let cfg = ScenarioConfig::from_json(
            &serde_json::json!({
                "task-kind": "multiclass-10",
                "n-users": 20,
                "rows-per-user": 12,
                "dirichlet-alpha": 0.3,
                "groups": [{"name": "all", "policy": "get_data . runFL . return", "fraction": 1.0}],
                "strategy": "cascaded",
                "rounds": 1,
                "round-size": 5,
                "eta": 1.0,
                "train": {"lr": 0.05},
                "seed": 17
            })
            .to_string(),
        )
        .unwrap();
        let prepared = prepare(&cfg).unwrap();
        assert!(prepared.datasets.iter().all(|d| d.n_rows() >= 1));
        assert_eq!(
            prepared.datasets.iter().map(UserDataset::n_rows).sum::<usize>(),
            20 * 12
        );
        assert_eq!(prepared.input_dim, 8);
        // Label skew: some user is far from the uniform class mix.
        let uniform_share = 1.0 / 10.0;
        let skewed = prepared.datasets.iter().any(|d| {
            let ex = d.to_examples().unwrap();
            let ones = ex.rows().filter(|&(_, y)| y == 0).count();
            let share = ones as f64 / ex.len() as f64;
            (share - uniform_share).abs() > 0.15
        });
        assert!(skewed, "alpha=0.3 should skew at least one user");
    }
}
