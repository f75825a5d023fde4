//! Data-Policy Pairs and the restricted-program runtime.
//!
//! A [`DataPolicyPair`] couples an opaque payload with the policy governing
//! its remaining uses. Programs never see payloads: they are plans of
//! registered commands ([`RestrictedProgram`]), and the only way a payload
//! changes hands is [`invoke`], which first advances every input's policy by
//! the command's derivative and refuses to run the implementation if any
//! derivative is `Zero`. Multi-input commands intersect the derivatives, so
//! the output obeys every input's remaining obligations. A payload leaves
//! the runtime only through `return`, and only when the trace executed so
//! far completes a sentence of the original policy.

pub(crate) mod commands;
mod program;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, UserDataset};
use crate::dp::{DpError, PrivacyLedger};
use crate::fl::task::DifferentiableTask;
use crate::fl::{FlError, ModelParams};
use crate::policy::{CommandInvocation, Policy};

pub use commands::builtin_registry;
pub use program::{run_program, validate_program, ProgramStep, RestrictedProgram};

#[derive(Debug, Error)]
pub enum DppError {
    #[error("policy violation: `{command}` is not authorized by `{policy}`")]
    PolicyViolation { command: String, policy: String },
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("command `{command}` runs {expected:?}, invoked {at:?}")]
    SiteMismatch {
        command: String,
        expected: Site,
        at: Site,
    },
    #[error("command `{command}` takes {expected} inputs, got {got}")]
    ArityMismatch {
        command: String,
        expected: usize,
        got: usize,
    },
    #[error("command `{command}` expected a {expected} payload, got {got}")]
    PayloadKind {
        command: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("bad args for `{command}`: {message}")]
    BadArgs { command: String, message: String },
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("slot `{0}` is assigned more than once")]
    SlotReuse(String),
    #[error("slot `{0}` is not defined")]
    MissingSlot(String),
    #[error("program role {role:?} cannot run at {at:?}")]
    RoleMismatch { role: Site, at: Site },
    #[error("privacy budget exceeded for group `{group}`: spent {spent}, budget {max_epsilon}")]
    BudgetExceeded {
        group: String,
        spent: f64,
        max_epsilon: f64,
    },
    #[error("runtime provides no {0}, required by this command")]
    MissingCapability(&'static str),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

/// Where a command implementation may run (or, for a program, where its
/// steps run). `Both` is valid only for registry entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Local,
    Global,
    Both,
}

impl Site {
    fn allows(self, at: Site) -> bool {
        self == Site::Both || self == at
    }
}

/// The opaque value inside a pair. Program code never sees these; command
/// implementations receive them and the runtime reads them for transport
/// and metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dataset(UserDataset),
    Model(ModelParams),
    /// A model-shaped delta: local update, clipped update, or running sum.
    Update(ModelParams),
    Scalar(f64),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Dataset(_) => "dataset",
            Payload::Model(_) => "model",
            Payload::Update(_) => "update",
            Payload::Scalar(_) => "scalar",
        }
    }
}

/// One origin's audit record inside a pair: where the value came from, the
/// policy it started under, and every command applied since, with the round
/// it ran in. When values merge, the output carries all input lineages.
#[derive(Clone, Debug, PartialEq)]
pub struct Lineage {
    pub origin: String,
    pub original_policy: Policy,
    pub trace: Vec<(CommandInvocation, u64)>,
}

/// An opaque payload bound to the policy of its remaining uses.
///
/// The payload is only readable after `return` authorizes it (see
/// [`DataPolicyPair::released_payload`]); the crate-internal runtime also
/// reads payloads for serialization and metrics, which is what "trusted
/// library" means here.
#[derive(Clone, Debug)]
pub struct DataPolicyPair {
    payload: Arc<Payload>,
    policy: Policy,
    lineage: Vec<Lineage>,
    released: bool,
}

impl DataPolicyPair {
    /// A fresh pair at its origin. The policy is reduced on entry and stays
    /// reduced through every derivative.
    pub fn new(origin: &str, payload: Payload, policy: Policy) -> Self {
        let policy = policy.reduce();
        DataPolicyPair {
            payload: Arc::new(payload),
            policy: policy.clone(),
            lineage: vec![Lineage {
                origin: origin.to_string(),
                original_policy: policy,
                trace: Vec::new(),
            }],
            released: false,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn lineage(&self) -> &[Lineage] {
        &self.lineage
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// The payload, readable only once `return` has authorized release.
    pub fn released_payload(&self) -> Option<&Payload> {
        self.released.then_some(&*self.payload)
    }

    /// Trusted-runtime payload access for transport and metrics.
    pub(crate) fn payload_internal(&self) -> &Payload {
        &self.payload
    }

    /// Rebuilds a pair from its transported parts; the transport preserves
    /// policy, lineage, and release state exactly.
    pub(crate) fn from_parts(
        payload: Payload,
        policy: Policy,
        lineage: Vec<Lineage>,
        released: bool,
    ) -> Self {
        DataPolicyPair {
            payload: Arc::new(payload),
            policy,
            lineage,
            released,
        }
    }

    /// True iff releasing the value right now would complete a sentence of
    /// the policy: the derivative by `return` accepts the empty trace.
    pub fn can_return(&self) -> bool {
        self.policy.derive(&return_invocation()).accepts_empty()
    }

    /// Releases the payload: the `return` step, applied outside a program.
    /// Fails closed when the policy still mandates other commands.
    pub fn release(&self, round: u64) -> Result<DataPolicyPair, DppError> {
        let inv = return_invocation();
        let derived = self.policy.derive(&inv);
        if !derived.accepts_empty() {
            return Err(DppError::PolicyViolation {
                command: inv.to_string(),
                policy: self.policy.to_string(),
            });
        }
        Ok(DataPolicyPair {
            payload: Arc::clone(&self.payload),
            policy: derived,
            lineage: appended_lineage(&[self], &inv, round),
            released: true,
        })
    }

    /// Replaces an update payload in place of the privacy mechanism (server
    /// side noise), leaving policy and lineage untouched. Trusted runtime
    /// only: this is not a program-visible operation.
    pub(crate) fn with_update_payload(&self, update: ModelParams) -> DataPolicyPair {
        DataPolicyPair {
            payload: Arc::new(Payload::Update(update)),
            policy: self.policy.clone(),
            lineage: self.lineage.clone(),
            released: self.released,
        }
    }
}

pub(crate) fn return_invocation() -> CommandInvocation {
    CommandInvocation::bare("return")
}

fn appended_lineage(
    inputs: &[&DataPolicyPair],
    cmd: &CommandInvocation,
    round: u64,
) -> Vec<Lineage> {
    let mut out = Vec::with_capacity(inputs.iter().map(|d| d.lineage.len()).sum());
    for dpp in inputs {
        for lin in &dpp.lineage {
            let mut lin = lin.clone();
            lin.trace.push((cmd.clone(), round));
            out.push(lin);
        }
    }
    out
}

/// What a command implementation produced: a new payload, or one of its
/// inputs passed through unchanged (shared, not copied).
pub enum HookOut {
    New(Payload),
    PassThrough(usize),
}

type Hook = dyn Fn(&mut CommandCtx, &CommandInvocation, &[&Payload]) -> Result<HookOut, DppError>
    + Send
    + Sync;

/// Runtime capabilities a command implementation may need. Edge nodes run
/// with `site: Local` and a training task; the coordinator runs with
/// `site: Global` and the privacy ledger.
pub struct CommandCtx<'a> {
    pub site: Site,
    pub round: u64,
    /// Seed for stochastic commands; the caller varies it per node and
    /// round, so executions are reproducible.
    pub seed: u64,
    pub task: Option<&'a dyn DifferentiableTask>,
    pub ledger: Option<&'a mut PrivacyLedger>,
}

impl<'a> CommandCtx<'a> {
    pub fn local(round: u64, seed: u64, task: &'a dyn DifferentiableTask) -> Self {
        CommandCtx {
            site: Site::Local,
            round,
            seed,
            task: Some(task),
            ledger: None,
        }
    }

    pub fn global(round: u64, seed: u64, ledger: &'a mut PrivacyLedger) -> Self {
        CommandCtx {
            site: Site::Global,
            round,
            seed,
            task: None,
            ledger: Some(ledger),
        }
    }
}

/// One registered command: its implementation hook, input count, execution
/// site, and a counter of how many times the hook has actually run.
pub struct CommandSpec {
    name: String,
    arity: usize,
    site: Site,
    hook: Box<Hook>,
    calls: AtomicU64,
}

impl CommandSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn site(&self) -> Site {
        self.site
    }

    /// How many times the implementation has executed. Policy rejections
    /// happen before execution, so they never increment this.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// The fixed table of commands programs may use. Built once at startup;
/// programs can neither extend nor modify it.
#[derive(Default)]
pub struct CommandRegistry {
    commands: BTreeMap<String, CommandSpec>,
}

impl CommandRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a command during startup construction.
    pub fn register<F>(&mut self, name: &str, arity: usize, site: Site, hook: F)
    where
        F: Fn(&mut CommandCtx, &CommandInvocation, &[&Payload]) -> Result<HookOut, DppError>
            + Send
            + Sync
            + 'static,
    {
        self.commands.insert(
            name.to_string(),
            CommandSpec {
                name: name.to_string(),
                arity,
                site,
                hook: Box::new(hook),
                calls: AtomicU64::new(0),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&CommandSpec> {
        self.commands.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.commands.keys().map(String::as_str)
    }

    /// Executed-hook count for one command; zero for unknown names.
    pub fn call_count(&self, name: &str) -> u64 {
        self.commands.get(name).map_or(0, CommandSpec::calls)
    }

    /// Total executed hooks across all commands.
    pub fn total_calls(&self) -> u64 {
        self.commands.values().map(CommandSpec::calls).sum()
    }
}

/// Applies one command to its inputs under policy control.
///
/// Every input's policy is advanced by the derivative first; if any
/// derivative is `Zero` the implementation never runs and the call fails
/// with `PolicyViolation`. For `return`, the derivative must additionally
/// accept the empty trace, since release ends the trace. On success the
/// output pair carries the reduced intersection of all derivatives and the
/// concatenated lineages.
pub fn invoke(
    registry: &CommandRegistry,
    ctx: &mut CommandCtx,
    cmd: &CommandInvocation,
    inputs: &[&DataPolicyPair],
) -> Result<DataPolicyPair, DppError> {
    let spec = registry
        .get(&cmd.name)
        .ok_or_else(|| DppError::UnknownCommand(cmd.name.clone()))?;
    if !spec.site.allows(ctx.site) {
        return Err(DppError::SiteMismatch {
            command: cmd.name.clone(),
            expected: spec.site,
            at: ctx.site,
        });
    }
    if inputs.len() != spec.arity {
        return Err(DppError::ArityMismatch {
            command: cmd.name.clone(),
            expected: spec.arity,
            got: inputs.len(),
        });
    }
    let mut cmd = cmd.clone();
    cmd.normalize();

    let mut derived = Vec::with_capacity(inputs.len());
    for dpp in inputs {
        let p = dpp.policy.derive(&cmd);
        let violation = p == Policy::Zero
            || (cmd.name == return_invocation().name && !p.accepts_empty());
        if violation {
            return Err(DppError::PolicyViolation {
                command: cmd.to_string(),
                policy: dpp.policy.to_string(),
            });
        }
        derived.push(p);
    }

    let payloads: Vec<&Payload> = inputs.iter().map(|d| &*d.payload).collect();
    spec.calls.fetch_add(1, Ordering::Relaxed);
    let out = (spec.hook)(ctx, &cmd, &payloads)?;
    let payload = match out {
        HookOut::New(p) => Arc::new(p),
        HookOut::PassThrough(i) => Arc::clone(&inputs[i].payload),
    };

    let policy = derived
        .into_iter()
        .reduce(Policy::intersect)
        .expect("arity is at least one for every registered command");
    let released = cmd.name == return_invocation().name;
    let lineage = appended_lineage(inputs, &cmd, ctx.round);
    Ok(DataPolicyPair {
        payload,
        policy,
        lineage,
        released,
    })
}
