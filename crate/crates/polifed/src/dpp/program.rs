//! Restricted programs: single-assignment plans over registered commands.
//!
//! A program is data, not code: an ordered list of steps, each naming a
//! command, literal args, input slots, and one fresh output slot. Because
//! args are literal and slots are assigned once, the policy effect of every
//! step is computable without running anything, which is what
//! [`validate_program`] does; [`run_program`] performs the same walk with
//! real payloads through [`invoke`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{invoke, return_invocation, CommandCtx, CommandRegistry, DataPolicyPair, DppError, Site};
use crate::policy::{CommandInvocation, Policy, Value};

/// One step: `out = cmd(args)(in...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramStep {
    pub cmd: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, Value>,
    #[serde(rename = "in")]
    pub inputs: Vec<String>,
    #[serde(rename = "out")]
    pub output: String,
}

impl ProgramStep {
    /// The step as a policy-checkable invocation, args normalized.
    pub fn invocation(&self) -> CommandInvocation {
        let mut inv = CommandInvocation {
            name: self.cmd.clone(),
            args: self.args.clone(),
        };
        inv.normalize();
        inv
    }
}

/// A plan of registered commands, executed on edge nodes (`local`) or the
/// coordinator (`global`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedProgram {
    pub role: Site,
    pub steps: Vec<ProgramStep>,
}

impl RestrictedProgram {
    pub fn from_json(text: &str) -> Result<Self, DppError> {
        let prog: RestrictedProgram = serde_json::from_str(text)
            .map_err(|e| DppError::MalformedProgram(e.to_string()))?;
        if prog.role == Site::Both {
            return Err(DppError::MalformedProgram(
                "program role must be `local` or `global`".into(),
            ));
        }
        Ok(prog)
    }

    /// Canonical JSON: object keys sorted, fields in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("programs serialize")
    }
}

/// Structural checks shared by execution and static validation: role is a
/// runnable site, every command exists and may run at the program's role
/// with the right arity, inputs are defined before use, and no slot is
/// assigned twice.
fn check_structure(
    registry: &CommandRegistry,
    prog: &RestrictedProgram,
    initial_slots: &BTreeSet<String>,
) -> Result<(), DppError> {
    if prog.role == Site::Both {
        return Err(DppError::MalformedProgram(
            "program role must be `local` or `global`".into(),
        ));
    }
    let mut defined = initial_slots.clone();
    for step in &prog.steps {
        let spec = registry
            .get(&step.cmd)
            .ok_or_else(|| DppError::UnknownCommand(step.cmd.clone()))?;
        if !spec.site().allows(prog.role) {
            return Err(DppError::SiteMismatch {
                command: step.cmd.clone(),
                expected: spec.site(),
                at: prog.role,
            });
        }
        if step.inputs.len() != spec.arity() {
            return Err(DppError::ArityMismatch {
                command: step.cmd.clone(),
                expected: spec.arity(),
                got: step.inputs.len(),
            });
        }
        for input in &step.inputs {
            if !defined.contains(input) {
                return Err(DppError::MissingSlot(input.clone()));
            }
        }
        if !defined.insert(step.output.clone()) {
            return Err(DppError::SlotReuse(step.output.clone()));
        }
    }
    Ok(())
}

/// Executes the program over the initial slots, aborting on the first
/// error; no later step's implementation runs after an abort. Returns the
/// full slot map, initial slots included.
pub fn run_program(
    registry: &CommandRegistry,
    ctx: &mut CommandCtx,
    prog: &RestrictedProgram,
    initial: BTreeMap<String, DataPolicyPair>,
) -> Result<BTreeMap<String, DataPolicyPair>, DppError> {
    if prog.role != ctx.site {
        return Err(DppError::RoleMismatch {
            role: prog.role,
            at: ctx.site,
        });
    }
    check_structure(registry, prog, &initial.keys().cloned().collect())?;
    let mut slots = initial;
    for step in &prog.steps {
        let out = {
            let inputs: Vec<&DataPolicyPair> = step
                .inputs
                .iter()
                .map(|name| {
                    slots
                        .get(name)
                        .ok_or_else(|| DppError::MissingSlot(name.clone()))
                })
                .collect::<Result<_, _>>()?;
            invoke(registry, ctx, &step.invocation(), &inputs)?
        };
        slots.insert(step.output.clone(), out);
    }
    Ok(slots)
}

/// Statically computes each slot's policy after every step, failing exactly
/// where execution would fail a policy check, without touching any payload
/// or running any hook. Returns the final slot-to-policy map.
pub fn validate_program(
    registry: &CommandRegistry,
    prog: &RestrictedProgram,
    initial_policies: &BTreeMap<String, Policy>,
) -> Result<BTreeMap<String, Policy>, DppError> {
    check_structure(registry, prog, &initial_policies.keys().cloned().collect())?;
    let mut slots: BTreeMap<String, Policy> = initial_policies
        .iter()
        .map(|(k, p)| (k.clone(), p.reduce()))
        .collect();
    for step in &prog.steps {
        let inv = step.invocation();
        let mut derived = Vec::with_capacity(step.inputs.len());
        for name in &step.inputs {
            let policy = &slots[name];
            let p = policy.derive(&inv);
            let violation =
                p == Policy::Zero || (inv.name == return_invocation().name && !p.accepts_empty());
            if violation {
                return Err(DppError::PolicyViolation {
                    command: inv.to_string(),
                    policy: policy.to_string(),
                });
            }
            derived.push(p);
        }
        let policy = derived
            .into_iter()
            .reduce(Policy::intersect)
            .expect("arity is at least one for every registered command");
        slots.insert(step.output.clone(), policy);
    }
    Ok(slots)
}
