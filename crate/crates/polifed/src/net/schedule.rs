//! Multi-round training schedules over policy groups: strategy expansion
//! into phases, per-round averaging and privacy accounting, and the
//! terminal release gate that decides whether anything leaves at all.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::round::{run_round, sample_participants, RoundTiming};
use super::transport::Participant;
use super::{node_seed, NetError};
use crate::dp::{BudgetOutcome, PrivacyLedger};
use crate::dpp::commands::NOISE_SEED_SALT;
use crate::dpp::{
    invoke, run_program, CommandCtx, CommandRegistry, DataPolicyPair, DppError, Payload,
    RestrictedProgram,
};
use crate::fl::{add_gaussian_noise, DpConfig, NoisePlacement};
use crate::policy::CommandInvocation;

/// How groups with different policies share one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Train only on the last (least restrictive) group.
    SubsetOnly,
    /// Train on everyone at once under the first (most restrictive)
    /// group's mechanism; every group's budget is charged.
    Combined,
    /// Train on each group in turn, most restrictive first, carrying the
    /// model forward; each phase charges only its own group.
    Cascaded,
}

/// Denominator of the averaging step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divisor {
    /// The phase's whole cohort; absent updates count as zeros.
    Total,
    /// Only this round's contributors.
    Round,
}

impl Default for Divisor {
    fn default() -> Self {
        Divisor::Total
    }
}

/// One group's share of a schedule. Groups are ordered most restrictive
/// first; strategies select and combine them by that order.
#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub group_id: String,
    pub members: Vec<String>,
    pub rounds: u64,
    /// Participants sampled per round (m).
    pub round_size: usize,
    pub dp: Option<DpConfig>,
    pub placement: NoisePlacement,
    pub max_epsilon: Option<f64>,
    /// The program every sampled member runs each round of this group's
    /// phase; its noise arguments encode `dp` and `placement`.
    pub local_program: RestrictedProgram,
}

/// A full schedule: strategy, groups, averaging, and determinism seeds.
#[derive(Clone, Debug)]
pub struct SchedulePlan {
    pub strategy: Strategy,
    pub groups: Vec<GroupPlan>,
    /// Server learning rate applied at the averaging step.
    pub eta: f64,
    pub divisor: Divisor,
    pub timeout: Duration,
    pub master_seed: u64,
    /// Terminal coordinator program, run once after all phases with the
    /// final model bound to slot `model`. `None` releases the model
    /// directly (still subject to its policy's `return` step).
    pub global_program: Option<RestrictedProgram>,
}

/// What one phase did: who it trained on and which exchanges failed.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub group_id: String,
    pub cohort_size: usize,
    pub rounds: u64,
    /// `(round, participant, reason)` for every excluded exchange.
    pub failures: Vec<(u64, String, String)>,
}

/// Terminal verdict: either a released model or a rejection that released
/// nothing.
#[derive(Debug)]
pub enum ScheduleVerdict {
    Final(DataPolicyPair),
    Rejected(String),
}

#[derive(Debug)]
pub struct ScheduleOutcome {
    pub verdict: ScheduleVerdict,
    pub phases: Vec<PhaseOutcome>,
    pub timings: Vec<RoundTiming>,
    pub rounds_completed: u64,
}

/// What the per-round observer sees after averaging: the phase, the updated
/// global model (still policy-bound), the round's timing, and the ledger
/// state including this round's charges.
pub struct RoundObservation<'a> {
    pub group: &'a str,
    pub round: u64,
    pub model: &'a DataPolicyPair,
    pub timing: &'a RoundTiming,
    pub ledger: &'a PrivacyLedger,
}

struct Phase {
    group_id: String,
    cohort: Vec<String>,
    rounds: u64,
    round_size: usize,
    dp: Option<DpConfig>,
    placement: NoisePlacement,
    local_program: RestrictedProgram,
    /// `(group, q)` budget charges applied after each round of this phase.
    charges: Vec<(String, f64)>,
}

fn phase_for(g: &GroupPlan, cohort: Vec<String>, charged: Vec<String>) -> Result<Phase, NetError> {
    if cohort.is_empty() {
        return Err(NetError::Protocol(format!(
            "group {} has no members to train on",
            g.group_id
        )));
    }
    let q = g.round_size as f64 / cohort.len() as f64;
    Ok(Phase {
        group_id: g.group_id.clone(),
        rounds: g.rounds,
        round_size: g.round_size,
        dp: g.dp.clone(),
        placement: g.placement,
        local_program: g.local_program.clone(),
        charges: charged.into_iter().map(|c| (c, q)).collect(),
        cohort,
    })
}

fn expand_phases(plan: &SchedulePlan) -> Result<Vec<Phase>, NetError> {
    match plan.strategy {
        Strategy::Cascaded => plan
            .groups
            .iter()
            .map(|g| phase_for(g, g.members.clone(), vec![g.group_id.clone()]))
            .collect(),
        Strategy::SubsetOnly => {
            let g = plan.groups.last().expect("plan has groups");
            Ok(vec![phase_for(
                g,
                g.members.clone(),
                vec![g.group_id.clone()],
            )?])
        }
        Strategy::Combined => {
            let lead = &plan.groups[0];
            let mut union: Vec<String> = plan
                .groups
                .iter()
                .flat_map(|g| g.members.iter().cloned())
                .collect();
            union.sort();
            union.dedup();
            let charged = plan.groups.iter().map(|g| g.group_id.clone()).collect();
            Ok(vec![phase_for(lead, union, charged)?])
        }
    }
}

/// Runs the whole schedule: every phase's rounds, per-round averaging under
/// the policy runtime, budget charges, then the terminal program and
/// release. Budget overruns and terminal policy violations produce
/// [`ScheduleVerdict::Rejected`] and release nothing; infrastructure
/// failures are hard errors.
///
/// `on_round` observes a [`RoundObservation`] once per completed round, in
/// order, after that round's budget charges have landed in the ledger.
pub fn run_schedule<F>(
    registry: &CommandRegistry,
    plan: &SchedulePlan,
    roster: &BTreeMap<String, &dyn Participant>,
    model: DataPolicyPair,
    ledger: &mut PrivacyLedger,
    mut on_round: F,
) -> Result<ScheduleOutcome, NetError>
where
    F: FnMut(&RoundObservation),
{
    if plan.groups.is_empty() {
        return Err(NetError::Protocol("schedule has no groups".into()));
    }
    if !(plan.eta.is_finite() && plan.eta > 0.0) {
        return Err(NetError::Protocol(format!(
            "eta must be positive and finite, got {}",
            plan.eta
        )));
    }
    for g in &plan.groups {
        ledger.register_group(&g.group_id);
        if let Some(dp) = &g.dp {
            dp.validate()?;
        }
    }

    let phases = expand_phases(plan)?;
    let mut model = model;
    let mut round: u64 = 0;
    let mut timings = Vec::new();
    let mut phase_outcomes = Vec::new();

    for phase in &phases {
        let mut failures = Vec::new();
        for _ in 0..phase.rounds {
            let ids =
                sample_participants(&phase.cohort, phase.round_size, round, plan.master_seed)?;
            let selected: Vec<&dyn Participant> = ids
                .iter()
                .map(|id| {
                    roster.get(id).copied().ok_or_else(|| {
                        NetError::Protocol(format!("participant {id} is not connected"))
                    })
                })
                .collect::<Result<_, _>>()?;
            let mut outcome = run_round(
                registry,
                round,
                &model,
                &selected,
                &phase.local_program,
                plan.master_seed,
                plan.timeout,
            )?;

            // With server placement the nodes clip without noising and the
            // coordinator draws the one round-total sample here, outside
            // the command alphabet: a payload substitution on the sum, not
            // a policy step.
            let sum = match (&phase.dp, phase.placement) {
                (Some(dp), NoisePlacement::Server) if dp.noise_sigma > 0.0 => {
                    let noise_seed =
                        node_seed(plan.master_seed, round, "coordinator/noise") ^ NOISE_SEED_SALT;
                    match outcome.sum.payload_internal() {
                        Payload::Update(u) => outcome
                            .sum
                            .with_update_payload(add_gaussian_noise(u, dp.noise_sigma, noise_seed)),
                        other => {
                            return Err(NetError::Protocol(format!(
                                "round sum carries a {} payload",
                                other.kind()
                            )))
                        }
                    }
                }
                _ => outcome.sum,
            };

            let n = match plan.divisor {
                Divisor::Total => phase.cohort.len(),
                Divisor::Round => outcome.contributors.len(),
            };
            let avg = CommandInvocation::bare("average")
                .with_arg("eta", plan.eta)
                .with_arg("n", n as i64);
            let avg_start = Instant::now();
            let next = {
                let mut ctx = CommandCtx::global(round, 0, &mut *ledger);
                invoke(registry, &mut ctx, &avg, &[&model, &sum])?
            };
            outcome.timing.ttp += avg_start.elapsed();
            model = next;

            if let Some(dp) = &phase.dp {
                if dp.noise_sigma > 0.0 {
                    let z = dp.noise_sigma / dp.clip_bound;
                    for (group, q) in &phase.charges {
                        ledger.charge_round(group, *q, z)?;
                    }
                }
            }

            for (participant, reason) in outcome.failures {
                failures.push((round, participant, reason));
            }
            timings.push(outcome.timing.clone());
            on_round(&RoundObservation {
                group: &phase.group_id,
                round,
                model: &model,
                timing: &outcome.timing,
                ledger,
            });
            round += 1;
        }
        phase_outcomes.push(PhaseOutcome {
            group_id: phase.group_id.clone(),
            cohort_size: phase.cohort.len(),
            rounds: phase.rounds,
            failures,
        });
    }

    let rejected = |reason: String, phases, timings| {
        Ok(ScheduleOutcome {
            verdict: ScheduleVerdict::Rejected(reason),
            phases,
            timings,
            rounds_completed: round,
        })
    };

    // Every declared budget is enforced before anything can leave, whether
    // or not the submitted terminal program asks.
    for g in &plan.groups {
        if let Some(max) = g.max_epsilon {
            match ledger.enforce_budget(&g.group_id, max)? {
                BudgetOutcome::Pass { .. } => {}
                BudgetOutcome::Fail { spent, max_epsilon } => {
                    return rejected(
                        format!(
                            "group {} spent epsilon {spent:.6}, over its budget {max_epsilon}",
                            g.group_id
                        ),
                        phase_outcomes,
                        timings,
                    );
                }
            }
        }
    }

    let terminal = match &plan.global_program {
        None => model,
        Some(prog) => {
            let run = {
                let mut ctx = CommandCtx::global(round, 0, &mut *ledger);
                run_program(
                    registry,
                    &mut ctx,
                    prog,
                    BTreeMap::from([("model".to_string(), model)]),
                )
            };
            match run {
                Ok(mut slots) => {
                    let out = prog
                        .steps
                        .last()
                        .map(|s| s.output.clone())
                        .unwrap_or_else(|| "model".to_string());
                    slots.remove(&out).expect("run_program keeps every slot")
                }
                Err(e @ (DppError::BudgetExceeded { .. } | DppError::PolicyViolation { .. })) => {
                    return rejected(e.to_string(), phase_outcomes, timings);
                }
                Err(e) => return Err(e.into()),
            }
        }
    };

    let released = if terminal.is_released() {
        terminal
    } else {
        match terminal.release(round) {
            Ok(r) => r,
            Err(e @ DppError::PolicyViolation { .. }) => {
                return rejected(e.to_string(), phase_outcomes, timings);
            }
            Err(e) => return Err(e.into()),
        }
    };
    Ok(ScheduleOutcome {
        verdict: ScheduleVerdict::Final(released),
        phases: phase_outcomes,
        timings,
        rounds_completed: round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(id: &str, members: &[&str]) -> GroupPlan {
        GroupPlan {
            group_id: id.to_string(),
            members: members.iter().map(|m| m.to_string()).collect(),
            rounds: 3,
            round_size: 2,
            dp: None,
            placement: NoisePlacement::Local,
            max_epsilon: None,
            local_program: RestrictedProgram {
                role: crate::dpp::Site::Local,
                steps: vec![],
            },
        }
    }

    fn plan(strategy: Strategy) -> SchedulePlan {
        SchedulePlan {
            strategy,
            groups: vec![group("strict", &["a", "b", "c"]), group("open", &["c", "d"])],
            eta: 1.0,
            divisor: Divisor::Total,
            timeout: Duration::from_secs(1),
            master_seed: 0,
            global_program: None,
        }
    }

    #[test]
    fn strategies_expand_to_the_documented_phases() {
        let cascaded = expand_phases(&plan(Strategy::Cascaded)).unwrap();
        assert_eq!(cascaded.len(), 2);
        assert_eq!(cascaded[0].group_id, "strict");
        assert_eq!(cascaded[0].cohort, vec!["a", "b", "c"]);
        assert_eq!(cascaded[0].charges, vec![("strict".to_string(), 2.0 / 3.0)]);
        assert_eq!(cascaded[1].charges, vec![("open".to_string(), 1.0)]);

        let combined = expand_phases(&plan(Strategy::Combined)).unwrap();
        assert_eq!(combined.len(), 1);
        assert_eq!(combined[0].group_id, "strict", "lead group sets the mechanism");
        assert_eq!(combined[0].cohort, vec!["a", "b", "c", "d"], "union, deduplicated");
        assert_eq!(
            combined[0].charges,
            vec![
                ("strict".to_string(), 0.5),
                ("open".to_string(), 0.5)
            ],
            "every group pays the union sampling rate"
        );

        let subset = expand_phases(&plan(Strategy::SubsetOnly)).unwrap();
        assert_eq!(subset.len(), 1);
        assert_eq!(subset[0].group_id, "open");
        assert_eq!(subset[0].cohort, vec!["c", "d"]);
    }

    #[test]
    fn strategy_and_divisor_names_are_kebab_case() {
        assert_eq!(
            serde_json::to_string(&Strategy::SubsetOnly).unwrap(),
            "\"subset-only\""
        );
        assert_eq!(
            serde_json::from_str::<Strategy>("\"cascaded\"").unwrap(),
            Strategy::Cascaded
        );
        assert_eq!(serde_json::to_string(&Divisor::Total).unwrap(), "\"total\"");
    }
}
