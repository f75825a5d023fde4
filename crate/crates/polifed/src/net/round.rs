//! One federated round: sample participants, fan the task out, collect
//! updates, and fold them into a policy-carrying sum on the coordinator.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::transport::Participant;
use super::wire::{
    dpp_from_wire, dpp_to_wire, encode_frame, parse_body, split_frame, ErrorBody, MsgKind,
    ResultBody, TaskBody, TaskOutcome,
};
use super::{node_seed, NetError};
use crate::dpp::{
    invoke, CommandCtx, CommandRegistry, DataPolicyPair, RestrictedProgram, Site,
};
use crate::policy::CommandInvocation;

/// Header of the timing CSV; one row per participant per round.
pub const TIMING_CSV_HEADER: &str = "round,participant,ttd_ms,tte_ms,ttr_ms,ttp_ms";

/// Wall-clock decomposition of one participant's task exchange.
#[derive(Debug, Clone)]
pub struct ParticipantTiming {
    pub participant: String,
    /// Time to deliver the task to the node.
    pub ttd: Duration,
    /// Node-reported execution time of the local program.
    pub tte: Duration,
    /// Time to receive the response, net of the node's execution time.
    pub ttr: Duration,
    /// Full exchange wall clock; always at least ttd + tte + ttr.
    pub span: Duration,
}

/// Timing of one full round, including the coordinator's policy-side work.
#[derive(Debug, Clone)]
pub struct RoundTiming {
    pub round: u64,
    pub participants: Vec<ParticipantTiming>,
    /// Coordinator time spent in policy-checked aggregation.
    pub ttp: Duration,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl RoundTiming {
    /// Rows matching [`TIMING_CSV_HEADER`]; the round's aggregation time is
    /// repeated on each row.
    pub fn csv_rows(&self) -> Vec<String> {
        self.participants
            .iter()
            .map(|p| {
                format!(
                    "{},{},{:.3},{:.3},{:.3},{:.3}",
                    self.round,
                    p.participant,
                    ms(p.ttd),
                    ms(p.tte),
                    ms(p.ttr),
                    ms(self.ttp),
                )
            })
            .collect()
    }
}

/// Uniform sample of `m` distinct members, deterministic in `(seed, round)`.
pub fn sample_participants(
    members: &[String],
    m: usize,
    round: u64,
    seed: u64,
) -> Result<Vec<String>, NetError> {
    if m == 0 {
        return Err(NetError::Protocol("cannot sample zero participants".into()));
    }
    if m > members.len() {
        return Err(NetError::Protocol(format!(
            "cannot sample {m} participants from a group of {}",
            members.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(round);
    // Partial Fisher-Yates: after i swaps the prefix is a uniform draw
    // without replacement.
    let mut idx: Vec<usize> = (0..members.len()).collect();
    for i in 0..m {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    Ok(idx[..m].iter().map(|&i| members[i].clone()).collect())
}

/// Outcome of one round: the accumulated sum of the surviving updates, who
/// contributed, who failed and why, and the measured timings.
#[derive(Debug)]
pub struct RoundOutcome {
    pub sum: DataPolicyPair,
    pub contributors: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub timing: RoundTiming,
}

enum Exchange {
    Update(Box<DataPolicyPair>),
    Failed(String),
}

struct Returned {
    id: String,
    exchange: Exchange,
    timing: Option<ParticipantTiming>,
}

fn run_task(
    participant: &dyn Participant,
    frame: &[u8],
    round: u64,
    timeout: Duration,
) -> Returned {
    let id = participant.id().to_string();
    let (response, ttd, wait) = match participant.exchange(frame, timeout) {
        Ok(r) => r,
        Err(e) => {
            return Returned {
                id,
                exchange: Exchange::Failed(format!("{}: {e}", e.code())),
                timing: None,
            }
        }
    };
    let body = match split_frame(&response) {
        Ok((MsgKind::Result, body)) => match parse_body::<ResultBody>(body) {
            Ok(b) => b,
            Err(e) => {
                return Returned {
                    id,
                    exchange: Exchange::Failed(format!("bad_body: {e}")),
                    timing: None,
                }
            }
        },
        Ok((MsgKind::Error, body)) => {
            let detail = parse_body::<ErrorBody>(body)
                .map(|e| format!("{}: {}", e.code, e.detail))
                .unwrap_or_else(|e| format!("bad_body: {e}"));
            return Returned {
                id,
                exchange: Exchange::Failed(detail),
                timing: None,
            };
        }
        Ok((kind, _)) => {
            return Returned {
                id,
                exchange: Exchange::Failed(format!("unexpected_kind: {kind:?}")),
                timing: None,
            }
        }
        Err(e) => {
            return Returned {
                id,
                exchange: Exchange::Failed(format!("{}: {e}", e.code())),
                timing: None,
            }
        }
    };
    let tte = Duration::from_secs_f64((body.tte_ms / 1000.0).max(0.0));
    let timing = Some(ParticipantTiming {
        participant: id.clone(),
        ttd,
        tte,
        ttr: wait.saturating_sub(tte),
        span: ttd + wait,
    });
    if body.round != round {
        return Returned {
            id,
            exchange: Exchange::Failed(format!(
                "protocol: result for round {} in round {round}",
                body.round
            )),
            timing,
        };
    }
    match body.outcome {
        TaskOutcome::Failure { code, detail } => Returned {
            id,
            exchange: Exchange::Failed(format!("{code}: {detail}")),
            timing,
        },
        TaskOutcome::Update(wire) => match dpp_from_wire(&wire) {
            Ok(pair) => Returned {
                id,
                exchange: Exchange::Update(Box::new(pair)),
                timing,
            },
            Err(e) => Returned {
                id,
                exchange: Exchange::Failed(format!("{}: {e}", e.code())),
                timing,
            },
        },
    }
}

/// Runs one round over the given participants: tasks go out concurrently,
/// responses are collected until `timeout`, and surviving updates are
/// accumulated in participant-id order under the policy runtime. Failures
/// of any kind exclude that participant from the sum; the round fails only
/// if nobody contributes.
pub fn run_round(
    registry: &CommandRegistry,
    round: u64,
    model: &DataPolicyPair,
    participants: &[&dyn Participant],
    local_program: &RestrictedProgram,
    seed_base: u64,
    timeout: Duration,
) -> Result<RoundOutcome, NetError> {
    let model_wire = dpp_to_wire(model);
    let frames: Vec<Vec<u8>> = participants
        .iter()
        .map(|p| {
            encode_frame(
                MsgKind::Task,
                &TaskBody {
                    round,
                    seed: node_seed(seed_base, round, p.id()),
                    model: model_wire.clone(),
                    local_program: local_program.clone(),
                },
            )
        })
        .collect();

    let mut returned: Vec<Returned> = std::thread::scope(|scope| {
        let handles: Vec<_> = participants
            .iter()
            .zip(&frames)
            .map(|(p, frame)| scope.spawn(move || run_task(*p, frame, round, timeout)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("task worker panicked"))
            .collect()
    });
    returned.sort_by(|a, b| a.id.cmp(&b.id));

    let mut contributors = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    let mut updates: Vec<(String, DataPolicyPair)> = Vec::new();
    for r in returned {
        if let Some(t) = r.timing {
            timings.push(t);
        }
        match r.exchange {
            Exchange::Update(pair) => updates.push((r.id, *pair)),
            Exchange::Failed(detail) => failures.push((r.id, detail)),
        }
    }

    let mut ctx = CommandCtx {
        site: Site::Global,
        round,
        seed: 0,
        task: None,
        ledger: None,
    };
    let acc_cmd = CommandInvocation::bare("accumulate");
    let ttp_start = Instant::now();
    // k updates take k-1 accumulate steps: the first update seeds the
    // accumulator, and a lone contributor legitimately pays no accumulate
    // derivation (the policy still gates it at the averaging step).
    let mut sum: Option<DataPolicyPair> = None;
    for (id, pair) in updates {
        match sum.take() {
            None => {
                sum = Some(pair);
                contributors.push(id);
            }
            Some(acc) => match invoke(registry, &mut ctx, &acc_cmd, &[&acc, &pair]) {
                Ok(next) => {
                    sum = Some(next);
                    contributors.push(id);
                }
                Err(e) => {
                    failures.push((id, format!("{e}")));
                    sum = Some(acc);
                }
            },
        }
    }
    let ttp = ttp_start.elapsed();

    let Some(sum) = sum else {
        return Err(NetError::RoundFailed { round });
    };
    Ok(RoundOutcome {
        sum,
        contributors,
        failures,
        timing: RoundTiming {
            round,
            participants: timings,
            ttp,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let members: Vec<String> = (0..20).map(|i| format!("n{i:02}")).collect();
        let a = sample_participants(&members, 7, 3, 42).unwrap();
        let b = sample_participants(&members, 7, 3, 42).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 7, "no member drawn twice");
        let c = sample_participants(&members, 7, 4, 42).unwrap();
        assert_ne!(a, c, "different rounds draw different cohorts");
        let d = sample_participants(&members, 7, 3, 43).unwrap();
        assert_ne!(a, d, "different seeds draw different cohorts");
    }

    #[test]
    fn sampling_rejects_impossible_cohorts() {
        let members: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
        assert!(sample_participants(&members, 6, 0, 1).is_err());
        assert!(sample_participants(&members, 0, 0, 1).is_err());
        assert_eq!(
            sample_participants(&members, 5, 0, 1).unwrap().len(),
            5,
            "m equal to the group size selects everyone"
        );
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        // Each member's selection count over r rounds is Binomial(r, m/n);
        // every member must sit within 3 sigma of the mean for both a
        // sparse and a half-size cohort.
        let n = 200;
        let members: Vec<String> = (0..n).map(|i| format!("n{i:03}")).collect();
        for m in [10usize, 100] {
            let rounds = 1000u64;
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for round in 0..rounds {
                for id in sample_participants(&members, m, round, 7).unwrap() {
                    *counts.entry(id).or_default() += 1;
                }
            }
            let p = m as f64 / n as f64;
            let mean = rounds as f64 * p;
            let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
            for member in &members {
                let c = counts.get(member).copied().unwrap_or(0) as f64;
                assert!(
                    (c - mean).abs() <= 3.0 * sigma,
                    "member {member} selected {c} times, expected {mean:.1} +/- {:.1}",
                    3.0 * sigma
                );
            }
        }
    }

    #[test]
    fn timing_rows_match_the_header_shape() {
        let timing = RoundTiming {
            round: 4,
            participants: vec![ParticipantTiming {
                participant: "n01".into(),
                ttd: Duration::from_millis(2),
                tte: Duration::from_millis(30),
                ttr: Duration::from_millis(1),
                span: Duration::from_millis(34),
            }],
            ttp: Duration::from_micros(1500),
        };
        let rows = timing.csv_rows();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0], "4,n01,2.000,30.000,1.000,1.500");
        assert_eq!(
            TIMING_CSV_HEADER.split(',').count(),
            rows[0].split(',').count()
        );
    }
}
