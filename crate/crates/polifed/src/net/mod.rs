//! The coordinator and edge-node runtime: wire protocol, transports,
//! round execution with timing capture, and group scheduling.
//!
//! The moving parts, bottom to top:
//!
//! - [`wire`]: length-prefixed frames and the message bodies, including the
//!   explicit transport form of a data-policy pair.
//! - [`transport`]: the [`Participant`] abstraction the coordinator drives,
//!   with a TCP implementation and an in-process one that moves the same
//!   encoded frames (so tests exercise the full codec path without sockets).
//! - [`EdgeNode`]: holds one user's dataset and policy, executes local
//!   programs under the policy runtime, and refuses to ship updates whose
//!   policy forbids release.
//! - [`run_round`]: fan out one TASK per participant, collect RESULTs,
//!   accumulate updates under policy control, record TTD/TTE/TTR/TTP.
//! - [`run_schedule`]: execute group phases (subset-only, combined, or
//!   cascaded), charge the privacy ledger per phase, run the terminal global
//!   program, and release the model only if every check passes.

mod coordinator;
mod edge;
mod round;
mod schedule;
mod transport;
pub mod wire;

use thiserror::Error;

use crate::data::DataError;
use crate::dp::DpError;
use crate::dpp::DppError;
use crate::fl::codec::CodecError;
use crate::fl::FlError;
use crate::policy::ParseError;

pub use coordinator::{authenticate, spawn_coordinator, submit, CoordinatorHandle, OnSubmit};
pub use edge::{register_with_coordinator, spawn_edge, EdgeHandle, EdgeNode};
pub use round::{
    run_round, sample_participants, ParticipantTiming, RoundOutcome, RoundTiming, TIMING_CSV_HEADER,
};
pub use schedule::{
    run_schedule, Divisor, GroupPlan, PhaseOutcome, RoundObservation, SchedulePlan,
    ScheduleOutcome, ScheduleVerdict, Strategy,
};
pub use transport::{InProcParticipant, Participant, TcpParticipant, TrafficLog};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad frame: {0}")]
    Frame(String),
    #[error("bad message body: {0}")]
    Body(String),
    #[error("invalid token")]
    InvalidToken,
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("round {round}: every participant failed")]
    RoundFailed { round: u64 },
    #[error(transparent)]
    Policy(#[from] DppError),
    #[error(transparent)]
    PolicyText(#[from] ParseError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

impl NetError {
    /// Short machine-readable code for ERROR replies and failure records.
    pub fn code(&self) -> &'static str {
        match self {
            NetError::Io(_) => "io",
            NetError::Frame(_) => "bad_frame",
            NetError::Body(_) => "bad_body",
            NetError::InvalidToken => "invalid_token",
            NetError::Timeout(_) => "timeout",
            NetError::Protocol(_) => "protocol",
            NetError::RoundFailed { .. } => "round_failed",
            NetError::Policy(DppError::PolicyViolation { .. }) => "policy_violation",
            NetError::Policy(DppError::BudgetExceeded { .. }) => "budget_exceeded",
            NetError::Policy(_) => "program_error",
            NetError::PolicyText(_) => "bad_policy",
            NetError::Codec(_) => "bad_model_bytes",
            NetError::Data(_) => "bad_dataset",
            NetError::Fl(_) => "training_error",
            NetError::Dp(_) => "accounting_error",
        }
    }
}

/// Stable 64-bit hash (FNV-1a) for deriving per-node seeds; must agree
/// across processes, so no `std::hash` randomness.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The seed an edge node receives for one round: deterministic in the master
/// seed, the round index, and the node identity.
pub fn node_seed(master_seed: u64, round: u64, node_id: &str) -> u64 {
    let mut x = master_seed
        .wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stable_hash(node_id));
    // splitmix64 finalizer: decorrelates nearby (seed, round) inputs.
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_seeds_are_deterministic_and_distinct() {
        assert_eq!(node_seed(1, 2, "edge-000"), node_seed(1, 2, "edge-000"));
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..3u64 {
            for round in 0..5u64 {
                for node in 0..20 {
                    seen.insert(node_seed(seed, round, &format!("edge-{node:03}")));
                }
            }
        }
        assert_eq!(seen.len(), 3 * 5 * 20, "seed collisions");
    }

    #[test]
    fn error_codes_classify_policy_failures() {
        let e = NetError::Policy(DppError::PolicyViolation {
            command: "train_local".into(),
            policy: "0".into(),
        });
        assert_eq!(e.code(), "policy_violation");
        assert_eq!(NetError::InvalidToken.code(), "invalid_token");
    }
}
