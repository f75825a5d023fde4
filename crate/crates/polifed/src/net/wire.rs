//! Frame and message encoding.
//!
//! A frame is `length: u32 BE` followed by `version: u8`, `kind: u8`, and a
//! JSON body. The length counts the payload (version byte onward). Encoding
//! always goes through [`encode_frame`], so in-process and socket transports
//! move byte-identical frames; decoding validates length, version, and kind
//! before any body parsing, and body parsing never panics on garbage.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::dpp::{DataPolicyPair, Lineage, Payload, RestrictedProgram};
use crate::fl::codec;
use crate::policy::{parse_policy, CommandInvocation};

pub const WIRE_VERSION: u8 = 1;

/// Payload size guard: a bogus length prefix must not trigger a giant
/// allocation.
pub const MAX_PAYLOAD: usize = 64 << 20;

/// Message kinds, one byte on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgKind {
    /// Service request: token, programs, scenario.
    Submit = 1,
    /// Coordinator to edge: run the local program for one round.
    Task = 2,
    /// Edge to coordinator: the round's update or failure.
    Result = 3,
    /// Coordinator to service: released model or rejection.
    Final = 4,
    /// Either direction: protocol-level failure.
    Error = 5,
    /// Edge to coordinator at startup: node id and task address.
    Register = 6,
}

impl MsgKind {
    fn from_byte(b: u8) -> Option<MsgKind> {
        match b {
            1 => Some(MsgKind::Submit),
            2 => Some(MsgKind::Task),
            3 => Some(MsgKind::Result),
            4 => Some(MsgKind::Final),
            5 => Some(MsgKind::Error),
            6 => Some(MsgKind::Register),
            _ => None,
        }
    }
}

/// Encodes one message as a complete frame, length prefix included.
pub fn encode_frame<T: Serialize>(kind: MsgKind, body: &T) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("wire bodies serialize");
    let payload_len = 2 + json.len();
    let mut out = Vec::with_capacity(4 + payload_len);
    out.extend_from_slice(&(payload_len as u32).to_be_bytes());
    out.push(WIRE_VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&json);
    out
}

/// Splits a complete frame into kind and body bytes, validating the length
/// prefix, version, and kind.
pub fn split_frame(frame: &[u8]) -> Result<(MsgKind, &[u8]), NetError> {
    if frame.len() < 6 {
        return Err(NetError::Frame(format!(
            "frame too short: {} bytes",
            frame.len()
        )));
    }
    let declared = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if declared != frame.len() - 4 {
        return Err(NetError::Frame(format!(
            "length prefix {declared} but payload is {} bytes",
            frame.len() - 4
        )));
    }
    if frame[4] != WIRE_VERSION {
        return Err(NetError::Frame(format!("unknown version {}", frame[4])));
    }
    let kind = MsgKind::from_byte(frame[5])
        .ok_or_else(|| NetError::Frame(format!("unknown message kind {}", frame[5])))?;
    Ok((kind, &frame[6..]))
}

/// Parses a frame body into its typed form.
pub fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, NetError> {
    serde_json::from_slice(body).map_err(|e| NetError::Body(e.to_string()))
}

/// Reads one complete frame (prefix included) from a stream.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, NetError> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len < 2 || len > MAX_PAYLOAD {
        return Err(NetError::Frame(format!("declared payload of {len} bytes")));
    }
    let mut frame = Vec::with_capacity(4 + len);
    frame.extend_from_slice(&len_bytes);
    frame.resize(4 + len, 0);
    r.read_exact(&mut frame[4..])?;
    Ok(frame)
}

/// Writes a complete frame to a stream.
pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> Result<(), NetError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

/// Edge registration: the node's identity and the address it accepts TASK
/// connections on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterBody {
    pub node_id: String,
    pub addr: String,
}

/// Service request carrying the programs and the scenario to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitBody {
    pub token: String,
    pub global_program: RestrictedProgram,
    pub local_program: RestrictedProgram,
    pub scenario: serde_json::Value,
}

/// One round's work order for an edge node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBody {
    pub round: u64,
    /// Per-(node, round) seed chosen by the coordinator, so replays and the
    /// in-process transport reproduce socketed runs exactly.
    pub seed: u64,
    pub model: WireDpp,
    pub local_program: RestrictedProgram,
}

/// One round's answer from an edge node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultBody {
    pub round: u64,
    /// Node-reported execution time of the local program.
    pub tte_ms: f64,
    pub outcome: TaskOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Update(WireDpp),
    Failure { code: String, detail: String },
}

/// The schedule's terminal message to the submitting service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalBody {
    Model(WireDpp),
    Rejection(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub detail: String,
}

/// A data-policy pair in transit. Policies travel as their textual form,
/// models as base64 of the binary parameter encoding, datasets as CSV plus
/// the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireDpp {
    pub payload: WirePayload,
    pub policy: String,
    pub lineage: Vec<WireLineage>,
    pub released: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WirePayload {
    Dataset { csv: String, sidecar: String },
    Model { b64: String },
    Update { b64: String },
    Scalar { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireLineage {
    pub origin: String,
    pub original_policy: String,
    pub trace: Vec<WireStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireStep {
    pub cmd: CommandInvocation,
    pub round: u64,
}

/// Converts a pair to its transport form.
pub fn dpp_to_wire(pair: &DataPolicyPair) -> WireDpp {
    let payload = match pair.payload_internal() {
        Payload::Dataset(d) => {
            let (csv, sidecar) = crate::data::dataset_to_csv(d);
            WirePayload::Dataset { csv, sidecar }
        }
        Payload::Model(m) => WirePayload::Model {
            b64: BASE64.encode(codec::encode(m)),
        },
        Payload::Update(u) => WirePayload::Update {
            b64: BASE64.encode(codec::encode(u)),
        },
        Payload::Scalar(x) => WirePayload::Scalar { value: *x },
    };
    WireDpp {
        payload,
        policy: pair.policy().to_string(),
        lineage: pair
            .lineage()
            .iter()
            .map(|lin| WireLineage {
                origin: lin.origin.clone(),
                original_policy: lin.original_policy.to_string(),
                trace: lin
                    .trace
                    .iter()
                    .map(|(cmd, round)| WireStep {
                        cmd: cmd.clone(),
                        round: *round,
                    })
                    .collect(),
            })
            .collect(),
        released: pair.released_payload().is_some(),
    }
}

/// Rebuilds a pair from its transport form. Policy, lineage, and release
/// state survive the round trip exactly; the textual policy form re-parses
/// to the identical reduced AST.
pub fn dpp_from_wire(w: &WireDpp) -> Result<DataPolicyPair, NetError> {
    let payload = match &w.payload {
        WirePayload::Dataset { csv, sidecar } => {
            Payload::Dataset(crate::data::dataset_from_csv(csv, sidecar)?)
        }
        WirePayload::Model { b64 } => Payload::Model(codec::decode(
            &BASE64
                .decode(b64)
                .map_err(|e| NetError::Body(format!("model payload: {e}")))?,
        )?),
        WirePayload::Update { b64 } => Payload::Update(codec::decode(
            &BASE64
                .decode(b64)
                .map_err(|e| NetError::Body(format!("update payload: {e}")))?,
        )?),
        WirePayload::Scalar { value } => Payload::Scalar(*value),
    };
    let policy = parse_policy(&w.policy)?;
    let lineage = w
        .lineage
        .iter()
        .map(|lin| {
            Ok(Lineage {
                origin: lin.origin.clone(),
                original_policy: parse_policy(&lin.original_policy)?,
                trace: lin
                    .trace
                    .iter()
                    .map(|s| (s.cmd.clone(), s.round))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    Ok(DataPolicyPair::from_parts(
        payload,
        policy,
        lineage,
        w.released,
    ))
}
