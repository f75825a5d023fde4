//! The edge-node runtime: owns one user's dataset and policy, executes
//! local programs under the policy runtime, and ships updates back only
//! when their policy permits release toward the coordinator.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::wire::{
    dpp_from_wire, dpp_to_wire, encode_frame, parse_body, read_frame, split_frame, write_frame,
    ErrorBody, MsgKind, RegisterBody, ResultBody, TaskBody, TaskOutcome, WireDpp,
};
use super::NetError;
use crate::data::UserDataset;
use crate::dpp::{
    builtin_registry, run_program, validate_program, CommandCtx, CommandRegistry, DataPolicyPair,
    DppError, Payload,
};
use crate::fl::task::DifferentiableTask;
use crate::policy::{CommandInvocation, MacroTable, Policy};

/// One edge node: a user's table, the policy governing it, the fixed command
/// registry, and the training task the node knows how to run.
pub struct EdgeNode {
    node_id: String,
    dataset: UserDataset,
    policy: Policy,
    registry: CommandRegistry,
    task: Box<dyn DifferentiableTask + Send + Sync>,
}

impl EdgeNode {
    /// Builds a node from an already reduced, macro-free policy.
    pub fn new(
        node_id: &str,
        dataset: UserDataset,
        policy: Policy,
        task: Box<dyn DifferentiableTask + Send + Sync>,
    ) -> Self {
        EdgeNode {
            node_id: node_id.to_string(),
            dataset,
            policy: policy.reduce(),
            registry: builtin_registry(),
            task,
        }
    }

    /// Builds a node from policy text, expanding macros.
    pub fn from_policy_text(
        node_id: &str,
        dataset: UserDataset,
        policy_text: &str,
        task: Box<dyn DifferentiableTask + Send + Sync>,
    ) -> Result<Self, NetError> {
        let parsed = crate::policy::parse_policy(policy_text)?;
        let expanded = MacroTable::with_defaults()
            .expand(&parsed)
            .map_err(|e| NetError::Protocol(format!("policy macro: {e}")))?;
        Ok(EdgeNode::new(node_id, dataset, expanded, task))
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Hook-execution counters of this node's registry, for enforcement
    /// audits: a rejected program must leave every counter untouched.
    pub fn total_hook_calls(&self) -> u64 {
        self.registry.total_calls()
    }

    /// Handles one TASK, reporting execution time and either the update or
    /// the failure. Never panics; every error becomes a failure outcome.
    pub fn handle_task(&self, task: &TaskBody) -> ResultBody {
        let started = Instant::now();
        let outcome = match self.execute(task) {
            Ok(update) => TaskOutcome::Update(update),
            Err(e) => TaskOutcome::Failure {
                code: e.code().to_string(),
                detail: e.to_string(),
            },
        };
        ResultBody {
            round: task.round,
            tte_ms: started.elapsed().as_secs_f64() * 1000.0,
            outcome,
        }
    }

    fn execute(&self, task: &TaskBody) -> Result<WireDpp, NetError> {
        let model = dpp_from_wire(&task.model)?;
        // The node, not the coordinator, is the authority on its policy:
        // the data pair is constructed from local state, and the program is
        // statically validated here before any hook runs.
        let policies = BTreeMap::from([
            ("model".to_string(), model.policy().clone()),
            ("data".to_string(), self.policy.clone()),
        ]);
        validate_program(&self.registry, &task.local_program, &policies)?;

        let data = DataPolicyPair::new(
            &format!("{}/data", self.node_id),
            Payload::Dataset(self.dataset.clone()),
            self.policy.clone(),
        );
        let mut ctx = CommandCtx::local(task.round, task.seed, self.task.as_ref());
        let slots = run_program(
            &self.registry,
            &mut ctx,
            &task.local_program,
            BTreeMap::from([("model".to_string(), model), ("data".to_string(), data)]),
        )?;
        let out_slot = &task
            .local_program
            .steps
            .last()
            .ok_or_else(|| NetError::Protocol("local program has no steps".into()))?
            .output;
        let update = slots
            .get(out_slot)
            .expect("run_program returns every assigned slot");

        // Release gate: the update may travel to the coordinator only if
        // its policy either admits accumulation there or already permits
        // full release. Checked on the policy alone; failing it keeps the
        // payload on the node.
        let accumulate_ok =
            update.policy().derive(&CommandInvocation::bare("accumulate")) != Policy::Zero;
        if !accumulate_ok && !update.can_return() {
            return Err(NetError::Policy(DppError::PolicyViolation {
                command: "release-to-coordinator".into(),
                policy: update.policy().to_string(),
            }));
        }
        Ok(dpp_to_wire(update))
    }

    /// Full frame-level dispatch: TASK frames get RESULT frames, anything
    /// else gets an ERROR frame. Both transports go through here.
    pub fn handle_frame(&self, frame: &[u8]) -> Vec<u8> {
        match split_frame(frame) {
            Ok((MsgKind::Task, body)) => match parse_body::<TaskBody>(body) {
                Ok(task) => encode_frame(MsgKind::Result, &self.handle_task(&task)),
                Err(e) => encode_frame(
                    MsgKind::Error,
                    &ErrorBody {
                        code: e.code().to_string(),
                        detail: e.to_string(),
                    },
                ),
            },
            Ok((kind, _)) => encode_frame(
                MsgKind::Error,
                &ErrorBody {
                    code: "unexpected_kind".into(),
                    detail: format!("edge nodes only accept TASK, got {kind:?}"),
                },
            ),
            Err(e) => encode_frame(
                MsgKind::Error,
                &ErrorBody {
                    code: e.code().to_string(),
                    detail: e.to_string(),
                },
            ),
        }
    }
}

/// A running edge listener.
pub struct EdgeHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl EdgeHandle {
    /// Stops the accept loop and joins the serving thread.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the blocking accept with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    /// Blocks until the accept loop exits, for processes whose whole job
    /// is hosting the node.
    pub fn wait(mut self) {
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds a listener and serves TASK connections sequentially (an edge node
/// handles one task at a time): per connection, frames are answered until
/// the peer closes or a frame fails to decode; decode failures get a
/// best-effort ERROR reply, then the connection is dropped and the node
/// keeps serving.
pub fn spawn_edge(node: Arc<EdgeNode>, bind: &str) -> Result<EdgeHandle, NetError> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            serve_connection(&node, stream);
        }
    });
    Ok(EdgeHandle {
        addr,
        stop,
        join: Some(join),
    })
}

fn serve_connection(node: &EdgeNode, mut stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let _ = stream.set_nodelay(true);
    loop {
        match read_frame(&mut stream) {
            Ok(frame) => {
                let reply = node.handle_frame(&frame);
                let (was_error, _) = match split_frame(&reply) {
                    Ok((MsgKind::Error, _)) => (true, ()),
                    _ => (false, ()),
                };
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
                // A decode failure may have desynchronized the stream;
                // reset the connection and let the peer redial.
                if was_error {
                    return;
                }
            }
            Err(NetError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return,
            Err(e) => {
                let reply = encode_frame(
                    MsgKind::Error,
                    &ErrorBody {
                        code: e.code().to_string(),
                        detail: e.to_string(),
                    },
                );
                let _ = write_frame(&mut stream, &reply);
                return;
            }
        }
    }
}

/// Announces this node to the coordinator: one REGISTER frame carrying the
/// node id and the address the node accepts TASK connections on. Returns
/// once the coordinator acknowledges, so the roster is already updated.
pub fn register_with_coordinator(
    coordinator: &str,
    node_id: &str,
    task_addr: &str,
) -> Result<(), NetError> {
    let addr = coordinator
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| NetError::Protocol(format!("unresolvable address {coordinator}")))?;
    let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(10))?;
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let frame = encode_frame(
        MsgKind::Register,
        &RegisterBody {
            node_id: node_id.to_string(),
            addr: task_addr.to_string(),
        },
    );
    write_frame(&mut stream, &frame)?;
    let ack = read_frame(&mut stream)?;
    match split_frame(&ack)? {
        (MsgKind::Register, _) => Ok(()),
        (MsgKind::Error, body) => {
            let e = parse_body::<ErrorBody>(body)?;
            Err(NetError::Protocol(format!("{}: {}", e.code, e.detail)))
        }
        (kind, _) => Err(NetError::Protocol(format!(
            "expected registration ack, got {kind:?}"
        ))),
    }
}
