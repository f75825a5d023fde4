//! How the coordinator reaches participants: over TCP, or in process.
//!
//! Both transports move complete encoded frames, so the in-process path
//! exercises the exact byte-level codec the socket path does, and a traffic
//! log captured from either contains the same frames for a given run.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::edge::EdgeNode;
use super::wire::{read_frame, write_frame};
use super::NetError;

/// Captured frames, both directions, in observation order.
pub type TrafficLog = Arc<Mutex<Vec<Vec<u8>>>>;

fn capture(log: &Option<TrafficLog>, frame: &[u8]) {
    if let Some(log) = log {
        log.lock().expect("traffic log poisoned").push(frame.to_vec());
    }
}

/// One reachable edge node, as the coordinator sees it.
pub trait Participant: Send + Sync {
    fn id(&self) -> &str;

    /// Sends one TASK frame and waits for the answering frame.
    ///
    /// Returns `(response_frame, ttd, wait)`: `ttd` is the transmit
    /// duration, `wait` the duration from transmit completion to full
    /// receipt (the node's execution time is inside `wait`; the caller
    /// subtracts the node-reported TTE to get TTR).
    fn exchange(
        &self,
        task_frame: &[u8],
        timeout: Duration,
    ) -> Result<(Vec<u8>, Duration, Duration), NetError>;
}

/// In-process participant: hands frames straight to an [`EdgeNode`].
pub struct InProcParticipant {
    node: Arc<EdgeNode>,
    log: Option<TrafficLog>,
}

impl InProcParticipant {
    pub fn new(node: Arc<EdgeNode>) -> Self {
        InProcParticipant { node, log: None }
    }

    /// Records every frame moved through this participant into `log`.
    pub fn with_traffic_log(node: Arc<EdgeNode>, log: TrafficLog) -> Self {
        InProcParticipant {
            node,
            log: Some(log),
        }
    }
}

impl Participant for InProcParticipant {
    fn id(&self) -> &str {
        self.node.node_id()
    }

    fn exchange(
        &self,
        task_frame: &[u8],
        _timeout: Duration,
    ) -> Result<(Vec<u8>, Duration, Duration), NetError> {
        let t0 = Instant::now();
        capture(&self.log, task_frame);
        let delivered = task_frame.to_vec();
        let ttd = t0.elapsed();
        let t1 = Instant::now();
        let response = self.node.handle_frame(&delivered);
        capture(&self.log, &response);
        let wait = t1.elapsed();
        Ok((response, ttd, wait))
    }
}

/// TCP participant: dials the node's task address per exchange.
pub struct TcpParticipant {
    node_id: String,
    addr: String,
    log: Option<TrafficLog>,
}

impl TcpParticipant {
    pub fn new(node_id: &str, addr: &str) -> Self {
        TcpParticipant {
            node_id: node_id.to_string(),
            addr: addr.to_string(),
            log: None,
        }
    }

    pub fn with_traffic_log(node_id: &str, addr: &str, log: TrafficLog) -> Self {
        TcpParticipant {
            node_id: node_id.to_string(),
            addr: addr.to_string(),
            log: Some(log),
        }
    }
}

impl Participant for TcpParticipant {
    fn id(&self) -> &str {
        &self.node_id
    }

    fn exchange(
        &self,
        task_frame: &[u8],
        timeout: Duration,
    ) -> Result<(Vec<u8>, Duration, Duration), NetError> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| NetError::Protocol(format!("unresolvable address {}", self.addr)))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;

        let t0 = Instant::now();
        write_frame(&mut stream, task_frame)?;
        capture(&self.log, task_frame);
        let ttd = t0.elapsed();

        let t1 = Instant::now();
        let response = read_frame(&mut stream).map_err(|e| match e {
            NetError::Io(io) if io.kind() == std::io::ErrorKind::WouldBlock
                || io.kind() == std::io::ErrorKind::TimedOut =>
            {
                NetError::Timeout(format!("no reply from {} within {timeout:?}", self.node_id))
            }
            other => other,
        })?;
        let wait = t1.elapsed();
        capture(&self.log, &response);
        Ok((response, ttd, wait))
    }
}
