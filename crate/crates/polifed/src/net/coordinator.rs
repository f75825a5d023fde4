//! The coordinator's server side: node registration, authenticated job
//! submission, and the matching submit client.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::wire::{
    encode_frame, parse_body, read_frame, split_frame, write_frame, ErrorBody, FinalBody, MsgKind,
    RegisterBody, SubmitBody,
};
use super::NetError;

/// Runs one submitted job against the current roster (`node id -> task
/// address`) and produces the FINAL reply. The coordinator server stays a
/// dumb pipe; all scheduling lives in the callback.
pub type OnSubmit = Arc<dyn Fn(SubmitBody, BTreeMap<String, String>) -> FinalBody + Send + Sync>;

/// Resolves a submitted token against the `service name -> token` table,
/// returning the service name. An empty table admits nobody.
pub fn authenticate<'a>(
    tokens: &'a BTreeMap<String, String>,
    token: &str,
) -> Result<&'a str, NetError> {
    tokens
        .iter()
        .find(|(_, t)| t.as_str() == token)
        .map(|(name, _)| name.as_str())
        .ok_or(NetError::InvalidToken)
}

/// A running coordinator listener.
pub struct CoordinatorHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    roster: Arc<Mutex<BTreeMap<String, String>>>,
    join: Option<JoinHandle<()>>,
}

impl CoordinatorHandle {
    /// Snapshot of the registered nodes.
    pub fn roster(&self) -> BTreeMap<String, String> {
        self.roster.lock().expect("roster lock").clone()
    }

    pub fn roster_len(&self) -> usize {
        self.roster.lock().expect("roster lock").len()
    }

    /// Stops the accept loop and joins the serving thread; in-flight
    /// connections finish on their own threads.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    /// Blocks until the accept loop exits, for processes whose whole job
    /// is hosting the coordinator.
    pub fn wait(mut self) {
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds the coordinator and serves one frame per connection: REGISTER
/// updates the roster and is echoed back as the acknowledgment, SUBMIT is
/// authenticated and answered with FINAL, and anything else (including
/// garbage) gets a best-effort ERROR without disturbing other connections.
pub fn spawn_coordinator(
    bind: &str,
    tokens: BTreeMap<String, String>,
    on_submit: OnSubmit,
) -> Result<CoordinatorHandle, NetError> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let roster = Arc::new(Mutex::new(BTreeMap::new()));
    let join = std::thread::spawn({
        let stop = Arc::clone(&stop);
        let roster = Arc::clone(&roster);
        move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                // One thread per connection: a long-running submit must not
                // block registrations or other submits.
                let roster = Arc::clone(&roster);
                let tokens = tokens.clone();
                let on_submit = Arc::clone(&on_submit);
                std::thread::spawn(move || {
                    serve_connection(stream, &roster, &tokens, &on_submit)
                });
            }
        }
    });
    Ok(CoordinatorHandle {
        addr,
        stop,
        roster,
        join: Some(join),
    })
}

fn error_frame(e: &NetError) -> Vec<u8> {
    encode_frame(
        MsgKind::Error,
        &ErrorBody {
            code: e.code().to_string(),
            detail: e.to_string(),
        },
    )
}

fn serve_connection(
    mut stream: TcpStream,
    roster: &Mutex<BTreeMap<String, String>>,
    tokens: &BTreeMap<String, String>,
    on_submit: &OnSubmit,
) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let _ = stream.set_nodelay(true);
    let frame = match read_frame(&mut stream) {
        Ok(f) => f,
        Err(e) => {
            let _ = write_frame(&mut stream, &error_frame(&e));
            return;
        }
    };
    let reply = match split_frame(&frame) {
        Ok((MsgKind::Register, body)) => match parse_body::<RegisterBody>(body) {
            Ok(reg) => {
                roster
                    .lock()
                    .expect("roster lock")
                    .insert(reg.node_id.clone(), reg.addr.clone());
                // Echoing the registration makes it synchronous: once the
                // node reads the ack, the roster is guaranteed updated.
                encode_frame(MsgKind::Register, &reg)
            }
            Err(e) => error_frame(&e),
        },
        Ok((MsgKind::Submit, body)) => match parse_body::<SubmitBody>(body) {
            Ok(sub) => match authenticate(tokens, &sub.token) {
                Ok(_service) => {
                    let snapshot = roster.lock().expect("roster lock").clone();
                    encode_frame(MsgKind::Final, &on_submit(sub, snapshot))
                }
                Err(e) => error_frame(&e),
            },
            Err(e) => error_frame(&e),
        },
        Ok((kind, _)) => error_frame(&NetError::Protocol(format!(
            "coordinator accepts REGISTER and SUBMIT, got {kind:?}"
        ))),
        Err(e) => error_frame(&e),
    };
    let _ = write_frame(&mut stream, &reply);
}

/// Submits a job and waits for the FINAL verdict. `timeout` bounds the wait
/// for the whole run, not per byte.
pub fn submit(addr: &str, body: &SubmitBody, timeout: Duration) -> Result<FinalBody, NetError> {
    let sa = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| NetError::Protocol(format!("unresolvable address {addr}")))?;
    let mut stream = TcpStream::connect_timeout(&sa, Duration::from_secs(10))?;
    let _ = stream.set_nodelay(true);
    stream.set_write_timeout(Some(Duration::from_secs(30)))?;
    stream.set_read_timeout(Some(timeout))?;
    write_frame(&mut stream, &encode_frame(MsgKind::Submit, body))?;
    let frame = read_frame(&mut stream).map_err(|e| match e {
        NetError::Io(io)
            if io.kind() == std::io::ErrorKind::WouldBlock
                || io.kind() == std::io::ErrorKind::TimedOut =>
        {
            NetError::Timeout(format!("no verdict from {addr} within {timeout:?}"))
        }
        other => other,
    })?;
    match split_frame(&frame)? {
        (MsgKind::Final, body) => parse_body::<FinalBody>(body),
        (MsgKind::Error, body) => {
            let e = parse_body::<ErrorBody>(body)?;
            if e.code == "invalid_token" {
                Err(NetError::InvalidToken)
            } else {
                Err(NetError::Protocol(format!("{}: {}", e.code, e.detail)))
            }
        }
        (kind, _) => Err(NetError::Protocol(format!(
            "expected FINAL, got {kind:?}"
        ))),
    }
}
