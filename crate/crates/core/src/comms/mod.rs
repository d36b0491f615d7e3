//! Transport layer: tagged messages between the manager (id 0) and workers
//! (ids 1..n) over three interchangeable backends with identical semantics.
//!
//! * `inproc` — worker threads and in-memory queues.
//! * `local`  — worker OS processes wired over stdin/stdout pipes.
//! * `tcp`    — workers connect to a listening manager socket.
//!
//! All backends guarantee per-pair FIFO delivery and no loss while both ends
//! live. The pipe and TCP backends speak the same length-prefixed frame
//! format; see [`frame`].

pub mod conformance;
pub mod frame;
mod inproc;
mod local;
mod tcp;

pub use inproc::start_inproc;
pub use local::{spawn_local_workers, stdio_worker_comm, LocalWorkers};
pub use tcp::{connect_tcp, listen_tcp};

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manager::WorkUnit;
use crate::resources::WorkerResources;
use crate::schema::RecordBatch;
use crate::specs::{GenSpecs, PersisBlob, SimSpecs};
use crate::tags::{CalcStatus, Tag};
use crate::worker::{WorkdirPolicy, WorkerInit};

pub const MANAGER_ID: u32 = 0;
pub const PROTO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("bind failure: {0}")]
    BindFailure(std::io::Error),
    #[error("spawn failure: {0}")]
    SpawnFailure(String),
    #[error("peer closed")]
    PeerClosed,
    #[error("timeout")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("frame too large: {0} bytes")]
    Oversize(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which function call a result reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Sim,
    Gen,
}

/// Caught user-function failure, relayed to the manager instead of crashing
/// the worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub worker_id: u32,
    pub traceback: String,
    pub sim_ids: Vec<u64>,
}

/// Body of an `EvalSim`/`EvalGen` message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPayload {
    pub unit: WorkUnit,
    /// History slice for the unit's rows and `fields_to_send`.
    pub input: RecordBatch,
    pub persis: PersisBlob,
    pub resources: WorkerResources,
}

/// Body of a `Result` message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPayload {
    pub kind: CallKind,
    pub sim_ids: Vec<u64>,
    pub batch: RecordBatch,
    pub persis: Option<PersisBlob>,
    pub status: CalcStatus,
    /// Wall seconds spent in the user function.
    pub elapsed: f64,
    pub error: Option<ErrorReport>,
}

/// Body of a `PersisUpdate` message, in either direction. Worker to manager
/// carries generated rows plus cancellation requests; manager to worker
/// carries returned rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdatePayload {
    pub batch: RecordBatch,
    #[serde(default)]
    pub cancel_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Handshake { worker_id: u32, proto: u32 },
    HandshakeAck { ok: bool },
    Init(Box<WorkerInit>),
    Work(Box<WorkPayload>),
    Result(Box<ResultPayload>),
    Update(UpdatePayload),
    Kill { sim_ids: Vec<u64> },
    Empty,
}

/// A tagged envelope. The payload kind is determined by the tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub tag: Tag,
    pub source: u32,
    pub dest: u32,
    pub payload: Payload,
}

impl Message {
    pub fn stop(dest: u32) -> Message {
        Message { tag: Tag::Stop, source: MANAGER_ID, dest, payload: Payload::Empty }
    }

    pub fn persis_stop(dest: u32) -> Message {
        Message { tag: Tag::PersisStop, source: MANAGER_ID, dest, payload: Payload::Empty }
    }

    pub fn kill(dest: u32, sim_ids: Vec<u64>) -> Message {
        Message { tag: Tag::ManKill, source: MANAGER_ID, dest, payload: Payload::Kill { sim_ids } }
    }

    pub fn work(dest: u32, payload: WorkPayload) -> Message {
        let tag = match payload.unit.kind {
            CallKind::Sim => Tag::EvalSim,
            CallKind::Gen => Tag::EvalGen,
        };
        Message { tag, source: MANAGER_ID, dest, payload: Payload::Work(Box::new(payload)) }
    }

    pub fn result(source: u32, payload: ResultPayload) -> Message {
        Message {
            tag: Tag::Result,
            source,
            dest: MANAGER_ID,
            payload: Payload::Result(Box::new(payload)),
        }
    }

    pub fn update(source: u32, dest: u32, payload: UpdatePayload) -> Message {
        Message { tag: Tag::PersisUpdate, source, dest, payload: Payload::Update(payload) }
    }

    /// Serialize the payload to the JSON body used inside a frame.
    pub fn encode_body(&self) -> Result<Vec<u8>, CommsError> {
        let to_bytes = |v: serde_json::Result<Vec<u8>>| {
            v.map_err(|e| CommsError::Protocol(format!("encode: {e}")))
        };
        match &self.payload {
            // Key order in the handshake bodies is pinned by the wire format.
            Payload::Handshake { worker_id, proto } => {
                Ok(format!(r#"{{"worker_id":{worker_id},"proto":{proto}}}"#).into_bytes())
            }
            Payload::HandshakeAck { ok } => Ok(format!(r#"{{"ok":{ok}}}"#).into_bytes()),
            Payload::Init(init) => to_bytes(serde_json::to_vec(init)),
            Payload::Work(work) => to_bytes(serde_json::to_vec(work)),
            Payload::Result(result) => to_bytes(serde_json::to_vec(result)),
            Payload::Update(update) => to_bytes(serde_json::to_vec(update)),
            Payload::Kill { sim_ids } => {
                to_bytes(serde_json::to_vec(&serde_json::json!({ "sim_ids": sim_ids })))
            }
            Payload::Empty => Ok(b"{}".to_vec()),
        }
    }

    /// Reconstruct a message from frame parts.
    pub fn decode(tag: Tag, source: u32, dest: u32, body: &[u8]) -> Result<Message, CommsError> {
        let parse = |label: &str| -> Result<serde_json::Value, CommsError> {
            serde_json::from_slice(body)
                .map_err(|e| CommsError::Protocol(format!("decode {label}: {e}")))
        };
        let payload = match tag {
            Tag::Handshake => {
                let v = parse("handshake")?;
                if let Some(worker_id) = v.get("worker_id").and_then(|x| x.as_u64()) {
                    let proto = v.get("proto").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
                    Payload::Handshake { worker_id: worker_id as u32, proto }
                } else if let Some(ok) = v.get("ok").and_then(|x| x.as_bool()) {
                    Payload::HandshakeAck { ok }
                } else {
                    return Err(CommsError::Protocol("malformed handshake body".into()));
                }
            }
            Tag::Init => Payload::Init(Box::new(
                serde_json::from_slice(body)
                    .map_err(|e| CommsError::Protocol(format!("decode init: {e}")))?,
            )),
            Tag::EvalSim | Tag::EvalGen => Payload::Work(Box::new(
                serde_json::from_slice(body)
                    .map_err(|e| CommsError::Protocol(format!("decode work: {e}")))?,
            )),
            Tag::Result => Payload::Result(Box::new(
                serde_json::from_slice(body)
                    .map_err(|e| CommsError::Protocol(format!("decode result: {e}")))?,
            )),
            Tag::PersisUpdate => Payload::Update(
                serde_json::from_slice(body)
                    .map_err(|e| CommsError::Protocol(format!("decode update: {e}")))?,
            ),
            Tag::ManKill => {
                let v = parse("kill")?;
                let sim_ids = v
                    .get("sim_ids")
                    .and_then(|x| x.as_array())
                    .map(|a| a.iter().filter_map(|x| x.as_u64()).collect())
                    .unwrap_or_default();
                Payload::Kill { sim_ids }
            }
            Tag::Stop | Tag::PersisStop => Payload::Empty,
        };
        Ok(Message { tag, source, dest, payload })
    }
}

/// Per-worker inbound queues shared between reader threads (or in-process
/// senders) and the manager.
pub(crate) struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
}

struct MailboxState {
    queues: BTreeMap<u32, VecDeque<Message>>,
    closed: BTreeMap<u32, bool>,
}

impl Mailbox {
    pub(crate) fn new(worker_ids: &[u32]) -> Arc<Mailbox> {
        let mut queues = BTreeMap::new();
        let mut closed = BTreeMap::new();
        for &id in worker_ids {
            queues.insert(id, VecDeque::new());
            closed.insert(id, false);
        }
        Arc::new(Mailbox { state: Mutex::new(MailboxState { queues, closed }), cv: Condvar::new() })
    }

    pub(crate) fn push(&self, worker: u32, msg: Message) {
        let mut st = self.state.lock().unwrap();
        if let Some(q) = st.queues.get_mut(&worker) {
            q.push_back(msg);
        }
        self.cv.notify_all();
    }

    pub(crate) fn mark_closed(&self, worker: u32) {
        let mut st = self.state.lock().unwrap();
        st.closed.insert(worker, true);
        self.cv.notify_all();
    }
}

/// Sending half toward one worker.
enum LinkTx {
    Inproc(mpsc::Sender<Message>),
    Stream(Arc<Mutex<Box<dyn Write + Send>>>),
}

pub(crate) struct WorkerLink {
    tx: LinkTx,
}

impl WorkerLink {
    pub(crate) fn inproc(tx: mpsc::Sender<Message>) -> WorkerLink {
        WorkerLink { tx: LinkTx::Inproc(tx) }
    }

    pub(crate) fn stream(w: Box<dyn Write + Send>) -> WorkerLink {
        WorkerLink { tx: LinkTx::Stream(Arc::new(Mutex::new(w))) }
    }
}

/// The manager's multiplexed endpoint over all workers.
pub struct ManagerComm {
    links: BTreeMap<u32, WorkerLink>,
    mailbox: Arc<Mailbox>,
    readers: Vec<std::thread::JoinHandle<()>>,
    sent: std::sync::atomic::AtomicU64,
    received: std::sync::atomic::AtomicU64,
}

impl ManagerComm {
    pub(crate) fn new(
        links: BTreeMap<u32, WorkerLink>,
        mailbox: Arc<Mailbox>,
        readers: Vec<std::thread::JoinHandle<()>>,
    ) -> ManagerComm {
        ManagerComm {
            links,
            mailbox,
            readers,
            sent: std::sync::atomic::AtomicU64::new(0),
            received: std::sync::atomic::AtomicU64::new(0),
        }
    }

    /// (sent, received) message totals over this endpoint's lifetime.
    pub fn message_counts(&self) -> (u64, u64) {
        (
            self.sent.load(std::sync::atomic::Ordering::Relaxed),
            self.received.load(std::sync::atomic::Ordering::Relaxed),
        )
    }

    pub fn worker_ids(&self) -> Vec<u32> {
        self.links.keys().copied().collect()
    }

    pub fn send(&self, msg: Message) -> Result<(), CommsError> {
        self.sent.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let link = self
            .links
            .get(&msg.dest)
            .ok_or_else(|| CommsError::Protocol(format!("unknown worker {}", msg.dest)))?;
        match &link.tx {
            LinkTx::Inproc(tx) => tx.send(msg).map_err(|_| CommsError::PeerClosed),
            LinkTx::Stream(w) => {
                let mut w = w.lock().unwrap();
                frame::write_frame(&mut **w, &msg).map_err(|e| match e {
                    CommsError::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe => {
                        CommsError::PeerClosed
                    }
                    other => other,
                })
            }
        }
    }

    /// Worker ids with at least one pending message. Non-destructive.
    pub fn probe(&self) -> Vec<u32> {
        let st = self.mailbox.state.lock().unwrap();
        st.queues
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(id, _)| *id)
            .collect()
    }

    /// Pop the next message, scanning worker queues in ascending id order.
    /// `PeerClosed` once every queue is closed and drained.
    pub fn recv_any(&self, timeout: Option<Duration>) -> Result<Message, CommsError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.mailbox.state.lock().unwrap();
        loop {
            if let Some(q) = st.queues.values_mut().find(|q| !q.is_empty()) {
                self.received.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                return Ok(q.pop_front().unwrap());
            }
            if st.closed.values().all(|c| *c) && !st.closed.is_empty() {
                return Err(CommsError::PeerClosed);
            }
            st = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(CommsError::Timeout);
                    }
                    self.mailbox.cv.wait_timeout(st, d - now).unwrap().0
                }
                None => self.mailbox.cv.wait(st).unwrap(),
            };
        }
    }

    /// Pop the next message from one worker's queue.
    pub fn recv_from(&self, worker: u32, timeout: Option<Duration>) -> Result<Message, CommsError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.mailbox.state.lock().unwrap();
        loop {
            if let Some(q) = st.queues.get_mut(&worker) {
                if let Some(msg) = q.pop_front() {
                    self.received.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    return Ok(msg);
                }
            }
            if st.closed.get(&worker).copied().unwrap_or(true) {
                return Err(CommsError::PeerClosed);
            }
            st = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(CommsError::Timeout);
                    }
                    self.mailbox.cv.wait_timeout(st, d - now).unwrap().0
                }
                None => self.mailbox.cv.wait(st).unwrap(),
            };
        }
    }

    /// True once the worker's stream has closed and its queue drained.
    pub fn worker_closed(&self, worker: u32) -> bool {
        let st = self.mailbox.state.lock().unwrap();
        st.closed.get(&worker).copied().unwrap_or(true)
            && st.queues.get(&worker).map(|q| q.is_empty()).unwrap_or(true)
    }

    /// Drop the send links (workers see EOF / disconnect) and join reader
    /// threads.
    pub fn close(&mut self) {
        self.links.clear();
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}

/// A worker's endpoint to the manager.
pub struct WorkerComm {
    pub worker_id: u32,
    rx: mpsc::Receiver<Message>,
    tx: WorkerTx,
    /// Messages pulled off the wire while scanning for kills, still to be
    /// consumed by `recv`.
    pending: VecDeque<Message>,
    closed: bool,
    /// Invoked on drop; stream backends use it to shut the socket so the
    /// peer observes EOF even while our reader thread lingers.
    on_close: Option<Box<dyn FnMut() + Send>>,
}

impl Drop for WorkerComm {
    fn drop(&mut self) {
        if let Some(mut f) = self.on_close.take() {
            f();
        }
    }
}

pub(crate) enum WorkerTx {
    Inproc(InprocSender),
    Stream(Box<dyn Write + Send>),
}

/// In-process sender that marks the mailbox closed when dropped, so the
/// manager observes worker shutdown just like a stream EOF.
pub(crate) struct InprocSender {
    pub(crate) mailbox: Arc<Mailbox>,
    pub(crate) worker_id: u32,
}

impl Drop for InprocSender {
    fn drop(&mut self) {
        self.mailbox.mark_closed(self.worker_id);
    }
}

impl WorkerComm {
    pub(crate) fn new(worker_id: u32, rx: mpsc::Receiver<Message>, tx: WorkerTx) -> WorkerComm {
        WorkerComm { worker_id, rx, tx, pending: VecDeque::new(), closed: false, on_close: None }
    }

    pub(crate) fn set_on_close(&mut self, f: Box<dyn FnMut() + Send>) {
        self.on_close = Some(f);
    }

    pub fn send(&mut self, msg: Message) -> Result<(), CommsError> {
        match &mut self.tx {
            WorkerTx::Inproc(sender) => {
                sender.mailbox.push(sender.worker_id, msg);
                Ok(())
            }
            WorkerTx::Stream(w) => frame::write_frame(&mut **w, &msg).map_err(|e| match e {
                CommsError::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe => {
                    CommsError::PeerClosed
                }
                other => other,
            }),
        }
    }

    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, CommsError> {
        if let Some(msg) = self.pending.pop_front() {
            return Ok(msg);
        }
        if self.closed {
            return Err(CommsError::PeerClosed);
        }
        let res = match timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => CommsError::Timeout,
                mpsc::RecvTimeoutError::Disconnected => CommsError::PeerClosed,
            }),
            None => self.rx.recv().map_err(|_| CommsError::PeerClosed),
        };
        if matches!(res, Err(CommsError::PeerClosed)) {
            self.closed = true;
        }
        res
    }

    /// Drain whatever has already arrived, consuming `ManKill` messages and
    /// buffering the rest for later `recv` calls. Returns the killed row ids
    /// (empty when no kill is pending). Also reports a buffered stop tag so
    /// pollers can wind down without consuming it.
    pub fn take_pending_kill(&mut self) -> (Vec<u64>, bool) {
        while let Ok(msg) = self.rx.try_recv() {
            self.pending.push_back(msg);
        }
        let mut killed = Vec::new();
        self.pending.retain(|m| {
            if m.tag == Tag::ManKill {
                if let Payload::Kill { sim_ids } = &m.payload {
                    killed.extend_from_slice(sim_ids);
                }
                false
            } else {
                true
            }
        });
        let stop_seen = self.pending.iter().any(|m| m.tag.is_stop());
        (killed, stop_seen)
    }
}

/// Convenience constructors shared by tests and the launcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommsMode {
    Inproc,
    Local,
    Tcp,
}

impl std::str::FromStr for CommsMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(CommsMode::Inproc),
            "local" => Ok(CommsMode::Local),
            "tcp" => Ok(CommsMode::Tcp),
            other => Err(format!("unknown comms mode '{other}'")),
        }
    }
}

/// Build the `Init` message a process-mode worker receives before its loop.
pub fn init_message(
    dest: u32,
    sim: SimSpecs,
    gen: Option<GenSpecs>,
    policy: WorkdirPolicy,
    ensemble_dir: std::path::PathBuf,
    origin_dir: std::path::PathBuf,
) -> Message {
    Message {
        tag: Tag::Init,
        source: MANAGER_ID,
        dest,
        payload: Payload::Init(Box::new(WorkerInit {
            worker_id: dest,
            sim,
            gen,
            policy,
            ensemble_dir,
            origin_dir,
        })),
    }
}
