//! TCP backend: the manager listens, workers connect and handshake. Suits
//! workers on other machines; the launcher also uses it locally.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::frame::{read_frame, write_frame};
use super::{
    CommsError, Mailbox, ManagerComm, Message, Payload, WorkerComm, WorkerLink, WorkerTx,
    MANAGER_ID, PROTO_VERSION,
};
use crate::tags::Tag;

/// A bound listener waiting for its workers. Two-phase so the caller can
/// learn the actual port before launching workers that need it.
pub struct TcpManager {
    listener: TcpListener,
    nworkers: u32,
}

pub fn listen_tcp(bind: &str, nworkers: u32) -> Result<TcpManager, CommsError> {
    if nworkers == 0 {
        return Err(CommsError::SpawnFailure("nworkers must be >= 1".into()));
    }
    let listener = TcpListener::bind(bind).map_err(CommsError::BindFailure)?;
    Ok(TcpManager { listener, nworkers })
}

impl TcpManager {
    pub fn local_addr(&self) -> Result<SocketAddr, CommsError> {
        self.listener.local_addr().map_err(CommsError::Io)
    }

    /// Accept and handshake every worker (ids 1..=nworkers, any arrival
    /// order). Each accepted connection gets a reader thread feeding the
    /// manager mailbox.
    pub fn accept_workers(self, timeout: Duration) -> Result<ManagerComm, CommsError> {
        let deadline = Instant::now() + timeout;
        let ids: Vec<u32> = (1..=self.nworkers).collect();
        let mailbox = Mailbox::new(&ids);
        let mut links: BTreeMap<u32, WorkerLink> = BTreeMap::new();
        let mut readers = Vec::new();
        self.listener.set_nonblocking(true)?;

        while links.len() < self.nworkers as usize {
            match self.listener.accept() {
                Ok((stream, _peer)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let (id, reader) =
                        handshake_accept(stream, self.nworkers, links.keys().copied().collect())?;
                    let writer = reader.try_clone()?;
                    links.insert(id, WorkerLink::stream(Box::new(writer)));
                    let mb = mailbox.clone();
                    readers.push(std::thread::spawn(move || reader_loop(reader, id, mb)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(CommsError::SpawnFailure(format!(
                            "only {}/{} workers connected before timeout",
                            links.len(),
                            self.nworkers
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(CommsError::Io(e)),
            }
        }
        Ok(ManagerComm::new(links, mailbox, readers))
    }
}

fn handshake_accept(
    mut stream: TcpStream,
    nworkers: u32,
    taken: Vec<u32>,
) -> Result<(u32, TcpStream), CommsError> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let msg = read_frame(&mut stream)?;
    let worker_id = match (msg.tag, &msg.payload) {
        (Tag::Handshake, Payload::Handshake { worker_id, proto }) => {
            if *proto != PROTO_VERSION {
                return Err(CommsError::Protocol(format!("unsupported proto {proto}")));
            }
            *worker_id
        }
        _ => return Err(CommsError::Protocol("expected handshake frame".into())),
    };
    if worker_id == 0 || worker_id > nworkers || taken.contains(&worker_id) {
        return Err(CommsError::Protocol(format!("bad worker id {worker_id} in handshake")));
    }
    let ack = Message {
        tag: Tag::Handshake,
        source: MANAGER_ID,
        dest: worker_id,
        payload: Payload::HandshakeAck { ok: true },
    };
    write_frame(&mut stream, &ack)?;
    stream.set_read_timeout(None)?;
    Ok((worker_id, stream))
}

fn reader_loop(mut stream: TcpStream, worker_id: u32, mailbox: std::sync::Arc<Mailbox>) {
    loop {
        match read_frame(&mut stream) {
            Ok(msg) => mailbox.push(worker_id, msg),
            Err(_) => {
                mailbox.mark_closed(worker_id);
                return;
            }
        }
    }
}

/// Connect to the manager and handshake as `worker_id`.
pub fn connect_tcp(addr: &str, worker_id: u32) -> Result<WorkerComm, CommsError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let hello = Message {
        tag: Tag::Handshake,
        source: worker_id,
        dest: MANAGER_ID,
        payload: Payload::Handshake { worker_id, proto: PROTO_VERSION },
    };
    write_frame(&mut stream, &hello)?;
    let ack = read_frame(&mut stream)?;
    match ack.payload {
        Payload::HandshakeAck { ok: true } => {}
        _ => return Err(CommsError::Protocol("manager refused handshake".into())),
    }
    let writer = stream.try_clone()?;
    let closer = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    let mut reader = stream;
    std::thread::spawn(move || loop {
        match read_frame(&mut reader) {
            Ok(msg) => {
                if tx.send(msg).is_err() {
                    return;
                }
            }
            Err(_) => return, // sender drop signals PeerClosed
        }
    });
    let mut comm = WorkerComm::new(worker_id, rx, WorkerTx::Stream(Box::new(writer)));
    comm.set_on_close(Box::new(move || {
        let _ = closer.shutdown(std::net::Shutdown::Both);
    }));
    Ok(comm)
}
