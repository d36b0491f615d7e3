//! Local backend: worker OS processes spawned by the manager, speaking the
//! frame protocol over their stdin/stdout. Worker processes must keep stdout
//! clean; diagnostics go to stderr and launched applications write to files.

use std::collections::BTreeMap;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::frame::{read_frame, write_frame};
use super::{
    CommsError, Mailbox, ManagerComm, Message, Payload, WorkerComm, WorkerLink, WorkerTx,
    MANAGER_ID,
};
use crate::tags::Tag;

/// Guard over spawned worker processes. Kills whatever is still alive on
/// drop so failed runs cannot leak children.
pub struct LocalWorkers {
    children: Vec<(u32, Child)>,
}

impl LocalWorkers {
    /// Wrap externally spawned children (the TCP launcher's workers) in the
    /// same reaping guard.
    pub fn from_children(children: Vec<(u32, Child)>) -> LocalWorkers {
        LocalWorkers { children }
    }

    /// Wait for every child to exit, escalating to kill at the deadline.
    /// Returns ids of children that had to be killed.
    pub fn join(&mut self, timeout: Duration) -> Vec<u32> {
        let deadline = Instant::now() + timeout;
        let mut killed = Vec::new();
        for (id, child) in &mut self.children {
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) => {
                        if Instant::now() >= deadline {
                            let _ = child.kill();
                            let _ = child.wait();
                            killed.push(*id);
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(_) => break,
                }
            }
        }
        self.children.clear();
        killed
    }
}

impl Drop for LocalWorkers {
    fn drop(&mut self) {
        for (_, child) in &mut self.children {
            if matches!(child.try_wait(), Ok(None)) {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

/// Expand `{worker_id}` placeholders in a command template.
fn expand_cmd(template: &[String], worker_id: u32) -> Vec<String> {
    template
        .iter()
        .map(|tok| tok.replace("{worker_id}", &worker_id.to_string()))
        .collect()
}

/// Spawn `nworkers` worker processes from the command template and complete
/// the handshake with each. The template must name a program that calls
/// [`stdio_worker_comm`] and runs a worker loop.
pub fn spawn_local_workers(
    nworkers: u32,
    cmd_template: &[String],
) -> Result<(ManagerComm, LocalWorkers), CommsError> {
    if nworkers == 0 || cmd_template.is_empty() {
        return Err(CommsError::SpawnFailure("need nworkers >= 1 and a worker command".into()));
    }
    let ids: Vec<u32> = (1..=nworkers).collect();
    let mailbox = Mailbox::new(&ids);
    let mut links: BTreeMap<u32, WorkerLink> = BTreeMap::new();
    let mut readers = Vec::new();
    let mut children = Vec::new();

    for &id in &ids {
        let argv = expand_cmd(cmd_template, id);
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| CommsError::SpawnFailure(format!("{}: {e}", argv[0])))?;
        let mut child_out = child.stdout.take().expect("piped stdout");
        let mut child_in = child.stdin.take().expect("piped stdin");

        // Worker speaks first.
        let hello = read_frame(&mut child_out)?;
        match (hello.tag, &hello.payload) {
            (Tag::Handshake, Payload::Handshake { worker_id, .. }) if *worker_id == id => {}
            _ => {
                let _ = child.kill();
                return Err(CommsError::Protocol(format!(
                    "worker {id} sent a bad handshake"
                )));
            }
        }
        let ack = Message {
            tag: Tag::Handshake,
            source: MANAGER_ID,
            dest: id,
            payload: Payload::HandshakeAck { ok: true },
        };
        write_frame(&mut child_in, &ack)?;

        links.insert(id, WorkerLink::stream(Box::new(child_in)));
        let mb = mailbox.clone();
        readers.push(std::thread::spawn(move || {
            loop {
                match read_frame(&mut child_out) {
                    Ok(msg) => mb.push(id, msg),
                    Err(_) => {
                        mb.mark_closed(id);
                        return;
                    }
                }
            }
        }));
        children.push((id, child));
    }
    Ok((ManagerComm::new(links, mailbox, readers), LocalWorkers { children }))
}

/// Worker-process side: handshake over stdin/stdout and return the endpoint.
/// Called once, early, by worker process mains.
pub fn stdio_worker_comm(worker_id: u32) -> Result<WorkerComm, CommsError> {
    let mut stdout = std::io::stdout();
    let mut stdin = std::io::stdin();
    let hello = Message {
        tag: Tag::Handshake,
        source: worker_id,
        dest: MANAGER_ID,
        payload: Payload::Handshake { worker_id, proto: super::PROTO_VERSION },
    };
    write_frame(&mut stdout, &hello)?;
    let ack = read_frame(&mut stdin)?;
    match ack.payload {
        Payload::HandshakeAck { ok: true } => {}
        _ => return Err(CommsError::Protocol("manager refused handshake".into())),
    }
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut stdin = std::io::stdin();
        loop {
            match read_frame(&mut stdin) {
                Ok(msg) => {
                    if tx.send(msg).is_err() {
                        return;
                    }
                }
                Err(_) => return,
            }
        }
    });
    Ok(WorkerComm::new(worker_id, rx, WorkerTx::Stream(Box::new(stdout))))
}
