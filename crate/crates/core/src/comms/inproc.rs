//! In-process backend: worker endpoints live on threads in the manager's
//! process and exchange `Message` values over channels. Fills the manager-
//! rank-0 role of an MPI launch without the MPI dependency.

use std::collections::BTreeMap;
use std::sync::mpsc;

use super::{CommsError, InprocSender, Mailbox, ManagerComm, WorkerComm, WorkerLink, WorkerTx};

/// Create the manager endpoint plus `nworkers` worker endpoints (ids 1..=n).
/// Worker endpoints are handed to worker threads by the caller.
pub fn start_inproc(nworkers: u32) -> Result<(ManagerComm, Vec<WorkerComm>), CommsError> {
    if nworkers == 0 {
        return Err(CommsError::SpawnFailure("nworkers must be >= 1".into()));
    }
    let ids: Vec<u32> = (1..=nworkers).collect();
    let mailbox = Mailbox::new(&ids);
    let mut links = BTreeMap::new();
    let mut workers = Vec::with_capacity(nworkers as usize);
    for &id in &ids {
        let (tx, rx) = mpsc::channel();
        links.insert(id, WorkerLink::inproc(tx));
        let sender = InprocSender { mailbox: mailbox.clone(), worker_id: id };
        workers.push(WorkerComm::new(id, rx, WorkerTx::Inproc(sender)));
    }
    Ok((ManagerComm::new(links, mailbox, Vec::new()), workers))
}
