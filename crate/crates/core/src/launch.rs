//! Pool launching: brings up the chosen transport, starts workers (threads
//! or processes), delivers their init, runs the manager, and tears the pool
//! down without leaving strays.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::comms::{
    init_message, listen_tcp, spawn_local_workers, start_inproc, CommsError, CommsMode,
    LocalWorkers, ManagerComm,
};
use crate::manager::{run_ensemble, ManagerError, RunInputs, RunOutput};
use crate::worker::{worker_loop, FunctionRegistry, WorkerError, WorkerInit};

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("launch: {0}")]
    Config(String),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How to reach and start the workers.
#[derive(Debug, Clone)]
pub struct PoolOptions {
    pub mode: CommsMode,
    pub nworkers: u32,
    /// TCP bind address; an ephemeral port by default.
    pub bind: String,
    /// Command template for process workers. `{worker_id}` and `{addr}` are
    /// substituted per worker. Required for local and tcp modes.
    pub worker_cmd: Option<Vec<String>>,
    /// How long to wait for process workers to connect.
    pub connect_timeout: Duration,
}

impl PoolOptions {
    pub fn inproc(nworkers: u32) -> PoolOptions {
        PoolOptions {
            mode: CommsMode::Inproc,
            nworkers,
            bind: "127.0.0.1:0".into(),
            worker_cmd: None,
            connect_timeout: Duration::from_secs(30),
        }
    }
}

enum PoolGuard {
    Threads(Vec<std::thread::JoinHandle<Result<(), WorkerError>>>),
    Procs(LocalWorkers),
}

/// A live worker pool plus the manager's endpoint to it.
pub struct Pool {
    pub comm: ManagerComm,
    guard: PoolGuard,
}

#[derive(Debug, Default)]
pub struct PoolReport {
    /// Workers that had to be killed or whose threads ended in error.
    pub stragglers: Vec<u32>,
}

impl Pool {
    /// Close the manager side and collect workers. Process workers still
    /// alive at the deadline are killed and reported.
    pub fn shutdown(mut self, timeout: Duration) -> PoolReport {
        self.comm.close();
        match self.guard {
            PoolGuard::Threads(handles) => {
                let mut stragglers = Vec::new();
                for (i, h) in handles.into_iter().enumerate() {
                    match h.join() {
                        Ok(Ok(())) => {}
                        _ => stragglers.push(i as u32 + 1),
                    }
                }
                PoolReport { stragglers }
            }
            PoolGuard::Procs(mut procs) => PoolReport { stragglers: procs.join(timeout) },
        }
    }
}

/// Start the pool and initialize every worker. `init_of` builds the init
/// record for a worker id (specs, workdir policy, directories).
pub fn start_pool(
    opts: &PoolOptions,
    registry: Arc<FunctionRegistry>,
    init_of: impl Fn(u32) -> WorkerInit,
) -> Result<Pool, LaunchError> {
    if opts.nworkers == 0 {
        return Err(LaunchError::Config("nworkers must be >= 1".into()));
    }
    match opts.mode {
        CommsMode::Inproc => {
            let (mgr, worker_comms) = start_inproc(opts.nworkers)?;
            let mut handles = Vec::new();
            for comm in worker_comms {
                let init = init_of(comm.worker_id);
                let registry = registry.clone();
                handles.push(std::thread::spawn(move || worker_loop(comm, init, &registry)));
            }
            Ok(Pool { comm: mgr, guard: PoolGuard::Threads(handles) })
        }
        CommsMode::Local => {
            let cmd = opts
                .worker_cmd
                .as_ref()
                .ok_or_else(|| LaunchError::Config("local mode needs a worker command".into()))?;
            let (mgr, procs) = spawn_local_workers(opts.nworkers, cmd)?;
            send_inits(&mgr, opts.nworkers, &init_of)?;
            Ok(Pool { comm: mgr, guard: PoolGuard::Procs(procs) })
        }
        CommsMode::Tcp => {
            let cmd = opts
                .worker_cmd
                .as_ref()
                .ok_or_else(|| LaunchError::Config("tcp mode needs a worker command".into()))?;
            let listener = listen_tcp(&opts.bind, opts.nworkers)?;
            let addr = listener.local_addr()?.to_string();
            let mut children = Vec::new();
            for id in 1..=opts.nworkers {
                let argv: Vec<String> = cmd
                    .iter()
                    .map(|t| t.replace("{worker_id}", &id.to_string()).replace("{addr}", &addr))
                    .collect();
                let child = std::process::Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(std::process::Stdio::null())
                    .spawn()
                    .map_err(|e| CommsError::SpawnFailure(format!("{}: {e}", argv[0])))?;
                children.push((id, child));
            }
            let procs = LocalWorkers::from_children(children);
            let mgr = listener.accept_workers(opts.connect_timeout)?;
            send_inits(&mgr, opts.nworkers, &init_of)?;
            Ok(Pool { comm: mgr, guard: PoolGuard::Procs(procs) })
        }
    }
}

fn send_inits(
    mgr: &ManagerComm,
    nworkers: u32,
    init_of: &impl Fn(u32) -> WorkerInit,
) -> Result<(), CommsError> {
    for id in 1..=nworkers {
        let init = init_of(id);
        mgr.send(init_message(
            id,
            init.sim,
            init.gen,
            init.policy,
            init.ensemble_dir,
            init.origin_dir,
        ))?;
    }
    Ok(())
}

/// Start a pool, run the ensemble on it, shut everything down.
pub fn run_on_pool(
    opts: &PoolOptions,
    registry: Arc<FunctionRegistry>,
    inputs: RunInputs,
) -> Result<(RunOutput, PoolReport), LaunchError> {
    let ensemble_dir = inputs.config.ensemble_dir.clone();
    let origin_dir = std::env::current_dir()?;
    let sim = inputs.sim.clone();
    let gen = inputs.gen.clone();
    let policy = inputs.config.workdir_policy.clone();
    let pool = start_pool(opts, registry, move |id| WorkerInit {
        worker_id: id,
        sim: sim.clone(),
        gen: gen.clone(),
        policy: policy.clone(),
        ensemble_dir: ensemble_dir.clone(),
        origin_dir: origin_dir.clone(),
    })?;
    let output = run_ensemble(&pool.comm, inputs);
    let report = pool.shutdown(Duration::from_secs(10));
    Ok((output?, report))
}
