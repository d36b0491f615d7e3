//! Worker runtime: receives work units, prepares working directories, calls
//! user functions (plain or persistent), reports results and caught errors
//! back to the manager, and relays kill signals into its executor.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{
    CallKind, CommsError, ErrorReport, Message, Payload, ResultPayload, UpdatePayload, WorkerComm,
    MANAGER_ID,
};
use crate::executor::{Executor, ExecutorConfig};
use crate::history::HistoryError;
use crate::schema::RecordBatch;
use crate::specs::{GenSpecs, PersisBlob, SimSpecs};
use crate::tags::{CalcStatus, Tag};

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("no registered function named '{0}'")]
    UnknownFunction(String),
    #[error("function '{0}' registered with the wrong kind for this work")]
    WrongFunctionKind(String),
    #[error("staging collision: {0} exists with different content")]
    StageCollision(PathBuf),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure raised by a user function; relayed to the manager, never fatal to
/// the worker.
#[derive(Debug, Clone)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UserError {}

impl From<String> for UserError {
    fn from(s: String) -> Self {
        UserError(s)
    }
}

impl From<&str> for UserError {
    fn from(s: &str) -> Self {
        UserError(s.to_string())
    }
}

/// How workers set up directories for their calculations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkdirPolicy {
    #[serde(default)]
    pub use_workdirs: bool,
    #[serde(default)]
    pub per_sim_dirs: bool,
    #[serde(default)]
    pub copy_files: Vec<PathBuf>,
    #[serde(default)]
    pub symlink_files: Vec<PathBuf>,
    #[serde(default)]
    pub copy_back: bool,
}

impl WorkdirPolicy {
    pub fn validate(&self) -> Result<(), WorkerError> {
        for c in &self.copy_files {
            if self.symlink_files.contains(c) {
                return Err(WorkerError::StageCollision(c.clone()));
            }
        }
        Ok(())
    }
}

/// Everything a process-mode worker needs before entering its loop. Sent as
/// the `Init` message; built directly for in-process workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInit {
    pub worker_id: u32,
    pub sim: SimSpecs,
    pub gen: Option<GenSpecs>,
    pub policy: WorkdirPolicy,
    pub ensemble_dir: PathBuf,
    pub origin_dir: PathBuf,
}

/// Worker-side state handed to user functions.
pub struct WorkerContext {
    pub worker_id: u32,
    pub workdir: PathBuf,
    pub executor: Executor,
}

impl WorkerContext {
    pub fn standalone(worker_id: u32, workdir: PathBuf) -> WorkerContext {
        let mut executor = Executor::new(worker_id, ExecutorConfig::default());
        executor.set_workdir(workdir.clone());
        WorkerContext { worker_id, workdir, executor }
    }
}

/// Manager link owned by a persistent function for its lifetime.
pub struct PersisChannel {
    comm: Rc<RefCell<WorkerComm>>,
    worker_id: u32,
}

impl PersisChannel {
    /// Send generated rows (and any cancellation requests), then block until
    /// the manager replies. The reply is either data (`PersisUpdate`) or a
    /// stop tag, on which the function must wind down and return
    /// `PersisFinished`. An empty batch is a legal pure poll.
    pub fn send_recv(
        &mut self,
        out: RecordBatch,
        cancel_ids: Vec<u64>,
    ) -> Result<(Tag, Option<RecordBatch>), CommsError> {
        self.comm.borrow_mut().send(Message::update(
            self.worker_id,
            MANAGER_ID,
            UpdatePayload { batch: out, cancel_ids },
        ))?;
        loop {
            let msg = self.comm.borrow_mut().recv(None)?;
            match (msg.tag, msg.payload) {
                (Tag::PersisUpdate, Payload::Update(u)) => return Ok((Tag::PersisUpdate, Some(u.batch))),
                (Tag::Stop, _) => return Ok((Tag::Stop, None)),
                (Tag::PersisStop, _) => return Ok((Tag::PersisStop, None)),
                // A kill aimed at rows this function produced; irrelevant to
                // the generator loop itself.
                (Tag::ManKill, _) => continue,
                (tag, _) => {
                    return Err(CommsError::Protocol(format!(
                        "unexpected {tag:?} inside persistent exchange"
                    )))
                }
            }
        }
    }
}

pub type SimFn = fn(
    &RecordBatch,
    &mut PersisBlob,
    &SimSpecs,
    &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError>;

pub type GenFn = fn(
    &RecordBatch,
    &mut PersisBlob,
    &GenSpecs,
    &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError>;

pub type PersisGenFn = fn(
    &mut PersisChannel,
    &RecordBatch,
    &mut PersisBlob,
    &GenSpecs,
    &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError>;

pub type PersisSimFn = fn(
    &mut PersisChannel,
    &RecordBatch,
    &mut PersisBlob,
    &SimSpecs,
    &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError>;

#[derive(Clone, Copy)]
pub enum UserFunction {
    Sim(SimFn),
    Gen(GenFn),
    PersistentGen(PersisGenFn),
    PersistentSim(PersisSimFn),
}

/// Named table of user functions. Specs reference functions by name so work
/// descriptions can cross process boundaries.
#[derive(Default)]
pub struct FunctionRegistry {
    map: BTreeMap<String, UserFunction>,
}

impl FunctionRegistry {
    pub fn new() -> FunctionRegistry {
        FunctionRegistry::default()
    }

    pub fn register(&mut self, name: &str, f: UserFunction) -> &mut Self {
        self.map.insert(name.to_string(), f);
        self
    }

    pub fn get(&self, name: &str) -> Result<UserFunction, WorkerError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| WorkerError::UnknownFunction(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }
}

/// Create (or reuse) the working directory for one calculation and stage
/// configured files into it. Idempotent so a retried unit lands in the same
/// place.
pub fn prepare_workdir(
    policy: &WorkdirPolicy,
    sim_id: Option<u64>,
    worker_id: u32,
    ensemble_dir: &Path,
) -> Result<PathBuf, WorkerError> {
    if !policy.use_workdirs {
        return Ok(std::env::current_dir()?);
    }
    policy.validate()?;
    let dir = match (policy.per_sim_dirs, sim_id) {
        (true, Some(id)) => ensemble_dir.join(format!("sim{id}_worker{worker_id}")),
        _ => ensemble_dir.join(format!("worker{worker_id}")),
    };
    std::fs::create_dir_all(&dir)?;
    for src in &policy.copy_files {
        stage_copy(src, &dir)?;
    }
    for src in &policy.symlink_files {
        stage_symlink(src, &dir)?;
    }
    Ok(dir)
}

fn stage_copy(src: &Path, dir: &Path) -> Result<(), WorkerError> {
    let name = src
        .file_name()
        .ok_or_else(|| WorkerError::StageCollision(src.to_path_buf()))?;
    let target = dir.join(name);
    if src.is_dir() {
        copy_dir(src, &target)?;
        return Ok(());
    }
    if target.exists() {
        let old = std::fs::read(&target)?;
        let new = std::fs::read(src)?;
        if old != new {
            return Err(WorkerError::StageCollision(target));
        }
        return Ok(());
    }
    std::fs::copy(src, &target)?;
    Ok(())
}

fn stage_symlink(src: &Path, dir: &Path) -> Result<(), WorkerError> {
    let name = src
        .file_name()
        .ok_or_else(|| WorkerError::StageCollision(src.to_path_buf()))?;
    let target = dir.join(name);
    if target.symlink_metadata().is_ok() {
        return Ok(()); // reuse on retry
    }
    let abs = src.canonicalize()?;
    #[cfg(unix)]
    std::os::unix::fs::symlink(&abs, &target)?;
    #[cfg(not(unix))]
    std::fs::copy(&abs, &target)?;
    Ok(())
}

fn copy_dir(src: &Path, dst: &Path) -> Result<(), WorkerError> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else if !to.exists() {
            std::fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}

/// Mirror this worker's directories under `<origin>/ensemble_back/`,
/// suffixing `_1`, `_2`, ... when a previous run already claimed a name.
/// Failures are reported but deliberately not fatal.
pub fn copy_back(
    policy: &WorkdirPolicy,
    origin_dir: &Path,
    created_dirs: &[PathBuf],
) -> Result<(), WorkerError> {
    if !policy.copy_back {
        return Ok(());
    }
    let back_root = origin_dir.join("ensemble_back");
    std::fs::create_dir_all(&back_root)?;
    for dir in created_dirs {
        let name = match dir.file_name() {
            Some(n) => n.to_string_lossy().into_owned(),
            None => continue,
        };
        let mut target = back_root.join(&name);
        let mut suffix = 0;
        while target.exists() {
            suffix += 1;
            target = back_root.join(format!("{name}_{suffix}"));
        }
        copy_dir(dir, &target)?;
    }
    Ok(())
}

struct CallOutcome {
    batch: RecordBatch,
    status: CalcStatus,
    error: Option<String>,
}

fn invoke<F>(f: F) -> CallOutcome
where
    F: FnOnce() -> Result<(RecordBatch, CalcStatus), UserError> + std::panic::UnwindSafe,
{
    match std::panic::catch_unwind(f) {
        Ok(Ok((batch, status))) => CallOutcome { batch, status, error: None },
        Ok(Err(e)) => CallOutcome {
            batch: RecordBatch::default(),
            status: CalcStatus::Failed,
            error: Some(e.0),
        },
        Err(panic) => {
            let text = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "user function panicked".to_string());
            CallOutcome {
                batch: RecordBatch::default(),
                status: CalcStatus::Failed,
                error: Some(text),
            }
        }
    }
}

/// Run the worker until a stop tag (or manager disappearance). One result or
/// error report goes out per non-persistent unit received.
pub fn worker_loop(
    comm: WorkerComm,
    init: WorkerInit,
    registry: &FunctionRegistry,
) -> Result<(), WorkerError> {
    let worker_id = init.worker_id;
    let comm = Rc::new(RefCell::new(comm));
    let mut executor = Executor::new(worker_id, ExecutorConfig::default());
    executor.attach_comm(comm.clone());
    let mut ctx = WorkerContext {
        worker_id,
        workdir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
        executor,
    };
    let mut created_dirs: Vec<PathBuf> = Vec::new();

    loop {
        let msg = match comm.borrow_mut().recv(None) {
            Ok(m) => m,
            Err(CommsError::PeerClosed) => break,
            Err(e) => return Err(e.into()),
        };
        match (msg.tag, msg.payload) {
            (Tag::Stop, _) => break,
            // Stale signals for work that already completed.
            (Tag::PersisStop, _) | (Tag::ManKill, _) | (Tag::Init, _) => continue,
            (Tag::EvalSim, Payload::Work(work)) | (Tag::EvalGen, Payload::Work(work)) => {
                handle_work(*work, &init, registry, &comm, &mut ctx, &mut created_dirs)?;
            }
            (tag, _) => {
                return Err(CommsError::Protocol(format!("worker got unexpected {tag:?}")).into())
            }
        }
    }

    ctx.executor.shutdown();
    copy_back(&init.policy, &init.origin_dir, &created_dirs)?;
    Ok(())
}

fn handle_work(
    work: crate::comms::WorkPayload,
    init: &WorkerInit,
    registry: &FunctionRegistry,
    comm: &Rc<RefCell<WorkerComm>>,
    ctx: &mut WorkerContext,
    created_dirs: &mut Vec<PathBuf>,
) -> Result<(), WorkerError> {
    let unit = work.unit;
    let mut persis = work.persis;
    let input = work.input;
    ctx.executor.set_resources(work.resources);
    ctx.executor.clear_kill_flag();

    let kind = unit.kind;
    let (function_name, persistent) = match kind {
        CallKind::Sim => (init.sim.function.clone(), unit.persistent),
        CallKind::Gen => {
            let gen = init.gen.as_ref().ok_or_else(|| {
                WorkerError::UnknownFunction("generator work without gen specs".into())
            })?;
            (gen.function.clone(), unit.persistent)
        }
    };

    // Simulations get a working directory; generators run in place.
    if kind == CallKind::Sim {
        let dir = prepare_workdir(
            &init.policy,
            unit.sim_ids.first().copied(),
            init.worker_id,
            &init.ensemble_dir,
        )?;
        if init.policy.use_workdirs && !created_dirs.contains(&dir) {
            created_dirs.push(dir.clone());
        }
        ctx.workdir = dir.clone();
        ctx.executor.set_workdir(dir);
    }

    let started = Instant::now();
    let function = registry.get(&function_name);
    let outcome = match function {
        Err(e) => CallOutcome {
            batch: RecordBatch::default(),
            status: CalcStatus::Failed,
            error: Some(e.to_string()),
        },
        Ok(f) => {
            let sim_specs = &init.sim;
            let gen_specs = init.gen.as_ref();
            match (f, kind, persistent) {
                (UserFunction::Sim(f), CallKind::Sim, false) => {
                    let wrapped = std::panic::AssertUnwindSafe(|| {
                        f(&input, &mut persis, sim_specs, ctx)
                    });
                    invoke(wrapped)
                }
                (UserFunction::Gen(f), CallKind::Gen, false) => {
                    let specs = gen_specs.unwrap();
                    let wrapped = std::panic::AssertUnwindSafe(|| {
                        f(&input, &mut persis, specs, ctx)
                    });
                    invoke(wrapped)
                }
                (UserFunction::PersistentGen(f), CallKind::Gen, true) => {
                    let specs = gen_specs.unwrap();
                    let mut chan = PersisChannel { comm: comm.clone(), worker_id: ctx.worker_id };
                    let wrapped = std::panic::AssertUnwindSafe(|| {
                        f(&mut chan, &input, &mut persis, specs, ctx)
                    });
                    invoke(wrapped)
                }
                (UserFunction::PersistentSim(f), CallKind::Sim, true) => {
                    let mut chan = PersisChannel { comm: comm.clone(), worker_id: ctx.worker_id };
                    let wrapped = std::panic::AssertUnwindSafe(|| {
                        f(&mut chan, &input, &mut persis, sim_specs, ctx)
                    });
                    invoke(wrapped)
                }
                _ => CallOutcome {
                    batch: RecordBatch::default(),
                    status: CalcStatus::Failed,
                    error: Some(
                        WorkerError::WrongFunctionKind(function_name.clone()).to_string(),
                    ),
                },
            }
        }
    };
    let elapsed = started.elapsed().as_secs_f64();

    let error = outcome.error.map(|traceback| ErrorReport {
        worker_id: ctx.worker_id,
        traceback,
        sim_ids: unit.sim_ids.clone(),
    });
    let payload = ResultPayload {
        kind,
        sim_ids: unit.sim_ids,
        batch: outcome.batch,
        persis: Some(persis),
        status: outcome.status,
        elapsed,
        error,
    };
    comm.borrow_mut().send(Message::result(ctx.worker_id, payload))?;
    Ok(())
}

/// Entry point for a pipe-connected worker process: handshake on stdio,
/// wait for the init message, run the loop.
pub fn run_stdio_worker(worker_id: u32, registry: &FunctionRegistry) -> Result<(), WorkerError> {
    let mut comm = crate::comms::stdio_worker_comm(worker_id)?;
    let init = wait_for_init(&mut comm)?;
    worker_loop(comm, init, registry)
}

/// Entry point for a TCP worker process: connect, handshake, init, loop.
pub fn run_tcp_worker(
    addr: &str,
    worker_id: u32,
    registry: &FunctionRegistry,
) -> Result<(), WorkerError> {
    let mut comm = crate::comms::connect_tcp(addr, worker_id)?;
    let init = wait_for_init(&mut comm)?;
    worker_loop(comm, init, registry)
}

fn wait_for_init(comm: &mut WorkerComm) -> Result<WorkerInit, WorkerError> {
    loop {
        let msg = comm.recv(None)?;
        match (msg.tag, msg.payload) {
            (Tag::Init, Payload::Init(init)) => return Ok(*init),
            (Tag::Stop, _) => {
                return Err(CommsError::Protocol("stopped before init".into()).into())
            }
            _ => continue,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_sim_dir_naming() {
        let dir = tempfile::tempdir().unwrap();
        let policy = WorkdirPolicy {
            use_workdirs: true,
            per_sim_dirs: true,
            ..Default::default()
        };
        let path = prepare_workdir(&policy, Some(7), 2, dir.path()).unwrap();
        assert!(path.ends_with("sim7_worker2"));
        assert!(path.is_dir());
        // Idempotent on retry.
        let again = prepare_workdir(&policy, Some(7), 2, dir.path()).unwrap();
        assert_eq!(path, again);
    }

    #[test]
    fn no_workdirs_returns_launch_dir() {
        let policy = WorkdirPolicy::default();
        let got = prepare_workdir(&policy, Some(1), 1, Path::new("/nonexistent")).unwrap();
        assert_eq!(got, std::env::current_dir().unwrap());
    }

    #[test]
    fn staging_copies_and_links() {
        let dir = tempfile::tempdir().unwrap();
        let ens = dir.path().join("ens");
        let input = dir.path().join("input.dat");
        let big = dir.path().join("big_input.dat");
        std::fs::write(&input, b"config").unwrap();
        std::fs::write(&big, b"huge").unwrap();
        let policy = WorkdirPolicy {
            use_workdirs: true,
            per_sim_dirs: true,
            copy_files: vec![input.clone()],
            symlink_files: vec![big.clone()],
            ..Default::default()
        };
        let wd = prepare_workdir(&policy, Some(0), 1, &ens).unwrap();
        assert_eq!(std::fs::read(wd.join("input.dat")).unwrap(), b"config");
        let meta = wd.join("big_input.dat").symlink_metadata().unwrap();
        assert!(meta.file_type().is_symlink());

        // Same content restages fine; different content collides.
        prepare_workdir(&policy, Some(0), 1, &ens).unwrap();
        std::fs::write(wd.join("input.dat"), b"tampered").unwrap();
        assert!(matches!(
            prepare_workdir(&policy, Some(0), 1, &ens),
            Err(WorkerError::StageCollision(_))
        ));
    }

    #[test]
    fn copy_back_mirrors_and_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let origin = dir.path().join("origin");
        std::fs::create_dir_all(&origin).unwrap();
        let work = dir.path().join("sim0_worker1");
        std::fs::create_dir_all(&work).unwrap();
        std::fs::write(work.join("result.out"), b"42").unwrap();
        let policy = WorkdirPolicy { copy_back: true, ..Default::default() };

        copy_back(&policy, &origin, &[work.clone()]).unwrap();
        assert_eq!(
            std::fs::read(origin.join("ensemble_back/sim0_worker1/result.out")).unwrap(),
            b"42"
        );
        copy_back(&policy, &origin, &[work.clone()]).unwrap();
        assert!(origin.join("ensemble_back/sim0_worker1_1").is_dir());

        let off = WorkdirPolicy::default();
        copy_back(&off, &origin, &[work]).unwrap();
        assert!(!origin.join("ensemble_back/sim0_worker1_2").exists());
    }

    #[test]
    fn conflicting_stage_lists_rejected() {
        let p = WorkdirPolicy {
            copy_files: vec![PathBuf::from("a")],
            symlink_files: vec![PathBuf::from("a")],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
