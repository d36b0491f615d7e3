//! The manager: drives the allocation function, dispatches work units,
//! ingests results and persistent updates, enforces exit criteria, routes
//! kill signals for canceled rows, checkpoints, and shuts the pool down.
//!
//! The manager is a single logical thread. History, the worker table, and
//! the resource table are confined to it; concurrency exists only across
//! the transport boundary and inside worker executors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{AllocError, AllocSpecs, AllocView};
use crate::comms::{
    CallKind, CommsError, ManagerComm, Message, Payload, ResultPayload, UpdatePayload, WorkPayload,
};
use crate::history::{HistoryError, HistoryStore};
use crate::logging::{EnsembleLogger, LogLevel, StatsFile};
use crate::resources::{
    build_resource_sets, detect_inventory, InventorySource, ResourceError, ResourceTable,
};
use crate::schema::{FieldSpec, RecordSchema};
use crate::specs::{ExitCriteria, GenSpecs, PersisBlob, SimSpecs};
use crate::tags::{CalcStatus, Tag};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unknown worker {0}")]
    UnknownWorker(u32),
    #[error("manager fault: {0}")]
    Fault(String),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Resources(#[from] ResourceError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerStatus {
    Idle,
    BusySim,
    BusyGen,
    PersistentGen,
    PersistentSim,
    Dead,
}

/// Manager-side view of one worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: u32,
    pub status: WorkerStatus,
    pub current_sim_ids: Vec<u64>,
    pub resource_sets: Vec<usize>,
    pub zero_resource: bool,
    pub persis: PersisBlob,
    /// Lockstep flag: a persistent function owes us a message for the last
    /// reply (or initial dispatch) we sent it.
    pub awaiting_update: bool,
    /// Returned rows queued for the next reply to this persistent function.
    pub pending_reply: Vec<u64>,
}

impl WorkerState {
    pub fn is_idle(&self) -> bool {
        self.status == WorkerStatus::Idle
    }

    pub fn in_persistent(&self) -> bool {
        matches!(self.status, WorkerStatus::PersistentGen | WorkerStatus::PersistentSim)
    }
}

/// A manager-to-worker instruction produced by an allocation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub dest: u32,
    pub kind: CallKind,
    pub sim_ids: Vec<u64>,
    pub fields_to_send: Vec<String>,
    pub persistent: bool,
    pub resource_sets: Vec<usize>,
}

/// Run-level options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub save_every_k_sims: Option<u64>,
    #[serde(default)]
    pub save_every_k_gens: Option<u64>,
    /// Where checkpoints, abort dumps, and worker directories live.
    pub ensemble_dir: PathBuf,
    /// Where `ensemble.log` and `libE_stats.txt` are written; None disables.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    #[serde(default)]
    pub log_level: Option<LogLevel>,
    #[serde(default)]
    pub central_mode: bool,
    #[serde(default)]
    pub zero_resource_workers: Vec<u32>,
    /// Explicit node inventory; None detects (env var, node_list file,
    /// localhost probe).
    #[serde(default)]
    pub inventory: Option<Vec<(String, usize)>>,
    /// Number of resource sets; defaults to nworkers minus the
    /// zero-resource workers.
    #[serde(default)]
    pub num_resource_sets: Option<usize>,
    #[serde(default)]
    pub workdir_policy: crate::worker::WorkdirPolicy,
    /// Keep running after a worker error, marking its rows failed, instead
    /// of the default fail-stop shutdown.
    #[serde(default)]
    pub continue_on_worker_error: bool,
    /// Record `given_time` as a logical dispatch counter instead of epoch
    /// seconds, making serialized runs byte-reproducible.
    #[serde(default)]
    pub logical_clock: bool,
    /// Seconds to wait for in-flight work during shutdown.
    #[serde(default = "default_shutdown_grace")]
    pub shutdown_grace: f64,
}

fn default_shutdown_grace() -> f64 {
    10.0
}

impl EnsembleConfig {
    pub fn new(ensemble_dir: impl Into<PathBuf>) -> EnsembleConfig {
        EnsembleConfig {
            save_every_k_sims: None,
            save_every_k_gens: None,
            ensemble_dir: ensemble_dir.into(),
            log_dir: None,
            log_level: None,
            central_mode: false,
            zero_resource_workers: Vec::new(),
            inventory: None,
            num_resource_sets: None,
            workdir_policy: Default::default(),
            continue_on_worker_error: false,
            logical_clock: false,
            shutdown_grace: default_shutdown_grace(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    CriteriaMet,
    Timeout,
    Aborted,
}

/// One row of the event trace: cumulative counters after an ingest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub generated: u64,
    pub completed: u64,
    pub canceled: u64,
    pub failed: u64,
}

/// Run bookkeeping beyond the history itself.
#[derive(Debug, Default, Clone)]
pub struct RunStats {
    /// Every sim_id dispatched as simulation work, in dispatch order.
    pub dispatched: Vec<u64>,
    /// Resource sets granted per dispatched sim_id.
    pub dispatched_sets: BTreeMap<u64, usize>,
    /// Kill messages sent per sim_id.
    pub kills_sent: BTreeMap<u64, u32>,
    pub protocol_violations: u64,
    pub worker_errors: u64,
    pub gen_calls: u64,
    pub checkpoints: Vec<PathBuf>,
    /// (reply_size) sequence sent to persistent generators, per worker.
    pub reply_sizes: BTreeMap<u32, Vec<usize>>,
    /// Messages the manager sent and received over the whole run.
    pub messages_sent: u64,
    pub messages_received: u64,
}

pub struct RunOutput {
    pub history: HistoryStore,
    pub persis: BTreeMap<u32, PersisBlob>,
    pub flag: RunFlag,
    pub stats: RunStats,
    pub trace: Vec<TraceRow>,
}

/// Everything a run needs besides the transport.
pub struct RunInputs {
    pub sim: SimSpecs,
    pub gen: Option<GenSpecs>,
    pub alloc: AllocSpecs,
    pub exit: ExitCriteria,
    pub config: EnsembleConfig,
    /// Extra schema fields beyond the generator/simulator outputs.
    pub extra_fields: Vec<FieldSpec>,
    /// Resume from a previous history; given-but-unreturned rows become
    /// re-eligible for dispatch.
    pub initial_history: Option<HistoryStore>,
    pub seed: u64,
}

/// Derive a worker's base RNG seed from the run seed.
pub fn worker_seed(run_seed: u64, worker_id: u32) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(worker_id as u64)
}

struct Manager<'a> {
    comm: &'a ManagerComm,
    history: HistoryStore,
    workers: BTreeMap<u32, WorkerState>,
    resources: ResourceTable,
    sim: SimSpecs,
    gen: Option<GenSpecs>,
    alloc_fn: crate::alloc::AllocFn,
    alloc_specs: AllocSpecs,
    exit: ExitCriteria,
    cfg: EnsembleConfig,
    logger: EnsembleLogger,
    stats_file: StatsFile,
    started: Instant,
    give_seq: u64,
    stats: RunStats,
    trace: Vec<TraceRow>,
    shutting_down: bool,
    dirty: bool,
}

/// Run the coordination loop to completion over an established transport.
/// Workers must already be initialized (handshake plus init on process
/// transports). Never propagates worker errors as Err: they end the run
/// through the abort path with `flag = Aborted`.
pub fn run_ensemble(comm: &ManagerComm, inputs: RunInputs) -> Result<RunOutput, ManagerError> {
    let mut mgr = Manager::new(comm, inputs)?;
    let flag = mgr.main_loop()?;
    mgr.shutdown(flag)?;
    let (sent, received) = comm.message_counts();
    mgr.stats.messages_sent = sent;
    mgr.stats.messages_received = received;
    Ok(RunOutput {
        history: mgr.history,
        persis: mgr.workers.iter().map(|(id, w)| (*id, w.persis.clone())).collect(),
        flag,
        stats: mgr.stats,
        trace: mgr.trace,
    })
}

impl<'a> Manager<'a> {
    fn new(comm: &'a ManagerComm, inputs: RunInputs) -> Result<Manager<'a>, ManagerError> {
        let RunInputs { sim, gen, alloc, exit, config: cfg, extra_fields, initial_history, seed } =
            inputs;
        exit.validate()?;
        let gen_out: Vec<FieldSpec> =
            gen.as_ref().map(|g| g.out_fields.clone()).unwrap_or_default();
        let schema = RecordSchema::union(&gen_out, &sim.out_fields, &extra_fields)?;
        sim.validate(&schema)?;
        if let Some(g) = &gen {
            g.validate(&schema)?;
        }

        let history = match initial_history {
            Some(h) => {
                if h.schema() != &schema {
                    return Err(HistoryError::SchemaMismatch(
                        "resume history schema differs from the configured run".into(),
                    )
                    .into());
                }
                let mut h = h;
                h.reset_unreturned();
                h
            }
            None => HistoryStore::new(schema),
        };

        std::fs::create_dir_all(&cfg.ensemble_dir)?;
        let level = cfg.log_level.unwrap_or(LogLevel::Info);
        let (logger, stats_file) = match &cfg.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                (
                    EnsembleLogger::open(&dir.join("ensemble.log"), level)?,
                    StatsFile::open(&dir.join("libE_stats.txt"))?,
                )
            }
            None => (EnsembleLogger::disabled(), StatsFile::disabled()),
        };

        let worker_ids = comm.worker_ids();
        if worker_ids.is_empty() {
            return Err(ManagerError::Fault("no workers".into()));
        }
        for z in &cfg.zero_resource_workers {
            if !worker_ids.contains(z) {
                return Err(ManagerError::Fault(format!("zero-resource worker {z} not in pool")));
            }
        }

        let mut inventory = detect_inventory(cfg.inventory.as_deref(), &cfg.ensemble_dir)?;
        if cfg.central_mode && inventory.nodes.len() > 1 {
            // Coordination processes keep the first node for themselves.
            let dropped = inventory.nodes.remove(0);
            logger.info("manager", &format!("central mode: node '{}' reserved", dropped.0));
        }
        let default_nsets = worker_ids.len().saturating_sub(cfg.zero_resource_workers.len());
        let nsets = cfg.num_resource_sets.unwrap_or(default_nsets.max(1));
        if inventory.source == InventorySource::ProbeDefault {
            // Probed localhost slot counts rarely divide evenly; trim to the
            // nearest multiple so the default configuration always starts.
            let slots = inventory.nodes[0].1;
            inventory.nodes[0].1 = (slots / nsets).max(1) * nsets;
        }
        let sets = build_resource_sets(&inventory, nsets)?;
        logger.info(
            "manager",
            &format!(
                "resources: {} nodes, {} sets ({} slots each)",
                inventory.nodes.len(),
                sets.len(),
                sets.first().map(|s| s.slots.len()).unwrap_or(0)
            ),
        );
        let resources = ResourceTable::new(sets);

        let workers: BTreeMap<u32, WorkerState> = worker_ids
            .iter()
            .map(|&id| {
                (
                    id,
                    WorkerState {
                        id,
                        status: WorkerStatus::Idle,
                        current_sim_ids: Vec::new(),
                        resource_sets: Vec::new(),
                        zero_resource: cfg.zero_resource_workers.contains(&id),
                        persis: PersisBlob::new(id, worker_seed(seed, id)),
                        awaiting_update: false,
                        pending_reply: Vec::new(),
                    },
                )
            })
            .collect();

        let alloc_fn = crate::alloc::resolve(&alloc.function)?;
        logger.info(
            "manager",
            &format!("run starting: {} workers, alloc '{}'", workers.len(), alloc.function),
        );

        Ok(Manager {
            comm,
            history,
            workers,
            resources,
            sim,
            gen,
            alloc_fn,
            alloc_specs: alloc,
            exit,
            cfg,
            logger,
            stats_file,
            started: Instant::now(),
            give_seq: 0,
            stats: RunStats::default(),
            trace: Vec::new(),
            shutting_down: false,
            dirty: true,
        })
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn given_time(&mut self) -> f64 {
        self.give_seq += 1;
        if self.cfg.logical_clock {
            self.give_seq as f64
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0)
        }
    }

    fn push_trace(&mut self) {
        let h = &self.history;
        let row = TraceRow {
            t: self.elapsed(),
            generated: h.len() as u64,
            completed: h.returned_count(),
            canceled: (0..h.len() as u64).filter(|&i| h.cancel_requested(i)).count() as u64,
            failed: (0..h.len() as u64).filter(|&i| h.failed(i)).count() as u64,
        };
        if self.trace.last() != Some(&row) {
            self.trace.push(row);
        }
    }

    fn main_loop(&mut self) -> Result<RunFlag, ManagerError> {
        loop {
            if self.history.exit_met(&self.exit, self.elapsed()) {
                // Distinguish wallclock expiry from met criteria.
                let without_wall = ExitCriteria { wallclock_max: None, ..self.exit.clone() };
                let by_criteria = (without_wall.sim_max.is_some()
                    || without_wall.gen_max.is_some()
                    || without_wall.stop_field.is_some())
                    && self.history.exit_met(&without_wall, 0.0);
                return Ok(if by_criteria { RunFlag::CriteriaMet } else { RunFlag::Timeout });
            }
            if let Some(flag) = self.check_dead_workers()? {
                return Ok(flag);
            }
            self.handle_cancellation()?;
            self.checkpoint();
            if self.dirty {
                self.dirty = false;
                self.allocate_and_dispatch()?;
            }
            match self.comm.recv_any(Some(Duration::from_millis(50))) {
                Ok(msg) => {
                    if let Some(flag) = self.ingest(msg)? {
                        return Ok(flag);
                    }
                    self.dirty = true;
                }
                Err(CommsError::Timeout) => {}
                Err(CommsError::PeerClosed) => {
                    return self.abort("all workers disconnected".into());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// A worker whose stream dropped without a final report is dead; that is
    /// a worker error for shutdown purposes.
    fn check_dead_workers(&mut self) -> Result<Option<RunFlag>, ManagerError> {
        let dead: Vec<u32> = self
            .workers
            .values()
            .filter(|w| w.status != WorkerStatus::Dead && self.comm.worker_closed(w.id))
            .map(|w| w.id)
            .collect();
        if dead.is_empty() {
            return Ok(None);
        }
        for id in dead {
            let in_flight = self.workers[&id].current_sim_ids.clone();
            self.logger.manager_warning(
                "manager",
                &format!("worker {id} disconnected with {} rows in flight", in_flight.len()),
            );
            for sim_id in in_flight {
                self.history.mark_failed(sim_id)?;
            }
            let w = self.workers.get_mut(&id).unwrap();
            w.status = WorkerStatus::Dead;
            w.current_sim_ids.clear();
            self.resources.release(id);
            self.stats.worker_errors += 1;
            if !self.cfg.continue_on_worker_error {
                return self.abort(format!("worker {id} died")).map(Some);
            }
        }
        self.push_trace();
        Ok(None)
    }

    /// Process one message. `Some(flag)` ends the run.
    fn ingest(&mut self, msg: Message) -> Result<Option<RunFlag>, ManagerError> {
        if !self.workers.contains_key(&msg.source) {
            return self.violation(format!("message from unknown worker {}", msg.source));
        }
        match (msg.tag, msg.payload) {
            (Tag::Result, Payload::Result(payload)) => self.ingest_result(msg.source, *payload),
            (Tag::PersisUpdate, Payload::Update(payload)) => {
                self.ingest_update(msg.source, payload)
            }
            (tag, _) => self.violation(format!("unexpected {tag:?} from worker {}", msg.source)),
        }
    }

    fn violation(&mut self, text: String) -> Result<Option<RunFlag>, ManagerError> {
        self.stats.protocol_violations += 1;
        self.logger.error("manager", &format!("protocol violation: {text}"));
        self.abort(text).map(Some)
    }

    fn ingest_result(
        &mut self,
        source: u32,
        payload: ResultPayload,
    ) -> Result<Option<RunFlag>, ManagerError> {
        let status_name = payload.status.name();
        let was = self.workers[&source].status;
        if was == WorkerStatus::Idle || was == WorkerStatus::Dead {
            return self.violation(format!("result from {source} in state {was:?}"));
        }

        // Worker error report: log, mark rows failed, fail-stop by default.
        if let Some(err) = &payload.error {
            self.logger.manager_warning(
                "manager",
                &format!("worker {source} error: {}", err.traceback.lines().next().unwrap_or("")),
            );
            for &sim_id in &payload.sim_ids {
                if self.history.given(sim_id) && !self.history.returned(sim_id) {
                    self.history.mark_failed(sim_id)?;
                }
            }
            self.stats.worker_errors += 1;
            self.stats_file.append_call(
                source,
                if payload.kind == CallKind::Sim { "sim" } else { "gen" },
                &payload.sim_ids,
                payload.elapsed,
                "FAILED",
            );
            self.finish_worker_unit(source, payload.persis);
            self.push_trace();
            if self.cfg.continue_on_worker_error {
                return Ok(None);
            }
            return self.abort(format!("worker {source} raised")).map(Some);
        }

        match payload.kind {
            CallKind::Sim => {
                if payload.status == CalcStatus::PersisFinished {
                    self.stats_file.append_call(source, "sim", &[], payload.elapsed, status_name);
                    self.finish_worker_unit(source, payload.persis);
                    self.push_trace();
                    return Ok(None);
                }
                let expected = self.workers[&source].current_sim_ids.clone();
                if payload.sim_ids != expected {
                    return self.violation(format!(
                        "worker {source} returned rows {:?}, expected {:?}",
                        payload.sim_ids, expected
                    ));
                }
                for (i, &sim_id) in payload.sim_ids.iter().enumerate() {
                    match self.history.update(sim_id, &payload.batch, i, payload.status) {
                        Ok(()) => {}
                        Err(HistoryError::NotGiven(id)) => {
                            return self.violation(format!("result for ungiven row {id}"));
                        }
                        Err(HistoryError::AlreadyReturned(id)) => {
                            return self.violation(format!("double result for row {id}"));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                self.stats_file.append_call(
                    source,
                    "sim",
                    &payload.sim_ids,
                    payload.elapsed,
                    status_name,
                );
                // Route freshly returned rows to the persistent generator
                // that created them.
                for &sim_id in &payload.sim_ids {
                    if let Ok(cell) = self.history.cell(sim_id, "gen_worker") {
                        let gw = cell.as_i64().unwrap_or(0) as u32;
                        if let Some(gen_state) = self.workers.get_mut(&gw) {
                            if gen_state.in_persistent() {
                                gen_state.pending_reply.push(sim_id);
                            }
                        }
                    }
                }
                self.finish_worker_unit(source, payload.persis);
                self.push_trace();
                self.flush_persistent_replies()?;
                Ok(None)
            }
            CallKind::Gen => {
                let mut id_list: Vec<u64> = Vec::new();
                if !payload.batch.is_empty() {
                    match self.history.append_batch(&payload.batch, source) {
                        Ok(ids) => id_list = ids.collect(),
                        Err(e) => {
                            return self.violation(format!("bad generator batch: {e}"));
                        }
                    }
                }
                if payload.status != CalcStatus::PersisFinished {
                    self.stats.gen_calls += 1;
                }
                self.stats_file.append_call(source, "gen", &id_list, payload.elapsed, status_name);
                self.finish_worker_unit(source, payload.persis);
                self.push_trace();
                Ok(None)
            }
        }
    }

    fn finish_worker_unit(&mut self, source: u32, persis: Option<PersisBlob>) {
        self.resources.release(source);
        let w = self.workers.get_mut(&source).unwrap();
        w.status = WorkerStatus::Idle;
        w.current_sim_ids.clear();
        w.resource_sets.clear();
        w.awaiting_update = false;
        if let Some(p) = persis {
            w.persis = p;
        }
    }

    fn ingest_update(
        &mut self,
        source: u32,
        payload: UpdatePayload,
    ) -> Result<Option<RunFlag>, ManagerError> {
        if !self.workers[&source].in_persistent() {
            return self.violation(format!("persistent update from non-persistent worker {source}"));
        }
        self.workers.get_mut(&source).unwrap().awaiting_update = false;
        if self.shutting_down {
            // The stop tag is already on its way; late updates are dropped.
            return Ok(None);
        }
        if !payload.batch.is_empty() {
            match self.history.append_batch(&payload.batch, source) {
                Ok(ids) => self.logger.debug(
                    "manager",
                    &format!("gen {source} sent rows {}..{}", ids.start, ids.end),
                ),
                Err(e) => return self.violation(format!("bad persistent batch: {e}")),
            }
        }
        for sim_id in payload.cancel_ids {
            if sim_id >= self.history.len() as u64 {
                return self.violation(format!("cancel of unknown row {sim_id}"));
            }
            self.history.request_cancel(sim_id)?;
        }
        self.push_trace();
        self.flush_persistent_replies()?;
        Ok(None)
    }

    /// Send queued returned rows back to their persistent generators.
    /// Immediate mode replies as soon as data exists; batch mode waits until
    /// the generator has nothing left in flight. Strict alternation: never
    /// reply while the function still owes us a message.
    fn flush_persistent_replies(&mut self) -> Result<(), ManagerError> {
        let gen_in_fields: Vec<String> = match &self.gen {
            Some(g) => g.in_fields.clone(),
            None => return Ok(()),
        };
        let ids: Vec<u32> = self.workers.keys().copied().collect();
        for id in ids {
            let w = &self.workers[&id];
            if !w.in_persistent() || w.awaiting_update || w.pending_reply.is_empty() {
                continue;
            }
            if self.alloc_specs.batch_mode && self.gen_has_outstanding(id) {
                continue;
            }
            let rows = self.workers.get_mut(&id).unwrap().pending_reply.split_off(0);
            let batch = self.history.slice(&rows, &gen_in_fields)?;
            let size = batch.len();
            self.comm.send(Message::update(
                crate::comms::MANAGER_ID,
                id,
                UpdatePayload { batch, cancel_ids: Vec::new() },
            ))?;
            let w = self.workers.get_mut(&id).unwrap();
            w.awaiting_update = true;
            self.stats.reply_sizes.entry(id).or_default().push(size);
        }
        Ok(())
    }

    /// Rows generated by `gen_worker` that are dispatched and still running.
    /// Canceled-before-given rows do not count: they will never return.
    fn gen_has_outstanding(&self, gen_worker: u32) -> bool {
        (0..self.history.len() as u64).any(|i| {
            self.history.cell(i, "gen_worker").ok().and_then(|c| c.as_i64()) == Some(gen_worker as i64)
                && self.history.given(i)
                && !self.history.returned(i)
        })
    }

    /// Kill signals for canceled in-flight rows; canceled-ungiven rows are
    /// simply never dispatched. One kill per row, ever.
    fn handle_cancellation(&mut self) -> Result<(), ManagerError> {
        for sim_id in 0..self.history.len() as u64 {
            if !self.history.cancel_requested(sim_id)
                || self.history.kill_sent(sim_id)
                || !self.history.given(sim_id)
                || self.history.returned(sim_id)
            {
                continue;
            }
            let worker = match self.history.sim_worker(sim_id) {
                Some(w) if w != 0 => w,
                _ => continue,
            };
            self.comm.send(Message::kill(worker, vec![sim_id]))?;
            self.history.mark_kill_sent(sim_id)?;
            *self.stats.kills_sent.entry(sim_id).or_insert(0) += 1;
            self.logger.info("manager", &format!("kill sent to worker {worker} for row {sim_id}"));
            self.push_trace();
        }
        Ok(())
    }

    fn checkpoint(&mut self) {
        let returned = self.history.returned_count();
        if let Some(k) = self.cfg.save_every_k_sims {
            if k > 0 && returned > 0 && returned % k == 0 {
                let path = self.cfg.ensemble_dir.join(format!("H_ckpt_{returned}.ensh"));
                if !self.stats.checkpoints.contains(&path) {
                    self.write_checkpoint(path);
                }
            }
        }
        let generated = self.history.len() as u64;
        if let Some(k) = self.cfg.save_every_k_gens {
            if k > 0 && generated > 0 && generated % k == 0 {
                let path = self.cfg.ensemble_dir.join(format!("H_ckpt_gen{generated}.ensh"));
                if !self.stats.checkpoints.contains(&path) {
                    self.write_checkpoint(path);
                }
            }
        }
    }

    fn write_checkpoint(&mut self, path: PathBuf) {
        match self.history.save(&path) {
            Ok(()) => {
                self.logger.info("manager", &format!("checkpoint {}", path.display()));
                self.stats.checkpoints.push(path);
            }
            Err(e) => {
                // A failed checkpoint must not take the run down.
                self.logger.error("manager", &format!("checkpoint failed: {e}"));
            }
        }
    }

    fn allocate_and_dispatch(&mut self) -> Result<(), ManagerError> {
        if self.workers.values().any(|w| w.awaiting_update) {
            return Ok(()); // lockstep: a persistent function owes a message
        }
        if !self.workers.values().any(|w| w.is_idle()) {
            return Ok(());
        }
        let view = AllocView {
            history: &self.history,
            workers: &self.workers,
            sim: &self.sim,
            gen: self.gen.as_ref(),
            alloc: &self.alloc_specs,
            resources: &self.resources,
            exit: &self.exit,
        };
        let units = (self.alloc_fn)(&view)?;
        for (dest, unit) in units {
            self.dispatch(dest, unit)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, dest: u32, unit: WorkUnit) -> Result<(), ManagerError> {
        if unit.dest != dest || !self.workers.get(&dest).map(|w| w.is_idle()).unwrap_or(false) {
            return Err(ManagerError::Fault(format!(
                "allocator assigned work to non-idle worker {dest}"
            )));
        }
        if unit.kind == CallKind::Sim {
            for &sim_id in &unit.sim_ids {
                if self.history.given(sim_id) || self.history.cancel_requested(sim_id) {
                    return Err(ManagerError::Fault(format!(
                        "allocator chose ineligible row {sim_id}"
                    )));
                }
            }
        }
        self.resources.assign_specific(dest, &unit.resource_sets)?;
        let snapshot = self.resources.snapshot(dest);

        if unit.kind == CallKind::Sim {
            for &sim_id in &unit.sim_ids {
                let t = self.given_time();
                self.history.mark_given(sim_id, dest, t)?;
                self.stats.dispatched.push(sim_id);
                self.stats.dispatched_sets.insert(sim_id, unit.resource_sets.len());
            }
        }
        let input = self.history.slice(&unit.sim_ids, &unit.fields_to_send)?;
        let persis = self.workers[&dest].persis.clone();

        let w = self.workers.get_mut(&dest).unwrap();
        w.current_sim_ids = unit.sim_ids.clone();
        w.resource_sets = unit.resource_sets.clone();
        w.status = match (unit.kind, unit.persistent) {
            (CallKind::Sim, false) => WorkerStatus::BusySim,
            (CallKind::Gen, false) => WorkerStatus::BusyGen,
            (CallKind::Gen, true) => WorkerStatus::PersistentGen,
            (CallKind::Sim, true) => WorkerStatus::PersistentSim,
        };
        if unit.persistent {
            w.awaiting_update = true;
        }
        self.logger.debug(
            "manager",
            &format!("dispatch {:?} to worker {dest}: rows {:?}", unit.kind, unit.sim_ids),
        );
        self.comm.send(Message::work(dest, WorkPayload { unit, input, persis, resources: snapshot }))?;
        Ok(())
    }

    /// Fail-stop path: dump history, remember the cause, let shutdown stop
    /// the pool.
    fn abort(&mut self, cause: String) -> Result<RunFlag, ManagerError> {
        self.logger.error("manager", &format!("aborting run: {cause}"));
        let dump = self.cfg.ensemble_dir.join("H_at_abort.ensh");
        if let Err(e) = self.history.save(&dump) {
            self.logger.error("manager", &format!("abort dump failed: {e}"));
        } else {
            self.logger.info("manager", &format!("history dumped to {}", dump.display()));
        }
        Ok(RunFlag::Aborted)
    }

    /// Stop signals to everyone, then drain in-flight work within the grace
    /// period. Persistent functions get `PersisStop`, idle and busy workers
    /// `Stop` (busy ones after their result lands, or at the deadline).
    fn shutdown(&mut self, flag: RunFlag) -> Result<(), ManagerError> {
        self.shutting_down = true;
        let ids: Vec<u32> = self.workers.keys().copied().collect();
        for &id in &ids {
            let w = &self.workers[&id];
            match w.status {
                WorkerStatus::PersistentGen | WorkerStatus::PersistentSim => {
                    let _ = self.comm.send(Message::persis_stop(id));
                }
                WorkerStatus::Idle => {
                    let _ = self.comm.send(Message::stop(id));
                    self.workers.get_mut(&id).unwrap().status = WorkerStatus::Dead;
                }
                _ => {}
            }
        }
        let grace = if flag == RunFlag::Aborted {
            Duration::from_secs_f64(self.cfg.shutdown_grace.min(2.0))
        } else {
            Duration::from_secs_f64(self.cfg.shutdown_grace)
        };
        let deadline = Instant::now() + grace;
        while self
            .workers
            .values()
            .any(|w| !matches!(w.status, WorkerStatus::Dead))
        {
            if Instant::now() >= deadline {
                break;
            }
            match self.comm.recv_any(Some(Duration::from_millis(50))) {
                Ok(msg) => {
                    let source = msg.source;
                    match (msg.tag, msg.payload) {
                        (Tag::Result, Payload::Result(payload)) => {
                            self.drain_result(source, *payload)?;
                            let _ = self.comm.send(Message::stop(source));
                            if let Some(w) = self.workers.get_mut(&source) {
                                w.status = WorkerStatus::Dead;
                            }
                        }
                        (Tag::PersisUpdate, _) => {
                            // Late update racing our stop; it already has a
                            // PersisStop queued, nothing to do.
                        }
                        _ => {}
                    }
                }
                Err(CommsError::Timeout) => {
                    for &id in &ids {
                        if self.workers[&id].status != WorkerStatus::Dead
                            && self.comm.worker_closed(id)
                        {
                            self.workers.get_mut(&id).unwrap().status = WorkerStatus::Dead;
                        }
                    }
                }
                Err(_) => break,
            }
        }
        // Deadline straggler cleanup.
        for &id in &ids {
            if self.workers[&id].status != WorkerStatus::Dead {
                let _ = self.comm.send(Message::stop(id));
            }
        }
        self.logger.info("manager", &format!("run finished: flag {flag:?}"));
        Ok(())
    }

    /// Record a result arriving during shutdown. Kept simpler than the main
    /// ingest: no replies, no allocation, but history stays correct.
    fn drain_result(&mut self, source: u32, payload: ResultPayload) -> Result<(), ManagerError> {
        if payload.error.is_none()
            && payload.kind == CallKind::Sim
            && payload.status != CalcStatus::PersisFinished
        {
            for (i, &sim_id) in payload.sim_ids.iter().enumerate() {
                if self.history.given(sim_id) && !self.history.returned(sim_id) {
                    self.history.update(sim_id, &payload.batch, i, payload.status)?;
                }
            }
            self.stats_file.append_call(
                source,
                "sim",
                &payload.sim_ids,
                payload.elapsed,
                payload.status.name(),
            );
        } else if payload.status == CalcStatus::PersisFinished {
            self.stats_file.append_call(
                source,
                if payload.kind == CallKind::Sim { "sim" } else { "gen" },
                &[],
                payload.elapsed,
                payload.status.name(),
            );
        }
        self.finish_worker_unit(source, payload.persis);
        self.push_trace();
        Ok(())
    }
}
