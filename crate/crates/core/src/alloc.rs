//! Built-in allocation functions: pure policies mapping history state and
//! idle workers to work units. Same view in, same map out; the manager
//! validates and commits whatever they propose.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::CallKind;
use crate::history::HistoryStore;
use crate::manager::{WorkUnit, WorkerState};
use crate::resources::ResourceTable;
use crate::schema::CellValue;
use crate::specs::{ExitCriteria, GenSpecs, SimSpecs, UserConfig};

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("pre-generated allocation cannot run a generator: {0}")]
    NoGeneratorNeeded(String),
    #[error("unknown allocation function '{0}'")]
    UnknownFunction(String),
    #[error("allocation error: {0}")]
    Internal(String),
}

/// Allocation policy selection plus its options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocSpecs {
    pub function: String,
    /// Reply to a persistent generator only once all of its dispatched rows
    /// have returned, instead of as soon as anything has.
    #[serde(default)]
    pub batch_mode: bool,
    #[serde(default, alias = "user")]
    pub user_config: UserConfig,
}

impl Default for AllocSpecs {
    fn default() -> Self {
        AllocSpecs {
            function: "give_sim_work_first".into(),
            batch_mode: false,
            user_config: UserConfig::default(),
        }
    }
}

/// Read-only snapshot handed to an allocation function.
pub struct AllocView<'a> {
    pub history: &'a HistoryStore,
    pub workers: &'a BTreeMap<u32, WorkerState>,
    pub sim: &'a SimSpecs,
    pub gen: Option<&'a GenSpecs>,
    pub alloc: &'a AllocSpecs,
    pub resources: &'a ResourceTable,
    pub exit: &'a ExitCriteria,
}

pub type AllocFn = for<'a> fn(&AllocView<'a>) -> Result<BTreeMap<u32, WorkUnit>, AllocError>;

pub fn resolve(name: &str) -> Result<AllocFn, AllocError> {
    match name {
        "give_sim_work_first" => Ok(give_sim_work_first),
        "only_persistent_gen" => Ok(only_persistent_gen),
        "pre_generated" => Ok(pre_generated),
        other => Err(AllocError::UnknownFunction(other.to_string())),
    }
}

/// Idle workers, filtered. `persistent_ok` also includes workers currently
/// in a persistent state (for policies that route extra data to them);
/// `zero_resource_ok` keeps zero-resource workers in the list.
pub fn avail_worker_ids(view: &AllocView, persistent_ok: bool, zero_resource_ok: bool) -> Vec<u32> {
    view.workers
        .values()
        .filter(|w| w.is_idle() || (persistent_ok && w.in_persistent()))
        .filter(|w| zero_resource_ok || !w.zero_resource)
        .map(|w| w.id)
        .collect()
}

/// Dispatchable rows ordered by descending `priority` (when the schema has
/// one), then ascending sim_id.
fn ordered_candidates(h: &HistoryStore) -> Vec<u64> {
    let mut rows = h.dispatchable();
    if h.schema().contains("priority") {
        rows.sort_by(|&a, &b| {
            let pa = h.cell(a, "priority").ok().and_then(|c| c.as_f64()).unwrap_or(0.0);
            let pb = h.cell(b, "priority").ok().and_then(|c| c.as_f64()).unwrap_or(0.0);
            pb.partial_cmp(&pa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
    }
    rows
}

fn sets_requested(h: &HistoryStore, sim_id: u64) -> usize {
    match h.cell(sim_id, "resource_sets") {
        Ok(CellValue::I64(n)) => (*n).max(0) as usize,
        _ => 1,
    }
}

fn sim_unit(dest: u32, sim_id: u64, sim: &SimSpecs, resource_sets: Vec<usize>) -> WorkUnit {
    WorkUnit {
        dest,
        kind: CallKind::Sim,
        sim_ids: vec![sim_id],
        fields_to_send: sim.in_fields.clone(),
        persistent: false,
        resource_sets,
    }
}

fn gen_unit(dest: u32, gen: &GenSpecs, persistent: bool) -> WorkUnit {
    WorkUnit {
        dest,
        kind: CallKind::Gen,
        sim_ids: Vec::new(),
        fields_to_send: gen.in_fields.clone(),
        persistent,
        resource_sets: Vec::new(),
    }
}

/// Assign eligible rows to idle workers against a scratch resource table.
/// A row whose resource request does not fit is held back without blocking
/// smaller rows behind it.
fn farm_sims(
    view: &AllocView,
    workers: &[u32],
    units: &mut BTreeMap<u32, WorkUnit>,
    scratch: &mut ResourceTable,
) {
    let mut candidates = ordered_candidates(view.history);
    for &wid in workers {
        if candidates.is_empty() {
            break;
        }
        let mut chosen = None;
        for (pos, &sim_id) in candidates.iter().enumerate() {
            let request = sets_requested(view.history, sim_id);
            match scratch.assign(wid, request) {
                Ok(res) => {
                    chosen = Some((pos, sim_id, res.set_ids));
                    break;
                }
                Err(_) => continue, // held back; try a smaller row
            }
        }
        if let Some((pos, sim_id, set_ids)) = chosen {
            candidates.remove(pos);
            units.insert(wid, sim_unit(wid, sim_id, view.sim, set_ids));
        }
    }
}

/// True when the run budget leaves room to generate more rows.
fn gen_budget_open(view: &AllocView) -> bool {
    let total = view.history.len() as u64;
    if let Some(gen_max) = view.exit.gen_max {
        if total >= gen_max {
            return false;
        }
    }
    if let Some(sim_max) = view.exit.sim_max {
        if total >= sim_max {
            return false;
        }
    }
    true
}

fn any_sim_in_flight(view: &AllocView) -> bool {
    view.workers.values().any(|w| w.status == crate::manager::WorkerStatus::BusySim)
}

fn any_gen_active(view: &AllocView) -> bool {
    view.workers.values().any(|w| {
        matches!(
            w.status,
            crate::manager::WorkerStatus::BusyGen | crate::manager::WorkerStatus::PersistentGen
        )
    })
}

/// Default policy: hand out simulation rows first (highest priority first,
/// else lowest sim_id), and call the generator only when the queue is empty,
/// nothing is in flight, and the budget has room.
pub fn give_sim_work_first(view: &AllocView) -> Result<BTreeMap<u32, WorkUnit>, AllocError> {
    let mut units = BTreeMap::new();
    let sim_workers = avail_worker_ids(view, false, false);
    let mut scratch = view.resources.clone();
    farm_sims(view, &sim_workers, &mut units, &mut scratch);

    if units.is_empty()
        && view.history.dispatchable().is_empty()
        && !any_sim_in_flight(view)
        && !any_gen_active(view)
        && gen_budget_open(view)
    {
        if let Some(gen) = view.gen {
            // Zero-resource workers are the natural generator hosts.
            let host = avail_worker_ids(view, false, true)
                .into_iter()
                .min_by_key(|id| {
                    let zero = view.workers[id].zero_resource;
                    (if zero { 0u8 } else { 1u8 }, *id)
                });
            if let Some(wid) = host {
                units.insert(wid, gen_unit(wid, gen, gen.persistent));
            }
        }
    }
    Ok(units)
}

/// Keep exactly one persistent generator alive (restarting it if it
/// finishes early) and farm simulation rows to everyone else. Returned rows
/// flow back to the generator through the manager's reply path.
pub fn only_persistent_gen(view: &AllocView) -> Result<BTreeMap<u32, WorkUnit>, AllocError> {
    let mut units = BTreeMap::new();
    let mut gen_host = None;
    if let Some(gen) = view.gen {
        if !any_gen_active(view) && gen_budget_open(view) {
            let host = avail_worker_ids(view, false, true)
                .into_iter()
                .min_by_key(|id| {
                    let zero = view.workers[id].zero_resource;
                    (if zero { 0u8 } else { 1u8 }, *id)
                });
            if let Some(wid) = host {
                units.insert(wid, gen_unit(wid, gen, true));
                gen_host = Some(wid);
            }
        }
    }
    let sim_workers: Vec<u32> = avail_worker_ids(view, false, false)
        .into_iter()
        .filter(|id| Some(*id) != gen_host)
        .collect();
    let mut scratch = view.resources.clone();
    farm_sims(view, &sim_workers, &mut units, &mut scratch);
    Ok(units)
}

/// Farm out rows loaded into the history before the run; never calls a
/// generator. Rows already returned (a restart) are skipped by construction.
pub fn pre_generated(view: &AllocView) -> Result<BTreeMap<u32, WorkUnit>, AllocError> {
    if view.gen.is_some() {
        return Err(AllocError::NoGeneratorNeeded(
            "run configured with generator specs".into(),
        ));
    }
    let mut units = BTreeMap::new();
    let sim_workers = avail_worker_ids(view, false, false);
    let mut scratch = view.resources.clone();
    farm_sims(view, &sim_workers, &mut units, &mut scratch);
    Ok(units)
}
