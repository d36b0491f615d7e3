//! Coordination runtime for dynamically defined ensembles of calculations.
//!
//! A manager process drives pluggable generator, simulator, and allocation
//! functions across a pool of workers, keeping a typed history of every unit
//! of work. Workers can host persistent functions that exchange batches with
//! the manager in a loop, launch external applications through a
//! kill/retry-capable executor, and hold resource sets carved from the
//! detected node inventory. Manager and workers talk over interchangeable
//! transports: in-process channels, local pipe-connected processes, or TCP.

pub mod alloc;
pub mod comms;
pub mod executor;
pub mod functions;
pub mod history;
pub mod launch;
pub mod logging;
pub mod manager;
pub mod resources;
pub mod schema;
pub mod specs;
pub mod tags;
pub mod worker;

pub use history::{HistoryError, HistoryStore};
pub use manager::{run_ensemble, EnsembleConfig, RunFlag, RunInputs, RunOutput};
pub use schema::{CellValue, FieldKind, FieldSpec, RecordBatch, RecordSchema};
pub use specs::{ExitCriteria, GenSpecs, PersisBlob, SimSpecs};
pub use tags::{CalcStatus, Tag};
