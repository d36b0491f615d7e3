//! Run configuration document: one JSON object with `sim_specs`,
//! `gen_specs`, `alloc_specs`, `exit_criteria`, and `libE_specs` keys,
//! functions referenced by registry name. A user-supplied file deep-merges
//! over the scenario's defaults.

use std::path::PathBuf;

use anyhow::Context;
use serde::Deserialize;

use ens_core::alloc::AllocSpecs;
use ens_core::logging::LogLevel;
use ens_core::manager::EnsembleConfig;
use ens_core::schema::FieldSpec;
use ens_core::specs::{ExitCriteria, GenSpecs, SimSpecs};
use ens_core::worker::WorkdirPolicy;

#[derive(Debug, Deserialize)]
pub struct ConfigDoc {
    pub sim_specs: SimSpecs,
    #[serde(default)]
    pub gen_specs: Option<GenSpecs>,
    #[serde(default)]
    pub alloc_specs: AllocSpecs,
    pub exit_criteria: ExitCriteria,
    #[serde(default, rename = "libE_specs")]
    pub libe_specs: LibESpecs,
    #[serde(default)]
    pub extra_fields: Vec<FieldSpec>,
}

/// Run-level options as they appear in config files; paths and logging are
/// filled in by the CLI.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct LibESpecs {
    pub save_every_k_sims: Option<u64>,
    pub save_every_k_gens: Option<u64>,
    pub central_mode: bool,
    pub zero_resource_workers: Option<Vec<u32>>,
    pub inventory: Option<Vec<(String, usize)>>,
    pub num_resource_sets: Option<usize>,
    pub workdir_policy: WorkdirPolicy,
    pub continue_on_worker_error: bool,
    /// Defaults to true for scenario runs so serialized reruns are
    /// byte-identical; set false to record epoch timestamps instead.
    pub logical_clock: Option<bool>,
    pub shutdown_grace: Option<f64>,
}

impl LibESpecs {
    pub fn into_ensemble_config(
        self,
        ensemble_dir: PathBuf,
        log_dir: PathBuf,
        log_level: LogLevel,
    ) -> EnsembleConfig {
        let mut cfg = EnsembleConfig::new(ensemble_dir);
        cfg.log_dir = Some(log_dir);
        cfg.log_level = Some(log_level);
        cfg.save_every_k_sims = self.save_every_k_sims;
        cfg.save_every_k_gens = self.save_every_k_gens;
        cfg.central_mode = self.central_mode;
        cfg.zero_resource_workers = self.zero_resource_workers.unwrap_or_default();
        cfg.inventory = self.inventory;
        cfg.num_resource_sets = self.num_resource_sets;
        cfg.workdir_policy = self.workdir_policy;
        cfg.continue_on_worker_error = self.continue_on_worker_error;
        cfg.logical_clock = self.logical_clock.unwrap_or(true);
        if let Some(grace) = self.shutdown_grace {
            cfg.shutdown_grace = grace;
        }
        cfg
    }
}

/// Recursive JSON merge: objects merge key-by-key, everything else is
/// replaced by the overlay.
pub fn merge(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(overlay_map)) => {
            for (k, v) in overlay_map {
                match base_map.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base_map.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, other) => *slot = other.clone(),
    }
}

pub fn parse_doc(value: serde_json::Value) -> anyhow::Result<ConfigDoc> {
    serde_json::from_value(value).context("invalid run configuration")
}
