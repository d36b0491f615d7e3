//! Library side of the scenario runner: the catalog, configuration
//! handling, and report shaping used by the `ens` binary and the test
//! suites.

pub mod config;
pub mod report;
pub mod scenarios;

use std::path::Path;

use anyhow::Context;

use ens_core::logging::LogLevel;
use ens_core::manager::RunInputs;

pub struct PreparedRun {
    pub inputs: RunInputs,
    /// True when the scenario reserves one extra zero-resource worker for
    /// its persistent generator.
    pub extra_gen_worker: bool,
}

/// Fill `{self}` placeholders (the bundled app path) in a config document.
fn resolve_self_paths(doc: &mut serde_json::Value, self_exe: &Path) {
    let me = self_exe.to_string_lossy().into_owned();
    fn walk(v: &mut serde_json::Value, me: &str) {
        match v {
            serde_json::Value::String(s) if s == "{self}" => *s = me.to_string(),
            serde_json::Value::Array(items) => items.iter_mut().for_each(|i| walk(i, me)),
            serde_json::Value::Object(map) => map.values_mut().for_each(|i| walk(i, me)),
            _ => {}
        }
    }
    walk(doc, &me);
}

/// Merge overrides into the scenario defaults and assemble the run inputs.
/// `self_exe` must point at an executable exposing the bundled synthetic
/// app as its `__watchdog-app` subcommand (the `ens` binary).
pub fn prepare_run(
    scenario: &scenarios::Scenario,
    seed: u64,
    outdir: &Path,
    overlay: Option<&serde_json::Value>,
    log_level: LogLevel,
    self_exe: &Path,
) -> anyhow::Result<PreparedRun> {
    let mut doc = (scenario.defaults)();
    if let Some(overlay) = overlay {
        config::merge(&mut doc, overlay);
    }
    resolve_self_paths(&mut doc, self_exe);
    let doc = config::parse_doc(doc)?;

    std::fs::create_dir_all(outdir)
        .with_context(|| format!("creating {}", outdir.display()))?;
    let outdir = outdir.canonicalize()?;
    let ensemble_dir = outdir.join("ensemble");

    let mut libe = doc.libe_specs;
    if scenario.extra_gen_worker && libe.zero_resource_workers.is_none() {
        libe.zero_resource_workers = Some(vec![1]);
    }
    let ensemble_config = libe.into_ensemble_config(ensemble_dir, outdir, log_level);
    let initial_history = match scenario.initial_history {
        Some(build) => Some(build(seed)?),
        None => None,
    };

    Ok(PreparedRun {
        inputs: RunInputs {
            sim: doc.sim_specs,
            gen: doc.gen_specs,
            alloc: doc.alloc_specs,
            exit: doc.exit_criteria,
            config: ensemble_config,
            extra_fields: doc.extra_fields,
            initial_history,
            seed,
        },
        extra_gen_worker: scenario.extra_gen_worker,
    })
}
