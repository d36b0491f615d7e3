//! The same ensemble run over worker processes: pipe-connected (local) and
//! TCP-connected workers, plus the workflow-portability check that a fixed
//! seed yields the identical history on every transport.

use std::path::Path;
use std::sync::Arc;

use ens_core::alloc::AllocSpecs;
use ens_core::comms::CommsMode;
use ens_core::functions::builtin_registry;
use ens_core::launch::{run_on_pool, PoolOptions};
use ens_core::manager::{EnsembleConfig, RunFlag, RunInputs, RunOutput};
use ens_core::schema::FieldSpec;
use ens_core::specs::{ExitCriteria, GenSpecs, SimSpecs};

fn worker_bin() -> String {
    env!("CARGO_BIN_EXE_ens-worker").to_string()
}

fn pool_options(mode: CommsMode, nworkers: u32) -> PoolOptions {
    let mut opts = PoolOptions::inproc(nworkers);
    opts.mode = mode;
    opts.worker_cmd = Some(match mode {
        CommsMode::Local => vec![
            worker_bin(),
            "--stdio".into(),
            "--worker-id".into(),
            "{worker_id}".into(),
        ],
        CommsMode::Tcp => vec![
            worker_bin(),
            "--connect".into(),
            "{addr}".into(),
            "--worker-id".into(),
            "{worker_id}".into(),
        ],
        CommsMode::Inproc => vec![],
    });
    opts
}

fn sampling_inputs(dir: &Path, sim_max: u64, seed: u64) -> RunInputs {
    let mut config = EnsembleConfig::new(dir.join("ensemble"));
    config.logical_clock = true;
    RunInputs {
        sim: SimSpecs {
            function: "norm".into(),
            in_fields: vec!["x".into()],
            out_fields: vec![FieldSpec::float("f")],
            user_config: Default::default(),
        },
        gen: Some(GenSpecs {
            function: "uniform_sample".into(),
            in_fields: vec![],
            out_fields: vec![FieldSpec::float_vec("x", 1)],
            user_config: serde_json::json!({
                "lb": [-3.0], "ub": [3.0], "gen_batch_size": sim_max
            })
            .as_object()
            .unwrap()
            .clone(),
            persistent: false,
        }),
        alloc: AllocSpecs::default(),
        exit: ExitCriteria::sim_max(sim_max),
        config,
        extra_fields: vec![],
        initial_history: None,
        seed,
    }
}

fn run(mode: CommsMode, nworkers: u32, dir: &Path, sim_max: u64, seed: u64) -> RunOutput {
    let registry = Arc::new(builtin_registry());
    let (output, report) =
        run_on_pool(&pool_options(mode, nworkers), registry, sampling_inputs(dir, sim_max, seed))
            .expect("run failed");
    assert!(report.stragglers.is_empty(), "stragglers: {:?}", report.stragglers);
    output
}

#[test]
fn local_mode_runs_worker_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(CommsMode::Local, 4, dir.path(), 100, 2);
    assert_eq!(out.flag, RunFlag::CriteriaMet);
    assert_eq!(out.history.returned_count(), 100);
    out.history.check_invariants().unwrap();
    for i in 0..100u64 {
        let x = out.history.cell(i, "x").unwrap().as_f64_slice().unwrap()[0];
        let f = out.history.cell(i, "f").unwrap().as_f64().unwrap();
        assert!((f - x.abs()).abs() <= 1e-12);
    }
}

#[test]
fn tcp_mode_runs_worker_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(CommsMode::Tcp, 4, dir.path(), 100, 2);
    assert_eq!(out.flag, RunFlag::CriteriaMet);
    assert_eq!(out.history.returned_count(), 100);
}

#[test]
fn fixed_seed_is_identical_across_transports() {
    let mut files = Vec::new();
    for mode in [CommsMode::Inproc, CommsMode::Local, CommsMode::Tcp] {
        let dir = tempfile::tempdir().unwrap();
        let out = run(mode, 1, dir.path(), 60, 7);
        assert_eq!(out.flag, RunFlag::CriteriaMet);
        let path = dir.path().join("h.ensh");
        out.history.save(&path).unwrap();
        files.push((dir, path));
    }
    let reference = std::fs::read(&files[0].1).unwrap();
    for (_, path) in &files[1..] {
        assert_eq!(std::fs::read(path).unwrap(), reference, "transport changed the run");
    }
}
