//! The scenario catalog: named desk-scale runs, each a default
//! configuration document plus any preloaded history it needs.

use anyhow::Context;
use rand::{Rng, SeedableRng};

use ens_core::schema::{CellValue, FieldSpec, RecordBatch, RecordSchema};
use ens_core::HistoryStore;

pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    /// Persistent-generator scenarios reserve one extra zero-resource
    /// worker (worker 1) to host the generator, on top of `--nworkers`
    /// simulation workers.
    pub extra_gen_worker: bool,
    pub defaults: fn() -> serde_json::Value,
    pub initial_history: Option<fn(seed: u64) -> anyhow::Result<HistoryStore>>,
}

pub fn catalog() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "sampling",
            summary: "one-shot uniform sample of 500 points through the norm simulator",
            extra_gen_worker: false,
            defaults: sampling_defaults,
            initial_history: None,
        },
        Scenario {
            name: "persistent_sampling",
            summary: "persistent generator streaming batches, batch size tracking replies",
            extra_gen_worker: true,
            defaults: persistent_sampling_defaults,
            initial_history: None,
        },
        Scenario {
            name: "multistart",
            summary: "asynchronous multistart optimization of the six-hump camel",
            extra_gen_worker: true,
            defaults: multistart_defaults,
            initial_history: None,
        },
        Scenario {
            name: "watchdog_kill",
            summary: "synthetic app runs killed when their output reports lost particles",
            extra_gen_worker: false,
            defaults: watchdog_defaults,
            initial_history: None,
        },
        Scenario {
            name: "variable_resources",
            summary: "rows request 1/2/4 resource sets; the scheduler honors each",
            extra_gen_worker: false,
            defaults: variable_resources_defaults,
            initial_history: None,
        },
        Scenario {
            name: "calibration_cancel",
            summary: "borehole calibration generator canceling queued and running points",
            extra_gen_worker: true,
            defaults: calibration_defaults,
            initial_history: None,
        },
        Scenario {
            name: "pre_generated",
            summary: "farm a preloaded table of points with no generator at all",
            extra_gen_worker: false,
            defaults: pre_generated_defaults,
            initial_history: Some(pre_generated_history),
        },
    ]
}

pub fn find(name: &str) -> Option<Scenario> {
    catalog().into_iter().find(|s| s.name == name)
}

fn field(name: &str, kind: &str, shape: serde_json::Value) -> serde_json::Value {
    serde_json::json!({"name": name, "kind": kind, "shape": shape})
}

fn sampling_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "norm",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
        },
        "gen_specs": {
            "function": "uniform_sample",
            "out": [field("x", "float64", serde_json::json!([1]))],
            "user": {"lb": [-3.0], "ub": [3.0], "gen_batch_size": 500},
        },
        "exit_criteria": {"sim_max": 500},
        "libE_specs": {"save_every_k_sims": 10},
    })
}

fn persistent_sampling_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "norm",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
        },
        "gen_specs": {
            "function": "persistent_uniform",
            "persistent": true,
            "in": ["sim_id", "f"],
            "out": [field("x", "float64", serde_json::json!([1]))],
            "user": {"lb": [-3.0], "ub": [3.0], "gen_batch_size": 16},
        },
        "alloc_specs": {"function": "only_persistent_gen"},
        "exit_criteria": {"sim_max": 200},
    })
}

fn multistart_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "six_hump_camel",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
        },
        "gen_specs": {
            "function": "multistart_optimizer",
            "persistent": true,
            "in": ["sim_id", "x", "f", "req_id"],
            "out": [
                field("x", "float64", serde_json::json!([2])),
                field("req_id", "int64", serde_json::json!([])),
                field("run_id", "int64", serde_json::json!([])),
            ],
            "user": {
                "lb": [-3.0, -2.0], "ub": [3.0, 2.0],
                "sample_size": 100, "sample_batch": 8,
                "max_active_runs": 6, "nm_tol": 1e-7, "nm_max_evals": 120,
            },
        },
        "alloc_specs": {"function": "only_persistent_gen"},
        "exit_criteria": {"sim_max": 1000},
    })
}

fn watchdog_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "watchdog_app_sim",
            "in": ["sim_id", "duration", "lost_at"],
            "out": [
                field("f", "float64", serde_json::json!([])),
                field("runtime", "float64", serde_json::json!([])),
                field("killed", "boolean", serde_json::json!([])),
            ],
            // "{self}" resolves to this executable; the app runs as the
            // hidden __watchdog-app subcommand.
            "user": {"app_path": "{self}", "app_prefix_args": ["__watchdog-app"],
                     "marker": "PARTICLE LOST", "poll_ms": 50.0},
        },
        "gen_specs": {
            "function": "watchdog_cases",
            "out": [
                field("x", "float64", serde_json::json!([1])),
                field("duration", "float64", serde_json::json!([])),
                field("lost_at", "float64", serde_json::json!([])),
            ],
            "user": {"gen_batch_size": 40, "duration": 1.0, "lost_fraction": 0.175},
        },
        "exit_criteria": {"sim_max": 40},
    })
}

fn variable_resources_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "norm",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
        },
        "gen_specs": {
            "function": "variable_resources_sample",
            "out": [
                field("x", "float64", serde_json::json!([2])),
                field("resource_sets", "int64", serde_json::json!([])),
            ],
            "user": {"lb": [0.0, 0.0], "ub": [1.0, 1.0],
                     "gen_batch_size": 30, "set_choices": [1, 2, 4]},
        },
        "exit_criteria": {"sim_max": 30},
        "libE_specs": {
            "inventory": [["nodeA", 4], ["nodeB", 4]],
            "num_resource_sets": 8,
        },
    })
}

fn calibration_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "borehole",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
            "user": {"delay_ms": 15.0},
        },
        "gen_specs": {
            "function": "calibration_cancel",
            "persistent": true,
            "in": ["sim_id", "x", "f"],
            "out": [field("x", "float64", serde_json::json!([8]))],
            "user": {"gen_batch_size": 25, "cancel_threshold": 90.0},
        },
        "alloc_specs": {"function": "only_persistent_gen"},
        "exit_criteria": {"sim_max": 150},
    })
}

fn pre_generated_defaults() -> serde_json::Value {
    serde_json::json!({
        "sim_specs": {
            "function": "norm",
            "in": ["x"],
            "out": [field("f", "float64", serde_json::json!([]))],
        },
        "alloc_specs": {"function": "pre_generated"},
        "exit_criteria": {"sim_max": 64},
        "extra_fields": [field("x", "float64", serde_json::json!([1]))],
    })
}

/// 64 deterministic points in [-3, 3], appended before the run starts.
fn pre_generated_history(seed: u64) -> anyhow::Result<HistoryStore> {
    let schema = RecordSchema::union(
        &[],
        &[FieldSpec::float("f")],
        &[FieldSpec::float_vec("x", 1)],
    )
    .context("pre_generated schema")?;
    let mut h = HistoryStore::new(schema);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut batch = RecordBatch::new(vec![FieldSpec::float_vec("x", 1)]);
    for _ in 0..64 {
        batch.rows.push(vec![CellValue::F64Arr(vec![rng.gen_range(-3.0..3.0)])]);
    }
    h.append_batch(&batch, 0).context("preload")?;
    Ok(h)
}
