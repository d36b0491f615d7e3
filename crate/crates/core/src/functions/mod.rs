//! Built-in generator and simulator functions, registered by name so specs
//! can reference them across process boundaries.

mod calibration;
mod multistart;
pub mod nelder_mead;
mod sampling;
mod sims;
pub mod synthetic;
mod watchdog;

pub use calibration::{borehole, gen_calibration_cancel, sim_borehole, BOREHOLE_LB, BOREHOLE_UB};
pub use multistart::gen_multistart_opt;
pub use sampling::{
    gen_persistent_uniform, gen_uniform_sample, gen_variable_resources, gen_watchdog_cases,
};
pub use sims::{sim_norm, sim_six_hump_camel, sim_sum_squares};
pub use watchdog::sim_app_with_watchdog;

use crate::specs::UserConfig;
use crate::worker::{FunctionRegistry, UserError, UserFunction};

/// Registry with every built-in function. Worker processes construct this at
/// startup; embedders can extend it with their own functions.
pub fn builtin_registry() -> FunctionRegistry {
    let mut reg = FunctionRegistry::new();
    reg.register("uniform_sample", UserFunction::Gen(gen_uniform_sample))
        .register("variable_resources_sample", UserFunction::Gen(gen_variable_resources))
        .register("watchdog_cases", UserFunction::Gen(gen_watchdog_cases))
        .register("persistent_uniform", UserFunction::PersistentGen(gen_persistent_uniform))
        .register("multistart_optimizer", UserFunction::PersistentGen(gen_multistart_opt))
        .register("calibration_cancel", UserFunction::PersistentGen(gen_calibration_cancel))
        .register("norm", UserFunction::Sim(sim_norm))
        .register("six_hump_camel", UserFunction::Sim(sim_six_hump_camel))
        .register("sum_squares", UserFunction::Sim(sim_sum_squares))
        .register("borehole", UserFunction::Sim(sim_borehole))
        .register("watchdog_app_sim", UserFunction::Sim(sim_app_with_watchdog));
    reg
}

pub(crate) fn cfg_f64(cfg: &UserConfig, key: &str) -> Option<f64> {
    cfg.get(key).and_then(|v| v.as_f64())
}

pub(crate) fn cfg_u64(cfg: &UserConfig, key: &str) -> Option<u64> {
    cfg.get(key).and_then(|v| v.as_u64())
}

pub(crate) fn cfg_str<'a>(cfg: &'a UserConfig, key: &str) -> Option<&'a str> {
    cfg.get(key).and_then(|v| v.as_str())
}

pub(crate) fn cfg_vec_f64(cfg: &UserConfig, key: &str) -> Option<Vec<f64>> {
    cfg.get(key)?
        .as_array()?
        .iter()
        .map(|v| v.as_f64())
        .collect()
}

pub(crate) fn cfg_vec_u64(cfg: &UserConfig, key: &str) -> Option<Vec<u64>> {
    cfg.get(key)?
        .as_array()?
        .iter()
        .map(|v| v.as_u64())
        .collect()
}

/// Bounds from a generator config: `lb` and `ub` arrays of equal length.
pub(crate) fn bounds(cfg: &UserConfig) -> Result<(Vec<f64>, Vec<f64>), UserError> {
    let lb = cfg_vec_f64(cfg, "lb").ok_or_else(|| UserError::from("missing 'lb'"))?;
    let ub = cfg_vec_f64(cfg, "ub").ok_or_else(|| UserError::from("missing 'ub'"))?;
    if lb.len() != ub.len() || lb.is_empty() {
        return Err("lb and ub must be nonempty and the same length".into());
    }
    if lb.iter().zip(&ub).any(|(l, u)| l > u) {
        return Err("lb must not exceed ub".into());
    }
    Ok((lb, ub))
}

/// Extract a row's `x` as a flat vector (scalar x reads as length 1).
pub(crate) fn row_x(batch: &crate::schema::RecordBatch, row: usize) -> Result<Vec<f64>, UserError> {
    match batch.cell(row, "x") {
        Some(crate::schema::CellValue::F64Arr(v)) => Ok(v.clone()),
        Some(crate::schema::CellValue::F64(v)) => Ok(vec![*v]),
        _ => Err("row has no usable 'x' field".into()),
    }
}

pub(crate) fn row_f64(
    batch: &crate::schema::RecordBatch,
    row: usize,
    name: &str,
) -> Result<f64, UserError> {
    batch
        .cell(row, name)
        .and_then(|c| c.as_f64())
        .ok_or_else(|| UserError(format!("row has no '{name}' value")))
}

pub(crate) fn row_u64(
    batch: &crate::schema::RecordBatch,
    row: usize,
    name: &str,
) -> Result<u64, UserError> {
    batch
        .cell(row, name)
        .and_then(|c| c.as_i64())
        .map(|v| v.max(0) as u64)
        .ok_or_else(|| UserError(format!("row has no '{name}' value")))
}
