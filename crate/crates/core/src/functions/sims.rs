//! Pure-function simulators.

use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::specs::{PersisBlob, SimSpecs};
use crate::tags::CalcStatus;
use crate::worker::{UserError, WorkerContext};

use super::{cfg_f64, row_x};

fn out_batch_f(values: &[f64]) -> RecordBatch {
    let mut out = RecordBatch::new(vec![FieldSpec::float("f")]);
    for &f in values {
        out.rows.push(vec![CellValue::F64(f)]);
    }
    out
}

/// Sleep in short slices, honoring a manager kill mid-nap. Returns true when
/// the sleep was cut short by a kill.
fn killable_sleep(ctx: &mut WorkerContext, millis: u64) -> bool {
    let deadline = std::time::Instant::now() + std::time::Duration::from_millis(millis);
    while std::time::Instant::now() < deadline {
        if ctx.executor.kill_requested() {
            return true;
        }
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
    ctx.executor.kill_requested()
}

/// f = the Euclidean norm of x. Optional config: `delay_ms` to simulate an
/// expensive evaluation (killable), `fail_above` to raise a deliberate error
/// when the norm exceeds a threshold (fault-handling tests).
pub fn sim_norm(
    input: &RecordBatch,
    _persis: &mut PersisBlob,
    specs: &SimSpecs,
    ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let delay = cfg_f64(&specs.user_config, "delay_ms").unwrap_or(0.0);
    let fail_above = cfg_f64(&specs.user_config, "fail_above");
    let mut values = Vec::with_capacity(input.len());
    for row in 0..input.len() {
        let x = row_x(input, row)?;
        let f = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if let Some(threshold) = fail_above {
            if f > threshold {
                return Err(UserError(format!("norm {f} above failure threshold {threshold}")));
            }
        }
        if delay > 0.0 && killable_sleep(ctx, delay as u64) {
            return Ok((RecordBatch::default(), CalcStatus::Killed));
        }
        values.push(f);
    }
    Ok((out_batch_f(&values), CalcStatus::Completed))
}

/// The six-hump camel function on (x1, x2).
pub fn six_hump_camel(x: f64, y: f64) -> f64 {
    (4.0 - 2.1 * x * x + x.powi(4) / 3.0) * x * x + x * y + (-4.0 + 4.0 * y * y) * y * y
}

pub fn sim_six_hump_camel(
    input: &RecordBatch,
    _persis: &mut PersisBlob,
    _specs: &SimSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let mut values = Vec::with_capacity(input.len());
    for row in 0..input.len() {
        let x = row_x(input, row)?;
        if x.len() != 2 {
            return Err("six_hump_camel expects 2-dimensional x".into());
        }
        values.push(six_hump_camel(x[0], x[1]));
    }
    Ok((out_batch_f(&values), CalcStatus::Completed))
}

/// f = sum of squares; the convex test objective.
pub fn sim_sum_squares(
    input: &RecordBatch,
    _persis: &mut PersisBlob,
    _specs: &SimSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let mut values = Vec::with_capacity(input.len());
    for row in 0..input.len() {
        let x = row_x(input, row)?;
        values.push(x.iter().map(|v| v * v).sum::<f64>());
    }
    Ok((out_batch_f(&values), CalcStatus::Completed))
}
