//! Statistical-calibration pattern: a persistent generator streams batches
//! of borehole evaluations and, right before emitting each new batch,
//! requests cancellation of pending points its surrogate now scores as
//! useless.

use std::collections::BTreeMap;

use rand::Rng;

use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::specs::{GenSpecs, PersisBlob, SimSpecs};
use crate::tags::CalcStatus;
use crate::worker::{PersisChannel, UserError, WorkerContext};

use super::{cfg_f64, cfg_u64, row_f64, row_u64, row_x};

/// Canonical borehole domain: rw, r, Tu, Hu, Tl, Hl, L, Kw.
pub const BOREHOLE_LB: [f64; 8] =
    [0.05, 100.0, 63_070.0, 990.0, 63.1, 700.0, 1120.0, 9855.0];
pub const BOREHOLE_UB: [f64; 8] =
    [0.15, 50_000.0, 115_600.0, 1110.0, 116.0, 820.0, 1680.0, 12_045.0];

/// Water flow through a borehole, the standard 8-parameter test function.
pub fn borehole(x: &[f64]) -> f64 {
    let (rw, r, tu, hu, tl, hl, l, kw) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]);
    let ln_r_rw = (r / rw).ln();
    let numerator = 2.0 * std::f64::consts::PI * tu * (hu - hl);
    let denominator = ln_r_rw * (1.0 + 2.0 * l * tu / (ln_r_rw * rw * rw * kw) + tu / tl);
    numerator / denominator
}

/// Borehole simulator; optional `delay_ms` makes it slow (and killable).
pub fn sim_borehole(
    input: &RecordBatch,
    _persis: &mut PersisBlob,
    specs: &SimSpecs,
    ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let delay = cfg_f64(&specs.user_config, "delay_ms").unwrap_or(0.0) as u64;
    let mut out = RecordBatch::new(vec![FieldSpec::float("f")]);
    for row in 0..input.len() {
        let x = row_x(input, row)?;
        if x.len() != 8 {
            return Err("borehole expects 8-dimensional x".into());
        }
        if delay > 0 {
            let deadline = std::time::Instant::now() + std::time::Duration::from_millis(delay);
            while std::time::Instant::now() < deadline {
                if ctx.executor.kill_requested() {
                    return Ok((RecordBatch::default(), CalcStatus::Killed));
                }
                std::thread::sleep(std::time::Duration::from_millis(2));
            }
        }
        out.rows.push(vec![CellValue::F64(borehole(&x))]);
    }
    Ok((out, CalcStatus::Completed))
}

/// Region key: one bit per dimension, above or below the domain midpoint.
fn cell_of(x: &[f64], lb: &[f64], ub: &[f64]) -> u32 {
    let mut cell = 0u32;
    for i in 0..x.len() {
        if x[i] > 0.5 * (lb[i] + ub[i]) {
            cell |= 1 << i;
        }
    }
    cell
}

/// Persistent calibration generator. Keeps a deterministic regional
/// running-mean surrogate over returned values; before each new batch it
/// cancels pending rows whose region score exceeds the threshold, bundling
/// the cancellations with the batch.
///
/// Assumes it is the only row producer in the run, so manager-assigned
/// sim_ids follow its own running count (`id_base` + emitted so far).
pub fn gen_calibration_cancel(
    chan: &mut PersisChannel,
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let cfg = &specs.user_config;
    let b = cfg_u64(cfg, "gen_batch_size").unwrap_or(25) as usize;
    let threshold = cfg_f64(cfg, "cancel_threshold").unwrap_or(f64::INFINITY);
    let update_every = cfg_u64(cfg, "update_every").unwrap_or(1).max(1);
    let lb = super::cfg_vec_f64(cfg, "lb").unwrap_or_else(|| BOREHOLE_LB.to_vec());
    let ub = super::cfg_vec_f64(cfg, "ub").unwrap_or_else(|| BOREHOLE_UB.to_vec());
    let dim = lb.len();
    let mut next_sim_id = cfg_u64(cfg, "id_base").unwrap_or(0);

    let mut rng = persis.take_rng();
    let mut pending: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut canceled: Vec<u64> = Vec::new();
    let mut cells: BTreeMap<u32, (u64, f64)> = BTreeMap::new(); // count, sum
    let mut returned_total = 0u64;
    let mut returned_sum = 0.0f64;
    let mut generated = 0u64;
    let mut round = 0u64;
    let mut batches = 0u64;

    loop {
        round += 1;
        // A new batch goes out only once the live pool has drained below
        // half a batch; between batches the loop is a pure data poll.
        let live_pending = pending.keys().filter(|id| !canceled.contains(id)).count();
        let produce = round == 1 || live_pending < b / 2 + 1;

        // Cancellations are scored right before the next set of generated
        // points and ride along with it.
        let mut cancel_now: Vec<u64> = Vec::new();
        if produce
            && batches % update_every == 0
            && returned_total > 0
            && threshold.is_finite()
        {
            let global_mean = returned_sum / returned_total as f64;
            for (&sim_id, x) in &pending {
                if canceled.contains(&sim_id) {
                    continue;
                }
                let score = match cells.get(&cell_of(x, &lb, &ub)) {
                    Some(&(n, sum)) if n > 0 => sum / n as f64,
                    _ => global_mean,
                };
                if score > threshold {
                    cancel_now.push(sim_id);
                }
            }
            canceled.extend_from_slice(&cancel_now);
        }

        let mut batch = RecordBatch::new(vec![FieldSpec::float_vec("x", dim)]);
        if produce {
            batches += 1;
            for _ in 0..b {
                let x: Vec<f64> = lb
                    .iter()
                    .zip(&ub)
                    .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
                    .collect();
                pending.insert(next_sim_id, x.clone());
                next_sim_id += 1;
                generated += 1;
                batch.rows.push(vec![CellValue::F64Arr(x)]);
            }
        }

        let (tag, reply) = chan
            .send_recv(batch, cancel_now)
            .map_err(|e| UserError(format!("manager link lost: {e}")))?;
        if tag.is_stop() {
            break;
        }
        if let Some(data) = reply {
            for row in 0..data.len() {
                let sim_id = row_u64(&data, row, "sim_id")?;
                let f = row_f64(&data, row, "f")?;
                let x = row_x(&data, row)?;
                pending.remove(&sim_id);
                returned_total += 1;
                returned_sum += f;
                let entry = cells.entry(cell_of(&x, &lb, &ub)).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += f;
            }
        }
    }

    persis.store_rng(&rng);
    persis.set("generated", serde_json::json!(generated));
    persis.set("completed", serde_json::json!(returned_total));
    persis.set("canceled", serde_json::json!(canceled));
    persis.set("rounds", serde_json::json!(round));
    Ok((RecordBatch::default(), CalcStatus::PersisFinished))
}
