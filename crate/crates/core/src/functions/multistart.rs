//! Asynchronous multistart optimization generator: sample the box, start
//! local Nelder-Mead runs from points with no better evaluated neighbor
//! within a shrinking radius, and advance each run the moment its own
//! evaluations return, without blocking on anyone else's.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::specs::{GenSpecs, PersisBlob};
use crate::tags::CalcStatus;
use crate::worker::{PersisChannel, UserError, WorkerContext};

use super::nelder_mead::NelderMead;
use super::{bounds, cfg_f64, cfg_u64};

struct PointRecord {
    x: Vec<f64>,
    f: Option<f64>,
    run_id: i64,
}

struct LocalRun {
    nm: NelderMead,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Shrinking-ball radius over the number of evaluated points.
fn radius(r0: f64, n_evaluated: usize, dim: usize) -> f64 {
    if n_evaluated < 2 {
        return r0;
    }
    let n = n_evaluated as f64;
    r0 * (n.ln() / n).powf(1.0 / dim as f64)
}

pub fn gen_multistart_opt(
    chan: &mut PersisChannel,
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let cfg = &specs.user_config;
    let (lb, ub) = bounds(cfg)?;
    let dim = lb.len();
    let sample_size = cfg_u64(cfg, "sample_size").unwrap_or(50) as usize;
    let sample_batch = cfg_u64(cfg, "sample_batch").unwrap_or(8) as usize;
    let max_active_runs = cfg_u64(cfg, "max_active_runs").unwrap_or(4) as usize;
    let nm_tol = cfg_f64(cfg, "nm_tol").unwrap_or(1e-6);
    let nm_max_evals = cfg_u64(cfg, "nm_max_evals").unwrap_or(100) as usize;
    let diameter = lb.iter().zip(&ub).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt();
    let r0 = cfg_f64(cfg, "r0").unwrap_or(diameter);

    let mut rng = persis.take_rng();
    let mut points: BTreeMap<u64, PointRecord> = BTreeMap::new();
    let mut runs: Vec<LocalRun> = Vec::new();
    let mut started: BTreeSet<u64> = BTreeSet::new();
    let mut run_log: Vec<serde_json::Value> = Vec::new();
    let mut next_req: u64 = 0;
    // (req_id, x, run_id) waiting to go out with the next update.
    let mut queue: Vec<(u64, Vec<f64>, i64)> = Vec::new();

    let enqueue = |queue: &mut Vec<(u64, Vec<f64>, i64)>,
                       points: &mut BTreeMap<u64, PointRecord>,
                       next_req: &mut u64,
                       x: Vec<f64>,
                       run_id: i64| {
        let req = *next_req;
        *next_req += 1;
        points.insert(req, PointRecord { x: x.clone(), f: None, run_id });
        queue.push((req, x, run_id));
    };

    for _ in 0..sample_size {
        let x: Vec<f64> = lb
            .iter()
            .zip(&ub)
            .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
            .collect();
        enqueue(&mut queue, &mut points, &mut next_req, x, -1);
    }

    loop {
        let mut batch = RecordBatch::new(vec![
            FieldSpec::float_vec("x", dim),
            FieldSpec::int("req_id"),
            FieldSpec::int("run_id"),
        ]);
        for (req, x, run_id) in queue.drain(..) {
            batch.rows.push(vec![
                CellValue::F64Arr(x),
                CellValue::I64(req as i64),
                CellValue::I64(run_id),
            ]);
        }
        let (tag, reply) = chan
            .send_recv(batch, Vec::new())
            .map_err(|e| UserError(format!("manager link lost: {e}")))?;
        if tag.is_stop() {
            break;
        }
        let Some(data) = reply else { continue };

        // Record the newly evaluated points and advance their runs.
        for row in 0..data.len() {
            let req = super::row_u64(&data, row, "req_id")?;
            let f = super::row_f64(&data, row, "f")?;
            let Some(rec) = points.get_mut(&req) else { continue };
            rec.f = Some(f);
            let (x, run_id) = (rec.x.clone(), rec.run_id);
            if run_id >= 0 {
                let new_requests = runs[run_id as usize].nm.deliver(&x, f);
                for nx in new_requests {
                    enqueue(&mut queue, &mut points, &mut next_req, nx, run_id);
                }
            }
        }

        // Seed new runs: an evaluated point with no strictly better
        // evaluated point within the current radius.
        let n_evaluated = points.values().filter(|p| p.f.is_some()).count();
        let r = radius(r0, n_evaluated, dim);
        let evaluated: Vec<(u64, Vec<f64>, f64)> = points
            .iter()
            .filter_map(|(req, p)| p.f.map(|f| (*req, p.x.clone(), f)))
            .collect();
        for (req, x, f) in &evaluated {
            let active = runs.iter().filter(|r| !r.nm.finished()).count();
            if active >= max_active_runs {
                break;
            }
            if started.contains(req) {
                continue;
            }
            let has_better_neighbor = evaluated
                .iter()
                .any(|(oreq, ox, of)| oreq != req && *of < *f && dist(ox, x) <= r);
            if has_better_neighbor {
                continue;
            }
            started.insert(*req);
            let run_id = runs.len() as i64;
            let (nm, requests) =
                NelderMead::new(x.clone(), *f, lb.clone(), ub.clone(), nm_tol, nm_max_evals);
            run_log.push(serde_json::json!({
                "run_id": run_id,
                "seed_req_id": req,
                "r": r,
                "known_req_ids": evaluated.iter().map(|(q, _, _)| q).collect::<Vec<_>>(),
            }));
            runs.push(LocalRun { nm });
            for nx in requests {
                enqueue(&mut queue, &mut points, &mut next_req, nx, run_id);
            }
        }

        // Idle capacity turns into fresh exploration samples.
        let outstanding = points.values().filter(|p| p.f.is_none()).count();
        if outstanding < sample_batch {
            for _ in 0..(sample_batch - outstanding) {
                let x: Vec<f64> = lb
                    .iter()
                    .zip(&ub)
                    .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
                    .collect();
                enqueue(&mut queue, &mut points, &mut next_req, x, -1);
            }
        }
    }

    // Report every run's best point and the global best seen.
    let minima: Vec<serde_json::Value> = runs
        .iter()
        .enumerate()
        .map(|(i, run)| {
            let (x, f) = run.nm.best();
            serde_json::json!({
                "run_id": i,
                "x": x,
                "f": f,
                "evals": run.nm.evals,
                "finished": run.nm.finished(),
            })
        })
        .collect();
    let best = points
        .values()
        .filter_map(|p| p.f.map(|f| (f, p.x.clone())))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    persis.set("run_log", serde_json::Value::Array(run_log));
    persis.set("minima", serde_json::Value::Array(minima));
    if let Some((f, x)) = best {
        persis.set("best_f", serde_json::json!(f));
        persis.set("best_x", serde_json::json!(x));
    }
    persis.store_rng(&rng);
    Ok((RecordBatch::default(), CalcStatus::PersisFinished))
}
