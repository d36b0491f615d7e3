//! Sampling generators: one-shot uniform batches, the persistent streaming
//! variant with batch-size adaptation, and samplers that attach resource
//! requests or watchdog timings to each row.

use rand::Rng;

use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::specs::{GenSpecs, PersisBlob};
use crate::tags::CalcStatus;
use crate::worker::{PersisChannel, UserError, WorkerContext};

use super::{bounds, cfg_f64, cfg_u64, cfg_vec_u64};

fn uniform_point(rng: &mut impl Rng, lb: &[f64], ub: &[f64]) -> Vec<f64> {
    lb.iter()
        .zip(ub)
        .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
        .collect()
}

fn x_batch(points: Vec<Vec<f64>>, n: usize) -> RecordBatch {
    let mut batch = RecordBatch::new(vec![FieldSpec::float_vec("x", n)]);
    for p in points {
        batch.rows.push(vec![CellValue::F64Arr(p)]);
    }
    batch
}

/// Uniform sample of `gen_batch_size` points in the `[lb, ub]` box. The RNG
/// stream continues across calls through the persistent blob.
pub fn gen_uniform_sample(
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let (lb, ub) = bounds(&specs.user_config)?;
    let b = cfg_u64(&specs.user_config, "gen_batch_size").unwrap_or(100) as usize;
    let mut rng = persis.take_rng();
    let points = (0..b).map(|_| uniform_point(&mut rng, &lb, &ub)).collect();
    persis.store_rng(&rng);
    Ok((x_batch(points, lb.len()), CalcStatus::Completed))
}

/// Persistent uniform sampler: sends batches until a stop tag arrives,
/// adapting the batch size to however many evaluations each reply carried.
pub fn gen_persistent_uniform(
    chan: &mut PersisChannel,
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let (lb, ub) = bounds(&specs.user_config)?;
    let mut b = cfg_u64(&specs.user_config, "gen_batch_size").unwrap_or(16) as usize;
    let max_batches = cfg_u64(&specs.user_config, "max_batches");
    let mut rng = persis.take_rng();
    let mut batch_log: Vec<(usize, usize)> = Vec::new(); // (reply size, next b)
    let mut sent_batches = 0u64;
    let mut generated = 0u64;

    loop {
        if let Some(limit) = max_batches {
            if sent_batches >= limit {
                break;
            }
        }
        let points: Vec<Vec<f64>> = (0..b).map(|_| uniform_point(&mut rng, &lb, &ub)).collect();
        generated += points.len() as u64;
        let (tag, reply) = chan
            .send_recv(x_batch(points, lb.len()), Vec::new())
            .map_err(|e| UserError(format!("manager link lost: {e}")))?;
        sent_batches += 1;
        if tag.is_stop() {
            break;
        }
        if let Some(data) = reply {
            if !data.is_empty() {
                b = data.len();
            }
            batch_log.push((data.len(), b));
        }
    }

    persis.store_rng(&rng);
    persis.set("batch_log", serde_json::json!(batch_log));
    persis.set("batches_sent", serde_json::json!(sent_batches));
    persis.set("generated", serde_json::json!(generated));
    Ok((RecordBatch::default(), CalcStatus::PersisFinished))
}

/// Uniform sampler that also assigns each row a resource-set request drawn
/// from the configured `set_choices`.
pub fn gen_variable_resources(
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let (lb, ub) = bounds(&specs.user_config)?;
    let b = cfg_u64(&specs.user_config, "gen_batch_size").unwrap_or(20) as usize;
    let choices = cfg_vec_u64(&specs.user_config, "set_choices").unwrap_or_else(|| vec![1]);
    if choices.is_empty() {
        return Err("set_choices must not be empty".into());
    }
    let mut rng = persis.take_rng();
    let mut batch = RecordBatch::new(vec![
        FieldSpec::float_vec("x", lb.len()),
        FieldSpec::int("resource_sets"),
    ]);
    for _ in 0..b {
        let x = uniform_point(&mut rng, &lb, &ub);
        let sets = choices[rng.gen_range(0..choices.len())] as i64;
        batch.rows.push(vec![CellValue::F64Arr(x), CellValue::I64(sets)]);
    }
    persis.store_rng(&rng);
    Ok((batch, CalcStatus::Completed))
}

/// Cases for the watchdog scenario: each row gets a nominal duration and,
/// for a fixed fraction of rows, a marker time somewhere inside the run.
pub fn gen_watchdog_cases(
    _input: &RecordBatch,
    persis: &mut PersisBlob,
    specs: &GenSpecs,
    _ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let cfg = &specs.user_config;
    let n = cfg_u64(cfg, "gen_batch_size").unwrap_or(40) as usize;
    let duration = cfg_f64(cfg, "duration").unwrap_or(1.0);
    let lost_fraction = cfg_f64(cfg, "lost_fraction").unwrap_or(0.175);
    // Marker times stay clear of the natural end so the kill always wins
    // the race against normal completion.
    let frac_lo = cfg_f64(cfg, "lost_at_min_frac").unwrap_or(0.05);
    let frac_hi = cfg_f64(cfg, "lost_at_max_frac").unwrap_or(0.90);
    let n_lost = ((n as f64) * lost_fraction).round() as usize;

    let mut rng = persis.take_rng();
    let mut lost_rows: Vec<usize> = (0..n).collect();
    for i in (1..lost_rows.len()).rev() {
        let j = rng.gen_range(0..=i);
        lost_rows.swap(i, j);
    }
    lost_rows.truncate(n_lost);

    let mut batch = RecordBatch::new(vec![
        FieldSpec::float_vec("x", 1),
        FieldSpec::float("duration"),
        FieldSpec::float("lost_at"),
    ]);
    for row in 0..n {
        let x = rng.gen_range(0.0..1.0);
        let d = duration * rng.gen_range(0.8..1.2);
        let lost_at = if lost_rows.contains(&row) {
            d * rng.gen_range(frac_lo..frac_hi)
        } else {
            -1.0
        };
        batch.rows.push(vec![
            CellValue::F64Arr(vec![x]),
            CellValue::F64(d),
            CellValue::F64(lost_at),
        ]);
    }
    persis.store_rng(&rng);
    Ok((batch, CalcStatus::Completed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_specs(cfg: serde_json::Value) -> GenSpecs {
        GenSpecs {
            function: "g".into(),
            user_config: cfg.as_object().unwrap().clone(),
            ..Default::default()
        }
    }

    #[test]
    fn sample_within_bounds_and_deterministic() {
        let specs = gen_specs(serde_json::json!({
            "lb": [-3.0], "ub": [3.0], "gen_batch_size": 500
        }));
        let mut ctx = WorkerContext::standalone(1, std::env::temp_dir());
        let mut p1 = PersisBlob::new(1, 42);
        let (b1, _) = gen_uniform_sample(&RecordBatch::default(), &mut p1, &specs, &mut ctx).unwrap();
        assert_eq!(b1.len(), 500);
        for row in 0..b1.len() {
            let x = b1.cell(row, "x").unwrap().as_f64_slice().unwrap()[0];
            assert!((-3.0..3.0).contains(&x));
        }
        let mut p2 = PersisBlob::new(1, 42);
        let (b2, _) = gen_uniform_sample(&RecordBatch::default(), &mut p2, &specs, &mut ctx).unwrap();
        assert_eq!(b1, b2);
        // The stream moves on: a second call yields different points.
        let (b3, _) = gen_uniform_sample(&RecordBatch::default(), &mut p1, &specs, &mut ctx).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn degenerate_box_yields_constant_points() {
        let specs = gen_specs(serde_json::json!({
            "lb": [2.0, 2.0], "ub": [2.0, 2.0], "gen_batch_size": 5
        }));
        let mut ctx = WorkerContext::standalone(1, std::env::temp_dir());
        let mut p = PersisBlob::new(1, 1);
        let (b, _) = gen_uniform_sample(&RecordBatch::default(), &mut p, &specs, &mut ctx).unwrap();
        for row in 0..b.len() {
            assert_eq!(b.cell(row, "x").unwrap().as_f64_slice().unwrap(), &[2.0, 2.0]);
        }
    }

    #[test]
    fn watchdog_cases_have_exact_lost_count() {
        let specs = gen_specs(serde_json::json!({
            "gen_batch_size": 40, "duration": 1.0, "lost_fraction": 0.175
        }));
        let mut ctx = WorkerContext::standalone(1, std::env::temp_dir());
        let mut p = PersisBlob::new(1, 9);
        let (b, _) = gen_watchdog_cases(&RecordBatch::default(), &mut p, &specs, &mut ctx).unwrap();
        let lost: Vec<f64> = (0..b.len())
            .map(|r| b.cell(r, "lost_at").unwrap().as_f64().unwrap())
            .filter(|&t| t >= 0.0)
            .collect();
        assert_eq!(lost.len(), 7); // round(40 * 0.175)
        for (row, t) in (0..b.len())
            .map(|r| (r, b.cell(r, "lost_at").unwrap().as_f64().unwrap()))
            .filter(|&(_, t)| t >= 0.0)
        {
            let d = b.cell(row, "duration").unwrap().as_f64().unwrap();
            assert!(t > 0.0 && t < 0.95 * d);
        }
    }

    #[test]
    fn variable_resources_uses_choices() {
        let specs = gen_specs(serde_json::json!({
            "lb": [0.0], "ub": [1.0], "gen_batch_size": 50, "set_choices": [1, 2, 4]
        }));
        let mut ctx = WorkerContext::standalone(1, std::env::temp_dir());
        let mut p = PersisBlob::new(1, 3);
        let (b, _) = gen_variable_resources(&RecordBatch::default(), &mut p, &specs, &mut ctx).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for row in 0..b.len() {
            let sets = b.cell(row, "resource_sets").unwrap().as_i64().unwrap();
            assert!([1, 2, 4].contains(&sets));
            seen.insert(sets);
        }
        assert_eq!(seen.len(), 3, "all choices should appear across 50 draws");
    }
}
