//! Simulator that launches an external application and kills it the moment
//! its output file reports a disqualifying condition.

use std::path::PathBuf;
use std::time::Duration;

use crate::executor::{ExecError, TaskState, WatchOutcome};
use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::specs::{PersisBlob, SimSpecs};
use crate::tags::CalcStatus;
use crate::worker::{UserError, WorkerContext};

use super::{cfg_f64, cfg_str, row_f64};

pub const DEFAULT_MARKER: &str = "PARTICLE LOST";

/// Run the configured app for each row's `duration`, watching its output
/// for the marker line. Rows whose app writes the marker end killed, with
/// the nominal marker time recorded as the runtime; clean completions
/// record the nominal duration. Launch failures report FAILED.
pub fn sim_app_with_watchdog(
    input: &RecordBatch,
    _persis: &mut PersisBlob,
    specs: &SimSpecs,
    ctx: &mut WorkerContext,
) -> Result<(RecordBatch, CalcStatus), UserError> {
    let cfg = &specs.user_config;
    let app_path = cfg_str(cfg, "app_path")
        .map(PathBuf::from)
        .ok_or_else(|| UserError::from("watchdog sim needs 'app_path'"))?;
    let marker = cfg_str(cfg, "marker").unwrap_or(DEFAULT_MARKER).to_string();
    let poll = Duration::from_millis(cfg_f64(cfg, "poll_ms").unwrap_or(50.0) as u64);

    if ctx.executor.app("watchdog_app").is_none() {
        let prefix: Vec<String> = specs
            .user_config
            .get("app_prefix_args")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
            .unwrap_or_default();
        ctx.executor
            .register_app("watchdog_app", &app_path, &prefix)
            .map_err(|e| UserError(format!("registering watchdog app: {e}")))?;
    }

    let mut out = RecordBatch::new(vec![
        FieldSpec::float("f"),
        FieldSpec::float("runtime"),
        FieldSpec::boolean("killed"),
    ]);
    let mut batch_status = CalcStatus::Completed;

    for row in 0..input.len() {
        let duration = row_f64(input, row, "duration")?;
        let lost_at = row_f64(input, row, "lost_at")?;
        let unit = input
            .cell(row, "sim_id")
            .and_then(|c| c.as_i64())
            .unwrap_or(row as i64);
        let outfile = format!("watch_w{}_s{unit}.out", ctx.worker_id);
        // A leftover file from an earlier run must not feed the watcher.
        let _ = std::fs::remove_file(ctx.executor.workdir().join(&outfile));
        let mut args = vec![
            "--duration".to_string(),
            format!("{duration}"),
            "--outfile".to_string(),
            outfile.clone(),
        ];
        if lost_at >= 0.0 {
            args.push("--lost-at".to_string());
            args.push(format!("{lost_at}"));
        }
        let stdout = format!("app_w{}_s{unit}.out", ctx.worker_id);
        let stderr = format!("app_w{}_s{unit}.err", ctx.worker_id);
        let task = match ctx.executor.submit("watchdog_app", &args, 1, &stdout, &stderr, true) {
            Ok(t) => t,
            Err(ExecError::LaunchExhausted { .. }) => {
                out.rows.push(vec![
                    CellValue::F64(0.0),
                    CellValue::F64(0.0),
                    CellValue::Bool(false),
                ]);
                batch_status = CalcStatus::Failed;
                continue;
            }
            Err(e) => return Err(UserError(format!("submit: {e}"))),
        };
        let outcome = ctx.executor.watch_output_and_kill(
            &task,
            std::path::Path::new(&outfile),
            &marker,
            poll,
        );
        let killed = outcome == WatchOutcome::KilledOnMarker;
        // Nominal runtimes keep serialized reruns byte-identical; measured
        // wall time is visible through the task handle and the stats file.
        let runtime = if killed { lost_at.max(0.0) } else { duration };
        if killed {
            batch_status = CalcStatus::Killed;
        } else if ctx.executor.poll(&task) == TaskState::Failed {
            batch_status = CalcStatus::Failed;
        }
        out.rows.push(vec![
            CellValue::F64(duration),
            CellValue::F64(runtime),
            CellValue::Bool(killed),
        ]);
    }
    Ok((out, batch_status))
}
