//! Run summary: counts folded from the final history, runtime statistics,
//! and the plot-ready trace CSV.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use ens_core::manager::TraceRow;
use ens_core::HistoryStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub generated: u64,
    pub given: u64,
    pub returned: u64,
    pub completed: u64,
    pub killed: u64,
    pub canceled: u64,
    pub failed: u64,
    pub kill_sent: u64,
}

/// Fold the counters straight off the history flags. `killed` counts rows
/// whose `killed` output field is set when the schema carries one, plus
/// rows that went unreturned after a kill signal.
pub fn counts_from_history(h: &HistoryStore) -> Counts {
    let mut counts = Counts {
        generated: h.len() as u64,
        given: 0,
        returned: 0,
        completed: 0,
        killed: 0,
        canceled: 0,
        failed: 0,
        kill_sent: 0,
    };
    let has_killed_field = h.schema().contains("killed");
    for i in 0..h.len() as u64 {
        if h.given(i) {
            counts.given += 1;
        }
        if h.returned(i) {
            counts.returned += 1;
        }
        if h.cancel_requested(i) {
            counts.canceled += 1;
        }
        if h.failed(i) {
            counts.failed += 1;
        }
        if h.kill_sent(i) {
            counts.kill_sent += 1;
        }
        let killed = has_killed_field
            && h.cell(i, "killed").map(|c| c.as_bool() == Some(true)).unwrap_or(false);
        if killed {
            counts.killed += 1;
        } else if h.returned(i) && !h.failed(i) {
            counts.completed += 1;
        }
    }
    counts
}

#[derive(Debug, Serialize)]
pub struct RuntimeStats {
    pub completed_count: u64,
    pub killed_count: u64,
    pub mean_completed_runtime: f64,
    pub mean_killed_runtime: f64,
}

/// Runtime comparison for scenarios whose simulator records `runtime` and
/// `killed` fields.
pub fn runtime_stats(h: &HistoryStore) -> Option<RuntimeStats> {
    if !h.schema().contains("runtime") || !h.schema().contains("killed") {
        return None;
    }
    let (mut ck, mut sk, mut cc, mut sc) = (0u64, 0.0f64, 0u64, 0.0f64);
    for i in 0..h.len() as u64 {
        if !h.returned(i) {
            continue;
        }
        let runtime = h.cell(i, "runtime").ok()?.as_f64()?;
        if h.cell(i, "killed").ok()?.as_bool()? {
            ck += 1;
            sk += runtime;
        } else {
            cc += 1;
            sc += runtime;
        }
    }
    Some(RuntimeStats {
        completed_count: cc,
        killed_count: ck,
        mean_completed_runtime: if cc > 0 { sc / cc as f64 } else { 0.0 },
        mean_killed_runtime: if ck > 0 { sk / ck as f64 } else { 0.0 },
    })
}

#[derive(Debug, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub comms: String,
    pub nworkers: u32,
    pub seed: u64,
    pub flag: String,
    pub counts: Counts,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_stats: Option<RuntimeStats>,
    pub history_file: String,
    pub checkpoints: Vec<String>,
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "t,generated,completed,canceled,failed")?;
    for row in trace {
        writeln!(
            f,
            "{:.3},{},{},{},{}",
            row.t, row.generated, row.completed, row.canceled, row.failed
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ens_core::schema::{CellValue, FieldSpec, RecordBatch, RecordSchema};
    use ens_core::tags::CalcStatus;

    #[test]
    fn counts_track_flags() {
        let schema =
            RecordSchema::union(&[FieldSpec::float("x")], &[FieldSpec::float("f")], &[]).unwrap();
        let mut h = HistoryStore::new(schema);
        let mut batch = RecordBatch::new(vec![FieldSpec::float("x")]);
        for i in 0..4 {
            batch.push_row(vec![CellValue::F64(i as f64)]).unwrap();
        }
        h.append_batch(&batch, 1).unwrap();
        h.mark_given(0, 2, 1.0).unwrap();
        h.update(0, &RecordBatch::default(), 0, CalcStatus::Completed).unwrap();
        h.mark_given(1, 2, 2.0).unwrap();
        h.update(1, &RecordBatch::default(), 0, CalcStatus::Failed).unwrap();
        h.request_cancel(3).unwrap();

        let counts = counts_from_history(&h);
        assert_eq!(counts.generated, 4);
        assert_eq!(counts.given, 2);
        assert_eq!(counts.returned, 2);
        assert_eq!(counts.completed, 1);
        assert_eq!(counts.failed, 1);
        assert_eq!(counts.canceled, 1);
        assert_eq!(counts.kill_sent, 0);
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(
            &path,
            &[TraceRow { t: 0.1234, generated: 5, completed: 1, canceled: 0, failed: 0 }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,generated,completed,canceled,failed\n0.123,5,1,0,0\n");
    }
}
