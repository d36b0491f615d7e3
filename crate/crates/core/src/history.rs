//! The append-only history store: one typed record per unit of generated
//! work, with dispatch/return/cancellation bookkeeping in reserved fields.
//!
//! The store is owned exclusively by the manager. Rows are keyed by a dense
//! `sim_id` (0, 1, 2, ...), input fields never change after append, and the
//! boolean flags only ever flip false-to-true. Cancellation is a flag, never
//! a row removal.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::schema::{
    cell_from_json, cell_to_json, CellValue, RecordBatch, RecordSchema, CANCEL_REQUESTED, FAILED,
    GEN_WORKER, GIVEN, GIVEN_TIME, KILL_SENT, RESERVED_FIELD_COUNT, RETURNED, SIM_ID, SIM_WORKER,
};
use crate::specs::ExitCriteria;
use crate::tags::CalcStatus;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("duplicate field '{0}'")]
    DuplicateField(String),
    #[error("field '{0}' collides with a reserved name")]
    ReservedCollision(String),
    #[error("unknown field '{0}'")]
    UnknownField(String),
    #[error("kind mismatch for field '{0}'")]
    KindMismatch(String),
    #[error("sim_id {0} has not been given")]
    NotGiven(u64),
    #[error("sim_id {0} already returned")]
    AlreadyReturned(u64),
    #[error("no such sim_id {0}")]
    NoSuchRow(u64),
    #[error("malformed field: {0}")]
    MalformedField(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FILE_MAGIC: &str = "ENSH1 ";

/// Growable table of records over a fixed schema.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStore {
    schema: RecordSchema,
    rows: Vec<Vec<CellValue>>,
}

impl HistoryStore {
    pub fn new(schema: RecordSchema) -> HistoryStore {
        HistoryStore { schema, rows: Vec::new() }
    }

    pub fn schema(&self) -> &RecordSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row(&self, sim_id: u64) -> Result<&Vec<CellValue>, HistoryError> {
        self.rows.get(sim_id as usize).ok_or(HistoryError::NoSuchRow(sim_id))
    }

    fn row_mut(&mut self, sim_id: u64) -> Result<&mut Vec<CellValue>, HistoryError> {
        self.rows.get_mut(sim_id as usize).ok_or(HistoryError::NoSuchRow(sim_id))
    }

    pub fn cell(&self, sim_id: u64, field: &str) -> Result<&CellValue, HistoryError> {
        let idx = self
            .schema
            .index_of(field)
            .ok_or_else(|| HistoryError::UnknownField(field.to_string()))?;
        Ok(&self.row(sim_id)?[idx])
    }

    pub fn given(&self, sim_id: u64) -> bool {
        self.rows
            .get(sim_id as usize)
            .map(|r| r[GIVEN] == CellValue::Bool(true))
            .unwrap_or(false)
    }

    pub fn returned(&self, sim_id: u64) -> bool {
        self.rows
            .get(sim_id as usize)
            .map(|r| r[RETURNED] == CellValue::Bool(true))
            .unwrap_or(false)
    }

    pub fn cancel_requested(&self, sim_id: u64) -> bool {
        self.rows
            .get(sim_id as usize)
            .map(|r| r[CANCEL_REQUESTED] == CellValue::Bool(true))
            .unwrap_or(false)
    }

    pub fn kill_sent(&self, sim_id: u64) -> bool {
        self.rows
            .get(sim_id as usize)
            .map(|r| r[KILL_SENT] == CellValue::Bool(true))
            .unwrap_or(false)
    }

    pub fn failed(&self, sim_id: u64) -> bool {
        self.rows
            .get(sim_id as usize)
            .map(|r| r[FAILED] == CellValue::Bool(true))
            .unwrap_or(false)
    }

    pub fn sim_worker(&self, sim_id: u64) -> Option<u32> {
        self.rows
            .get(sim_id as usize)
            .and_then(|r| r[SIM_WORKER].as_i64())
            .map(|w| w as u32)
    }

    pub fn returned_count(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r[RETURNED] == CellValue::Bool(true))
            .count() as u64
    }

    /// sim_ids eligible for dispatch: not yet given and not canceled.
    pub fn dispatchable(&self) -> Vec<u64> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                r[GIVEN] == CellValue::Bool(false) && r[CANCEL_REQUESTED] == CellValue::Bool(false)
            })
            .map(|(i, _)| i as u64)
            .collect()
    }

    /// Append a generator batch. Rows get dense new sim_ids, the generating
    /// worker is recorded, and fields the batch does not carry are
    /// zero-initialized. Returns the new id range.
    pub fn append_batch(
        &mut self,
        batch: &RecordBatch,
        gen_worker: u32,
    ) -> Result<std::ops::Range<u64>, HistoryError> {
        // Validate batch fields against the schema before mutating anything.
        let mut indices = Vec::with_capacity(batch.fields.len());
        for spec in &batch.fields {
            let idx = self
                .schema
                .index_of(&spec.name)
                .ok_or_else(|| HistoryError::UnknownField(spec.name.clone()))?;
            if idx < RESERVED_FIELD_COUNT && idx != SIM_ID {
                // Generators may not write reserved bookkeeping fields.
                return Err(HistoryError::ReservedCollision(spec.name.clone()));
            }
            let expected = &self.schema.fields[idx];
            if expected.kind != spec.kind || expected.shape != spec.shape {
                return Err(HistoryError::KindMismatch(spec.name.clone()));
            }
            indices.push(idx);
        }
        for row in &batch.rows {
            for (cell, spec) in row.iter().zip(&batch.fields) {
                if !cell.matches(spec) {
                    return Err(HistoryError::KindMismatch(spec.name.clone()));
                }
            }
        }

        let start = self.rows.len() as u64;
        for row in &batch.rows {
            let mut record: Vec<CellValue> =
                self.schema.fields.iter().map(CellValue::zero_of).collect();
            let sim_id = self.rows.len() as u64;
            record[SIM_ID] = CellValue::I64(sim_id as i64);
            record[GEN_WORKER] = CellValue::I64(gen_worker as i64);
            for (cell, &idx) in row.iter().zip(&indices) {
                if idx != SIM_ID {
                    record[idx] = cell.clone();
                }
            }
            self.rows.push(record);
        }
        Ok(start..self.rows.len() as u64)
    }

    /// Mark a row as dispatched for simulation.
    pub fn mark_given(
        &mut self,
        sim_id: u64,
        sim_worker: u32,
        given_time: f64,
    ) -> Result<(), HistoryError> {
        let row = self.row_mut(sim_id)?;
        if row[GIVEN] == CellValue::Bool(true) {
            return Err(HistoryError::AlreadyReturned(sim_id));
        }
        row[GIVEN] = CellValue::Bool(true);
        row[SIM_WORKER] = CellValue::I64(sim_worker as i64);
        row[GIVEN_TIME] = CellValue::F64(given_time);
        Ok(())
    }

    /// Record the outputs of a finished simulation. Requires the row to have
    /// been given and not yet returned; a second update is rejected.
    pub fn update(
        &mut self,
        sim_id: u64,
        outputs: &RecordBatch,
        output_row: usize,
        status: CalcStatus,
    ) -> Result<(), HistoryError> {
        {
            let row = self.row(sim_id)?;
            if row[GIVEN] != CellValue::Bool(true) {
                return Err(HistoryError::NotGiven(sim_id));
            }
            if row[RETURNED] == CellValue::Bool(true) {
                return Err(HistoryError::AlreadyReturned(sim_id));
            }
        }
        let mut writes = Vec::new();
        if output_row < outputs.rows.len() {
            for (spec, cell) in outputs.fields.iter().zip(&outputs.rows[output_row]) {
                let idx = self
                    .schema
                    .index_of(&spec.name)
                    .ok_or_else(|| HistoryError::UnknownField(spec.name.clone()))?;
                if idx < RESERVED_FIELD_COUNT {
                    return Err(HistoryError::ReservedCollision(spec.name.clone()));
                }
                if !cell.matches(&self.schema.fields[idx]) {
                    return Err(HistoryError::KindMismatch(spec.name.clone()));
                }
                writes.push((idx, cell.clone()));
            }
        }
        let row = self.row_mut(sim_id)?;
        for (idx, cell) in writes {
            row[idx] = cell;
        }
        row[RETURNED] = CellValue::Bool(true);
        row[FAILED] = CellValue::Bool(status == CalcStatus::Failed);
        Ok(())
    }

    /// Flag a row for cancellation. Monotone; no effect on returned data.
    pub fn request_cancel(&mut self, sim_id: u64) -> Result<(), HistoryError> {
        let row = self.row_mut(sim_id)?;
        row[CANCEL_REQUESTED] = CellValue::Bool(true);
        Ok(())
    }

    /// Record that a kill signal went out for this row. Implies a prior
    /// cancellation request.
    pub fn mark_kill_sent(&mut self, sim_id: u64) -> Result<(), HistoryError> {
        let row = self.row_mut(sim_id)?;
        if row[CANCEL_REQUESTED] != CellValue::Bool(true) {
            return Err(HistoryError::MalformedField(format!(
                "kill_sent without cancel_requested on sim_id {sim_id}"
            )));
        }
        row[KILL_SENT] = CellValue::Bool(true);
        Ok(())
    }

    /// Mark an in-flight row as failed-and-returned (worker error path).
    pub fn mark_failed(&mut self, sim_id: u64) -> Result<(), HistoryError> {
        let row = self.row_mut(sim_id)?;
        row[RETURNED] = CellValue::Bool(true);
        row[FAILED] = CellValue::Bool(true);
        Ok(())
    }

    /// Reset given-but-unreturned rows to ungiven, making them re-eligible
    /// for dispatch. Used when resuming from a checkpoint.
    pub fn reset_unreturned(&mut self) {
        for row in &mut self.rows {
            if row[GIVEN] == CellValue::Bool(true) && row[RETURNED] == CellValue::Bool(false) {
                row[GIVEN] = CellValue::Bool(false);
                row[SIM_WORKER] = CellValue::I64(0);
                row[GIVEN_TIME] = CellValue::F64(0.0);
            }
        }
    }

    /// Extract a batch of the named fields for the given rows, in order.
    pub fn slice(&self, sim_ids: &[u64], fields: &[String]) -> Result<RecordBatch, HistoryError> {
        let mut specs = Vec::with_capacity(fields.len());
        let mut indices = Vec::with_capacity(fields.len());
        for name in fields {
            let idx = self
                .schema
                .index_of(name)
                .ok_or_else(|| HistoryError::UnknownField(name.clone()))?;
            specs.push(self.schema.fields[idx].clone());
            indices.push(idx);
        }
        let mut batch = RecordBatch::new(specs);
        for &sim_id in sim_ids {
            let row = self.row(sim_id)?;
            batch.rows.push(indices.iter().map(|&i| row[i].clone()).collect());
        }
        Ok(batch)
    }

    /// True once any set exit criterion holds. `sim_max` counts returned
    /// rows, `gen_max` counts appended rows, `stop_field` scans returned
    /// rows, and `wallclock_max` compares against `elapsed` seconds.
    pub fn exit_met(&self, ec: &ExitCriteria, elapsed: f64) -> bool {
        if let Some(sim_max) = ec.sim_max {
            if self.returned_count() >= sim_max {
                return true;
            }
        }
        if let Some(gen_max) = ec.gen_max {
            if self.rows.len() as u64 >= gen_max {
                return true;
            }
        }
        if let Some(wall) = ec.wallclock_max {
            if elapsed >= wall {
                return true;
            }
        }
        if let Some((ref field, threshold)) = ec.stop_field {
            if let Some(idx) = self.schema.index_of(field) {
                for row in &self.rows {
                    if row[RETURNED] == CellValue::Bool(true) {
                        if let Some(v) = row[idx].as_f64() {
                            if v >= threshold {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }

    /// Write the store in the `.ensh` text format: a `ENSH1 ` header line
    /// with the schema as JSON, then one JSON array per record.
    pub fn save(&self, path: &Path) -> Result<(), HistoryError> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        // Serialized via the struct so keys stay in name/kind/shape order.
        #[derive(serde::Serialize)]
        struct Header<'a> {
            fields: &'a [crate::schema::FieldSpec],
        }
        let header = serde_json::to_string(&Header { fields: &self.schema.fields })
            .map_err(|e| HistoryError::MalformedField(e.to_string()))?;
        writeln!(out, "{FILE_MAGIC}{header}")?;
        for row in &self.rows {
            let vals: Vec<serde_json::Value> = row
                .iter()
                .zip(&self.schema.fields)
                .map(|(c, s)| cell_to_json(c, s))
                .collect();
            writeln!(out, "{}", serde_json::Value::Array(vals))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HistoryStore, HistoryError> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| HistoryError::SchemaMismatch("empty history file".into()))??;
        let rest = header
            .strip_prefix(FILE_MAGIC)
            .ok_or_else(|| HistoryError::SchemaMismatch("missing ENSH1 header".into()))?;
        let header_json: serde_json::Value = serde_json::from_str(rest)
            .map_err(|e| HistoryError::SchemaMismatch(format!("bad header: {e}")))?;
        let fields: Vec<crate::schema::FieldSpec> = serde_json::from_value(
            header_json
                .get("fields")
                .cloned()
                .ok_or_else(|| HistoryError::SchemaMismatch("header missing fields".into()))?,
        )
        .map_err(|e| HistoryError::SchemaMismatch(format!("bad field list: {e}")))?;
        if fields.len() < RESERVED_FIELD_COUNT
            || fields[..RESERVED_FIELD_COUNT] != crate::schema::reserved_fields()[..]
        {
            return Err(HistoryError::SchemaMismatch(
                "reserved field block missing or out of order".into(),
            ));
        }
        let schema = RecordSchema { fields };
        let mut store = HistoryStore::new(schema);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                return Err(HistoryError::SchemaMismatch(format!(
                    "blank record line {}",
                    lineno + 2
                )));
            }
            let vals: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                HistoryError::SchemaMismatch(format!("line {}: {e}", lineno + 2))
            })?;
            let arr = vals.as_array().ok_or_else(|| {
                HistoryError::SchemaMismatch(format!("line {} is not an array", lineno + 2))
            })?;
            if arr.len() != store.schema.fields.len() {
                return Err(HistoryError::SchemaMismatch(format!(
                    "line {}: {} values for {} fields",
                    lineno + 2,
                    arr.len(),
                    store.schema.fields.len()
                )));
            }
            let row = arr
                .iter()
                .zip(store.schema.fields.clone().iter())
                .map(|(v, s)| cell_from_json(v, s))
                .collect::<Result<Vec<_>, _>>()?;
            if row[SIM_ID].as_i64() != Some(store.rows.len() as i64) {
                return Err(HistoryError::SchemaMismatch(format!(
                    "line {}: sim_id out of sequence",
                    lineno + 2
                )));
            }
            store.rows.push(row);
        }
        Ok(store)
    }

    /// Check the cross-field invariants that must hold after every
    /// operation. Used by tests and the abort dump path.
    pub fn check_invariants(&self) -> Result<(), HistoryError> {
        for (i, row) in self.rows.iter().enumerate() {
            if row[SIM_ID].as_i64() != Some(i as i64) {
                return Err(HistoryError::SchemaMismatch(format!("sim_id not dense at {i}")));
            }
            let given = row[GIVEN] == CellValue::Bool(true);
            let returned = row[RETURNED] == CellValue::Bool(true);
            let cancel = row[CANCEL_REQUESTED] == CellValue::Bool(true);
            let kill = row[KILL_SENT] == CellValue::Bool(true);
            if returned && !given {
                return Err(HistoryError::SchemaMismatch(format!(
                    "row {i}: returned without given"
                )));
            }
            if kill && !cancel {
                return Err(HistoryError::SchemaMismatch(format!(
                    "row {i}: kill_sent without cancel_requested"
                )));
            }
        }
        Ok(())
    }
}
