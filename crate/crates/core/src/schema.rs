//! Typed record schema shared by the history store, message payloads, and
//! the on-disk history format.
//!
//! A schema is an ordered list of named fields. The first nine fields are
//! always the reserved bookkeeping fields (`sim_id`, worker ids, dispatch
//! flags); user fields from the generator and simulator specs follow.

use serde::{Deserialize, Serialize};

use crate::history::HistoryError;

/// Scalar type of a field. Strings are deliberately excluded from records;
/// free-form configuration travels in `user_config` maps instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Float64,
    Int64,
    Boolean,
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::Float64 => "float64",
            FieldKind::Int64 => "int64",
            FieldKind::Boolean => "boolean",
        }
    }
}

/// One named field: scalar when `shape` is empty, fixed-shape array otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub shape: Vec<usize>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind, shape: Vec<usize>) -> Self {
        FieldSpec { name: name.into(), kind, shape }
    }

    pub fn scalar(name: impl Into<String>, kind: FieldKind) -> Self {
        Self::new(name, kind, Vec::new())
    }

    pub fn float(name: impl Into<String>) -> Self {
        Self::scalar(name, FieldKind::Float64)
    }

    pub fn float_vec(name: impl Into<String>, len: usize) -> Self {
        Self::new(name, FieldKind::Float64, vec![len])
    }

    pub fn int(name: impl Into<String>) -> Self {
        Self::scalar(name, FieldKind::Int64)
    }

    pub fn boolean(name: impl Into<String>) -> Self {
        Self::scalar(name, FieldKind::Boolean)
    }

    /// Total number of scalar elements (1 for a scalar field).
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), HistoryError> {
        if self.name.is_empty() {
            return Err(HistoryError::MalformedField("empty field name".into()));
        }
        if self.shape.iter().any(|&e| e == 0) {
            return Err(HistoryError::MalformedField(format!(
                "field '{}' has a zero extent in its shape",
                self.name
            )));
        }
        Ok(())
    }
}

/// One stored value. Array variants hold elements flattened in row-major
/// order; the owning `FieldSpec` carries the shape.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    F64(f64),
    I64(i64),
    Bool(bool),
    F64Arr(Vec<f64>),
    I64Arr(Vec<i64>),
    BoolArr(Vec<bool>),
}

impl CellValue {
    /// Zero-initialized value for a field (0.0 / 0 / false, arrays of same).
    pub fn zero_of(spec: &FieldSpec) -> CellValue {
        let n = spec.element_count();
        match (spec.kind, spec.shape.is_empty()) {
            (FieldKind::Float64, true) => CellValue::F64(0.0),
            (FieldKind::Int64, true) => CellValue::I64(0),
            (FieldKind::Boolean, true) => CellValue::Bool(false),
            (FieldKind::Float64, false) => CellValue::F64Arr(vec![0.0; n]),
            (FieldKind::Int64, false) => CellValue::I64Arr(vec![0; n]),
            (FieldKind::Boolean, false) => CellValue::BoolArr(vec![false; n]),
        }
    }

    pub fn matches(&self, spec: &FieldSpec) -> bool {
        match self {
            CellValue::F64(_) => spec.kind == FieldKind::Float64 && spec.shape.is_empty(),
            CellValue::I64(_) => spec.kind == FieldKind::Int64 && spec.shape.is_empty(),
            CellValue::Bool(_) => spec.kind == FieldKind::Boolean && spec.shape.is_empty(),
            CellValue::F64Arr(v) => {
                spec.kind == FieldKind::Float64 && v.len() == spec.element_count()
                    && !spec.shape.is_empty()
            }
            CellValue::I64Arr(v) => {
                spec.kind == FieldKind::Int64 && v.len() == spec.element_count()
                    && !spec.shape.is_empty()
            }
            CellValue::BoolArr(v) => {
                spec.kind == FieldKind::Boolean && v.len() == spec.element_count()
                    && !spec.shape.is_empty()
            }
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CellValue::F64(v) => Some(*v),
            CellValue::I64(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            CellValue::I64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            CellValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match self {
            CellValue::F64Arr(v) => Some(v),
            _ => None,
        }
    }
}

fn f64_to_json(v: f64) -> serde_json::Value {
    // JSON has no non-finite numbers; those round-trip as strings.
    match serde_json::Number::from_f64(v) {
        Some(n) => serde_json::Value::Number(n),
        None => {
            let s = if v.is_nan() {
                "NaN"
            } else if v > 0.0 {
                "Infinity"
            } else {
                "-Infinity"
            };
            serde_json::Value::String(s.to_string())
        }
    }
}

fn f64_from_json(v: &serde_json::Value, field: &str) -> Result<f64, HistoryError> {
    match v {
        serde_json::Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| HistoryError::KindMismatch(field.to_string())),
        serde_json::Value::String(s) => match s.as_str() {
            "NaN" => Ok(f64::NAN),
            "Infinity" => Ok(f64::INFINITY),
            "-Infinity" => Ok(f64::NEG_INFINITY),
            _ => Err(HistoryError::KindMismatch(field.to_string())),
        },
        _ => Err(HistoryError::KindMismatch(field.to_string())),
    }
}

/// Nest a flat slice of already-encoded JSON scalars according to `shape`.
fn nest(values: &[serde_json::Value], shape: &[usize]) -> serde_json::Value {
    if shape.len() <= 1 {
        return serde_json::Value::Array(values.to_vec());
    }
    let inner: usize = shape[1..].iter().product();
    let groups = values
        .chunks(inner)
        .map(|chunk| nest(chunk, &shape[1..]))
        .collect();
    serde_json::Value::Array(groups)
}

fn flatten(v: &serde_json::Value, out: &mut Vec<serde_json::Value>) {
    match v {
        serde_json::Value::Array(items) => {
            for item in items {
                flatten(item, out);
            }
        }
        other => out.push(other.clone()),
    }
}

/// Encode one cell as the JSON value used both on the wire and in `.ensh`
/// files: scalars directly, shaped fields as nested arrays.
pub fn cell_to_json(cell: &CellValue, spec: &FieldSpec) -> serde_json::Value {
    match cell {
        CellValue::F64(v) => f64_to_json(*v),
        CellValue::I64(v) => serde_json::Value::from(*v),
        CellValue::Bool(v) => serde_json::Value::from(*v),
        CellValue::F64Arr(vs) => {
            let scalars: Vec<_> = vs.iter().map(|&v| f64_to_json(v)).collect();
            nest(&scalars, &spec.shape)
        }
        CellValue::I64Arr(vs) => {
            let scalars: Vec<_> = vs.iter().map(|&v| serde_json::Value::from(v)).collect();
            nest(&scalars, &spec.shape)
        }
        CellValue::BoolArr(vs) => {
            let scalars: Vec<_> = vs.iter().map(|&v| serde_json::Value::from(v)).collect();
            nest(&scalars, &spec.shape)
        }
    }
}

/// Decode one cell, checking kind and element count against the field spec.
pub fn cell_from_json(v: &serde_json::Value, spec: &FieldSpec) -> Result<CellValue, HistoryError> {
    if spec.shape.is_empty() {
        return match spec.kind {
            FieldKind::Float64 => Ok(CellValue::F64(f64_from_json(v, &spec.name)?)),
            FieldKind::Int64 => v
                .as_i64()
                .map(CellValue::I64)
                .ok_or_else(|| HistoryError::KindMismatch(spec.name.clone())),
            FieldKind::Boolean => v
                .as_bool()
                .map(CellValue::Bool)
                .ok_or_else(|| HistoryError::KindMismatch(spec.name.clone())),
        };
    }
    let mut flat = Vec::with_capacity(spec.element_count());
    flatten(v, &mut flat);
    if flat.len() != spec.element_count() {
        return Err(HistoryError::KindMismatch(spec.name.clone()));
    }
    match spec.kind {
        FieldKind::Float64 => {
            let vals = flat
                .iter()
                .map(|x| f64_from_json(x, &spec.name))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(CellValue::F64Arr(vals))
        }
        FieldKind::Int64 => {
            let vals = flat
                .iter()
                .map(|x| x.as_i64().ok_or_else(|| HistoryError::KindMismatch(spec.name.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(CellValue::I64Arr(vals))
        }
        FieldKind::Boolean => {
            let vals = flat
                .iter()
                .map(|x| x.as_bool().ok_or_else(|| HistoryError::KindMismatch(spec.name.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(CellValue::BoolArr(vals))
        }
    }
}

/// Names and order of the reserved bookkeeping fields, always first in a
/// schema. `sim_id` numbering is dense; flags are monotone false-to-true.
pub const RESERVED_FIELD_COUNT: usize = 9;

pub const SIM_ID: usize = 0;
pub const GEN_WORKER: usize = 1;
pub const SIM_WORKER: usize = 2;
pub const GIVEN: usize = 3;
pub const RETURNED: usize = 4;
pub const GIVEN_TIME: usize = 5;
pub const CANCEL_REQUESTED: usize = 6;
pub const KILL_SENT: usize = 7;
pub const FAILED: usize = 8;

pub fn reserved_fields() -> Vec<FieldSpec> {
    vec![
        FieldSpec::int("sim_id"),
        FieldSpec::int("gen_worker"),
        FieldSpec::int("sim_worker"),
        FieldSpec::boolean("given"),
        FieldSpec::boolean("returned"),
        FieldSpec::float("given_time"),
        FieldSpec::boolean("cancel_requested"),
        FieldSpec::boolean("kill_sent"),
        FieldSpec::boolean("failed"),
    ]
}

pub fn is_reserved_name(name: &str) -> bool {
    matches!(
        name,
        "sim_id"
            | "gen_worker"
            | "sim_worker"
            | "given"
            | "returned"
            | "given_time"
            | "cancel_requested"
            | "kill_sent"
            | "failed"
    )
}

/// Ordered field list: the nine reserved fields followed by user fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub fields: Vec<FieldSpec>,
}

impl RecordSchema {
    /// Build a schema from the generator, simulator, and extra output field
    /// lists. Reserved fields come first; duplicates and reserved-name
    /// collisions are rejected.
    pub fn union(
        gen_out: &[FieldSpec],
        sim_out: &[FieldSpec],
        extra: &[FieldSpec],
    ) -> Result<RecordSchema, HistoryError> {
        let mut fields = reserved_fields();
        let mut seen: Vec<&str> = Vec::new();
        for spec in gen_out.iter().chain(sim_out).chain(extra) {
            spec.validate()?;
            if is_reserved_name(&spec.name) {
                return Err(HistoryError::ReservedCollision(spec.name.clone()));
            }
            if seen.contains(&spec.name.as_str()) {
                return Err(HistoryError::DuplicateField(spec.name.clone()));
            }
            seen.push(&spec.name);
            fields.push(spec.clone());
        }
        Ok(RecordSchema { fields })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn user_fields(&self) -> &[FieldSpec] {
        &self.fields[RESERVED_FIELD_COUNT..]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

/// A self-describing batch of records: the field list plus one value row per
/// record. Generators return these, simulators receive slices of history as
/// these, and they ride the transport as JSON.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordBatch {
    pub fields: Vec<FieldSpec>,
    pub rows: Vec<Vec<CellValue>>,
}

impl RecordBatch {
    pub fn new(fields: Vec<FieldSpec>) -> RecordBatch {
        RecordBatch { fields, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Append a row; cells must line up with the batch fields.
    pub fn push_row(&mut self, row: Vec<CellValue>) -> Result<(), HistoryError> {
        if row.len() != self.fields.len() {
            return Err(HistoryError::MalformedField(format!(
                "row width {} does not match {} fields",
                row.len(),
                self.fields.len()
            )));
        }
        for (cell, spec) in row.iter().zip(&self.fields) {
            if !cell.matches(spec) {
                return Err(HistoryError::KindMismatch(spec.name.clone()));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn cell(&self, row: usize, name: &str) -> Option<&CellValue> {
        let idx = self.index_of(name)?;
        self.rows.get(row).map(|r| &r[idx])
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                serde_json::Value::Array(
                    row.iter()
                        .zip(&self.fields)
                        .map(|(c, s)| cell_to_json(c, s))
                        .collect(),
                )
            })
            .collect();
        serde_json::json!({
            "fields": self.fields,
            "rows": rows,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<RecordBatch, HistoryError> {
        let fields: Vec<FieldSpec> = serde_json::from_value(
            v.get("fields")
                .cloned()
                .ok_or_else(|| HistoryError::MalformedField("batch missing 'fields'".into()))?,
        )
        .map_err(|e| HistoryError::MalformedField(format!("bad batch fields: {e}")))?;
        let mut batch = RecordBatch::new(fields);
        let rows = v
            .get("rows")
            .and_then(|r| r.as_array())
            .ok_or_else(|| HistoryError::MalformedField("batch missing 'rows'".into()))?;
        for row in rows {
            let cells = row
                .as_array()
                .ok_or_else(|| HistoryError::MalformedField("batch row is not an array".into()))?;
            if cells.len() != batch.fields.len() {
                return Err(HistoryError::MalformedField("batch row width mismatch".into()));
            }
            let decoded = cells
                .iter()
                .zip(batch.fields.clone().iter())
                .map(|(c, s)| cell_from_json(c, s))
                .collect::<Result<Vec<_>, _>>()?;
            batch.rows.push(decoded);
        }
        Ok(batch)
    }
}

impl Serialize for RecordBatch {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RecordBatch {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(deserializer)?;
        RecordBatch::from_json(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_orders_reserved_first() {
        let schema = RecordSchema::union(
            &[FieldSpec::float_vec("x", 1)],
            &[FieldSpec::float("f")],
            &[],
        )
        .unwrap();
        assert_eq!(schema.fields.len(), RESERVED_FIELD_COUNT + 2);
        assert_eq!(schema.fields[0].name, "sim_id");
        assert_eq!(schema.fields[RESERVED_FIELD_COUNT].name, "x");
        assert_eq!(schema.fields[RESERVED_FIELD_COUNT + 1].name, "f");
    }

    #[test]
    fn union_of_empty_lists_is_reserved_only() {
        let schema = RecordSchema::union(&[], &[], &[]).unwrap();
        assert_eq!(schema.fields.len(), RESERVED_FIELD_COUNT);
    }

    #[test]
    fn union_rejects_duplicates_and_reserved() {
        let err = RecordSchema::union(&[FieldSpec::float("f")], &[FieldSpec::float("f")], &[])
            .unwrap_err();
        assert!(matches!(err, HistoryError::DuplicateField(ref n) if n == "f"));
        let err =
            RecordSchema::union(&[FieldSpec::float("given")], &[], &[]).unwrap_err();
        assert!(matches!(err, HistoryError::ReservedCollision(ref n) if n == "given"));
    }

    #[test]
    fn nested_shape_round_trips() {
        let spec = FieldSpec::new("m", FieldKind::Float64, vec![2, 2]);
        let cell = CellValue::F64Arr(vec![1.0, 2.5, -3.0, 0.125]);
        let json = cell_to_json(&cell, &spec);
        assert_eq!(json.to_string(), "[[1.0,2.5],[-3.0,0.125]]");
        assert_eq!(cell_from_json(&json, &spec).unwrap(), cell);
    }

    #[test]
    fn non_finite_floats_round_trip_as_strings() {
        let spec = FieldSpec::float("f");
        for v in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let json = cell_to_json(&CellValue::F64(v), &spec);
            let back = cell_from_json(&json, &spec).unwrap();
            match back {
                CellValue::F64(b) => assert!(b.is_nan() == v.is_nan() && (v.is_nan() || b == v)),
                _ => panic!("wrong kind"),
            }
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let spec = FieldSpec::int("k");
        let err = cell_from_json(&serde_json::json!(1.5), &spec).unwrap_err();
        assert!(matches!(err, HistoryError::KindMismatch(_)));
    }

    #[test]
    fn batch_json_round_trip() {
        let mut batch = RecordBatch::new(vec![FieldSpec::float_vec("x", 2), FieldSpec::int("n")]);
        batch
            .push_row(vec![CellValue::F64Arr(vec![0.5, -1.0]), CellValue::I64(7)])
            .unwrap();
        let back = RecordBatch::from_json(&batch.to_json()).unwrap();
        assert_eq!(back, batch);
    }
}
