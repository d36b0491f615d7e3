//! Run specification records: what to call, which fields flow in and out,
//! and when the run stops.

use serde::{Deserialize, Serialize};

use crate::history::HistoryError;
use crate::schema::{FieldSpec, RecordSchema};

/// Opaque key-value configuration handed to user functions.
pub type UserConfig = serde_json::Map<String, serde_json::Value>;

/// Simulator specification: registered function name, fields delivered to
/// it, and the fields it writes back.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSpecs {
    pub function: String,
    #[serde(default, alias = "in")]
    pub in_fields: Vec<String>,
    #[serde(default, alias = "out")]
    pub out_fields: Vec<FieldSpec>,
    #[serde(default, alias = "user")]
    pub user_config: UserConfig,
}

/// Generator specification, same layout as [`SimSpecs`] plus a persistence
/// flag: a persistent generator stays resident on its worker and exchanges
/// batches with the manager in a loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenSpecs {
    pub function: String,
    #[serde(default, alias = "in")]
    pub in_fields: Vec<String>,
    #[serde(default, alias = "out")]
    pub out_fields: Vec<FieldSpec>,
    #[serde(default, alias = "user")]
    pub user_config: UserConfig,
    #[serde(default)]
    pub persistent: bool,
}

fn check_in_fields(kind: &str, in_fields: &[String], schema: &RecordSchema) -> Result<(), HistoryError> {
    for name in in_fields {
        if !schema.contains(name) {
            return Err(HistoryError::UnknownField(format!("{kind} input '{name}'")));
        }
    }
    Ok(())
}

impl SimSpecs {
    pub fn validate(&self, schema: &RecordSchema) -> Result<(), HistoryError> {
        check_in_fields("sim", &self.in_fields, schema)
    }
}

impl GenSpecs {
    pub fn validate(&self, schema: &RecordSchema) -> Result<(), HistoryError> {
        check_in_fields("gen", &self.in_fields, schema)
    }
}

/// Stop conditions for a run; at least one must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExitCriteria {
    /// Stop once this many rows have returned from simulation.
    #[serde(default)]
    pub sim_max: Option<u64>,
    /// Stop once this many rows have been generated.
    #[serde(default)]
    pub gen_max: Option<u64>,
    /// Stop after this much wall time, in seconds.
    #[serde(default)]
    pub wallclock_max: Option<f64>,
    /// Stop once any returned row's field reaches the threshold.
    #[serde(default)]
    pub stop_field: Option<(String, f64)>,
}

impl ExitCriteria {
    pub fn sim_max(n: u64) -> ExitCriteria {
        ExitCriteria { sim_max: Some(n), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), HistoryError> {
        if self.sim_max.is_none()
            && self.gen_max.is_none()
            && self.wallclock_max.is_none()
            && self.stop_field.is_none()
        {
            return Err(HistoryError::MalformedField(
                "exit criteria: at least one criterion must be set".into(),
            ));
        }
        Ok(())
    }
}

/// Per-worker persistent state blob. Carried to the user function on every
/// call and back to the manager afterwards; persistent functions hold it for
/// their whole loop. Always contains `worker_id` and `rng_seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersisBlob(pub serde_json::Map<String, serde_json::Value>);

impl PersisBlob {
    pub fn new(worker_id: u32, rng_seed: u64) -> PersisBlob {
        let mut map = serde_json::Map::new();
        map.insert("worker_id".into(), serde_json::json!(worker_id));
        map.insert("rng_seed".into(), serde_json::json!(rng_seed));
        PersisBlob(map)
    }

    pub fn worker_id(&self) -> u32 {
        self.0.get("worker_id").and_then(|v| v.as_u64()).unwrap_or(0) as u32
    }

    pub fn rng_seed(&self) -> u64 {
        self.0.get("rng_seed").and_then(|v| v.as_u64()).unwrap_or(0)
    }

    pub fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.0.get(key)
    }

    pub fn set(&mut self, key: &str, value: serde_json::Value) {
        self.0.insert(key.to_string(), value);
    }

    /// Fetch-or-create the worker's RNG stream. The stream state is stored
    /// back with [`PersisBlob::store_rng`] so the sequence continues across
    /// calls, mirroring a random stream kept in per-worker state.
    pub fn take_rng(&self) -> rand_chacha::ChaCha12Rng {
        use rand::SeedableRng;
        if let Some(state) = self.0.get("rng_state") {
            if let Ok(rng) = serde_json::from_value(state.clone()) {
                return rng;
            }
        }
        rand_chacha::ChaCha12Rng::seed_from_u64(self.rng_seed())
    }

    pub fn store_rng(&mut self, rng: &rand_chacha::ChaCha12Rng) {
        if let Ok(state) = serde_json::to_value(rng) {
            self.0.insert("rng_state".into(), state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn exit_criteria_requires_one() {
        assert!(ExitCriteria::default().validate().is_err());
        assert!(ExitCriteria::sim_max(1).validate().is_ok());
    }

    #[test]
    fn rng_stream_continues_across_calls() {
        let mut blob = PersisBlob::new(1, 42);
        let mut rng = blob.take_rng();
        let first = rng.next_u64();
        blob.store_rng(&rng);
        let mut rng2 = blob.take_rng();
        let second = rng2.next_u64();
        assert_ne!(first, second);

        // Same seed, fresh blob: identical sequence.
        let blob2 = PersisBlob::new(1, 42);
        let mut rng3 = blob2.take_rng();
        assert_eq!(rng3.next_u64(), first);
    }

    #[test]
    fn in_fields_checked_against_schema() {
        let schema = RecordSchema::union(&[FieldSpec::float("x")], &[], &[]).unwrap();
        let specs = SimSpecs { in_fields: vec!["y".into()], ..Default::default() };
        assert!(specs.validate(&schema).is_err());
        let specs = SimSpecs { in_fields: vec!["x".into()], ..Default::default() };
        assert!(specs.validate(&schema).is_ok());
    }
}
