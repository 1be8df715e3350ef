//! Simulated sensor feeds read from CSV.
//!
//! Columns: `sensor,batch,temp_c,lat,lon,ts_ms`. `batch` lists vaccine ids
//! separated by `;`.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use coldledger_core::ledger::tx::{GeoPoint, MicroDegrees, MilliCelsius, TelemetryPayload};
use coldledger_core::telemetry::{evaluate_policy, ColdChainPolicy, PolicyVerdict, Reading, SignedReading};
use coldledger_core::{Address, Keypair, VaccineId};

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("row {row}: sensor {sensor} does not match signing key {key}")]
    ForeignSensor { row: usize, sensor: Address, key: Address },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Deserialize)]
struct RawRow {
    sensor: String,
    batch: String,
    temp_c: f64,
    lat: f64,
    lon: f64,
    ts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedRow {
    pub sensor: Address,
    pub batch: Vec<VaccineId>,
    pub temperature: MilliCelsius,
    pub location: GeoPoint,
    pub timestamp_ms: u64,
}

impl FeedRow {
    pub fn payload(&self) -> TelemetryPayload {
        TelemetryPayload {
            batch: self.batch.clone(),
            temperature: self.temperature,
            location: self.location,
            timestamp_ms: self.timestamp_ms,
            conditions: BTreeMap::new(),
        }
    }

    fn batch_key(&self) -> Vec<VaccineId> {
        self.payload().batch_key()
    }
}

pub fn parse_csv(input: impl Read) -> Result<Vec<FeedRow>, FeedError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 1;
        let raw = record?;
        let bad = |reason: String| FeedError::Row { row, reason };
        let sensor: Address = raw.sensor.parse().map_err(|e| bad(format!("sensor: {e}")))?;
        let batch = raw
            .batch
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map(VaccineId))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("batch: {e}")))?;
        if batch.is_empty() {
            return Err(bad("batch names no vaccines".into()));
        }
        for (name, v, limit) in [("temp_c", raw.temp_c, 1e6), ("lat", raw.lat, 90.0), ("lon", raw.lon, 180.0)] {
            if !v.is_finite() || v.abs() > limit {
                return Err(bad(format!("{name} out of range: {v}")));
            }
        }
        rows.push(FeedRow {
            sensor,
            batch,
            temperature: MilliCelsius::from_celsius(raw.temp_c),
            location: GeoPoint {
                lat: MicroDegrees::from_degrees(raw.lat),
                lon: MicroDegrees::from_degrees(raw.lon),
            },
            timestamp_ms: raw.ts_ms,
        });
    }
    Ok(rows)
}

/// Signs every row with `key`. Rows must name the key's address as sensor.
pub fn sign_rows(key: &Keypair, rows: &[FeedRow]) -> Result<Vec<SignedReading>, FeedError> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.sensor != key.address() {
                return Err(FeedError::ForeignSensor {
                    row: i + 1,
                    sensor: row.sensor,
                    key: key.address(),
                });
            }
            Ok(SignedReading::sign(key, row.payload()))
        })
        .collect()
}

/// Policy verdict per batch over the given rows, in batch order.
pub fn batch_verdicts<'a>(
    rows: impl IntoIterator<Item = &'a FeedRow>,
    policy: &ColdChainPolicy,
) -> Vec<(Vec<VaccineId>, PolicyVerdict)> {
    let mut histories: BTreeMap<Vec<VaccineId>, Vec<Reading>> = BTreeMap::new();
    for row in rows {
        histories.entry(row.batch_key()).or_default().push(Reading {
            sensor: row.sensor,
            temperature: row.temperature,
            location: row.location,
            timestamp_ms: row.timestamp_ms,
            conditions: BTreeMap::new(),
        });
    }
    histories
        .into_iter()
        .filter_map(|(batch, mut history)| {
            history.sort_by_key(|r| (r.timestamp_ms, r.sensor));
            evaluate_policy(&history, policy).ok().map(|v| (batch, v))
        })
        .collect()
}

pub fn format_batch(batch: &[VaccineId]) -> String {
    batch.iter().map(|id| id.0.to_string()).collect::<Vec<_>>().join(";")
}
