//! Cold-chain telemetry: on-chain reading log, excursion policy, alerts and
//! the auto-expire sweep.
//!
//! A batch is the sorted, de-duplicated set of vaccine ids named in a
//! reading. Readings for the same batch form one history, kept sorted by
//! timestamp.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_control::OwnerType;
use crate::codec::Encoder;
use crate::crypto::{Address, Keypair, Signature};
use crate::ledger::block::Block;
use crate::ledger::tx::{
    sign_transaction, Call, GeoPoint, MilliCelsius, TelemetryPayload, Transaction, VaccineId,
};
use crate::state::State;
use crate::vaccine_supply::LifecyclePhase;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TelemetryError {
    #[error("sender is not a registered sensor")]
    UnknownSensor,
    #[error("reading signature does not verify")]
    BadSignature,
    #[error("timestamp {got} is not after the sensor's last reading at {last}")]
    NonMonotoneTimestamp { last: u64, got: u64 },
    #[error("reading names no vaccines")]
    EmptyBatch,
    #[error("no readings to evaluate")]
    EmptyHistory,
    #[error("history is not sorted by timestamp")]
    UnsortedHistory,
}

impl TelemetryError {
    pub fn code(&self) -> &'static str {
        match self {
            TelemetryError::UnknownSensor => "UNKNOWN_SENSOR",
            TelemetryError::BadSignature => "BAD_SIGNATURE",
            TelemetryError::NonMonotoneTimestamp { .. } => "NON_MONOTONE_TIMESTAMP",
            TelemetryError::EmptyBatch => "EMPTY_BATCH",
            TelemetryError::EmptyHistory => "EMPTY_HISTORY",
            TelemetryError::UnsortedHistory => "UNSORTED_HISTORY",
        }
    }
}

/// One stored sensor sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reading {
    pub sensor: Address,
    #[serde(rename = "temperature_c")]
    pub temperature: MilliCelsius,
    pub location: GeoPoint,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conditions: BTreeMap<String, i64>,
}

pub type BatchKey = Vec<VaccineId>;

/// Reading histories per batch plus the last timestamp seen per sensor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TelemetryLog {
    histories: BTreeMap<BatchKey, Vec<Reading>>,
    last_timestamp: BTreeMap<Address, u64>,
}

impl TelemetryLog {
    pub(crate) fn check(
        &self,
        sensor: &Address,
        role: OwnerType,
        report: &TelemetryPayload,
    ) -> Result<(), TelemetryError> {
        if role != OwnerType::Sensor {
            return Err(TelemetryError::UnknownSensor);
        }
        if report.batch.is_empty() {
            return Err(TelemetryError::EmptyBatch);
        }
        if let Some(&last) = self.last_timestamp.get(sensor) {
            if report.timestamp_ms <= last {
                return Err(TelemetryError::NonMonotoneTimestamp {
                    last,
                    got: report.timestamp_ms,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn record(
        &mut self,
        sensor: Address,
        role: OwnerType,
        report: &TelemetryPayload,
    ) -> Result<(), TelemetryError> {
        self.check(&sensor, role, report)?;
        let reading = Reading {
            sensor,
            temperature: report.temperature,
            location: report.location,
            timestamp_ms: report.timestamp_ms,
            conditions: report.conditions.clone(),
        };
        let history = self.histories.entry(report.batch_key()).or_default();
        let at = history.partition_point(|r| {
            (r.timestamp_ms, r.sensor) <= (reading.timestamp_ms, reading.sensor)
        });
        history.insert(at, reading);
        self.last_timestamp.insert(sensor, report.timestamp_ms);
        Ok(())
    }

    pub fn batches(&self) -> impl Iterator<Item = (&BatchKey, &Vec<Reading>)> {
        self.histories.iter()
    }

    pub fn history(&self, batch: &[VaccineId]) -> Option<&[Reading]> {
        self.histories.get(batch).map(Vec::as_slice)
    }

    /// Readings from every batch that includes `id`.
    pub fn readings_for(&self, id: VaccineId) -> Vec<&Reading> {
        let mut out: Vec<&Reading> = self
            .histories
            .iter()
            .filter(|(batch, _)| batch.binary_search(&id).is_ok())
            .flat_map(|(_, h)| h.iter())
            .collect();
        out.sort_by_key(|r| (r.timestamp_ms, r.sensor));
        out
    }

    pub fn last_timestamp(&self, sensor: &Address) -> Option<u64> {
        self.last_timestamp.get(sensor).copied()
    }

    pub(crate) fn encode_into(&self, enc: &mut Encoder) {
        for (batch, history) in &self.histories {
            enc.u32(batch.len() as u32);
            for id in batch {
                enc.u64(id.0);
            }
            enc.u32(history.len() as u32);
            for r in history {
                enc.address(&r.sensor)
                    .i32(r.temperature.0)
                    .i32(r.location.lat.0)
                    .i32(r.location.lon.0)
                    .u64(r.timestamp_ms)
                    .u32(r.conditions.len() as u32);
                for (k, v) in &r.conditions {
                    enc.str(k).i64(*v);
                }
            }
        }
        for (sensor, ts) in &self.last_timestamp {
            enc.address(sensor).u64(*ts);
        }
    }
}

// ---------------------------------------------------------------------------
// Sensor feed records
// ---------------------------------------------------------------------------

/// Wire form of a sensor sample. Its signature is the signature of the
/// equivalent `TelemetryReport` transaction whose nonce is the timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedReading {
    pub sensor: Address,
    #[serde(flatten)]
    pub payload: TelemetryPayload,
    pub signature: Signature,
}

impl SignedReading {
    pub fn sign(key: &Keypair, payload: TelemetryPayload) -> Self {
        let tx = sign_transaction(
            key,
            Transaction::new(
                Call::TelemetryReport(payload.clone()),
                key.address(),
                payload.timestamp_ms,
            ),
        )
        .expect("sender is the signing key");
        SignedReading {
            sensor: key.address(),
            payload,
            signature: tx.signature,
        }
    }

    pub fn to_transaction(&self) -> Transaction {
        Transaction {
            call: Call::TelemetryReport(self.payload.clone()),
            sender: self.sensor,
            nonce: self.payload.timestamp_ms,
            signature: self.signature,
        }
    }
}

/// Validates a sensor reading against `state` and returns the transaction to
/// submit for it.
pub fn ingest_reading(state: &State, reading: &SignedReading) -> Result<Transaction, TelemetryError> {
    let role = crate::access_control::owner_type_of(state.parties(), &reading.sensor);
    if role != OwnerType::Sensor {
        return Err(TelemetryError::UnknownSensor);
    }
    let tx = reading.to_transaction();
    if !crate::ledger::tx::verify_transaction(&tx, state) {
        return Err(TelemetryError::BadSignature);
    }
    state.telemetry().check(&reading.sensor, role, &reading.payload)?;
    Ok(tx)
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColdChainPolicy {
    pub min_c: MilliCelsius,
    pub max_c: MilliCelsius,
    pub max_excursion_ms: u64,
    pub sample_gap_max_ms: u64,
}

impl Default for ColdChainPolicy {
    fn default() -> Self {
        ColdChainPolicy {
            min_c: MilliCelsius(2_000),
            max_c: MilliCelsius(8_000),
            max_excursion_ms: 30 * 60 * 1000,
            sample_gap_max_ms: 10 * 60 * 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("min_c must be below max_c")]
    EmptyBand,
    #[error("max_excursion_ms must be positive")]
    ZeroExcursion,
}

impl ColdChainPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.min_c >= self.max_c {
            return Err(PolicyError::EmptyBand);
        }
        if self.max_excursion_ms == 0 {
            return Err(PolicyError::ZeroExcursion);
        }
        Ok(())
    }

    pub fn in_band(&self, t: MilliCelsius) -> bool {
        self.min_c <= t && t <= self.max_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyWarning {
    /// Out-of-band run shorter than the excursion threshold.
    ShortExcursion { first_bad_ms: u64, duration_ms: u64 },
    /// Consecutive readings further apart than `sample_gap_max_ms`.
    MonitoringGap { from_ms: u64, to_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyVerdict {
    Ok,
    Warning { warnings: Vec<PolicyWarning> },
    Excursion { first_bad_ms: u64, duration_ms: u64 },
}

/// Everything a policy scan finds in one history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyScan {
    /// Earliest maximal out-of-band run spanning at least the threshold.
    pub excursion: Option<(u64, u64)>,
    pub warnings: Vec<PolicyWarning>,
}

impl PolicyScan {
    pub fn verdict(&self) -> PolicyVerdict {
        match (self.excursion, self.warnings.is_empty()) {
            (Some((first_bad_ms, duration_ms)), _) => PolicyVerdict::Excursion {
                first_bad_ms,
                duration_ms,
            },
            (None, true) => PolicyVerdict::Ok,
            (None, false) => PolicyVerdict::Warning {
                warnings: self.warnings.clone(),
            },
        }
    }

    pub fn gaps(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.warnings.iter().filter_map(|w| match *w {
            PolicyWarning::MonitoringGap { from_ms, to_ms } => Some((from_ms, to_ms)),
            _ => None,
        })
    }
}

/// Single pass over maximal out-of-band runs and inter-sample gaps.
pub fn scan_history(history: &[Reading], policy: &ColdChainPolicy) -> Result<PolicyScan, TelemetryError> {
    if history.is_empty() {
        return Err(TelemetryError::EmptyHistory);
    }
    if history
        .windows(2)
        .any(|w| w[1].timestamp_ms < w[0].timestamp_ms)
    {
        return Err(TelemetryError::UnsortedHistory);
    }
    let mut scan = PolicyScan::default();
    let mut run_start: Option<u64> = None;
    let mut run_last = 0u64;

    let close_run = |start: u64, last: u64, scan: &mut PolicyScan| {
        let span = last - start;
        if span >= policy.max_excursion_ms {
            if scan.excursion.is_none() {
                scan.excursion = Some((start, span));
            }
        } else {
            scan.warnings.push(PolicyWarning::ShortExcursion {
                first_bad_ms: start,
                duration_ms: span,
            });
        }
    };

    for (i, r) in history.iter().enumerate() {
        if i > 0 {
            let prev = history[i - 1].timestamp_ms;
            if r.timestamp_ms - prev > policy.sample_gap_max_ms {
                scan.warnings.push(PolicyWarning::MonitoringGap {
                    from_ms: prev,
                    to_ms: r.timestamp_ms,
                });
            }
        }
        if policy.in_band(r.temperature) {
            if let Some(start) = run_start.take() {
                close_run(start, run_last, &mut scan);
            }
        } else {
            run_start.get_or_insert(r.timestamp_ms);
            run_last = r.timestamp_ms;
        }
    }
    if let Some(start) = run_start {
        close_run(start, run_last, &mut scan);
    }
    Ok(scan)
}

/// Ok, warning, or excursion(first_bad_ms, duration_ms) for one batch history.
pub fn evaluate_policy(history: &[Reading], policy: &ColdChainPolicy) -> Result<PolicyVerdict, TelemetryError> {
    scan_history(history, policy).map(|s| s.verdict())
}

// ---------------------------------------------------------------------------
// Alerts and the sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertCause {
    Excursion,
    ManualExpire,
    MonitoringGap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub vaccine_ids: Vec<VaccineId>,
    pub cause: AlertCause,
    pub first_bad_ms: u64,
    pub duration_ms: u64,
    pub issuer: Address,
}

/// Identity that signs auto-issued `Expire` transactions.
#[derive(Debug, Clone)]
pub struct SweepAgent {
    pub key: Keypair,
    pub next_nonce: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub expires: Vec<Transaction>,
    pub alerts: Vec<Alert>,
}

impl SweepOutcome {
    pub fn is_empty(&self) -> bool {
        self.expires.is_empty() && self.alerts.is_empty()
    }
}

/// Alert log plus the bookkeeping that keeps sweeps idempotent.
///
/// The log is a pure function of the committed chain when driven by
/// `observe_block` followed by `sweep` after every block, so a node rebuilds
/// it by replay.
#[derive(Debug, Clone, Default)]
pub struct ColdChainMonitor {
    policy: ColdChainPolicy,
    /// Reported as the alert issuer when a sweep runs without an agent.
    issuer: Address,
    alerts: Vec<Alert>,
    alert_keys: BTreeSet<(BatchKey, AlertCause, u64)>,
    covered: BTreeSet<VaccineId>,
    issued: BTreeSet<VaccineId>,
}

impl ColdChainMonitor {
    pub fn new(policy: ColdChainPolicy) -> Self {
        ColdChainMonitor {
            policy,
            ..Default::default()
        }
    }

    /// Sets the issuer recorded on alerts from agent-less sweeps, so a log
    /// rebuilt by replay matches the one produced live.
    pub fn with_issuer(mut self, issuer: Address) -> Self {
        self.issuer = issuer;
        self
    }

    pub fn policy(&self) -> &ColdChainPolicy {
        &self.policy
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    fn push_alert(&mut self, alert: Alert) -> bool {
        let key = (alert.vaccine_ids.clone(), alert.cause, alert.first_bad_ms);
        if !self.alert_keys.insert(key) {
            return false;
        }
        self.covered.extend(alert.vaccine_ids.iter().copied());
        self.alerts.push(alert);
        true
    }

    /// Raises a `MANUAL_EXPIRE` alert for each committed expiry not already
    /// covered by a telemetry alert.
    pub fn observe_block(&mut self, block: &Block) {
        for tx in &block.transactions {
            if let Call::Expire { vaccine_id } = tx.call {
                self.issued.remove(&vaccine_id);
                if self.covered.contains(&vaccine_id) {
                    continue;
                }
                self.push_alert(Alert {
                    vaccine_ids: vec![vaccine_id],
                    cause: AlertCause::ManualExpire,
                    first_bad_ms: block.timestamp,
                    duration_ms: 0,
                    issuer: tx.sender,
                });
            }
        }
    }

    /// Evaluates every batch history. Excursions produce one alert per batch
    /// and one signed `Expire` per still-live vaccine; monitoring gaps produce
    /// alerts only. Repeated sweeps over the same findings emit nothing.
    pub fn sweep(&mut self, state: &State, mut agent: Option<&mut SweepAgent>) -> SweepOutcome {
        let issuer = agent.as_ref().map_or(self.issuer, |a| a.key.address());
        let mut out = SweepOutcome::default();
        for (batch, history) in state.telemetry().batches() {
            let Ok(scan) = scan_history(history, &self.policy) else {
                continue;
            };
            for (from_ms, to_ms) in scan.gaps() {
                let alert = Alert {
                    vaccine_ids: batch.clone(),
                    cause: AlertCause::MonitoringGap,
                    first_bad_ms: from_ms,
                    duration_ms: to_ms - from_ms,
                    issuer,
                };
                if self.push_alert(alert.clone()) {
                    out.alerts.push(alert);
                }
            }
            let Some((first_bad_ms, duration_ms)) = scan.excursion else {
                continue;
            };
            let alert = Alert {
                vaccine_ids: batch.clone(),
                cause: AlertCause::Excursion,
                first_bad_ms,
                duration_ms,
                issuer,
            };
            if self.push_alert(alert.clone()) {
                out.alerts.push(alert);
            }
            let Some(agent) = agent.as_deref_mut() else {
                continue;
            };
            for id in batch {
                let live = state.vaccine(*id).is_some_and(|r| {
                    !r.phase.is_terminal() && r.phase != LifecyclePhase::Injected
                });
                if !live || self.issued.contains(id) {
                    continue;
                }
                let tx = Transaction::new(
                    Call::Expire { vaccine_id: *id },
                    agent.key.address(),
                    agent.next_nonce,
                );
                let tx = sign_transaction(&agent.key, tx).expect("agent signs as itself");
                agent.next_nonce += 1;
                self.issued.insert(*id);
                out.expires.push(tx);
            }
        }
        out
    }
}
