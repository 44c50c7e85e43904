//! Sensor-visible snapshots of a run and their CSV form.
//!
//! The CSV schema is fixed: `time_s`, the twelve sensor columns `T1..T12`,
//! `pressure_bar`, `rpm`, `flow_total_m3h`, `flow_exp1_m3h..flow_exp4_m3h`
//! and `event`. Sensors or experiments the plant does not have are left
//! empty. Floats are written in shortest round-trip form so a CSV read back
//! reproduces the frame exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::SENSOR_NAMES;
use crate::units::to_bar;

pub const MAX_EXPERIMENT_COLUMNS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub seq: u64,
    pub time_s: f64,
    /// Sensor readings by name, K.
    pub sensors: BTreeMap<String, f64>,
    pub pressure_pa: f64,
    pub rpm: f64,
    pub flow_total_m3h: f64,
    /// Volume flow per experiment number (1-based), m³/hr.
    pub flow_exp_m3h: BTreeMap<usize, f64>,
    /// Operator actions applied since the previous frame.
    pub events: Vec<String>,
}

impl TelemetryFrame {
    pub fn sensor(&self, name: &str) -> Option<f64> {
        self.sensors.get(name).copied()
    }

    pub fn pressure_bar(&self) -> f64 {
        to_bar(self.pressure_pa)
    }
}

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["time_s".to_string()];
    h.extend(SENSOR_NAMES.iter().map(|s| s.to_string()));
    h.extend(["pressure_bar", "rpm", "flow_total_m3h"].map(String::from));
    h.extend((1..=MAX_EXPERIMENT_COLUMNS).map(|i| format!("flow_exp{i}_m3h")));
    h.push("event".into());
    h
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_record(frame: &TelemetryFrame) -> Vec<String> {
    let mut r = vec![frame.time_s.to_string()];
    r.extend(SENSOR_NAMES.iter().map(|s| cell(frame.sensor(s))));
    r.push(frame.pressure_bar().to_string());
    r.push(frame.rpm.to_string());
    r.push(frame.flow_total_m3h.to_string());
    r.extend((1..=MAX_EXPERIMENT_COLUMNS).map(|i| cell(frame.flow_exp_m3h.get(&i).copied())));
    r.push(frame.events.join(";"));
    r
}

pub fn write_csv<W: Write>(out: W, frames: &[TelemetryFrame]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for f in frames {
        w.write_record(csv_record(f))?;
    }
    w.flush()
}

pub fn to_csv_string(frames: &[TelemetryFrame]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, frames).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn parse_float(field: &str, column: &str, row: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::domain(format!("row {row}: column {column} holds `{field}`, not a number")))
}

/// Reads frames back from the CSV schema. Pressure returns in Pa.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TelemetryFrame>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::domain(format!("telemetry header: {e}")))?
        .clone();
    let expected = csv_header();
    if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::domain("telemetry CSV header does not match the schema"));
    }
    let mut frames = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::domain(format!("telemetry row {}: {e}", row + 1)))?;
        let get = |i: usize| parse_float(&rec[i], &expected[i], row + 1);
        let time_s = get(0)?.ok_or_else(|| Error::domain(format!("row {}: missing time", row + 1)))?;
        let mut sensors = BTreeMap::new();
        for (k, name) in SENSOR_NAMES.iter().enumerate() {
            if let Some(v) = get(1 + k)? {
                sensors.insert(name.to_string(), v);
            }
        }
        let base = 1 + SENSOR_NAMES.len();
        let pressure_bar = get(base)?.unwrap_or(f64::NAN);
        let mut flow_exp_m3h = BTreeMap::new();
        for i in 0..MAX_EXPERIMENT_COLUMNS {
            if let Some(v) = get(base + 3 + i)? {
                flow_exp_m3h.insert(i + 1, v);
            }
        }
        let event = &rec[base + 3 + MAX_EXPERIMENT_COLUMNS];
        frames.push(TelemetryFrame {
            seq: row as u64,
            time_s,
            sensors,
            pressure_pa: crate::units::bar(pressure_bar),
            rpm: get(base + 1)?.unwrap_or(0.0),
            flow_total_m3h: get(base + 2)?.unwrap_or(0.0),
            flow_exp_m3h,
            events: if event.is_empty() {
                Vec::new()
            } else {
                event.split(';').map(String::from).collect()
            },
        });
    }
    Ok(frames)
}
