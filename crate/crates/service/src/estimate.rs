//! Flow and load estimates from recorded telemetry plus a file describing
//! which intervals hold which heater settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use cryoloop::analysis::{
    decompose_passive_loads, experiment_volume_flow, total_volume_flow, HeaterStepRecord, PassiveDecomposition,
};
use cryoloop::gasprops::GasState;
use cryoloop::scenario::ScenarioError;
use cryoloop::telemetry::TelemetryFrame;
use cryoloop::units::to_m3_per_hour;
use cryoloop::Error;
use serde::{Deserialize, Serialize};

/// Step annotations for a telemetry recording.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepFile {
    /// Readings are averaged over this many seconds ending at each time.
    pub window_s: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub heater_steps: Vec<HeaterStep>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub total_flow: Vec<TotalFlow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub passive: Vec<PassiveLoad>,
}

/// A change of one heater between two settled times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaterStep {
    pub experiment: String,
    pub inlet: String,
    pub outlet: String,
    pub before_s: f64,
    pub after_s: f64,
    pub power_before_w: f64,
    pub power_after_w: f64,
}

/// A known total load and the rise it causes between two sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TotalFlow {
    pub at_s: f64,
    pub load_w: f64,
    pub inlet: String,
    pub outlet: String,
    /// Sensor whose temperature sets the density, usually the fan intake.
    pub density_sensor: String,
}

/// Passive load measured with only these experiments connected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassiveLoad {
    pub experiments: Vec<String>,
    pub load_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimates {
    /// Experiment volume flows, m³/hr.
    pub experiment_flows_m3h: BTreeMap<String, f64>,
    /// Loop volume flows from known loads, m³/hr, in file order.
    pub total_flows_m3h: Vec<f64>,
    pub passive: Option<PassiveDecomposition>,
}

impl StepFile {
    pub fn parse(src: &str) -> Result<Self, ScenarioError> {
        toml::from_str(src).map_err(|e| ScenarioError::from_toml(src, e))
    }
}

/// Mean of `f` over the frames in `(time - window, time]`, or the frame
/// closest to `time` when the window holds none.
fn reading(
    frames: &[TelemetryFrame],
    time: f64,
    window: f64,
    f: impl Fn(&TelemetryFrame) -> Option<f64>,
) -> Result<f64, Error> {
    let inside: Vec<f64> = frames
        .iter()
        .filter(|fr| fr.time_s <= time && fr.time_s > time - window)
        .filter_map(&f)
        .collect();
    if !inside.is_empty() {
        return Ok(inside.iter().sum::<f64>() / inside.len() as f64);
    }
    frames
        .iter()
        .min_by(|a, b| (a.time_s - time).abs().total_cmp(&(b.time_s - time).abs()))
        .and_then(&f)
        .ok_or_else(|| Error::NotFound(format!("no reading at {time} s")))
}

fn sensor(frames: &[TelemetryFrame], name: &str, time: f64, window: f64) -> Result<f64, Error> {
    reading(frames, time, window, |f| f.sensor(name)).map_err(|_| Error::NotFound(format!("sensor {name} at {time} s")))
}

pub fn estimate(frames: &[TelemetryFrame], steps: &StepFile) -> Result<Estimates, Error> {
    let w = steps.window_s;
    let mut experiment_flows_m3h = BTreeMap::new();
    for s in &steps.heater_steps {
        let pressure = reading(frames, s.before_s, w, |f| Some(f.pressure_pa))?;
        let record = HeaterStepRecord::from_measurements(
            s.power_before_w,
            s.power_after_w,
            (
                sensor(frames, &s.inlet, s.before_s, w)?,
                sensor(frames, &s.inlet, s.after_s, w)?,
            ),
            (
                sensor(frames, &s.outlet, s.before_s, w)?,
                sensor(frames, &s.outlet, s.after_s, w)?,
            ),
            pressure,
        )?;
        experiment_flows_m3h.insert(s.experiment.clone(), to_m3_per_hour(experiment_volume_flow(&record)?));
    }
    let mut total_flows_m3h = Vec::new();
    for t in &steps.total_flow {
        let pressure = reading(frames, t.at_s, w, |f| Some(f.pressure_pa))?;
        let gas = GasState::new(pressure, sensor(frames, &t.density_sensor, t.at_s, w)?)?;
        let rise = sensor(frames, &t.outlet, t.at_s, w)? - sensor(frames, &t.inlet, t.at_s, w)?;
        total_flows_m3h.push(to_m3_per_hour(total_volume_flow(t.load_w, &gas, rise)?));
    }
    let passive = if steps.passive.is_empty() {
        None
    } else {
        let m: Vec<(BTreeSet<String>, f64)> = steps
            .passive
            .iter()
            .map(|p| (p.experiments.iter().cloned().collect(), p.load_w))
            .collect();
        Some(decompose_passive_loads(&m)?)
    };
    Ok(Estimates {
        experiment_flows_m3h,
        total_flows_m3h,
        passive,
    })
}

pub fn render(e: &Estimates) -> String {
    let mut out = String::new();
    for (id, v) in &e.experiment_flows_m3h {
        writeln!(out, "{id:<10} flow {v:.3} m3/hr").unwrap();
    }
    for (k, v) in e.total_flows_m3h.iter().enumerate() {
        writeln!(out, "loop flow #{} {v:.3} m3/hr", k + 1).unwrap();
    }
    if let Some(p) = &e.passive {
        writeln!(out, "passive load: cryostat {:.2} W", p.cryostat).unwrap();
        for (id, l) in &p.loops {
            writeln!(out, "  {id:<8} {l:.2} W").unwrap();
        }
        writeln!(out, "  residual {:.3e} W", p.residual_norm).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use cryoloop::units::bar;

    fn frame(t: f64, inlet: f64, outlet: f64) -> TelemetryFrame {
        TelemetryFrame {
            seq: 0,
            time_s: t,
            sensors: [("T11".to_string(), inlet), ("T12".to_string(), outlet)].into(),
            pressure_pa: bar(20.0),
            rpm: 21000.0,
            flow_total_m3h: 0.0,
            flow_exp_m3h: BTreeMap::new(),
            events: vec![],
        }
    }

    #[test]
    fn heater_step_from_frames_matches_the_direct_formula() {
        let frames = vec![frame(0.0, 60.0, 70.0), frame(10.0, 60.0, 70.0), frame(20.0, 61.0, 75.0)];
        let steps = StepFile {
            heater_steps: vec![HeaterStep {
                experiment: "exp1".into(),
                inlet: "T11".into(),
                outlet: "T12".into(),
                before_s: 10.0,
                after_s: 20.0,
                power_before_w: 40.0,
                power_after_w: 50.0,
            }],
            ..Default::default()
        };
        let e = estimate(&frames, &steps).unwrap();
        let gas = GasState::new(bar(20.0), 0.25 * (60.0 + 61.0 + 70.0 + 75.0)).unwrap();
        let expected = 10.0 / (gas.cp * gas.density * 4.0);
        let got = e.experiment_flows_m3h["exp1"];
        assert!((got - to_m3_per_hour(expected)).abs() <= 1e-12 * got);
    }

    #[test]
    fn passive_section_decomposes() {
        let src = r#"
[[passive]]
experiments = ["exp1"]
load_w = 86.0
[[passive]]
experiments = ["exp2"]
load_w = 78.0
[[passive]]
experiments = ["exp1", "exp2"]
load_w = 108.0
"#;
        let e = estimate(&[], &StepFile::parse(src).unwrap()).unwrap();
        let p = e.passive.unwrap();
        assert!((p.cryostat - 56.0).abs() < 1e-9);
        assert!((p.loops["exp1"] - 30.0).abs() < 1e-9);
    }
}
