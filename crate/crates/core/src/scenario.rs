//! Scenario files: plant, initial state, scheduled events and outputs in one
//! TOML document. Keys carry their units (`pressure_bar`, `duration_s`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::plant::{Plant, PlantSpec};
use crate::steadystate::{solve_steady, FlowSpec, SteadyInputs, SteadyOptions, SteadyStateReport};
use crate::telemetry::TelemetryFrame;
use crate::transient::{Event, InitialConditions, PlantModel, PlantState, Simulation, TransientSettings};
use crate::units::{bar, grams_per_second};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid override `{0}`: expected key=value")]
    Override(String),

    #[error(transparent)]
    Invalid(#[from] Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub duration_s: f64,
    pub sample_interval_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            duration_s: 3600.0,
            sample_interval_s: 10.0,
            csv_path: None,
            report_path: None,
        }
    }
}

/// Settings for a steady solve. Unset values fall back to the initial state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteadySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pressure_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpm: Option<f64>,
    /// Prescribed mass flow per experiment id. Empty means the fan sets the flows.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub mass_flows_g_s: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heaters_w: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default)]
    pub transient: TransientSettings,
    #[serde(default)]
    pub initial: InitialConditions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady: Option<SteadySection>,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

/// Result of running a scenario to its end.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub model: PlantModel,
    pub initial: PlantState,
    pub frames: Vec<TelemetryFrame>,
    pub final_state: PlantState,
}

fn line_column(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl ScenarioError {
    /// Locates a TOML error within `src`.
    pub fn from_toml(src: &str, e: toml::de::Error) -> Self {
        let (line, column) = e.span().map_or((0, 0), |s| line_column(src, s.start));
        ScenarioError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    }
}

/// Short override keys and the scenario paths they stand for.
const ALIASES: [(&str, &str); 5] = [
    ("rpm", "initial.rpm"),
    ("pressure_bar", "initial.pressure_bar"),
    ("duration_s", "outputs.duration_s"),
    ("sample_interval_s", "outputs.sample_interval_s"),
    ("dt_s", "transient.dt_s"),
];

fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Scenario {
    pub fn parse(src: &str) -> Result<Self, ScenarioError> {
        toml::from_str(src).map_err(|e| ScenarioError::from_toml(src, e))
    }

    /// Parses `src`, then applies `key=value` overrides. Keys are dotted
    /// paths such as `initial.rpm`, or one of the short aliases (`rpm`,
    /// `pressure_bar`, `duration_s`, `sample_interval_s`, `dt_s`).
    pub fn parse_with_overrides(src: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let plain = Self::parse(src)?;
        if overrides.is_empty() {
            return Ok(plain);
        }
        let mut table: toml::Table = src.parse().map_err(|e| ScenarioError::from_toml(src, e))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ScenarioError::Override(o.clone()))?;
            let key = key.trim();
            let path = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
            let mut parts: Vec<&str> = path.split('.').collect();
            let last = parts
                .pop()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| ScenarioError::Override(o.clone()))?;
            let mut node = &mut table;
            for p in parts {
                node = node
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| ScenarioError::Override(o.clone()))?;
            }
            node.insert(last.to_string(), override_value(raw.trim()));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ScenarioError::Parse {
                line: 0,
                column: 0,
                message: format!("after overrides: {}", e.message()),
            })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize to TOML")
    }

    pub fn build_plant(&self) -> Result<Plant, Error> {
        self.plant.build()
    }

    pub fn model(&self) -> Result<PlantModel, Error> {
        PlantModel::new(self.build_plant()?, self.transient.clone())
    }

    /// Model and starting state, with every event checked against the plant.
    pub fn prepare(&self) -> Result<(PlantModel, PlantState), Error> {
        let model = self.model()?;
        let state = model.initial_state(&self.initial)?;
        if !(self.outputs.duration_s > 0.0 && self.outputs.duration_s.is_finite()) {
            return Err(Error::Domain(format!(
                "duration must be positive, got {}",
                self.outputs.duration_s
            )));
        }
        for e in &self.events {
            if !(e.time_s >= 0.0) {
                return Err(Error::InvalidAction(format!(
                    "event time must be non-negative, got {}",
                    e.time_s
                )));
            }
            model.validate_action(&e.action)?;
        }
        Ok((model, state))
    }

    /// Starts an interactive run of this scenario.
    pub fn start(&self) -> Result<(Simulation, TelemetryFrame), Error> {
        let (model, state) = self.prepare()?;
        Simulation::start(model, state, &self.events, self.outputs.sample_interval_s)
    }

    pub fn run(&self) -> Result<ScenarioRun, Error> {
        let (model, initial) = self.prepare()?;
        let steps = crate::transient::event_step(self.outputs.duration_s, model.dt());
        let (mut sim, first) = Simulation::start(
            model.clone(),
            initial.clone(),
            &self.events,
            self.outputs.sample_interval_s,
        )?;
        let mut frames = vec![first];
        for _ in 0..steps {
            if let Some(f) = sim.advance()? {
                frames.push(f);
            }
        }
        Ok(ScenarioRun {
            model,
            initial,
            frames,
            final_state: sim.state().clone(),
        })
    }

    /// Steady solve at the `[steady]` settings, falling back to `[initial]`.
    pub fn solve_steady(&self) -> Result<SteadyStateReport, Error> {
        let model = self.model()?;
        let initial = model.initial_state(&InitialConditions {
            from_steady: false,
            ..self.initial.clone()
        })?;
        let plant = model.plant_at(&initial);
        let s = self.steady.clone().unwrap_or_default();
        let pressure = bar(s.pressure_bar.unwrap_or(self.initial.pressure_bar));
        let flows = if s.mass_flows_g_s.is_empty() {
            FlowSpec::Network {
                rpm: s.rpm.unwrap_or(self.initial.rpm),
            }
        } else {
            FlowSpec::Prescribed(
                s.mass_flows_g_s
                    .iter()
                    .map(|(k, v)| (k.clone(), grams_per_second(*v)))
                    .collect(),
            )
        };
        let inputs = SteadyInputs {
            flows,
            active_loads: s.heaters_w.unwrap_or_else(|| self.initial.heaters_w.clone()),
            pressure,
        };
        solve_steady(&plant, &inputs, &SteadyOptions::default())
    }
}
