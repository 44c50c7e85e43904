//! Time-domain simulation of the loop: cooldowns, valving in a warm
//! experiment, top-ups and relief venting.
//!
//! Every edge with a thermal capacity or a gas volume is a lumped cell whose
//! temperature is also its outlet temperature. Fans and valves are
//! algebraic and pass their inlet through. Volume flows follow the fan and
//! valve settings and are recomputed only when those change; mass flows use
//! the density at the fan intake, so they track pressure and intake
//! temperature continuously.
//!
//! Gas inventories are tracked per isolated section: the loop itself plus
//! any experiment whose valves are both shut. Each section has a uniform
//! pressure `P = m·R_s / Σ(V/T)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::components::{heat_capacity_factor, Component, AMBIENT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::gasprops::{density, gas_mass, GasState, SPECIFIC_GAS_CONSTANT, SPECIFIC_HEAT};
use crate::network::{solve_flow, Side};
use crate::plant::{cooler_state, gas_heat, Plant, SensorLocation};
use crate::steadystate::{solve_steady, FlowSpec, SteadyInputs, SteadyOptions};
use crate::telemetry::TelemetryFrame;
use crate::units::{bar, grams_per_second, to_bar, to_m3_per_hour};

/// Constant offset and first-order lag of one temperature sensor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub offset_k: f64,
    pub lag_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransientSettings {
    pub dt_s: f64,
    /// Scale solid heat capacities down at low temperature.
    pub heat_capacity_reduction: bool,
    /// Temperature of top-up gas from the supply bottle.
    pub fill_temperature_k: f64,
    /// Rate at which the fill regulator admits gas. The enthalpy the new gas
    /// carries above the fill edge temperature is released over the fill time.
    pub fill_rate_g_s: f64,
    pub noise_std_k: f64,
    pub noise_seed: u64,
    pub sensors: BTreeMap<String, SensorModel>,
}

impl Default for TransientSettings {
    fn default() -> Self {
        Self {
            dt_s: 0.05,
            heat_capacity_reduction: true,
            fill_temperature_k: AMBIENT_TEMPERATURE,
            fill_rate_g_s: 0.05,
            noise_std_k: 0.0,
            noise_seed: 0,
            sensors: BTreeMap::new(),
        }
    }
}

/// Operator action. Experiments are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SetValve {
        experiment: usize,
        side: Side,
        opening: f64,
    },
    SetRpm {
        rpm: f64,
    },
    SetHeater {
        experiment: usize,
        power_w: f64,
    },
    /// Fill the loop to this pressure.
    TopUp {
        pressure_bar: f64,
    },
    ConnectExperiment {
        experiment: usize,
        opening: f64,
    },
    DisconnectExperiment {
        experiment: usize,
    },
    /// Clear accumulated contaminant in an isolated experiment.
    Flush {
        experiment: usize,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::SetValve { .. } => "set_valve",
            Action::SetRpm { .. } => "set_rpm",
            Action::SetHeater { .. } => "set_heater",
            Action::TopUp { .. } => "top_up",
            Action::ConnectExperiment { .. } => "connect_experiment",
            Action::DisconnectExperiment { .. } => "disconnect_experiment",
            Action::Flush { .. } => "flush",
        }
    }

    /// Short marker written into telemetry.
    pub fn label(&self) -> String {
        match self {
            Action::SetValve {
                experiment,
                side,
                opening,
            } => {
                let side = match side {
                    Side::Supply => "supply",
                    Side::Return => "return",
                };
                format!("set_valve exp{experiment} {side} {opening}")
            }
            Action::SetRpm { rpm } => format!("set_rpm {rpm}"),
            Action::SetHeater { experiment, power_w } => format!("set_heater exp{experiment} {power_w} W"),
            Action::TopUp { pressure_bar } => format!("top_up {pressure_bar} bar"),
            Action::ConnectExperiment { experiment, opening } => {
                format!("connect_experiment exp{experiment} {opening}")
            }
            Action::DisconnectExperiment { experiment } => format!("disconnect_experiment exp{experiment}"),
            Action::Flush { experiment } => format!("flush exp{experiment}"),
        }
    }
}

/// Flat wire form shared by scenario files and the service.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opening: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure_bar: Option<f64>,
}

impl ActionRecord {
    fn into_action(self) -> Result<(Option<f64>, Action)> {
        let name = self.action.clone();
        let bad = |msg: String| Error::InvalidAction(format!("{name}: {msg}"));
        let need = |field: &str, value: Option<f64>| value.ok_or_else(|| bad(format!("missing `{field}`")));
        let experiment = self.experiment.map(|e| e as f64);
        let action = match self.action.as_str() {
            "set_valve" => Action::SetValve {
                experiment: need("experiment", experiment)? as usize,
                side: self.side.ok_or_else(|| bad("missing `side`".into()))?,
                opening: need("opening", self.opening)?,
            },
            "set_rpm" => Action::SetRpm {
                rpm: need("rpm", self.rpm)?,
            },
            "set_heater" => Action::SetHeater {
                experiment: need("experiment", experiment)? as usize,
                power_w: need("power_w", self.power_w)?,
            },
            "top_up" => Action::TopUp {
                pressure_bar: need("pressure_bar", self.pressure_bar)?,
            },
            "connect_experiment" => Action::ConnectExperiment {
                experiment: need("experiment", experiment)? as usize,
                opening: self.opening.unwrap_or(1.0),
            },
            "disconnect_experiment" => Action::DisconnectExperiment {
                experiment: need("experiment", experiment)? as usize,
            },
            "flush" => Action::Flush {
                experiment: need("experiment", experiment)? as usize,
            },
            other => return Err(Error::InvalidAction(format!("unknown action `{other}`"))),
        };
        // Anything set here that the canonical form leaves out does not belong to this action.
        let canonical = ActionRecord::from(&action);
        let extra = [
            (
                "experiment",
                self.experiment.is_some() && canonical.experiment.is_none(),
            ),
            ("side", self.side.is_some() && canonical.side.is_none()),
            ("opening", self.opening.is_some() && canonical.opening.is_none()),
            ("rpm", self.rpm.is_some() && canonical.rpm.is_none()),
            ("power_w", self.power_w.is_some() && canonical.power_w.is_none()),
            (
                "pressure_bar",
                self.pressure_bar.is_some() && canonical.pressure_bar.is_none(),
            ),
        ];
        if let Some((field, _)) = extra.iter().find(|(_, e)| *e) {
            return Err(bad(format!("`{field}` does not apply")));
        }
        Ok((self.time_s, action))
    }
}

impl From<&Action> for ActionRecord {
    fn from(a: &Action) -> Self {
        let mut r = ActionRecord {
            action: a.name().to_string(),
            ..Default::default()
        };
        match *a {
            Action::SetValve {
                experiment,
                side,
                opening,
            } => {
                r.experiment = Some(experiment);
                r.side = Some(side);
                r.opening = Some(opening);
            }
            Action::SetRpm { rpm } => r.rpm = Some(rpm),
            Action::SetHeater { experiment, power_w } => {
                r.experiment = Some(experiment);
                r.power_w = Some(power_w);
            }
            Action::TopUp { pressure_bar } => r.pressure_bar = Some(pressure_bar),
            Action::ConnectExperiment { experiment, opening } => {
                r.experiment = Some(experiment);
                r.opening = Some(opening);
            }
            Action::DisconnectExperiment { experiment } | Action::Flush { experiment } => {
                r.experiment = Some(experiment);
            }
        }
        r
    }
}

impl TryFrom<ActionRecord> for Action {
    type Error = Error;

    /// Immediate actions carry no time.
    fn try_from(r: ActionRecord) -> Result<Self> {
        match r.into_action()? {
            (None, a) => Ok(a),
            (Some(_), _) => Err(Error::InvalidAction("immediate actions take no `time_s`".into())),
        }
    }
}

impl From<Action> for ActionRecord {
    fn from(a: Action) -> Self {
        ActionRecord::from(&a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionRecord", into = "ActionRecord")]
pub struct Event {
    pub time_s: f64,
    pub action: Action,
}

impl TryFrom<ActionRecord> for Event {
    type Error = Error;

    fn try_from(r: ActionRecord) -> Result<Self> {
        let (time, action) = r.into_action()?;
        let time_s = time.ok_or_else(|| Error::InvalidAction("scheduled events need `time_s`".into()))?;
        Ok(Event { time_s, action })
    }
}

impl From<Event> for ActionRecord {
    fn from(e: Event) -> Self {
        ActionRecord {
            time_s: Some(e.time_s),
            ..ActionRecord::from(&e.action)
        }
    }
}

/// Gas held by one section that shares a pressure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inventory {
    /// `None` for the circulation loop, otherwise the isolated experiment index.
    pub experiment: Option<usize>,
    pub edges: Vec<usize>,
    pub mass: f64,
}

/// Heat released into an edge over a finite time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatPulse {
    pub edge: usize,
    pub power: f64,
    pub remaining_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantState {
    pub clock: f64,
    pub step: u64,
    /// Per edge. For fans and valves this is the pass-through value.
    pub temperatures: Vec<f64>,
    /// Per edge, meaningful for valves only.
    pub openings: Vec<f64>,
    pub rpm: f64,
    pub rpm_clamped: bool,
    /// Active load per edge, W.
    pub heaters: Vec<f64>,
    /// Per edge, m³/s.
    pub volume_flow: Vec<f64>,
    pub inventories: Vec<Inventory>,
    pub vented_mass: f64,
    pub topped_up_mass: f64,
    pub pulses: Vec<HeatPulse>,
    /// Lagged sensor readings, aligned with the plant's sensor list.
    pub readings: Vec<f64>,
    /// Contaminant per experiment, kg.
    pub contaminant: Vec<f64>,
}

impl PlantState {
    pub fn total_mass(&self) -> f64 {
        self.inventories.iter().map(|i| i.mass).sum()
    }
}

/// Starting point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConditions {
    /// Start from the steady solution at these settings instead of uniform temperatures.
    pub from_steady: bool,
    pub pressure_bar: f64,
    pub rpm: f64,
    pub temperature_k: f64,
    /// Cooler cells start here; defaults to each cooler's base temperature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cooler_temperature_k: Option<f64>,
    /// Per-edge temperature overrides.
    pub temperatures_k: BTreeMap<String, f64>,
    /// Valve openings by valve edge id.
    pub valve_openings: BTreeMap<String, f64>,
    /// Heater powers by experiment id.
    pub heaters_w: BTreeMap<String, f64>,
    /// Contaminant by experiment id, kg.
    pub contaminant_kg: BTreeMap<String, f64>,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self {
            from_steady: false,
            pressure_bar: 20.0,
            rpm: 0.0,
            temperature_k: AMBIENT_TEMPERATURE,
            cooler_temperature_k: None,
            temperatures_k: BTreeMap::new(),
            valve_openings: BTreeMap::new(),
            heaters_w: BTreeMap::new(),
            contaminant_kg: BTreeMap::new(),
        }
    }
}

/// Where an edge's inlet gas comes from.
#[derive(Debug, Clone, PartialEq)]
enum Upstream {
    Edge(usize),
    Merge(Vec<usize>),
}

/// Immutable description of the simulated plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    plant: Plant,
    settings: TransientSettings,
    cell: Vec<bool>,
    upstream: Vec<Upstream>,
    sensor_models: Vec<SensorModel>,
    sensor_edges: Vec<usize>,
}

/// Per-evaluation view of flows and pressures for a set of temperatures.
struct Snapshot {
    pressure: Vec<f64>,
    inventory_of: Vec<Option<usize>>,
    mass_flow: Vec<f64>,
}

impl PlantModel {
    pub fn new(plant: Plant, settings: TransientSettings) -> Result<Self> {
        if !(settings.dt_s > 0.0 && settings.dt_s.is_finite()) {
            return Err(Error::domain(format!("dt must be positive, got {}", settings.dt_s)));
        }
        if !(settings.fill_rate_g_s > 0.0) || !(settings.fill_temperature_k > 0.0) || !(settings.noise_std_k >= 0.0) {
            return Err(Error::domain(
                "fill rate and fill temperature must be positive, noise non-negative",
            ));
        }
        let topo = &plant.topology;
        let edges = topo.edges();
        let cell: Vec<bool> = edges
            .iter()
            .map(|e| e.component.thermal_capacity() > 0.0 || e.component.internal_volume() > 0.0)
            .collect();
        for (e, is_cell) in edges.iter().zip(&cell) {
            let exchanges_heat = match &e.component {
                Component::Fan(_) | Component::Valve(_) => false,
                Component::Line(l) => crate::components::passive_leak(l) > 0.0,
                Component::Cooler(_) | Component::HeatSink(_) => true,
            };
            if exchanges_heat && !is_cell {
                return Err(Error::Topology(format!(
                    "edge `{}` exchanges heat but has neither thermal capacity nor gas volume",
                    e.id
                )));
            }
        }
        let upstream = edges
            .iter()
            .map(|e| {
                let incoming: Vec<usize> = edges
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.to == e.from)
                    .map(|(j, _)| j)
                    .collect();
                if incoming.len() == 1 {
                    Upstream::Edge(incoming[0])
                } else {
                    Upstream::Merge(incoming)
                }
            })
            .collect();
        for name in settings.sensors.keys() {
            if !plant.sensors.iter().any(|s| &s.name == name) {
                return Err(Error::NotFound(format!(
                    "sensor model for `{name}`, which the plant does not have"
                )));
            }
        }
        let sensor_models = plant
            .sensors
            .iter()
            .map(|s| settings.sensors.get(&s.name).copied().unwrap_or_default())
            .collect::<Vec<_>>();
        if sensor_models
            .iter()
            .any(|m| !(m.lag_s >= 0.0) || !m.offset_k.is_finite())
        {
            return Err(Error::domain("sensor lags must be non-negative and offsets finite"));
        }
        let sensor_edges = plant
            .sensors
            .iter()
            .map(|s| topo.edge_index(s.location.edge()))
            .collect::<Result<_>>()?;
        let model = Self {
            plant,
            settings,
            cell,
            upstream,
            sensor_models,
            sensor_edges,
        };
        // Every cycle needs a cell or inlet resolution would never end.
        if !model.cell.iter().any(|c| *c) {
            return Err(Error::Topology("the loop has no element with thermal capacity".into()));
        }
        Ok(model)
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn settings(&self) -> &TransientSettings {
        &self.settings
    }

    pub fn dt(&self) -> f64 {
        self.settings.dt_s
    }

    /// The plant with valve openings taken from `state`.
    pub fn plant_at(&self, state: &PlantState) -> Plant {
        let mut plant = self.plant.clone();
        apply_openings(&mut plant, &state.openings);
        plant
    }

    fn experiment_number(&self, number: usize) -> Result<usize> {
        let n = self.plant.topology.experiments().len();
        if number == 0 || number > n {
            return Err(Error::InvalidAction(format!(
                "experiment {number} does not exist (plant has {n})"
            )));
        }
        Ok(number - 1)
    }

    /// Checks an action against the plant without applying it.
    pub fn validate_action(&self, action: &Action) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidAction(format!("{name} must be finite")))
            }
        };
        match *action {
            Action::SetValve {
                experiment, opening, ..
            }
            | Action::ConnectExperiment { experiment, opening } => {
                self.experiment_number(experiment)?;
                if !(0.0..=1.0).contains(&opening) {
                    return Err(Error::InvalidAction(format!(
                        "valve opening must be in [0, 1], got {opening}"
                    )));
                }
            }
            Action::SetRpm { rpm } => {
                finite("rpm", rpm)?;
                if rpm < 0.0 {
                    return Err(Error::InvalidAction(format!("rpm must be non-negative, got {rpm}")));
                }
            }
            Action::SetHeater { experiment, power_w } => {
                self.experiment_number(experiment)?;
                finite("heater power", power_w)?;
                if power_w < 0.0 {
                    return Err(Error::InvalidAction(format!(
                        "heater power must be non-negative, got {power_w}"
                    )));
                }
            }
            Action::TopUp { pressure_bar } => {
                finite("pressure", pressure_bar)?;
                let set = to_bar(self.plant.relief.set_pressure);
                if pressure_bar > set {
                    return Err(Error::InvalidAction(format!(
                        "top-up to {pressure_bar} bar is above the relief set point {set} bar"
                    )));
                }
                if pressure_bar <= 0.0 {
                    return Err(Error::InvalidAction("top-up pressure must be positive".into()));
                }
            }
            Action::DisconnectExperiment { experiment } | Action::Flush { experiment } => {
                self.experiment_number(experiment)?;
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, ic: &InitialConditions) -> Result<PlantState> {
        let topo = &self.plant.topology;
        let n = topo.edges().len();
        let mut plant = self.plant.clone();
        for (id, &opening) in &ic.valve_openings {
            let i = topo.edge_index(id)?;
            if !matches!(topo.edge(i).component, Component::Valve(_)) {
                return Err(Error::Topology(format!("`{id}` is not a valve")));
            }
            crate::components::check_opening(opening)?;
            plant.topology.map_components(|eid, c| {
                if eid == id {
                    if let Component::Valve(v) = c {
                        v.opening = opening;
                    }
                }
            });
        }
        let openings: Vec<f64> = plant
            .topology
            .edges()
            .iter()
            .map(|e| match &e.component {
                Component::Valve(v) => v.opening,
                _ => 0.0,
            })
            .collect();
        let mut heaters = vec![0.0; n];
        for (id, &w) in &ic.heaters_w {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::domain(format!("heater power for {id} must be non-negative")));
            }
            heaters[topo.experiment(id)?.sink] = w;
        }
        let mut contaminant = vec![0.0; topo.experiments().len()];
        for (id, &kg) in &ic.contaminant_kg {
            let k = topo
                .experiments()
                .iter()
                .position(|x| &x.id == id)
                .ok_or_else(|| Error::NotFound(format!("experiment `{id}`")))?;
            contaminant[k] = kg;
        }
        let pressure = bar(ic.pressure_bar);
        if !(pressure > 0.0) {
            return Err(Error::domain("initial pressure must be positive"));
        }
        if pressure > self.plant.relief.set_pressure {
            return Err(Error::domain("initial pressure is above the relief set point"));
        }
        if !(ic.rpm >= 0.0) {
            return Err(Error::domain("rpm must be non-negative"));
        }
        if !(ic.temperature_k > 0.0) {
            return Err(Error::domain("initial temperature must be positive"));
        }

        let mut temperatures = vec![ic.temperature_k; n];
        if ic.from_steady {
            let active = ic.heaters_w.clone();
            let inputs = SteadyInputs {
                flows: FlowSpec::Network { rpm: ic.rpm },
                active_loads: active,
                pressure,
            };
            let report = solve_steady(&plant, &inputs, &SteadyOptions::default())?;
            for (i, e) in report.edges.iter().enumerate() {
                let _ = i;
                temperatures[topo.edge_index(&e.id)?] = e.outlet;
            }
            // Sections with no flow keep the requested temperature rather than ambient.
            for (i, e) in plant.topology.edges().iter().enumerate() {
                if report.edge(&e.id).is_some_and(|r| r.mass_flow == 0.0) {
                    temperatures[i] = ic.temperature_k;
                }
            }
        } else {
            for (i, c) in plant.coolers() {
                temperatures[i] = ic.cooler_temperature_k.unwrap_or(c.base_temperature);
            }
        }
        for (id, &t) in &ic.temperatures_k {
            if !(t > 0.0) {
                return Err(Error::domain(format!("temperature for `{id}` must be positive")));
            }
            temperatures[topo.edge_index(id)?] = t;
        }

        let mut state = PlantState {
            clock: 0.0,
            step: 0,
            temperatures,
            openings,
            rpm: 0.0,
            rpm_clamped: false,
            heaters,
            volume_flow: vec![0.0; n],
            inventories: Vec::new(),
            vented_mass: 0.0,
            topped_up_mass: 0.0,
            pulses: Vec::new(),
            readings: Vec::new(),
            contaminant,
        };
        state.inventories = self.partition(&state.openings, |_| 0.0);
        for k in 0..state.inventories.len() {
            let vt = self.volume_over_temperature(&state.inventories[k], &state.temperatures);
            state.inventories[k].mass = pressure * vt / SPECIFIC_GAS_CONSTANT;
        }
        self.set_rpm(&mut state, ic.rpm)?;
        self.resolve_algebraic(&mut state);
        state.readings = self
            .true_readings(&state)
            .iter()
            .zip(&self.sensor_models)
            .map(|(v, m)| v + m.offset_k)
            .collect();
        Ok(state)
    }

    /// Splits the gas-holding edges into inventories. `mass_of` gives the
    /// mass for an isolated experiment section.
    fn partition(&self, openings: &[f64], mass_of: impl Fn(usize) -> f64) -> Vec<Inventory> {
        let topo = &self.plant.topology;
        let has_gas = |i: usize| topo.edge(i).component.internal_volume() > 0.0;
        let mut isolated = vec![false; topo.edges().len()];
        let mut out = vec![Inventory {
            experiment: None,
            edges: Vec::new(),
            mass: 0.0,
        }];
        for (k, x) in topo.experiments().iter().enumerate() {
            if openings[x.supply_valve] == 0.0 && openings[x.return_valve] == 0.0 {
                for &i in &x.enclosed {
                    isolated[i] = true;
                }
                out.push(Inventory {
                    experiment: Some(k),
                    edges: x.enclosed.iter().copied().filter(|&i| has_gas(i)).collect(),
                    mass: mass_of(k),
                });
            }
        }
        out[0].edges = (0..topo.edges().len())
            .filter(|&i| has_gas(i) && !isolated[i])
            .collect();
        out
    }

    fn volume_over_temperature(&self, inv: &Inventory, temps: &[f64]) -> f64 {
        let warm = if inv.experiment.is_none() {
            self.plant.warm_volume / AMBIENT_TEMPERATURE
        } else {
            0.0
        };
        inv.edges
            .iter()
            .map(|&i| self.plant.topology.edge(i).component.internal_volume() / temps[i])
            .sum::<f64>()
            + warm
    }

    fn inventory_pressure(&self, inv: &Inventory, temps: &[f64]) -> f64 {
        let vt = self.volume_over_temperature(inv, temps);
        if vt > 0.0 {
            inv.mass * SPECIFIC_GAS_CONSTANT / vt
        } else {
            0.0
        }
    }

    /// Pressure of the circulation loop, Pa.
    pub fn loop_pressure(&self, state: &PlantState) -> f64 {
        self.inventory_pressure(&state.inventories[0], &state.temperatures)
    }

    /// Pressure of every inventory, in the order of `state.inventories`.
    pub fn pressures(&self, state: &PlantState) -> Vec<f64> {
        state
            .inventories
            .iter()
            .map(|inv| self.inventory_pressure(inv, &state.temperatures))
            .collect()
    }

    fn snapshot(&self, state: &PlantState, temps: &[f64]) -> Result<Snapshot> {
        let n = temps.len();
        let mut inventory_of = vec![None; n];
        let mut pressure = Vec::with_capacity(state.inventories.len());
        for (k, inv) in state.inventories.iter().enumerate() {
            for &i in &inv.edges {
                inventory_of[i] = Some(k);
            }
            pressure.push(self.inventory_pressure(inv, temps));
        }
        let fan = self.plant.topology.fan();
        let mass_flow = if state.volume_flow[fan] > 0.0 {
            let rho = density(pressure[0], self.inlet(fan, temps, &[])).map_err(|e| Error::Integration {
                node: self.plant.topology.edge(fan).id.clone(),
                reason: e.to_string(),
            })?;
            state.volume_flow.iter().map(|v| v * rho).collect()
        } else {
            vec![0.0; n]
        };
        Ok(Snapshot {
            pressure,
            inventory_of,
            mass_flow,
        })
    }

    fn outlet(&self, edge: usize, temps: &[f64], mass_flow: &[f64]) -> f64 {
        if self.cell[edge] {
            temps[edge]
        } else {
            self.inlet(edge, temps, mass_flow)
        }
    }

    /// Gas temperature entering `edge`. An empty `mass_flow` slice means
    /// merges are weighted by volume flow shape only, which is enough for the
    /// fan intake (never downstream of a merge without a cell in between).
    fn inlet(&self, edge: usize, temps: &[f64], mass_flow: &[f64]) -> f64 {
        match &self.upstream[edge] {
            Upstream::Edge(j) => self.outlet(*j, temps, mass_flow),
            Upstream::Merge(js) => {
                let weights: Vec<f64> = if mass_flow.is_empty() {
                    vec![1.0; js.len()]
                } else {
                    js.iter().map(|&j| mass_flow[j]).collect()
                };
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    js.iter()
                        .zip(&weights)
                        .map(|(&j, w)| w * self.outlet(j, temps, mass_flow))
                        .sum::<f64>()
                        / total
                } else {
                    js.iter().map(|&j| self.outlet(j, temps, mass_flow)).sum::<f64>() / js.len() as f64
                }
            }
        }
    }

    fn capacity(&self, edge: usize, temperature: f64, pressure: f64) -> f64 {
        let c = &self.plant.topology.edge(edge).component;
        let factor = if self.settings.heat_capacity_reduction {
            heat_capacity_factor(temperature)
        } else {
            1.0
        };
        c.thermal_capacity() * factor + gas_mass(c.internal_volume(), pressure, temperature) * SPECIFIC_HEAT
    }

    fn edge_heat(&self, edge: usize, temperature: f64, state: &PlantState, elapsed: f64, h: f64) -> f64 {
        let component = &self.plant.topology.edge(edge).component;
        let mut q = gas_heat(component, temperature, state.heaters[edge]);
        for p in &state.pulses {
            if p.edge == edge {
                // Spread the pulse so the delivered energy is exact even when
                // it ends partway through a substep.
                let on = (p.remaining_s - elapsed).clamp(0.0, h);
                q += p.power * on / h;
            }
        }
        q
    }

    fn derivatives(&self, state: &PlantState, temps: &[f64], elapsed: f64, h: f64, out: &mut [f64]) -> Result<()> {
        let snap = self.snapshot(state, temps)?;
        for e in 0..temps.len() {
            if !self.cell[e] {
                out[e] = 0.0;
                continue;
            }
            let t = temps[e];
            let p = snap.inventory_of[e].map_or(0.0, |k| snap.pressure[k]);
            let m = snap.mass_flow[e];
            let advect = if m > 0.0 {
                m * SPECIFIC_HEAT * (self.inlet(e, temps, &snap.mass_flow) - t)
            } else {
                0.0
            };
            out[e] = (advect + self.edge_heat(e, t, state, elapsed, h)) / self.capacity(e, t, p);
        }
        Ok(())
    }

    /// Largest substep the stability guard allows at the current state.
    fn stable_step(&self, state: &PlantState) -> Result<f64> {
        let snap = self.snapshot(state, &state.temperatures)?;
        let mut limit = f64::INFINITY;
        for e in 0..state.temperatures.len() {
            if !self.cell[e] {
                continue;
            }
            let t = state.temperatures[e];
            let component = &self.plant.topology.edge(e).component;
            let dt = 1e-3;
            let g = ((gas_heat(component, t + dt, 0.0) - gas_heat(component, t, 0.0)) / dt).abs();
            let p = snap.inventory_of[e].map_or(0.0, |k| snap.pressure[k]);
            let rate = snap.mass_flow[e] * SPECIFIC_HEAT + g;
            if rate > 0.0 {
                limit = limit.min(0.2 * self.capacity(e, t, p) / rate);
            }
        }
        Ok(limit)
    }

    fn check_temperatures(&self, temps: &[f64]) -> Result<()> {
        for (e, &t) in temps.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Integration {
                    node: self.plant.topology.edge(e).id.clone(),
                    reason: format!("temperature became {t}"),
                });
            }
        }
        Ok(())
    }

    fn rk4(&self, state: &PlantState, elapsed: f64, h: f64) -> Result<Vec<f64>> {
        let n = state.temperatures.len();
        let y = &state.temperatures;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let shifted = |k: &[f64], f: f64| -> Vec<f64> { y.iter().zip(k).map(|(y, k)| y + f * h * k).collect() };
        self.derivatives(state, y, elapsed, h, &mut k1)?;
        let y2 = shifted(&k1, 0.5);
        self.check_temperatures(&y2)?;
        self.derivatives(state, &y2, elapsed, h, &mut k2)?;
        let y3 = shifted(&k2, 0.5);
        self.check_temperatures(&y3)?;
        self.derivatives(state, &y3, elapsed, h, &mut k3)?;
        let y4 = shifted(&k3, 1.0);
        self.check_temperatures(&y4)?;
        self.derivatives(state, &y4, elapsed, h, &mut k4)?;
        let next: Vec<f64> = (0..n)
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        self.check_temperatures(&next)?;
        Ok(next)
    }

    /// Sets fan and valve pass-through temperatures from their upstream cells.
    fn resolve_algebraic(&self, state: &mut PlantState) {
        let mass_flow = self
            .snapshot(state, &state.temperatures)
            .map(|s| s.mass_flow)
            .unwrap_or_else(|_| vec![0.0; state.temperatures.len()]);
        for e in 0..state.temperatures.len() {
            if !self.cell[e] {
                state.temperatures[e] = self.inlet(e, &state.temperatures, &mass_flow);
            }
        }
    }

    /// Vents any section above the relief set point down to the reseat pressure.
    fn relieve(&self, state: &mut PlantState) {
        let relief = self.plant.relief;
        for k in 0..state.inventories.len() {
            let inv = &state.inventories[k];
            let p = self.inventory_pressure(inv, &state.temperatures);
            if p > relief.set_pressure {
                let keep = relief.reseat_pressure * self.volume_over_temperature(inv, &state.temperatures)
                    / SPECIFIC_GAS_CONSTANT;
                let vented = inv.mass - keep;
                log::info!("relief valve vented {vented:.3e} kg at {:.3} bar", to_bar(p));
                state.vented_mass += vented;
                state.inventories[k].mass = keep;
            }
        }
    }

    /// Advances the plant by `dt`, substepping as the stability guard requires.
    pub fn step(&self, state: &PlantState, dt: f64) -> Result<PlantState> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("dt must be positive, got {dt}")));
        }
        let limit = self.stable_step(state)?;
        let substeps = if limit.is_finite() {
            (dt / limit).ceil().max(1.0) as usize
        } else {
            1
        };
        let h = dt / substeps as f64;
        let mut next = state.clone();
        for _ in 0..substeps {
            next.temperatures = self.rk4(&next, 0.0, h)?;
            for p in &mut next.pulses {
                p.remaining_s -= h;
            }
            next.pulses.retain(|p| p.remaining_s > 1e-12);
            self.relieve(&mut next);
        }
        self.resolve_algebraic(&mut next);
        let targets = self.true_readings(&next);
        for ((r, target), m) in next.readings.iter_mut().zip(targets).zip(&self.sensor_models) {
            let target = target + m.offset_k;
            if m.lag_s > 0.0 {
                *r += (target - *r) * (1.0 - (-dt / m.lag_s).exp());
            } else {
                *r = target;
            }
        }
        next.step = state.step + 1;
        next.clock = next.step as f64 * self.settings.dt_s;
        Ok(next)
    }

    fn set_rpm(&self, state: &mut PlantState, rpm: f64) -> Result<()> {
        let mut plant = self.plant.clone();
        apply_openings(&mut plant, &state.openings);
        let gas = GasState::new(bar(20.0), 50.0)?;
        match solve_flow(&plant.topology, rpm, &gas) {
            Ok(sol) => {
                state.volume_flow = sol.volume_flow;
                state.rpm = sol.fan.rpm;
                state.rpm_clamped = sol.fan.rpm_clamped;
                if sol.fan.rpm_clamped {
                    log::warn!("fan speed {rpm} rpm clamped to {} rpm", sol.fan.rpm);
                }
            }
            Err(Error::CircuitBlocked(group)) => {
                log::warn!("every branch of `{group}` is shut; the fan is dead-headed");
                state.volume_flow = vec![0.0; state.volume_flow.len()];
                let Component::Fan(fan) = &plant.topology.edge(plant.topology.fan()).component else {
                    unreachable!()
                };
                let (used, clamped) = if rpm > 0.0 { fan.clamp_rpm(rpm) } else { (0.0, false) };
                state.rpm = used;
                state.rpm_clamped = clamped;
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn set_openings(&self, state: &mut PlantState, changes: &[(usize, f64)]) -> Result<()> {
        let before: Vec<Option<usize>> = state.inventories.iter().map(|i| i.experiment).collect();
        for &(edge, opening) in changes {
            state.openings[edge] = opening;
        }
        // Reconnected sections return their gas to the loop first, then newly
        // isolated ones take theirs at the loop pressure.
        let mut loop_mass = state.inventories[0].mass;
        let mut kept: BTreeMap<usize, f64> = BTreeMap::new();
        let fresh = self.partition(&state.openings, |_| 0.0);
        let now: Vec<Option<usize>> = fresh.iter().map(|i| i.experiment).collect();
        for inv in &state.inventories[1..] {
            let k = inv.experiment.expect("isolated inventories name their experiment");
            if now.contains(&Some(k)) {
                kept.insert(k, inv.mass);
            } else {
                loop_mass += inv.mass;
            }
        }
        let mut merged = fresh.clone();
        merged[0].mass = loop_mass;
        for inv in &mut merged[1..] {
            if let Some(&m) = kept.get(&inv.experiment.unwrap()) {
                inv.mass = m;
            }
        }
        // Loop pressure with the reconnected sections included, before carving.
        let mut joined = merged[0].clone();
        for inv in &merged[1..] {
            if !before.contains(&inv.experiment) {
                joined.edges.extend(&inv.edges);
            }
        }
        let p = self.inventory_pressure(&joined, &state.temperatures);
        for k in 1..merged.len() {
            if !before.contains(&merged[k].experiment) {
                let m = p * self.volume_over_temperature(&merged[k], &state.temperatures) / SPECIFIC_GAS_CONSTANT;
                merged[k].mass = m;
                merged[0].mass -= m;
            }
        }
        state.inventories = merged;
        let rpm = state.rpm;
        self.set_rpm(state, rpm)
    }

    /// Fills the loop to `target` Pa with gas at the fill temperature.
    pub fn top_up(&self, state: &PlantState, target: f64) -> Result<PlantState> {
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidAction(format!(
                "top-up pressure must be positive, got {target}"
            )));
        }
        if target > self.plant.relief.set_pressure {
            return Err(Error::InvalidAction(format!(
                "top-up to {} bar is above the relief set point {} bar",
                to_bar(target),
                to_bar(self.plant.relief.set_pressure)
            )));
        }
        let current = self.loop_pressure(state);
        let mut next = state.clone();
        if target <= current {
            return Ok(next);
        }
        if !next.inventories[0].edges.contains(&self.plant.fill_edge) {
            return Err(Error::InvalidAction("the fill edge is isolated from the loop".into()));
        }
        let vt = self.volume_over_temperature(&state.inventories[0], &state.temperatures);
        let added = (target - current) * vt / SPECIFIC_GAS_CONSTANT;
        next.inventories[0].mass += added;
        next.topped_up_mass += added;
        let fill = self.plant.fill_edge;
        let energy = added * SPECIFIC_HEAT * (self.settings.fill_temperature_k - state.temperatures[fill]);
        if energy != 0.0 {
            let duration = added / grams_per_second(self.settings.fill_rate_g_s);
            next.pulses.push(HeatPulse {
                edge: fill,
                power: energy / duration,
                remaining_s: duration,
            });
        }
        Ok(next)
    }

    /// Applies an operator action at the current time.
    pub fn apply(&self, state: &PlantState, action: &Action) -> Result<PlantState> {
        self.validate_action(action)?;
        let topo = &self.plant.topology;
        let mut next = state.clone();
        match *action {
            Action::SetValve {
                experiment,
                side,
                opening,
            } => {
                let x = &topo.experiments()[experiment - 1];
                let valve = match side {
                    Side::Supply => x.supply_valve,
                    Side::Return => x.return_valve,
                };
                self.set_openings(&mut next, &[(valve, opening)])?;
            }
            Action::ConnectExperiment { experiment, opening } => {
                let x = &topo.experiments()[experiment - 1];
                self.set_openings(&mut next, &[(x.supply_valve, opening), (x.return_valve, opening)])?;
            }
            Action::DisconnectExperiment { experiment } => {
                let x = &topo.experiments()[experiment - 1];
                self.set_openings(&mut next, &[(x.supply_valve, 0.0), (x.return_valve, 0.0)])?;
            }
            Action::SetRpm { rpm } => self.set_rpm(&mut next, rpm)?,
            Action::SetHeater { experiment, power_w } => {
                let x = &topo.experiments()[experiment - 1];
                if let Component::HeatSink(h) = &topo.edge(x.sink).component {
                    if power_w > h.heater_max_power {
                        log::warn!(
                            "heater on {} set to {power_w} W, above its {} W rating",
                            x.id,
                            h.heater_max_power
                        );
                    }
                }
                next.heaters[x.sink] = power_w;
            }
            Action::TopUp { pressure_bar } => next = self.top_up(&next, bar(pressure_bar))?,
            Action::Flush { experiment } => {
                let k = experiment - 1;
                if !state.inventories.iter().any(|i| i.experiment == Some(k)) {
                    return Err(Error::InvalidAction(format!(
                        "experiment {experiment} must be isolated to flush"
                    )));
                }
                next.contaminant[k] = 0.0;
            }
        }
        self.resolve_algebraic(&mut next);
        Ok(next)
    }

    /// Physical value each sensor would read with no offset or lag.
    pub fn true_readings(&self, state: &PlantState) -> Vec<f64> {
        let temps = &state.temperatures;
        let mass_flow = self
            .snapshot(state, temps)
            .map(|s| s.mass_flow)
            .unwrap_or_else(|_| vec![0.0; temps.len()]);
        self.plant
            .sensors
            .iter()
            .zip(&self.sensor_edges)
            .map(|(s, &e)| {
                let component = &self.plant.topology.edge(e).component;
                match (&s.location, component) {
                    (SensorLocation::ColdHead(_), Component::Cooler(c)) => cooler_state(c, temps[e]).0,
                    (SensorLocation::SinkMetal(_), Component::HeatSink(h)) => {
                        temps[e] + state.heaters[e] * h.contact_resistance()
                    }
                    (SensorLocation::Inlet(_), _) => self.inlet(e, temps, &mass_flow),
                    _ => self.outlet(e, temps, &mass_flow),
                }
            })
            .collect()
    }

    /// Sensor-visible snapshot of `state`.
    pub fn frame(&self, state: &PlantState, seq: u64, events: Vec<String>) -> TelemetryFrame {
        let mut values = state.readings.clone();
        if self.settings.noise_std_k > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.settings.noise_seed);
            rng.set_stream(state.step);
            for v in &mut values {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.settings.noise_std_k * z;
            }
        }
        let topo = &self.plant.topology;
        TelemetryFrame {
            seq,
            time_s: state.clock,
            sensors: self.plant.sensors.iter().map(|s| s.name.clone()).zip(values).collect(),
            pressure_pa: self.loop_pressure(state),
            rpm: state.rpm,
            flow_total_m3h: to_m3_per_hour(state.volume_flow[topo.fan()]),
            flow_exp_m3h: topo
                .experiments()
                .iter()
                .enumerate()
                .map(|(k, x)| (k + 1, to_m3_per_hour(state.volume_flow[x.sink])))
                .collect(),
            events,
        }
    }
}

fn apply_openings(plant: &mut Plant, openings: &[f64]) {
    let ids: BTreeMap<String, f64> = plant
        .topology
        .edges()
        .iter()
        .zip(openings)
        .filter(|(e, _)| matches!(e.component, Component::Valve(_)))
        .map(|(e, &o)| (e.id.clone(), o))
        .collect();
    plant.topology.map_components(|id, c| {
        if let Component::Valve(v) = c {
            v.opening = ids[id];
        }
    });
}

/// Step index at which an event scheduled for `time` takes effect.
pub fn event_step(time: f64, dt: f64) -> u64 {
    (time / dt - 1e-9).ceil().max(0.0) as u64
}

/// A run in progress. At each step the frame is sampled first, then the
/// events due at that step are applied, then the plant is integrated.
/// Markers of applied actions appear in the next sampled frame.
#[derive(Debug, Clone)]
pub struct Simulation {
    model: PlantModel,
    state: PlantState,
    schedule: Vec<(u64, Action)>,
    next_event: usize,
    sample_every: u64,
    seq: u64,
    pending: Vec<String>,
}

impl Simulation {
    /// Validates the events, then samples and applies what is due at step 0.
    /// Returns the simulation and the first frame.
    pub fn start(
        model: PlantModel,
        initial: PlantState,
        events: &[Event],
        sample_interval: f64,
    ) -> Result<(Self, TelemetryFrame)> {
        let dt = model.dt();
        let ratio = sample_interval / dt;
        let sample_every = ratio.round();
        if !(sample_every >= 1.0) || (ratio - sample_every).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::domain(format!(
                "sample interval {sample_interval} s must be a whole multiple of the {dt} s step"
            )));
        }
        let mut sorted = events.to_vec();
        for e in &sorted {
            if !(e.time_s >= 0.0 && e.time_s.is_finite()) {
                return Err(Error::InvalidAction(format!(
                    "event time must be non-negative, got {}",
                    e.time_s
                )));
            }
            model.validate_action(&e.action)?;
        }
        // Stable, so actions landing on the same step keep their given order.
        sorted.sort_by_key(|e| event_step(e.time_s, dt));
        let schedule = sorted
            .into_iter()
            .map(|e| (event_step(e.time_s, dt) + initial.step, e.action))
            .collect();
        let mut sim = Self {
            model,
            state: initial,
            schedule,
            next_event: 0,
            sample_every: sample_every as u64,
            seq: 0,
            pending: Vec::new(),
        };
        let frame = sim.arrive()?.expect("step 0 is always sampled");
        Ok((sim, frame))
    }

    pub fn model(&self) -> &PlantModel {
        &self.model
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn clock(&self) -> f64 {
        self.state.clock
    }

    fn arrive(&mut self) -> Result<Option<TelemetryFrame>> {
        let frame = if self.state.step.is_multiple_of(self.sample_every) {
            let f = self
                .model
                .frame(&self.state, self.seq, std::mem::take(&mut self.pending));
            self.seq += 1;
            Some(f)
        } else {
            None
        };
        while let Some((at, action)) = self.schedule.get(self.next_event) {
            if *at > self.state.step {
                break;
            }
            let action = action.clone();
            self.next_event += 1;
            self.state = self.model.apply(&self.state, &action)?;
            self.pending.push(action.label());
        }
        Ok(frame)
    }

    /// Integrates one step. Returns the frame if the new step is sampled.
    pub fn advance(&mut self) -> Result<Option<TelemetryFrame>> {
        self.state = self.model.step(&self.state, self.model.dt())?;
        self.arrive()
    }

    /// Applies an action now and returns the acknowledgement frame.
    pub fn act(&mut self, action: &Action) -> Result<TelemetryFrame> {
        self.state = self.model.apply(&self.state, action)?;
        self.pending.push(action.label());
        Ok(self.model.frame(&self.state, self.seq, vec![action.label()]))
    }

    /// Snapshot of the current state without consuming a sequence number.
    pub fn snapshot(&self) -> TelemetryFrame {
        self.model.frame(&self.state, self.seq, self.pending.clone())
    }
}

/// Runs a scenario and returns the sampled frames, including the one at `duration`.
pub fn run_scenario(
    model: &PlantModel,
    initial: &PlantState,
    events: &[Event],
    duration: f64,
    sample_interval: f64,
) -> Result<Vec<TelemetryFrame>> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::domain(format!("duration must be positive, got {duration}")));
    }
    let steps = event_step(duration, model.dt());
    let (mut sim, first) = Simulation::start(model.clone(), initial.clone(), events, sample_interval)?;
    let mut frames = vec![first];
    for _ in 0..steps {
        if let Some(f) = sim.advance()? {
            frames.push(f);
        }
    }
    Ok(frames)
}
