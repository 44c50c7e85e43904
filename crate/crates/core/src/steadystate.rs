//! Steady temperature field of the plant.
//!
//! For given mass flows every edge obeys `ṁ·cp·(T_out − T_in) = Q(T_out)`,
//! where `Q` is the heat the gas picks up at the edge's outlet state (negative
//! at the coolers). Marching once around the loop from the fan intake maps an
//! intake temperature to a new one; that map has slope below one, so the loop
//! closes at a unique fixed point found by bisection. When flows come from
//! the fan, the intake density depends on the result and the solve is
//! repeated until the intake temperature stops moving.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;

use crate::components::{cooling_power_at, passive_leak, Component, HeatSinkModel, AMBIENT_TEMPERATURE, LEAK_TAPER};
use crate::error::{Error, Result};
use crate::gasprops::{density, GasState, SPECIFIC_HEAT};
use crate::network::{mix_streams, solve_flow, FlowSolution, Stage};
use crate::plant::{cooler_state, gas_heat, Plant, SensorLocation};
use crate::units::bar;

#[derive(Debug, Clone, PartialEq)]
pub enum FlowSpec {
    /// Flows follow from the fan at this speed and the current valve settings.
    Network { rpm: f64 },
    /// Experiment branch mass flows fixed by hand, kg/s. The total is their
    /// sum; other parallel groups split it by their flow resistances.
    Prescribed(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyInputs {
    pub flows: FlowSpec,
    /// Heater power per experiment id, W.
    pub active_loads: BTreeMap<String, f64>,
    pub pressure: f64,
}

#[derive(Debug, Clone)]
pub struct SteadyOptions<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub max_iterations: usize,
    /// Intake-temperature change that ends the flow/density iteration, K.
    pub tolerance: f64,
    /// Highest temperature at which the coolers are asked to carry the load, K.
    pub max_temperature: f64,
}

impl Default for SteadyOptions<'_> {
    fn default() -> Self {
        Self {
            cancel: None,
            max_iterations: 200,
            tolerance: 1e-9,
            max_temperature: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeReport {
    pub id: String,
    pub inlet: f64,
    pub outlet: f64,
    /// Heat taken up by the gas, W.
    pub heat: f64,
    pub mass_flow: f64,
    pub volume_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoolerReport {
    pub id: String,
    pub cold_head: f64,
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkReport {
    pub id: String,
    pub inlet: f64,
    pub outlet: f64,
    pub mean: f64,
    pub metal: f64,
    pub active: f64,
    pub mass_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateReport {
    pub sensors: BTreeMap<String, f64>,
    pub edges: Vec<EdgeReport>,
    pub coolers: Vec<CoolerReport>,
    pub sinks: Vec<SinkReport>,
    pub total_active: f64,
    pub total_passive: f64,
    pub total_cooling: f64,
    pub pressure: f64,
    pub fan_intake: GasState,
    pub flow: FlowSolution,
    /// Largest per-edge energy imbalance, W.
    pub max_residual: f64,
    pub iterations: usize,
}

impl SteadyStateReport {
    pub fn sensor(&self, name: &str) -> Option<f64> {
        self.sensors.get(name).copied()
    }

    pub fn edge(&self, id: &str) -> Option<&EdgeReport> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn sink(&self, id: &str) -> Option<&SinkReport> {
        self.sinks.iter().find(|s| s.id == id)
    }

    pub fn total_load(&self) -> f64 {
        self.total_active + self.total_passive
    }
}

/// Outlet temperature of one edge for a given inlet and mass flow.
fn edge_outlet(component: &Component, inlet: f64, mass_flow: f64, active: f64) -> f64 {
    let g = mass_flow * SPECIFIC_HEAT;
    match component {
        Component::Fan(_) | Component::Valve(_) => inlet,
        Component::Line(l) => {
            let q = passive_leak(l);
            let cold = inlet + q / g;
            if cold <= AMBIENT_TEMPERATURE - LEAK_TAPER {
                cold
            } else {
                // Leak tapers linearly to zero at ambient.
                let k = q / LEAK_TAPER;
                (g * inlet + k * AMBIENT_TEMPERATURE) / (g + k)
            }
        }
        Component::HeatSink(h) => sink_outlet(h, inlet, g, active),
        Component::Cooler(c) => {
            if inlet <= c.base_temperature {
                return inlet;
            }
            // ṁcp(T − T_in) + Q(T) is strictly increasing in T.
            let f = |t: f64| g * (t - inlet) + cooler_state(c, t).1;
            let (mut lo, mut hi) = (c.base_temperature, inlet);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-14 * hi {
                    break;
                }
            }
            0.5 * (lo + hi)
        }
    }
}

fn sink_outlet(h: &HeatSinkModel, inlet: f64, g: f64, active: f64) -> f64 {
    match h.support_resistance_to_ambient {
        None => inlet + active / g,
        Some(r) => (g * inlet + active + AMBIENT_TEMPERATURE / r) / (g + 1.0 / r),
    }
}

struct March {
    inlet: Vec<f64>,
    outlet: Vec<f64>,
    intake: f64,
}

/// Follows the gas once around the loop starting from the fan intake.
fn march(plant: &Plant, mass_flow: &[f64], active: &[f64], intake: f64) -> Result<March> {
    let topology = &plant.topology;
    let n = topology.edges().len();
    let mut inlet = vec![AMBIENT_TEMPERATURE; n];
    let mut outlet = vec![AMBIENT_TEMPERATURE; n];
    let mut t = intake;
    let through = |i: usize, t_in: f64, inlet: &mut Vec<f64>, outlet: &mut Vec<f64>| -> f64 {
        inlet[i] = t_in;
        let t_out = edge_outlet(&topology.edge(i).component, t_in, mass_flow[i], active[i]);
        outlet[i] = t_out;
        t_out
    };
    for stage in topology.stages() {
        match stage {
            Stage::Series(i) => t = through(*i, t, &mut inlet, &mut outlet),
            Stage::Parallel(g) => {
                let mut streams = Vec::with_capacity(g.branches.len());
                for b in &g.branches {
                    let m = mass_flow[b.edges[0]];
                    if m == 0.0 {
                        continue;
                    }
                    let mut tb = t;
                    for &i in &b.edges {
                        tb = through(i, tb, &mut inlet, &mut outlet);
                    }
                    streams.push((m, tb));
                }
                t = mix_streams(&streams)?;
            }
        }
    }
    Ok(March {
        inlet,
        outlet,
        intake: t,
    })
}

/// Closes the loop for fixed mass flows; returns the converged march.
fn close_loop(
    plant: &Plant,
    mass_flow: &[f64],
    active: &[f64],
    max_temperature: f64,
    total_load: f64,
) -> Result<March> {
    let lo = plant
        .coolers()
        .map(|(_, c)| c.base_temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let residual = |x: f64| -> Result<(f64, March)> {
        let m = march(plant, mass_flow, active, x)?;
        Ok((m.intake - x, m))
    };
    let (g_lo, m_lo) = residual(lo)?;
    if g_lo <= 0.0 {
        return Ok(m_lo);
    }
    let (g_hi, _) = residual(max_temperature)?;
    if g_hi >= 0.0 {
        let capacity = plant.coolers().map(|(_, c)| cooling_power_at(c, max_temperature)).sum();
        return Err(Error::CapacityExceeded {
            load_w: total_load,
            capacity_w: capacity,
            max_temperature_k: max_temperature,
        });
    }
    let (mut a, mut b) = (lo, max_temperature);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if residual(mid)?.0 > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-13 * b {
            break;
        }
    }
    Ok(residual(0.5 * (a + b))?.1)
}

/// Mass flow per edge for hand-set experiment flows.
fn prescribed_flows(plant: &Plant, flows: &BTreeMap<String, f64>, density: f64) -> Result<FlowSolution> {
    let topology = &plant.topology;
    for (id, &m) in flows {
        topology.experiment(id)?;
        if !(m >= 0.0) {
            return Err(Error::domain(format!("mass flow for `{id}` must be non-negative")));
        }
    }
    let total: f64 = flows.values().sum();
    if total <= 0.0 {
        return Err(Error::NoCirculation("prescribed flows are all zero".into()));
    }
    // Use the fan solution for its shape (cooler split, series edges).
    let probe = GasState {
        pressure: 1.0,
        temperature: 1.0,
        density,
        cp: SPECIFIC_HEAT,
    };
    let mut all_open = topology.clone();
    for x in topology.experiments() {
        all_open.set_valve_mut(&x.id, crate::network::Side::Supply, 1.0)?;
        all_open.set_valve_mut(&x.id, crate::network::Side::Return, 1.0)?;
    }
    let reference = solve_flow(&all_open, 21000.0, &probe)?;
    let scale = total / reference.total_mass_flow();
    let mut mass_flow: Vec<f64> = reference.mass_flow.iter().map(|m| m * scale).collect();
    for stage in topology.stages() {
        match stage {
            Stage::Series(i) => mass_flow[*i] = total,
            Stage::Parallel(g) => {
                let has_experiment = g.branches.iter().any(|b| topology.experiment(&b.id).is_ok());
                if !has_experiment {
                    continue;
                }
                for b in &g.branches {
                    let m = flows.get(&b.id).copied().unwrap_or(0.0);
                    b.edges.iter().for_each(|&i| mass_flow[i] = m);
                }
            }
        }
    }
    let volume_flow = mass_flow.iter().map(|m| m / density).collect();
    let mut fan = reference.fan;
    fan.volume_flow = total / density;
    Ok(FlowSolution {
        volume_flow,
        mass_flow,
        branch_pressure_drop: BTreeMap::new(),
        fan,
        density,
        max_group_residual: 0.0,
    })
}

fn check_cancel(options: &SteadyOptions) -> Result<()> {
    match options.cancel {
        Some(flag) if flag.load(Ordering::Relaxed) => Err(Error::Cancelled),
        _ => Ok(()),
    }
}

pub fn solve_steady(plant: &Plant, inputs: &SteadyInputs, options: &SteadyOptions) -> Result<SteadyStateReport> {
    let topology = &plant.topology;
    let n = topology.edges().len();
    let mut active = vec![0.0; n];
    for (id, &p) in &inputs.active_loads {
        if !(p >= 0.0) {
            return Err(Error::domain(format!(
                "active load on `{id}` must be non-negative, got {p}"
            )));
        }
        let sink = topology.experiment(id)?.sink;
        if let Component::HeatSink(h) = &topology.edge(sink).component {
            if p > h.heater_max_power {
                log::warn!(
                    "heater on `{id}` set to {p} W, above its {} W rating",
                    h.heater_max_power
                );
            }
        }
        active[sink] = p;
    }
    if !(inputs.pressure > 0.0) {
        return Err(Error::domain("pressure must be positive"));
    }

    let total_active: f64 = active.iter().sum();
    let nominal_passive: f64 = topology
        .edges()
        .iter()
        .map(|e| match &e.component {
            Component::Line(l) => passive_leak(l),
            Component::HeatSink(h) => h.support_leak(0.0).max(0.0),
            _ => 0.0,
        })
        .sum();
    let nominal_load = total_active + nominal_passive;
    let capacity: f64 = plant
        .coolers()
        .map(|(_, c)| cooling_power_at(c, options.max_temperature))
        .sum();
    if nominal_load > capacity {
        return Err(Error::CapacityExceeded {
            load_w: nominal_load,
            capacity_w: capacity,
            max_temperature_k: options.max_temperature,
        });
    }

    let mut intake = plant
        .coolers()
        .map(|(_, c)| c.base_temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut iterations = 0;
    let (flow, solution) = loop {
        check_cancel(options)?;
        iterations += 1;
        let rho = density(inputs.pressure, intake)?;
        let flow = match &inputs.flows {
            FlowSpec::Network { rpm } => {
                let gas = GasState::new(inputs.pressure, intake)?;
                let f = solve_flow(topology, *rpm, &gas)?;
                if f.is_stagnant() {
                    return Err(Error::NoCirculation("the fan is off".into()));
                }
                f
            }
            FlowSpec::Prescribed(flows) => prescribed_flows(plant, flows, rho)?,
        };
        for (i, &m) in flow.mass_flow.iter().enumerate() {
            if active[i] > 0.0 && m == 0.0 {
                return Err(Error::NoCirculation(format!(
                    "heater on `{}` sits in a branch with no gas flow",
                    topology.edge(i).id
                )));
            }
        }
        let solution = close_loop(plant, &flow.mass_flow, &active, options.max_temperature, nominal_load)?;
        let moved = (solution.intake - intake).abs();
        intake = solution.intake;
        let done = match inputs.flows {
            FlowSpec::Network { .. } => moved <= options.tolerance,
            FlowSpec::Prescribed(_) => true,
        };
        if done {
            break (flow, solution);
        }
        if iterations >= options.max_iterations {
            return Err(Error::NonConvergence {
                iterations,
                worst_residual: moved,
                location: "fan intake".into(),
            });
        }
    };

    build_report(plant, inputs.pressure, flow, &solution, &active, iterations)
}

fn build_report(
    plant: &Plant,
    pressure: f64,
    mut flow: FlowSolution,
    solution: &March,
    active: &[f64],
    iterations: usize,
) -> Result<SteadyStateReport> {
    let topology = &plant.topology;
    let intake = GasState::new(pressure, solution.intake)?;
    if flow
        .volume_flow
        .iter()
        .zip(&flow.mass_flow)
        .any(|(v, m)| (*v == 0.0) != (*m == 0.0))
    {
        return Err(Error::domain("inconsistent flow solution"));
    }
    flow.density = intake.density;
    flow.volume_flow = flow.mass_flow.iter().map(|m| m / intake.density).collect();
    flow.fan.volume_flow = flow.mass_flow[topology.fan()] / intake.density;

    let mut edges = Vec::with_capacity(topology.edges().len());
    let mut coolers = Vec::new();
    let mut sinks = Vec::new();
    let mut max_residual: f64 = 0.0;
    let mut total_passive = 0.0;
    let mut total_cooling = 0.0;
    for i in topology.ordered_edges() {
        let e = topology.edge(i);
        let m = flow.mass_flow[i];
        let (t_in, t_out) = (solution.inlet[i], solution.outlet[i]);
        let heat = if m > 0.0 {
            gas_heat(&e.component, t_out, active[i])
        } else {
            0.0
        };
        if m > 0.0 {
            let residual = (m * SPECIFIC_HEAT * (t_out - t_in) - heat).abs();
            max_residual = max_residual.max(residual);
        }
        match &e.component {
            Component::Cooler(c) => {
                let (cold_head, load) = if m > 0.0 {
                    cooler_state(c, t_out)
                } else {
                    (c.base_temperature, 0.0)
                };
                total_cooling += load;
                coolers.push(CoolerReport {
                    id: e.id.clone(),
                    cold_head,
                    load,
                });
            }
            Component::HeatSink(h) => {
                if m > 0.0 {
                    total_passive += heat - active[i];
                }
                sinks.push(SinkReport {
                    id: e.id.clone(),
                    inlet: t_in,
                    outlet: t_out,
                    mean: 0.5 * (t_in + t_out),
                    metal: t_out + active[i] * h.contact_resistance(),
                    active: active[i],
                    mass_flow: m,
                });
            }
            Component::Line(_) if m > 0.0 => total_passive += heat,
            _ => {}
        }
        edges.push(EdgeReport {
            id: e.id.clone(),
            inlet: t_in,
            outlet: t_out,
            heat,
            mass_flow: m,
            volume_flow: flow.volume_flow[i],
        });
    }
    let order: Vec<usize> = topology.ordered_edges();
    let lookup = |idx: usize| -> &EdgeReport { &edges[order.iter().position(|&j| j == idx).unwrap()] };

    let mut sensors = BTreeMap::new();
    for s in &plant.sensors {
        let idx = topology.edge_index(s.location.edge())?;
        let r = lookup(idx);
        let value = match &s.location {
            SensorLocation::Inlet(_) => r.inlet,
            SensorLocation::Outlet(_) => r.outlet,
            SensorLocation::ColdHead(id) => coolers.iter().find(|c| &c.id == id).map(|c| c.cold_head).unwrap(),
            SensorLocation::SinkMetal(id) => sinks.iter().find(|k| &k.id == id).map(|k| k.metal).unwrap(),
        };
        sensors.insert(s.name.clone(), value);
    }
    let total_active = active.iter().sum();
    Ok(SteadyStateReport {
        sensors,
        edges,
        coolers,
        sinks,
        total_active,
        total_passive,
        total_cooling,
        pressure,
        fan_intake: intake,
        flow,
        max_residual,
        iterations,
    })
}

/// Two-experiment laboratory check: both branches fully open, fan at full
/// speed, loop at 23 bar.
pub fn two_experiment_validation(plant: &Plant, heater_powers: &BTreeMap<String, f64>) -> Result<SteadyStateReport> {
    solve_steady(
        plant,
        &SteadyInputs {
            flows: FlowSpec::Network { rpm: 21000.0 },
            active_loads: heater_powers.clone(),
            pressure: bar(23.0),
        },
        &SteadyOptions::default(),
    )
}

/// Two steady states of one experiment at different heater powers, with the
/// mass flows of the first state held fixed for the second.
pub fn synthesize_heater_step(
    plant: &Plant,
    inputs: &SteadyInputs,
    experiment: &str,
    power_after: f64,
) -> Result<crate::analysis::HeaterStepRecord> {
    let before = solve_steady(plant, inputs, &SteadyOptions::default())?;
    let mut frozen = BTreeMap::new();
    for x in plant.topology.experiments() {
        frozen.insert(x.id.clone(), before.flow.mass_flow[x.sink]);
    }
    let mut after_inputs = inputs.clone();
    after_inputs.flows = FlowSpec::Prescribed(frozen);
    after_inputs.active_loads.insert(experiment.to_string(), power_after);
    let after = solve_steady(plant, &after_inputs, &SteadyOptions::default())?;
    let b = before
        .sink(experiment)
        .ok_or_else(|| Error::NotFound(format!("experiment `{experiment}`")))?;
    let a = after.sink(experiment).expect("same plant");
    Ok(crate::analysis::HeaterStepRecord {
        power_before: b.active,
        power_after: a.active,
        inlet_before: b.inlet,
        inlet_after: a.inlet,
        outlet_before: b.outlet,
        outlet_after: a.outlet,
        gas: before.fan_intake,
    })
}
