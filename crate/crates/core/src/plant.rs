//! A plant is a topology plus its instrumentation, relief valve and fill
//! point. This module also builds the reference laboratory plant: two cold
//! heads in parallel, the fan, vacuum-jacketed trunks and one to four
//! experiment branches in parallel.

use serde::{Deserialize, Serialize};

use crate::components::{
    leak_at_temperature, passive_leak, CapacityCurve, Component, CryocoolerModel, CryofanModel, HeatSinkModel,
    LineSegment, ReliefValveModel, ValveModel, AMBIENT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::network::{Edge, NetworkTopology};
use crate::units::{bar, m3_per_hour};

/// Where a temperature sensor reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", content = "edge", rename_all = "snake_case")]
pub enum SensorLocation {
    /// Cold head of a cooler edge.
    ColdHead(String),
    /// Gas entering an edge.
    Inlet(String),
    /// Gas leaving an edge.
    Outlet(String),
    /// Chip side of a heat sink contact.
    SinkMetal(String),
}

impl SensorLocation {
    pub fn edge(&self) -> &str {
        match self {
            SensorLocation::ColdHead(e)
            | SensorLocation::Inlet(e)
            | SensorLocation::Outlet(e)
            | SensorLocation::SinkMetal(e) => e,
        }
    }
}

/// Sensor names the telemetry schema knows about.
pub const SENSOR_NAMES: [&str; 12] = [
    "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8", "T9", "T10", "T11", "T12",
];

/// Position name of a reference-plant sensor, as used in sensor tables.
pub fn sensor_position(name: &str) -> Option<&'static str> {
    Some(match name {
        "T1" => "Cryocooler 1",
        "T2" => "Cryocooler 2",
        "T3" => "Fan intake",
        "T4" => "Cryostat outlet",
        "T5" => "Cryostat inlet",
        "T6" => "Exp 1 heat sink",
        "T7" => "Exp 2 inlet",
        "T8" => "Exp 2 outlet",
        "T9" => "Merge inlet",
        "T10" => "Merge outlet",
        "T11" => "Exp 1 inlet",
        "T12" => "Exp 1 outlet",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub name: String,
    pub location: SensorLocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub topology: NetworkTopology,
    pub sensors: Vec<Sensor>,
    pub relief: ReliefValveModel,
    /// Edge whose volume receives top-up gas.
    pub fill_edge: usize,
    /// Room-temperature gas volume connected to the loop outside the flow
    /// path (fill manifold, gauge and relief lines), m³.
    pub warm_volume: f64,
}

impl Plant {
    pub fn new(
        topology: NetworkTopology,
        sensors: Vec<Sensor>,
        relief: ReliefValveModel,
        fill_edge: &str,
    ) -> Result<Self> {
        for s in &sensors {
            if !SENSOR_NAMES.contains(&s.name.as_str()) {
                return Err(Error::Topology(format!(
                    "unknown sensor name `{}` (expected T1..T12)",
                    s.name
                )));
            }
            let idx = topology.edge_index(s.location.edge())?;
            let component = &topology.edge(idx).component;
            let ok = match &s.location {
                SensorLocation::ColdHead(_) => matches!(component, Component::Cooler(_)),
                SensorLocation::SinkMetal(_) => matches!(component, Component::HeatSink(_)),
                _ => true,
            };
            if !ok {
                return Err(Error::Topology(format!(
                    "sensor {} cannot read {:?} on a {} edge",
                    s.name,
                    s.location,
                    component.kind_name()
                )));
            }
        }
        for (i, s) in sensors.iter().enumerate() {
            if sensors[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Topology(format!("sensor {} is declared twice", s.name)));
            }
        }
        let fill_edge = topology.edge_index(fill_edge)?;
        if topology.edge(fill_edge).component.internal_volume() <= 0.0 {
            return Err(Error::Topology("the fill edge must have a gas volume".into()));
        }
        Ok(Self {
            topology,
            sensors,
            relief,
            fill_edge,
            warm_volume: 0.0,
        })
    }

    pub fn experiment_ids(&self) -> Vec<String> {
        self.topology.experiments().iter().map(|x| x.id.clone()).collect()
    }

    /// Experiment id for a 1-based experiment number.
    pub fn experiment_id(&self, number: usize) -> Result<&str> {
        number
            .checked_sub(1)
            .and_then(|i| self.topology.experiments().get(i))
            .map(|x| x.id.as_str())
            .ok_or_else(|| Error::NotFound(format!("experiment {number}")))
    }

    pub fn coolers(&self) -> impl Iterator<Item = (usize, &CryocoolerModel)> {
        self.topology
            .edges()
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match &e.component {
                Component::Cooler(c) => Some((i, c)),
                _ => None,
            })
    }
}

/// Heat absorbed by the gas in an edge whose contents sit at `temperature`, W.
/// Coolers return a negative value.
pub fn gas_heat(component: &Component, temperature: f64, active: f64) -> f64 {
    match component {
        Component::Line(l) => leak_at_temperature(passive_leak(l), temperature),
        Component::HeatSink(h) => active + h.support_leak(temperature),
        Component::Cooler(c) => -cooler_state(c, temperature).1,
        Component::Fan(_) | Component::Valve(_) => 0.0,
    }
}

/// Cold-head temperature and absorbed load for gas leaving the exchanger at
/// `gas_temperature`.
pub fn cooler_state(model: &CryocoolerModel, gas_temperature: f64) -> (f64, f64) {
    let load = |t: f64| crate::components::cooling_power_at(model, t);
    let r = model.heat_exchanger_resistance;
    if gas_temperature <= model.base_temperature {
        return (gas_temperature, 0.0);
    }
    if r == 0.0 {
        return (gas_temperature, load(gas_temperature));
    }
    // t + r·Q(t) is strictly increasing; bisect for the cold head.
    let (mut lo, mut hi) = (model.base_temperature, gas_temperature);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + r * load(mid) > gas_temperature {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    let t = 0.5 * (lo + hi);
    (t, load(t))
}

/// Anchor tables are `[temperature K, power W]` pairs.
pub type AnchorTable = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityTable {
    pub cooler: f64,
    pub intake_hose: f64,
    pub cryostat: f64,
    pub trunk: f64,
    pub leg: f64,
    pub heat_sink: f64,
}

impl Default for CapacityTable {
    fn default() -> Self {
        Self {
            cooler: 300.0,
            intake_hose: 200.0,
            cryostat: 400.0,
            trunk: 400.0,
            leg: 300.0,
            heat_sink: 400.0,
        }
    }
}

/// Gas volumes, litres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeTable {
    pub cooler: f64,
    pub intake_hose: f64,
    pub cryostat: f64,
    pub trunk: f64,
    pub leg: f64,
    pub heat_sink: f64,
}

impl Default for VolumeTable {
    fn default() -> Self {
        Self {
            cooler: 0.5,
            intake_hose: 0.2,
            cryostat: 1.0,
            trunk: 0.75,
            leg: 0.15,
            heat_sink: 0.05,
        }
    }
}

/// Parameters of the reference plant, in the units used by scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub experiments: usize,
    pub relief_set_bar: f64,
    pub relief_reseat_bar: f64,
    /// Leak into the cryostat vessel, the supply trunk and the return trunk, W.
    pub cryostat_passive_w: f64,
    /// Fraction of the cryostat leak, after the return trunk's share, taken
    /// up before the gas leaves the vessel.
    pub cryostat_section_share: f64,
    /// Leak into each experiment loop (legs plus support structure), W.
    pub loop_passive_w: Vec<f64>,
    pub support_structure: Vec<bool>,
    /// Sink temperature at which the support-structure conduction is booked
    /// against the loop budget, K.
    pub support_reference_k: f64,
    pub line_leak_w_per_m: f64,
    pub cooler1_curve: AnchorTable,
    pub cooler2_curve: AnchorTable,
    pub cooler_base_k: f64,
    pub heat_exchanger_k_per_w: f64,
    pub fan_reference_rpm: f64,
    pub fan_reference_head_kpa: f64,
    pub fan_reference_flow_m3h: f64,
    pub fan_shutoff_head_ratio: f64,
    /// Pressure drop of the cooler group, intake hose, cryostat section and
    /// each trunk at the fan reference flow, kPa.
    pub cooler_group_drop_kpa: f64,
    pub intake_hose_drop_kpa: f64,
    pub cryostat_drop_kpa: f64,
    pub trunk_drop_kpa: f64,
    /// Drop across the experiment group when every branch carries its design flow.
    pub experiment_group_drop_kpa: f64,
    pub design_flows_m3h: Vec<f64>,
    pub contact_area_cm2: f64,
    pub contact_conductance_w_per_k_cm2: f64,
    pub heater_max_w: f64,
    pub support_resistance_k_per_w: f64,
    pub thermal_capacity_j_per_k: CapacityTable,
    pub volume_l: VolumeTable,
    pub fill_edge: String,
    pub warm_volume_l: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            experiments: 2,
            relief_set_bar: 23.0,
            relief_reseat_bar: 22.5,
            cryostat_passive_w: 56.0,
            cryostat_section_share: 0.37,
            loop_passive_w: vec![30.0, 22.0, 30.0, 30.0],
            support_structure: vec![true, false, false, false],
            support_reference_k: 70.0,
            line_leak_w_per_m: 0.2,
            cooler1_curve: vec![[20.0, 0.0], [30.0, 54.0], [51.0, 157.0], [80.0, 214.0]],
            cooler2_curve: vec![[20.0, 0.0], [30.0, 54.0], [55.1, 134.0], [80.0, 182.0]],
            cooler_base_k: 20.0,
            heat_exchanger_k_per_w: 0.0,
            fan_reference_rpm: 21000.0,
            fan_reference_head_kpa: 9.8,
            fan_reference_flow_m3h: 0.40,
            fan_shutoff_head_ratio: 4.0,
            cooler_group_drop_kpa: 0.6,
            intake_hose_drop_kpa: 0.2,
            cryostat_drop_kpa: 0.2,
            trunk_drop_kpa: 2.0,
            experiment_group_drop_kpa: 4.8,
            design_flows_m3h: vec![0.24, 0.16, 0.16, 0.16],
            contact_area_cm2: 10.0,
            contact_conductance_w_per_k_cm2: 1.1,
            heater_max_w: 50.0,
            support_resistance_k_per_w: 146.0,
            thermal_capacity_j_per_k: CapacityTable::default(),
            volume_l: VolumeTable::default(),
            fill_edge: "return_trunk".into(),
            warm_volume_l: 20.0,
        }
    }
}

const CRYOSTAT_LENGTH: f64 = 2.0;
const TRUNK_LENGTH: f64 = 10.0;
const LEG_LENGTH: f64 = 2.0;

fn per_experiment<T: Clone>(values: &[T], n: usize, what: &str) -> Result<Vec<T>> {
    if values.len() < n {
        return Err(Error::domain(format!(
            "{what} lists {} entries for {n} experiments",
            values.len()
        )));
    }
    Ok(values[..n].to_vec())
}

fn curve(table: &AnchorTable) -> Result<CapacityCurve> {
    CapacityCurve::new(table.iter().map(|a| (a[0], a[1])).collect())
}

/// Quadratic coefficient giving `drop_kpa` at `flow_m3h`.
fn coefficient(drop_kpa: f64, flow_m3h: f64) -> f64 {
    let q = m3_per_hour(flow_m3h);
    drop_kpa * 1e3 / (q * q)
}

impl ReferenceConfig {
    pub fn four_experiment() -> Self {
        Self {
            experiments: 4,
            cryostat_passive_w: 60.0,
            loop_passive_w: vec![30.0; 4],
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<Plant> {
        let n = self.experiments;
        if !(1..=4).contains(&n) {
            return Err(Error::domain(format!(
                "the reference plant takes 1 to 4 experiments, got {n}"
            )));
        }
        let loop_passive = per_experiment(&self.loop_passive_w, n, "loop_passive_w")?;
        let support = per_experiment(&self.support_structure, n, "support_structure")?;
        let flows = per_experiment(&self.design_flows_m3h, n, "design_flows_m3h")?;
        let caps = &self.thermal_capacity_j_per_k;
        let vols = &self.volume_l;
        let v_ref = self.fan_reference_flow_m3h;

        let line = |length: f64, leak: f64, drop_kpa: f64, flow: f64, cap: f64, litres: f64| -> Result<Component> {
            let mut seg = LineSegment::new(length);
            seg.passive_leak_per_meter = self.line_leak_w_per_m;
            seg.lumped_leak = leak - length * self.line_leak_w_per_m;
            if seg.lumped_leak < -1e-12 {
                return Err(Error::domain(format!(
                    "a {length} m line cannot carry a {leak} W leak at {} W/m",
                    self.line_leak_w_per_m
                )));
            }
            seg.lumped_leak = seg.lumped_leak.max(0.0);
            seg.flow_resistance_coefficient = if drop_kpa > 0.0 {
                coefficient(drop_kpa, flow)
            } else {
                0.0
            };
            seg.thermal_capacity = cap;
            seg.internal_volume = litres * 1e-3;
            seg.validate()?;
            Ok(Component::Line(seg))
        };

        let mut fan = CryofanModel::new(
            self.fan_reference_rpm,
            self.fan_reference_head_kpa * 1e3,
            m3_per_hour(self.fan_reference_flow_m3h),
        )?;
        fan.shutoff_head_ratio = self.fan_shutoff_head_ratio;
        fan.validate()?;

        let return_trunk_leak = TRUNK_LENGTH * self.line_leak_w_per_m;
        let vessel_leak = self.cryostat_passive_w - return_trunk_leak;
        if vessel_leak < 0.0 || !(0.0..=1.0).contains(&self.cryostat_section_share) {
            return Err(Error::domain(
                "cryostat passive budget is smaller than the return trunk leak",
            ));
        }

        let mut edges = vec![
            Edge::new("fan", "fan_in", "fan_out", Component::Fan(fan)),
            Edge::new(
                "cryostat",
                "fan_out",
                "cryostat_out",
                line(
                    CRYOSTAT_LENGTH,
                    vessel_leak * self.cryostat_section_share,
                    self.cryostat_drop_kpa,
                    v_ref,
                    caps.cryostat,
                    vols.cryostat,
                )?,
            ),
            Edge::new(
                "supply_trunk",
                "cryostat_out",
                "split",
                line(
                    TRUNK_LENGTH,
                    vessel_leak * (1.0 - self.cryostat_section_share),
                    self.trunk_drop_kpa,
                    v_ref,
                    caps.trunk,
                    vols.trunk,
                )?,
            ),
        ];

        for (i, ((&budget, &has_support), &flow)) in loop_passive.iter().zip(&support).zip(&flows).enumerate() {
            let id = format!("exp{}", i + 1);
            let r_branch = coefficient(self.experiment_group_drop_kpa, flow);
            let support_resistance = has_support.then_some(self.support_resistance_k_per_w);
            let support_leak = support_resistance.map_or(0.0, |r| (AMBIENT_TEMPERATURE - self.support_reference_k) / r);
            let leg_leak = (budget - support_leak) / 2.0;
            let valve = |fraction: f64| -> Result<Component> {
                Ok(Component::Valve(ValveModel::new(1.0, fraction * r_branch)?))
            };
            let leg = || -> Result<Component> {
                let c = line(LEG_LENGTH, leg_leak, 0.0, flow, caps.leg, vols.leg)?;
                match c {
                    Component::Line(mut l) => {
                        l.flow_resistance_coefficient = 0.35 * r_branch;
                        Ok(Component::Line(l))
                    }
                    _ => unreachable!(),
                }
            };
            let sink = HeatSinkModel {
                contact_conductance_per_area: self.contact_conductance_w_per_k_cm2,
                contact_area: self.contact_area_cm2,
                heater_max_power: self.heater_max_w,
                support_resistance_to_ambient: support_resistance,
                flow_resistance: 0.10 * r_branch,
                thermal_capacity: caps.heat_sink,
                internal_volume: vols.heat_sink * 1e-3,
            };
            let node = |k: &str| format!("{id}_{k}");
            edges.push(Edge::new(
                format!("{id}_supply_valve"),
                "split",
                node("a"),
                valve(0.10)?,
            ));
            edges.push(Edge::new(format!("{id}_supply_leg"), node("a"), node("b"), leg()?));
            edges.push(Edge::new(id.clone(), node("b"), node("c"), Component::HeatSink(sink)));
            edges.push(Edge::new(format!("{id}_return_leg"), node("c"), node("d"), leg()?));
            edges.push(Edge::new(
                format!("{id}_return_valve"),
                node("d"),
                "merge",
                valve(0.10)?,
            ));
        }

        edges.push(Edge::new(
            "return_trunk",
            "merge",
            "cooler_in",
            line(
                TRUNK_LENGTH,
                return_trunk_leak,
                self.trunk_drop_kpa,
                v_ref,
                caps.trunk,
                vols.trunk,
            )?,
        ));
        for (k, table) in [(1, &self.cooler1_curve), (2, &self.cooler2_curve)] {
            let mut c = CryocoolerModel::new(curve(table)?, self.cooler_base_k, self.heat_exchanger_k_per_w)?;
            // Each cold head carries half the reference flow.
            c.flow_resistance = coefficient(self.cooler_group_drop_kpa, v_ref / 2.0);
            c.thermal_capacity = caps.cooler;
            c.internal_volume = vols.cooler * 1e-3;
            edges.push(Edge::new(
                format!("cooler{k}"),
                "cooler_in",
                "cooler_out",
                Component::Cooler(c),
            ));
        }
        edges.push(Edge::new(
            "intake_hose",
            "cooler_out",
            "fan_in",
            line(
                0.0,
                0.0,
                self.intake_hose_drop_kpa,
                v_ref,
                caps.intake_hose,
                vols.intake_hose,
            )?,
        ));

        let topology = NetworkTopology::new(edges)?;
        let mut sensors = vec![
            sensor("T1", SensorLocation::ColdHead("cooler1".into())),
            sensor("T2", SensorLocation::ColdHead("cooler2".into())),
            sensor("T3", SensorLocation::Outlet("intake_hose".into())),
            sensor("T4", SensorLocation::Outlet("cryostat".into())),
            sensor("T5", SensorLocation::Outlet("return_trunk".into())),
            sensor("T6", SensorLocation::SinkMetal("exp1".into())),
            sensor("T9", SensorLocation::Outlet("supply_trunk".into())),
            sensor("T10", SensorLocation::Outlet("exp1_return_valve".into())),
            sensor("T11", SensorLocation::Inlet("exp1".into())),
            sensor("T12", SensorLocation::Outlet("exp1".into())),
        ];
        if n >= 2 {
            sensors.push(sensor("T7", SensorLocation::Inlet("exp2".into())));
            sensors.push(sensor("T8", SensorLocation::Outlet("exp2".into())));
        }
        let relief = ReliefValveModel::new(bar(self.relief_set_bar), bar(self.relief_reseat_bar))?;
        if !(self.warm_volume_l >= 0.0) {
            return Err(Error::domain("warm_volume_l must be non-negative"));
        }
        let mut plant = Plant::new(topology, sensors, relief, &self.fill_edge)?;
        plant.warm_volume = self.warm_volume_l * 1e-3;
        Ok(plant)
    }
}

fn sensor(name: &str, location: SensorLocation) -> Sensor {
    Sensor {
        name: name.into(),
        location,
    }
}

/// Flow resistance given as a pressure drop at a reference flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropSpec {
    pub pressure_drop_kpa: f64,
    pub at_flow_m3h: f64,
}

impl DropSpec {
    fn coefficient(&self) -> Result<f64> {
        if self.pressure_drop_kpa == 0.0 {
            return Ok(0.0);
        }
        if !(self.pressure_drop_kpa > 0.0 && self.at_flow_m3h > 0.0) {
            return Err(Error::domain("pressure drops need a positive drop and reference flow"));
        }
        Ok(coefficient(self.pressure_drop_kpa, self.at_flow_m3h))
    }
}

/// One edge of a user-declared plant, in engineering units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EdgeSpec {
    Fan {
        id: String,
        from: String,
        to: String,
        reference_rpm: f64,
        reference_head_kpa: f64,
        reference_flow_m3h: f64,
        #[serde(default = "default_shutoff_ratio")]
        shutoff_head_ratio: f64,
    },
    Cooler {
        id: String,
        from: String,
        to: String,
        curve: AnchorTable,
        base_k: f64,
        #[serde(default)]
        heat_exchanger_k_per_w: f64,
        #[serde(default)]
        drop: DropSpec,
        #[serde(default)]
        capacity_j_per_k: f64,
        #[serde(default)]
        volume_l: f64,
    },
    Line {
        id: String,
        from: String,
        to: String,
        length_m: f64,
        #[serde(default)]
        leak_w_per_m: f64,
        #[serde(default)]
        lumped_leak_w: f64,
        #[serde(default)]
        drop: DropSpec,
        #[serde(default)]
        capacity_j_per_k: f64,
        #[serde(default)]
        volume_l: f64,
    },
    Valve {
        id: String,
        from: String,
        to: String,
        #[serde(default = "default_opening")]
        opening: f64,
        drop: DropSpec,
    },
    HeatSink {
        id: String,
        from: String,
        to: String,
        contact_conductance_w_per_k_cm2: f64,
        contact_area_cm2: f64,
        heater_max_w: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support_resistance_k_per_w: Option<f64>,
        #[serde(default)]
        drop: DropSpec,
        #[serde(default)]
        capacity_j_per_k: f64,
        #[serde(default)]
        volume_l: f64,
    },
}

fn default_shutoff_ratio() -> f64 {
    4.0
}

fn default_opening() -> f64 {
    1.0
}

impl EdgeSpec {
    fn build(&self) -> Result<Edge> {
        let edge = |id: &str, from: &str, to: &str, c: Component| Ok(Edge::new(id, from, to, c));
        match self {
            EdgeSpec::Fan {
                id,
                from,
                to,
                reference_rpm,
                reference_head_kpa,
                reference_flow_m3h,
                shutoff_head_ratio,
            } => {
                let mut fan = CryofanModel::new(
                    *reference_rpm,
                    reference_head_kpa * 1e3,
                    m3_per_hour(*reference_flow_m3h),
                )?;
                fan.shutoff_head_ratio = *shutoff_head_ratio;
                fan.validate()?;
                edge(id, from, to, Component::Fan(fan))
            }
            EdgeSpec::Cooler {
                id,
                from,
                to,
                curve: table,
                base_k,
                heat_exchanger_k_per_w,
                drop,
                capacity_j_per_k,
                volume_l,
            } => {
                let mut c = CryocoolerModel::new(curve(table)?, *base_k, *heat_exchanger_k_per_w)?;
                c.flow_resistance = drop.coefficient()?;
                c.thermal_capacity = non_negative("capacity_j_per_k", *capacity_j_per_k)?;
                c.internal_volume = non_negative("volume_l", *volume_l)? * 1e-3;
                edge(id, from, to, Component::Cooler(c))
            }
            EdgeSpec::Line {
                id,
                from,
                to,
                length_m,
                leak_w_per_m,
                lumped_leak_w,
                drop,
                capacity_j_per_k,
                volume_l,
            } => {
                let mut l = LineSegment::new(*length_m);
                l.passive_leak_per_meter = *leak_w_per_m;
                l.lumped_leak = *lumped_leak_w;
                l.flow_resistance_coefficient = drop.coefficient()?;
                l.thermal_capacity = *capacity_j_per_k;
                l.internal_volume = volume_l * 1e-3;
                l.validate()?;
                edge(id, from, to, Component::Line(l))
            }
            EdgeSpec::Valve {
                id,
                from,
                to,
                opening,
                drop,
            } => edge(
                id,
                from,
                to,
                Component::Valve(ValveModel::new(*opening, drop.coefficient()?)?),
            ),
            EdgeSpec::HeatSink {
                id,
                from,
                to,
                contact_conductance_w_per_k_cm2,
                contact_area_cm2,
                heater_max_w,
                support_resistance_k_per_w,
                drop,
                capacity_j_per_k,
                volume_l,
            } => {
                let h = HeatSinkModel {
                    contact_conductance_per_area: *contact_conductance_w_per_k_cm2,
                    contact_area: *contact_area_cm2,
                    heater_max_power: *heater_max_w,
                    support_resistance_to_ambient: *support_resistance_k_per_w,
                    flow_resistance: drop.coefficient()?,
                    thermal_capacity: non_negative("capacity_j_per_k", *capacity_j_per_k)?,
                    internal_volume: non_negative("volume_l", *volume_l)? * 1e-3,
                };
                h.validate()?;
                edge(id, from, to, Component::HeatSink(h))
            }
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::domain(format!("{name} must be non-negative, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorAt {
    ColdHead,
    Inlet,
    Outlet,
    SinkMetal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub name: String,
    pub at: SensorAt,
    pub edge: String,
}

impl SensorSpec {
    fn location(&self) -> SensorLocation {
        let e = self.edge.clone();
        match self.at {
            SensorAt::ColdHead => SensorLocation::ColdHead(e),
            SensorAt::Inlet => SensorLocation::Inlet(e),
            SensorAt::Outlet => SensorLocation::Outlet(e),
            SensorAt::SinkMetal => SensorLocation::SinkMetal(e),
        }
    }
}

/// A plant declared edge by edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPlant {
    pub relief_set_bar: f64,
    pub relief_reseat_bar: f64,
    pub fill_edge: String,
    #[serde(default)]
    pub warm_volume_l: f64,
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
}

impl CustomPlant {
    pub fn build(&self) -> Result<Plant> {
        let edges = self.edges.iter().map(EdgeSpec::build).collect::<Result<Vec<_>>>()?;
        let topology = NetworkTopology::new(edges)?;
        let sensors = self
            .sensors
            .iter()
            .map(|s| Sensor {
                name: s.name.clone(),
                location: s.location(),
            })
            .collect();
        let relief = ReliefValveModel::new(bar(self.relief_set_bar), bar(self.relief_reseat_bar))?;
        let mut plant = Plant::new(topology, sensors, relief, &self.fill_edge)?;
        plant.warm_volume = non_negative("warm_volume_l", self.warm_volume_l)? * 1e-3;
        Ok(plant)
    }
}

/// Plant section of a scenario: the built-in reference layout or a custom one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)] // built once per scenario
pub enum PlantSpec {
    Reference(ReferenceConfig),
    Custom(CustomPlant),
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec::Reference(ReferenceConfig::default())
    }
}

impl PlantSpec {
    pub fn build(&self) -> Result<Plant> {
        match self {
            PlantSpec::Reference(r) => r.build(),
            PlantSpec::Custom(c) => c.build(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::cooling_power_at;
    use crate::gasprops::GasState;
    use crate::network::{solve_flow, Stage};
    use crate::units::to_m3_per_hour;
    use approx::assert_relative_eq;

    #[test]
    fn reference_plant_shape() {
        for n in 1..=4 {
            let plant = ReferenceConfig {
                experiments: n,
                ..ReferenceConfig::default()
            }
            .build()
            .unwrap();
            assert_eq!(plant.topology.experiments().len(), n);
            assert_eq!(plant.coolers().count(), 2);
        }
        let plant = ReferenceConfig::default().build().unwrap();
        let groups = plant
            .topology
            .stages()
            .iter()
            .filter(|s| matches!(s, Stage::Parallel(_)))
            .count();
        assert_eq!(groups, 2);
        assert_eq!(plant.sensors.len(), 12);
    }

    #[test]
    fn default_curves_sum_to_rating() {
        let plant = ReferenceConfig::default().build().unwrap();
        let total: f64 = plant.coolers().map(|(_, c)| cooling_power_at(c, 80.0)).sum();
        assert_relative_eq!(total, 396.0, max_relative = 1e-12);
        let base: f64 = plant.coolers().map(|(_, c)| cooling_power_at(c, 20.0)).sum();
        assert_eq!(base, 0.0);
    }

    #[test]
    fn calibrated_split_at_full_speed() {
        let plant = ReferenceConfig::default().build().unwrap();
        let gas = GasState::new(bar(20.0), 35.0).unwrap();
        let s = solve_flow(&plant.topology, 21000.0, &gas).unwrap();
        let t = &plant.topology;
        assert_relative_eq!(to_m3_per_hour(s.total_volume_flow()), 0.40, max_relative = 1e-9);
        assert_relative_eq!(
            to_m3_per_hour(s.volume_flow[t.edge_index("exp1").unwrap()]),
            0.24,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            to_m3_per_hour(s.volume_flow[t.edge_index("exp2").unwrap()]),
            0.16,
            max_relative = 1e-9
        );
        assert_relative_eq!(s.fan.head, 9800.0, max_relative = 1e-9);
    }

    #[test]
    fn passive_budget_is_distributed() {
        let plant = ReferenceConfig::four_experiment().build().unwrap();
        let leak: f64 = plant
            .topology
            .edges()
            .iter()
            .map(|e| gas_heat(&e.component, 70.0, 0.0))
            .filter(|q| *q > 0.0)
            .sum();
        // 60 W cryostat plus four 30 W loops, support booked at 70 K
        assert_relative_eq!(leak, 180.0, max_relative = 1e-12);
    }

    #[test]
    fn bad_plants_are_rejected() {
        assert!(ReferenceConfig {
            experiments: 5,
            ..ReferenceConfig::default()
        }
        .build()
        .is_err());
        assert!(ReferenceConfig {
            cryostat_passive_w: 1.0,
            ..ReferenceConfig::default()
        }
        .build()
        .is_err());
        assert!(ReferenceConfig {
            fill_edge: "nowhere".into(),
            ..ReferenceConfig::default()
        }
        .build()
        .is_err());
    }
}
