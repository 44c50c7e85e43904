//! Parameterized models of the plant elements: cold heads and their capacity
//! curves, the circulating fan, transfer lines, valves, heat sinks and the
//! relief valve.
//!
//! All quantities are SI. Models are immutable values once built; evaluation
//! is pure.

use serde::Serialize;

use crate::error::{Error, Result};

/// Room temperature of the laboratory and of the top-up supply, K.
pub const AMBIENT_TEMPERATURE: f64 = 295.0;

/// Cooling power versus cold-head temperature, piecewise linear through a set
/// of anchors.
///
/// Below the first anchor the curve delivers nothing; above the last anchor it
/// extrapolates the final segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityCurve {
    anchors: Vec<(f64, f64)>,
}

impl CapacityCurve {
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::domain("a capacity curve needs at least two anchors"));
        }
        for &(t, q) in &anchors {
            if !(t.is_finite() && q.is_finite() && t > 0.0 && q >= 0.0) {
                return Err(Error::domain(format!("invalid capacity anchor ({t} K, {q} W)")));
            }
        }
        for pair in anchors.windows(2) {
            let ((t0, q0), (t1, q1)) = (pair[0], pair[1]);
            if t1 <= t0 {
                return Err(Error::domain(
                    "capacity anchor temperatures must be strictly increasing",
                ));
            }
            if q1 < q0 {
                return Err(Error::domain("capacity anchor powers must be non-decreasing"));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn min_temperature(&self) -> f64 {
        self.anchors[0].0
    }

    pub fn evaluate(&self, temperature: f64) -> f64 {
        let first = self.anchors[0];
        if temperature < first.0 {
            return 0.0;
        }
        let segment = self
            .anchors
            .windows(2)
            .find(|w| temperature <= w[1].0)
            .unwrap_or(&self.anchors[self.anchors.len() - 2..]);
        let ((t0, q0), (t1, q1)) = (segment[0], segment[1]);
        q0 + (q1 - q0) * (temperature - t0) / (t1 - t0)
    }

    /// Lowest temperature at which the curve delivers `load`.
    pub fn inverse(&self, load: f64) -> Result<f64> {
        if !(load >= 0.0) {
            return Err(Error::domain(format!("load must be non-negative, got {load}")));
        }
        let first = self.anchors[0];
        if load <= first.1 {
            return Ok(first.0);
        }
        for w in self.anchors.windows(2) {
            let ((t0, q0), (t1, q1)) = (w[0], w[1]);
            if load <= q1 && q1 > q0 {
                return Ok(t0 + (load - q0) * (t1 - t0) / (q1 - q0));
            }
        }
        let n = self.anchors.len();
        let ((t0, q0), (t1, q1)) = (self.anchors[n - 2], self.anchors[n - 1]);
        if q1 <= q0 {
            return Err(Error::domain(format!(
                "load {load} W is beyond the flat end of the capacity curve"
            )));
        }
        Ok(t1 + (load - q1) * (t1 - t0) / (q1 - q0))
    }
}

/// One cold head with the gas heat exchanger brazed to it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CryocoolerModel {
    pub curve: CapacityCurve,
    /// No-load temperature of the cold head, K.
    pub base_temperature: f64,
    /// Cold head to gas resistance, K/W.
    pub heat_exchanger_resistance: f64,
    /// Quadratic flow resistance of the exchanger passage, Pa/(m³/s)².
    pub flow_resistance: f64,
    /// Heat capacity of cold head and exchanger at room temperature, J/K.
    pub thermal_capacity: f64,
    pub internal_volume: f64,
}

impl CryocoolerModel {
    pub fn new(curve: CapacityCurve, base_temperature: f64, heat_exchanger_resistance: f64) -> Result<Self> {
        if !(base_temperature > 0.0) {
            return Err(Error::domain("cold head base temperature must be positive"));
        }
        if !(heat_exchanger_resistance >= 0.0) {
            return Err(Error::domain("heat exchanger resistance must be non-negative"));
        }
        Ok(Self {
            curve,
            base_temperature,
            heat_exchanger_resistance,
            flow_resistance: 0.0,
            thermal_capacity: 0.0,
            internal_volume: 0.0,
        })
    }
}

/// Cooling power the cold head delivers at `cold_head_temperature`.
pub fn cooling_power_at(model: &CryocoolerModel, cold_head_temperature: f64) -> f64 {
    if cold_head_temperature <= model.base_temperature {
        0.0
    } else {
        model.curve.evaluate(cold_head_temperature)
    }
}

/// Cold-head temperature at which the cooler absorbs exactly `load`.
pub fn cold_head_temperature_for_load(model: &CryocoolerModel, load: f64) -> Result<f64> {
    if !(load >= 0.0) {
        return Err(Error::domain(format!("load must be non-negative, got {load}")));
    }
    if load == 0.0 {
        return Ok(model.base_temperature);
    }
    Ok(model.curve.inverse(load)?.max(model.base_temperature))
}

/// Centrifugal circulator with a quadratic head curve and affinity scaling.
///
/// `head(n, V) = H0·(n/n_ref)² − k·V²`, where the shut-off head `H0` is
/// `shutoff_head_ratio` times the head at the reference operating point and
/// `k` follows from that point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CryofanModel {
    pub reference_rpm: f64,
    /// Head at the reference operating point, Pa.
    pub reference_head: f64,
    /// Volume flow at the reference operating point, m³/s.
    pub reference_flow: f64,
    pub min_rpm: f64,
    pub max_rpm: f64,
    pub shutoff_head_ratio: f64,
}

impl CryofanModel {
    pub fn new(reference_rpm: f64, reference_head: f64, reference_flow: f64) -> Result<Self> {
        let fan = Self {
            reference_rpm,
            reference_head,
            reference_flow,
            min_rpm: 6000.0,
            max_rpm: 21000.0,
            shutoff_head_ratio: 4.0,
        };
        fan.validate()?;
        Ok(fan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reference_rpm > 0.0 && self.reference_head > 0.0 && self.reference_flow > 0.0) {
            return Err(Error::domain("fan reference point must be positive"));
        }
        if !(self.min_rpm > 0.0 && self.max_rpm >= self.min_rpm) {
            return Err(Error::domain("fan rpm limits must satisfy 0 < min <= max"));
        }
        if !(self.shutoff_head_ratio > 1.0) {
            return Err(Error::domain("fan shut-off head ratio must exceed 1"));
        }
        Ok(())
    }

    /// Shut-off head at the reference speed, Pa.
    pub fn shutoff_head(&self) -> f64 {
        self.shutoff_head_ratio * self.reference_head
    }

    /// Internal loss coefficient k, Pa/(m³/s)².
    pub fn internal_coefficient(&self) -> f64 {
        (self.shutoff_head_ratio - 1.0) * self.reference_head / (self.reference_flow * self.reference_flow)
    }

    /// Clamps `rpm` to the operating envelope; the flag is set when clamping happened.
    pub fn clamp_rpm(&self, rpm: f64) -> (f64, bool) {
        let clamped = rpm.clamp(self.min_rpm, self.max_rpm);
        (clamped, clamped != rpm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanHead {
    pub head: f64,
    pub rpm: f64,
    pub rpm_clamped: bool,
}

pub fn fan_head(model: &CryofanModel, rpm: f64, volume_flow: f64) -> FanHead {
    let (rpm, rpm_clamped) = model.clamp_rpm(rpm);
    let speed = rpm / model.reference_rpm;
    let head = model.shutoff_head() * speed * speed - model.internal_coefficient() * volume_flow * volume_flow;
    FanHead {
        head: head.max(0.0),
        rpm,
        rpm_clamped,
    }
}

/// Vacuum-jacketed transfer line section.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSegment {
    pub length: f64,
    /// Radiative and conductive leak per meter, W/m.
    pub passive_leak_per_meter: f64,
    /// Leak from fittings, bayonets and vacuum barriers on this section, W.
    pub lumped_leak: f64,
    /// Pa/(m³/s)².
    pub flow_resistance_coefficient: f64,
    pub internal_volume: f64,
    /// Heat capacity at room temperature, J/K.
    pub thermal_capacity: f64,
}

impl LineSegment {
    pub fn new(length: f64) -> Self {
        Self {
            length,
            passive_leak_per_meter: 0.2,
            lumped_leak: 0.0,
            flow_resistance_coefficient: 0.0,
            internal_volume: 0.0,
            thermal_capacity: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.length,
            self.passive_leak_per_meter,
            self.lumped_leak,
            self.flow_resistance_coefficient,
            self.internal_volume,
            self.thermal_capacity,
        ];
        if fields.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::domain("line segment parameters must be non-negative"))
        }
    }
}

/// Nominal leak into a cold line section, W.
pub fn passive_leak(segment: &LineSegment) -> f64 {
    segment.length * segment.passive_leak_per_meter + segment.lumped_leak
}

/// Steady conduction through a thermal resistance, W. Negative when heat flows
/// from `cold` to `hot`.
pub fn conduction_leak(resistance: f64, hot: f64, cold: f64) -> Result<f64> {
    if !(resistance > 0.0) {
        return Err(Error::domain(format!(
            "thermal resistance must be positive, got {resistance}"
        )));
    }
    Ok((hot - cold) / resistance)
}

/// Temperature band below ambient over which line leaks fade out, K.
pub const LEAK_TAPER: f64 = 20.0;

/// Leak actually absorbed by a section at `temperature` whose nominal cold
/// leak is `nominal`.
///
/// Constant for cold sections; fades linearly to zero at ambient and reverses
/// sign above it, so a warm stagnant section relaxes to room temperature.
pub fn leak_at_temperature(nominal: f64, temperature: f64) -> f64 {
    let drive = (AMBIENT_TEMPERATURE - temperature) / LEAK_TAPER;
    nominal * drive.min(1.0)
}

/// Manual cryogenic valve with an inverse-quadratic characteristic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValveModel {
    pub opening: f64,
    pub full_open_resistance: f64,
}

impl ValveModel {
    pub fn new(opening: f64, full_open_resistance: f64) -> Result<Self> {
        check_opening(opening)?;
        if !(full_open_resistance > 0.0 && full_open_resistance.is_finite()) {
            return Err(Error::domain("valve full-open resistance must be positive"));
        }
        Ok(Self {
            opening,
            full_open_resistance,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.opening <= 0.0
    }

    /// Flow resistance at the current opening; `None` when shut.
    pub fn resistance(&self) -> Option<f64> {
        (!self.is_closed()).then(|| self.full_open_resistance / (self.opening * self.opening))
    }
}

pub(crate) fn check_opening(opening: f64) -> Result<()> {
    if (0.0..=1.0).contains(&opening) {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "valve opening must lie in [0, 1], got {opening}"
        )))
    }
}

/// Jet-impingement heat sink at an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatSinkModel {
    /// Contact conductance per unit area, W/(K·cm²).
    pub contact_conductance_per_area: f64,
    /// cm².
    pub contact_area: f64,
    /// Continuous heater rating, W.
    pub heater_max_power: f64,
    /// Support structure resistance to the room-temperature chamber, K/W.
    /// `None` when the experiment has no such structure.
    pub support_resistance_to_ambient: Option<f64>,
    pub flow_resistance: f64,
    pub thermal_capacity: f64,
    pub internal_volume: f64,
}

impl HeatSinkModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.contact_conductance_per_area,
            self.contact_area,
            self.heater_max_power,
        ];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::domain(
                "heat sink contact and heater parameters must be positive",
            ));
        }
        if let Some(r) = self.support_resistance_to_ambient {
            if !(r > 0.0) {
                return Err(Error::domain("support structure resistance must be positive"));
            }
        }
        if !(self.flow_resistance >= 0.0 && self.thermal_capacity >= 0.0 && self.internal_volume >= 0.0) {
            return Err(Error::domain("heat sink flow/thermal parameters must be non-negative"));
        }
        Ok(())
    }

    /// Chip-to-sink contact resistance, K/W.
    pub fn contact_resistance(&self) -> f64 {
        1.0 / (self.contact_conductance_per_area * self.contact_area)
    }

    /// Conduction from the chamber into the sink when the sink sits at
    /// `temperature`, W.
    pub fn support_leak(&self, temperature: f64) -> f64 {
        self.support_resistance_to_ambient
            .map_or(0.0, |r| (AMBIENT_TEMPERATURE - temperature) / r)
    }
}

/// Spring-loaded relief valve with blow-down to the reseat pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliefValveModel {
    pub set_pressure: f64,
    pub reseat_pressure: f64,
}

impl ReliefValveModel {
    pub fn new(set_pressure: f64, reseat_pressure: f64) -> Result<Self> {
        if !(set_pressure > 0.0 && reseat_pressure > 0.0 && reseat_pressure < set_pressure) {
            return Err(Error::domain(
                "relief valve requires 0 < reseat pressure < set pressure",
            ));
        }
        Ok(Self {
            set_pressure,
            reseat_pressure,
        })
    }
}

/// Ratio of the heat capacity at `temperature` to its room-temperature value
/// for a copper/steel assembly, a smooth stand-in for the Debye T³ fall-off.
pub fn heat_capacity_factor(temperature: f64) -> f64 {
    const KNEE: f64 = 70.0;
    let shape = |t: f64| {
        let x = (t / KNEE).powi(3);
        x / (1.0 + x)
    };
    shape(temperature.max(0.0)) / shape(300.0)
}

/// One element of the circulation loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Fan(CryofanModel),
    Cooler(CryocoolerModel),
    Line(LineSegment),
    Valve(ValveModel),
    HeatSink(HeatSinkModel),
}

impl Component {
    /// Quadratic flow resistance, Pa/(m³/s)². `None` means the element blocks flow.
    pub fn flow_resistance(&self) -> Option<f64> {
        match self {
            Component::Fan(_) => Some(0.0),
            Component::Cooler(c) => Some(c.flow_resistance),
            Component::Line(l) => Some(l.flow_resistance_coefficient),
            Component::Valve(v) => v.resistance(),
            Component::HeatSink(h) => Some(h.flow_resistance),
        }
    }

    pub fn thermal_capacity(&self) -> f64 {
        match self {
            Component::Fan(_) | Component::Valve(_) => 0.0,
            Component::Cooler(c) => c.thermal_capacity,
            Component::Line(l) => l.thermal_capacity,
            Component::HeatSink(h) => h.thermal_capacity,
        }
    }

    pub fn internal_volume(&self) -> f64 {
        match self {
            Component::Fan(_) | Component::Valve(_) => 0.0,
            Component::Cooler(c) => c.internal_volume,
            Component::Line(l) => l.internal_volume,
            Component::HeatSink(h) => h.internal_volume,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Component::Fan(_) => "fan",
            Component::Cooler(_) => "cooler",
            Component::Line(_) => "line",
            Component::Valve(_) => "valve",
            Component::HeatSink(_) => "heat_sink",
        }
    }
}
