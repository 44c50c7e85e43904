//! Helium properties: ideal-gas density and a constant isobaric specific heat.
//!
//! Every function takes `(temperature, pressure)` so a tabulated real-gas
//! model can replace these without touching callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Molar mass of helium-4, kg/mol.
pub const MOLAR_MASS: f64 = 4.0026e-3;
/// Molar gas constant, J/(mol·K).
pub const GAS_CONSTANT: f64 = 8.314462618;
/// Specific gas constant R/M, J/(kg·K).
pub const SPECIFIC_GAS_CONSTANT: f64 = GAS_CONSTANT / MOLAR_MASS;
/// Isobaric specific heat of helium gas, J/(kg·K).
pub const SPECIFIC_HEAT: f64 = 5517.0;

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Ideal-gas density P·M/(R·T), kg/m³.
pub fn density(pressure: f64, temperature: f64) -> Result<f64> {
    check_positive("pressure", pressure)?;
    check_positive("temperature", temperature)?;
    Ok(pressure * MOLAR_MASS / (GAS_CONSTANT * temperature))
}

/// Isobaric specific heat, J/(kg·K). Constant over the operating range.
pub fn specific_heat(temperature: f64, pressure: f64) -> Result<f64> {
    check_positive("temperature", temperature)?;
    check_positive("pressure", pressure)?;
    Ok(SPECIFIC_HEAT)
}

/// Thermodynamic state of the gas at one location in the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasState {
    pub pressure: f64,
    pub temperature: f64,
    pub density: f64,
    pub cp: f64,
}

impl GasState {
    pub fn new(pressure: f64, temperature: f64) -> Result<Self> {
        Ok(Self {
            pressure,
            temperature,
            density: density(pressure, temperature)?,
            cp: specific_heat(temperature, pressure)?,
        })
    }
}

/// Converts a volume flow (m³/s) at `state` into a mass flow (kg/s).
pub fn mass_flow_from_volume_flow(volume_flow: f64, state: &GasState) -> Result<f64> {
    if !(volume_flow >= 0.0) {
        return Err(Error::domain(format!(
            "volume flow must be non-negative, got {volume_flow}"
        )));
    }
    Ok(volume_flow * state.density)
}

/// Gas mass held in `volume` (m³) at the given state, kg.
pub fn gas_mass(volume: f64, pressure: f64, temperature: f64) -> f64 {
    pressure * volume / (SPECIFIC_GAS_CONSTANT * temperature)
}
