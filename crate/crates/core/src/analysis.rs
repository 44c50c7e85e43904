//! Inference from measurements: flows from temperature rises, passive load
//! decomposition across configurations, total load from cold-head
//! temperatures, and the temperature factor of the ion heating rate.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::components::{cooling_power_at, CryocoolerModel};
use crate::error::{Error, Result};
use crate::gasprops::GasState;

/// Parameters of `ṅ ∝ 1 + (T/T0)^β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatingRateParams {
    pub activation_temperature: f64,
    pub exponent: f64,
}

impl HeatingRateParams {
    pub fn new(activation_temperature: f64, exponent: f64) -> Result<Self> {
        if !(activation_temperature > 0.0 && exponent > 0.0) {
            return Err(Error::domain("activation temperature and exponent must be positive"));
        }
        Ok(Self {
            activation_temperature,
            exponent,
        })
    }
}

/// Heating rate relative to its zero-temperature value.
pub fn heating_rate_factor(params: &HeatingRateParams, temperature: f64) -> f64 {
    1.0 + (temperature / params.activation_temperature).powf(params.exponent)
}

/// Volume flow that carries `total_load` across a rise of `delta_t`.
pub fn total_volume_flow(total_load: f64, gas: &GasState, delta_t: f64) -> Result<f64> {
    if !(delta_t > 0.0) {
        return Err(Error::domain(format!(
            "temperature rise must be positive, got {delta_t}"
        )));
    }
    Ok(total_load / (gas.cp * gas.density * delta_t))
}

/// Two consecutive steady states of one experiment at different heater powers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeaterStepRecord {
    pub power_before: f64,
    pub power_after: f64,
    pub inlet_before: f64,
    pub inlet_after: f64,
    pub outlet_before: f64,
    pub outlet_after: f64,
    /// Gas state used to turn the mass flow into a volume flow.
    pub gas: GasState,
}

impl HeaterStepRecord {
    /// Builds a record from measured temperatures, taking the density at the
    /// mean of the inlet and outlet readings before the step.
    pub fn from_measurements(
        power_before: f64,
        power_after: f64,
        inlet: (f64, f64),
        outlet: (f64, f64),
        pressure: f64,
    ) -> Result<Self> {
        if power_after == power_before {
            return Err(Error::domain("heater powers before and after the step are equal"));
        }
        let mean = 0.25 * (inlet.0 + inlet.1 + outlet.0 + outlet.1);
        Ok(Self {
            power_before,
            power_after,
            inlet_before: inlet.0,
            inlet_after: inlet.1,
            outlet_before: outlet.0,
            outlet_after: outlet.1,
            gas: GasState::new(pressure, mean)?,
        })
    }
}

/// Volume flow through an experiment from a heater step.
///
/// Sensor offsets cancel in the differences; a step whose inlet and outlet
/// moved by the same amount carries no flow information.
pub fn experiment_volume_flow(record: &HeaterStepRecord) -> Result<f64> {
    let dq = record.power_after - record.power_before;
    let d_in = record.inlet_after - record.inlet_before;
    let d_out = record.outlet_after - record.outlet_before;
    let spread = d_out - d_in;
    let scale = d_out.abs().max(d_in.abs()).max(f64::MIN_POSITIVE);
    if spread == 0.0 || spread.abs() <= 1e-12 * scale {
        return Err(Error::OffsetDominated);
    }
    Ok(dq / (record.gas.cp * record.gas.density * spread))
}

pub const CRYOSTAT: &str = "cryostat";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassiveDecomposition {
    pub cryostat: f64,
    pub loops: BTreeMap<String, f64>,
    pub residual_norm: f64,
}

/// Splits measured passive loads into a cryostat share plus one share per
/// experiment loop, by least squares over `total(S) = C + Σ_{e∈S} L_e`.
pub fn decompose_passive_loads(measurements: &[(BTreeSet<String>, f64)]) -> Result<PassiveDecomposition> {
    let loops: Vec<String> = measurements
        .iter()
        .flat_map(|(set, _)| set.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let unknowns: Vec<String> = std::iter::once(CRYOSTAT.to_string())
        .chain(loops.iter().cloned())
        .collect();
    let rows = measurements.len();
    let cols = unknowns.len();
    if rows == 0 {
        return Err(Error::Unidentifiable(unknowns));
    }
    let a = DMatrix::<f64>::from_fn(rows, cols, |r, c| {
        if c == 0 || measurements[r].0.contains(&loops[c - 1]) {
            1.0
        } else {
            0.0
        }
    });
    let b = DVector::<f64>::from_iterator(rows, measurements.iter().map(|m| m.1));

    let svd = a.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let rank = svd.rank(tol);
    if rank < cols {
        // Unknowns with a component in the null space are not pinned down.
        let v_t = svd.v_t.as_ref().expect("computed");
        let mut free = BTreeSet::new();
        for (k, sigma) in svd.singular_values.iter().enumerate() {
            if *sigma <= tol {
                for c in 0..cols {
                    if v_t[(k, c)].abs() > 1e-9 {
                        free.insert(c);
                    }
                }
            }
        }
        // Wide systems have null directions beyond the singular values listed.
        if rows < cols {
            let full = a.transpose() * &a;
            let eig = full.symmetric_eigen();
            for (k, lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda.abs() <= tol {
                    for c in 0..cols {
                        if eig.eigenvectors[(c, k)].abs() > 1e-9 {
                            free.insert(c);
                        }
                    }
                }
            }
        }
        return Err(Error::Unidentifiable(
            free.into_iter().map(|c| unknowns[c].clone()).collect(),
        ));
    }
    let x = svd.solve(&b, tol).map_err(|e| Error::domain(e.to_string()))?;
    let residual_norm = (&a * &x - &b).norm();
    Ok(PassiveDecomposition {
        cryostat: x[0],
        loops: loops.iter().cloned().zip(x.iter().skip(1).copied()).collect(),
        residual_norm,
    })
}

/// Total load the coolers are carrying, read off their capacity curves.
pub fn infer_total_load_from_cooler_temps(models: &[CryocoolerModel], temperatures: &[f64]) -> Result<f64> {
    if models.len() != temperatures.len() {
        return Err(Error::domain("one temperature is needed per cooler"));
    }
    Ok(models
        .iter()
        .zip(temperatures)
        .map(|(m, &t)| cooling_power_at(m, t))
        .sum())
}
