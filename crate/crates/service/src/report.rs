//! Plain-text tables printed by the CLI.

use std::fmt::Write;

use cryoloop::plant::sensor_position;
use cryoloop::scenario::ScenarioRun;
use cryoloop::steadystate::SteadyStateReport;
use cryoloop::telemetry::TelemetryFrame;
use cryoloop::units::{to_bar, to_grams_per_second, to_m3_per_hour};

/// Sensors in the order of the reference temperature table.
const TABLE_ORDER: [&str; 12] = [
    "T1", "T2", "T3", "T4", "T5", "T9", "T10", "T11", "T12", "T7", "T8", "T6",
];

fn sensor_rows(out: &mut String, value: impl Fn(&str) -> Option<f64>) {
    for name in TABLE_ORDER {
        if let Some(t) = value(name) {
            let label = format!("{} ({name})", sensor_position(name).unwrap_or(name));
            writeln!(out, "{label:<24} {t:>8.1}").unwrap();
        }
    }
}

pub fn steady_table(r: &SteadyStateReport) -> String {
    let mut out = String::new();
    writeln!(out, "{:<24} {:>8}", "Position", "T (K)").unwrap();
    sensor_rows(&mut out, |n| r.sensor(n));
    writeln!(out).unwrap();
    for s in &r.sinks {
        writeln!(
            out,
            "{:<6} mean {:6.1} K  metal {:6.1} K  flow {:5.3} g/s  heater {:5.1} W",
            s.id,
            s.mean,
            s.metal,
            to_grams_per_second(s.mass_flow),
            s.active
        )
        .unwrap();
    }
    for c in &r.coolers {
        writeln!(
            out,
            "{:<8} cold head {:6.1} K  load {:6.1} W",
            c.id, c.cold_head, c.load
        )
        .unwrap();
    }
    writeln!(
        out,
        "load {:.1} W (active {:.1}, passive {:.1}), circulation {:.3} m3/hr at {:.2} kg/m3, {:.1} bar",
        r.total_load(),
        r.total_active,
        r.total_passive,
        to_m3_per_hour(r.flow.total_volume_flow()),
        r.fan_intake.density,
        to_bar(r.pressure)
    )
    .unwrap();
    out
}

pub fn run_summary(run: &ScenarioRun) -> String {
    let mut out = String::new();
    let last: &TelemetryFrame = run.frames.last().expect("a run has frames");
    writeln!(out, "final state at {:.1} s", last.time_s).unwrap();
    writeln!(out, "{:<24} {:>8}", "Position", "T (K)").unwrap();
    sensor_rows(&mut out, |n| last.sensor(n));
    writeln!(
        out,
        "pressure {:.3} bar, fan {:.0} rpm, circulation {:.3} m3/hr",
        last.pressure_bar(),
        last.rpm,
        last.flow_total_m3h
    )
    .unwrap();
    let (start, end) = (&run.initial, &run.final_state);
    let expected = start.total_mass() + end.topped_up_mass - end.vented_mass;
    writeln!(out, "helium ledger (g):").unwrap();
    writeln!(out, "  initial   {:12.6}", start.total_mass() * 1e3).unwrap();
    writeln!(out, "  topped up {:12.6}", end.topped_up_mass * 1e3).unwrap();
    writeln!(out, "  vented    {:12.6}", end.vented_mass * 1e3).unwrap();
    writeln!(out, "  final     {:12.6}", end.total_mass() * 1e3).unwrap();
    writeln!(out, "  imbalance {:12.3e}", (end.total_mass() - expected) * 1e3).unwrap();
    out
}
