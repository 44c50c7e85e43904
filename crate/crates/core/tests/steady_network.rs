use std::collections::BTreeMap;

use cryoloop::gasprops::{GasState, SPECIFIC_HEAT};
use cryoloop::network::{solve_flow, NetworkTopology, Side};
use cryoloop::plant::{Plant, ReferenceConfig};
use cryoloop::scenario::Scenario;
use cryoloop::steadystate::{solve_steady, FlowSpec, SteadyInputs, SteadyOptions};
use cryoloop::units::bar;
use proptest::prelude::*;

/// Net mass flow into every node, relative to the total circulation.
fn worst_junction_imbalance(topology: &NetworkTopology, mass_flow: &[f64]) -> f64 {
    let mut net: BTreeMap<&str, f64> = BTreeMap::new();
    for (e, m) in topology.edges().iter().zip(mass_flow) {
        *net.entry(e.from.as_str()).or_default() -= m;
        *net.entry(e.to.as_str()).or_default() += m;
    }
    let total = mass_flow.iter().cloned().fold(0.0, f64::max);
    net.values().map(|v| v.abs() / total).fold(0.0, f64::max)
}

fn lab_plant(experiments: usize) -> Plant {
    ReferenceConfig {
        experiments,
        ..ReferenceConfig::four_experiment()
    }
    .build()
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn junctions_balance_for_any_valve_setting(
        experiments in 1usize..=4,
        rpm in 6000.0..21000.0f64,
        openings in proptest::collection::vec((0.05..1.0f64, 0.05..1.0f64), 4),
        temperature in 30.0..300.0f64,
    ) {
        let mut plant = lab_plant(experiments);
        for (k, (s, r)) in openings.iter().take(experiments).enumerate() {
            let id = format!("exp{}", k + 1);
            plant.topology.set_valve_mut(&id, Side::Supply, *s).unwrap();
            plant.topology.set_valve_mut(&id, Side::Return, *r).unwrap();
        }
        let gas = GasState::new(bar(20.0), temperature).unwrap();
        let flow = solve_flow(&plant.topology, rpm, &gas).unwrap();
        prop_assert!(worst_junction_imbalance(&plant.topology, &flow.mass_flow) <= 1e-12);
        let drops: Vec<f64> = flow.branch_pressure_drop.values().cloned().collect();
        let scale = drops.iter().cloned().fold(0.0, f64::max);
        prop_assert!(flow.max_group_residual <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn steady_energy_closes_for_any_heater_setting(
        heaters in proptest::collection::vec(0.0..60.0f64, 2),
        rpm in 12000.0..21000.0f64,
    ) {
        let plant = lab_plant(2);
        let inputs = SteadyInputs {
            flows: FlowSpec::Network { rpm },
            active_loads: [("exp1".to_string(), heaters[0]), ("exp2".to_string(), heaters[1])].into(),
            pressure: bar(20.0),
        };
        let r = solve_steady(&plant, &inputs, &SteadyOptions::default()).unwrap();
        let load = r.total_load();
        prop_assert!((r.total_cooling - load).abs() <= 1e-6 * load);
        prop_assert!(r.max_residual <= 1e-6 * load);
        prop_assert!(worst_junction_imbalance(&plant.topology, &r.flow.mass_flow) <= 1e-12);
    }
}

#[test]
fn every_edge_satisfies_the_volume_flow_identity() {
    let plant = lab_plant(2);
    let inputs = SteadyInputs {
        flows: FlowSpec::Network { rpm: 21000.0 },
        active_loads: [("exp1".to_string(), 40.0), ("exp2".to_string(), 80.0)].into(),
        pressure: bar(23.0),
    };
    let r = solve_steady(&plant, &inputs, &SteadyOptions::default()).unwrap();
    for e in &r.edges {
        let rise = e.outlet - e.inlet;
        if rise.abs() > 1e-6 {
            let v = e.heat / (SPECIFIC_HEAT * r.fan_intake.density * rise);
            assert!((v - e.volume_flow).abs() <= 1e-9 * e.volume_flow, "{}", e.id);
        }
    }
}

const LOOP_HEAD: &str = r#"
[plant]
layout = "custom"
relief_set_bar = 23.0
relief_reseat_bar = 22.5
fill_edge = "return"

[[plant.edges]]
kind = "fan"
id = "fan"
from = "a"
to = "b"
reference_rpm = 21000.0
reference_head_kpa = 10.0
reference_flow_m3h = 0.4

[[plant.edges]]
kind = "cooler"
id = "cooler"
from = "b"
to = "c"
curve = [[20.0, 0.0], [80.0, 300.0]]
base_k = 20.0
heat_exchanger_k_per_w = 0.01
volume_l = 0.5
drop = { pressure_drop_kpa = 2.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "valve"
id = "sink_supply_valve"
from = "s0"
to = "s1"
drop = { pressure_drop_kpa = 1.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "heat_sink"
id = "sink"
from = "s1"
to = "s2"
contact_conductance_w_per_k_cm2 = 0.5
contact_area_cm2 = 20.0
heater_max_w = 100.0
volume_l = 0.05

[[plant.edges]]
kind = "valve"
id = "sink_return_valve"
from = "s2"
to = "s3"
drop = { pressure_drop_kpa = 1.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "line"
id = "return"
from = "s3"
to = "a"
length_m = 10.0
leak_w_per_m = 0.2
volume_l = 0.2
drop = { pressure_drop_kpa = 2.0, at_flow_m3h = 0.4 }

[[plant.sensors]]
name = "T1"
at = "cold_head"
edge = "cooler"

[[plant.sensors]]
name = "T6"
at = "sink_metal"
edge = "sink"

[[plant.sensors]]
name = "T11"
at = "inlet"
edge = "sink"

[initial]
pressure_bar = 20.0
rpm = 21000.0

[initial.heaters_w]
sink = 30.0
"#;

/// The supply line from `c` to `s0`, as `pieces` equal segments.
fn supply_line(pieces: usize) -> String {
    let mut out = String::new();
    for k in 0..pieces {
        let from = if k == 0 { "c".to_string() } else { format!("m{k}") };
        let to = if k + 1 == pieces {
            "s0".to_string()
        } else {
            format!("m{}", k + 1)
        };
        let n = pieces as f64;
        out += &format!(
            "\n[[plant.edges]]\nkind = \"line\"\nid = \"supply{k}\"\nfrom = \"{from}\"\nto = \"{to}\"\n\
             length_m = {}\nleak_w_per_m = 0.2\nvolume_l = {}\ndrop = {{ pressure_drop_kpa = {}, at_flow_m3h = 0.4 }}\n",
            30.0 / n,
            0.3 / n,
            3.0 / n
        );
    }
    out
}

#[test]
fn splitting_a_line_into_segments_leaves_the_solution_unchanged() {
    let solve = |pieces| {
        let (head, tail) = LOOP_HEAD.split_at(LOOP_HEAD.find("[[plant.sensors]]").unwrap());
        let text = format!("{head}{}\n{tail}", supply_line(pieces));
        Scenario::parse(&text).unwrap().solve_steady().unwrap()
    };
    let one = solve(1);
    for pieces in [2, 5] {
        let many = solve(pieces);
        for (name, t) in &one.sensors {
            let other = many.sensor(name).unwrap();
            assert!((t - other).abs() <= 1e-6, "{name}: {t} vs {other} with {pieces} pieces");
        }
        assert!((one.total_cooling - many.total_cooling).abs() <= 1e-6 * one.total_cooling);
    }
}
