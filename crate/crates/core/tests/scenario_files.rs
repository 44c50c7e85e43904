use std::path::PathBuf;

use cryoloop::scenario::{Scenario, ScenarioError};
use cryoloop::Error;

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

const CUSTOM: &str = r#"
[plant]
layout = "custom"
relief_set_bar = 23.0
relief_reseat_bar = 22.5
fill_edge = "return"
warm_volume_l = 5.0

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
capacity_j_per_k = 300.0
volume_l = 0.5
drop = { pressure_drop_kpa = 2.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "line"
id = "supply"
from = "c"
to = "d"
length_m = 10.0
leak_w_per_m = 0.2
capacity_j_per_k = 200.0
volume_l = 0.2
drop = { pressure_drop_kpa = 2.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "valve"
id = "sink_supply_valve"
from = "d"
to = "d1"
drop = { pressure_drop_kpa = 1.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "heat_sink"
id = "sink"
from = "d1"
to = "e1"
contact_conductance_w_per_k_cm2 = 0.5
contact_area_cm2 = 20.0
heater_max_w = 100.0
capacity_j_per_k = 400.0
volume_l = 0.05

[[plant.edges]]
kind = "valve"
id = "sink_return_valve"
from = "e1"
to = "e"
drop = { pressure_drop_kpa = 1.0, at_flow_m3h = 0.4 }

[[plant.edges]]
kind = "line"
id = "return"
from = "e"
to = "a"
length_m = 10.0
leak_w_per_m = 0.2
capacity_j_per_k = 200.0
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

[initial]
rpm = 21000.0
cooler_temperature_k = 20.0

[outputs]
duration_s = 120.0
"#;

#[test]
fn shipped_scenarios_parse_validate_and_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let s = Scenario::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        s.prepare().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = Scenario::parse(&s.to_toml()).unwrap();
        assert_eq!(again, s, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn custom_plant_builds_runs_and_round_trips() {
    let s = Scenario::parse(CUSTOM).unwrap();
    assert_eq!(Scenario::parse(&s.to_toml()).unwrap(), s);
    let run = s.run().unwrap();
    let last = run.frames.last().unwrap();
    assert_eq!(last.time_s, 120.0);
    assert!(last.sensor("T6").unwrap() < 295.0);
    assert!(last.sensor("T2").is_none());
}

#[test]
fn heat_exchanging_edge_without_mass_is_a_topology_error() {
    let text = CUSTOM.replacen("capacity_j_per_k = 400.0\nvolume_l = 0.05\n", "", 1);
    let s = Scenario::parse(&text).unwrap();
    match s.prepare() {
        Err(Error::Topology(msg)) => assert!(msg.contains("`sink`"), "{msg}"),
        other => panic!("expected a topology error, got {other:?}"),
    }
}

#[test]
fn unknown_edge_field_reports_a_location() {
    let text = CUSTOM.replace(
        "length_m = 10.0\nleak_w_per_m",
        "length_m = 10.0\nleak_per_m = 1.0\nleak_w_per_m",
    );
    match Scenario::parse(&text) {
        Err(ScenarioError::Parse { line, .. }) => assert!(line > 0),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_toml_reports_line_and_column() {
    match Scenario::parse("[initial]\nrpm = = 3\n") {
        Err(ScenarioError::Parse { line, column, .. }) => {
            assert_eq!(line, 2);
            assert!(column > 1);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn zero_load_scenario_sits_at_base_temperature() {
    let text = std::fs::read_to_string(scenario_dir().join("zero_load.toml")).unwrap();
    let report = Scenario::parse(&text).unwrap().solve_steady().unwrap();
    for (name, t) in &report.sensors {
        assert_eq!(*t, 20.0, "{name}");
    }
}
