//! Acceptance gate. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use cryoloop::analysis::{decompose_passive_loads, experiment_volume_flow, heating_rate_factor, HeatingRateParams};
use cryoloop::gasprops::{density, mass_flow_from_volume_flow, GasState};
use cryoloop::network::{solve_flow, NetworkTopology, Side};
use cryoloop::plant::{Plant, ReferenceConfig};
use cryoloop::scenario::Scenario;
use cryoloop::session::Session;
use cryoloop::steadystate::{
    solve_steady, synthesize_heater_step, two_experiment_validation, FlowSpec, SteadyInputs, SteadyOptions,
    SteadyStateReport,
};
use cryoloop::telemetry::{to_csv_string, TelemetryFrame};
use cryoloop::transient::{Action, Simulation};
use cryoloop::units::{bar, grams_per_second, m3_per_hour, to_bar, to_m3_per_hour};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
}

/// Collects `(ok, note)` checks; the criterion passes when all hold.
#[derive(Default)]
struct Checks(Vec<(bool, String)>);

impl Checks {
    fn check(&mut self, ok: bool, note: impl Into<String>) {
        self.0.push((ok, note.into()));
    }

    fn within(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        self.check(
            (got - want).abs() <= tol,
            format!("{what} {got:.4} (want {want} ± {tol})"),
        );
    }

    fn budget(&mut self, started: Instant, limit: Duration) {
        let took = started.elapsed();
        self.check(
            took <= limit,
            format!("{:.2} s (limit {} s)", took.as_secs_f64(), limit.as_secs()),
        );
    }

    fn outcome(self) -> Outcome {
        let pass = self.0.iter().all(|(ok, _)| *ok);
        let detail = self
            .0
            .iter()
            .map(|(ok, note)| if *ok { note.clone() } else { format!("!! {note}") })
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { pass, detail }
    }
}

fn scenario(name: &str) -> Scenario {
    let path = format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"));
    Scenario::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn per_experiment(values: [f64; 4]) -> BTreeMap<String, f64> {
    values
        .iter()
        .enumerate()
        .map(|(k, v)| (format!("exp{}", k + 1), *v))
        .collect()
}

fn four_experiment_inputs() -> SteadyInputs {
    SteadyInputs {
        flows: FlowSpec::Prescribed(
            per_experiment([0.81, 0.40, 0.40, 0.40])
                .into_iter()
                .map(|(k, v)| (k, grams_per_second(v)))
                .collect(),
        ),
        active_loads: per_experiment([75.0, 12.0, 12.0, 12.0]),
        pressure: bar(20.0),
    }
}

fn four_experiment_report() -> (Plant, SteadyStateReport) {
    let plant = ReferenceConfig::four_experiment().build().unwrap();
    let r = solve_steady(&plant, &four_experiment_inputs(), &SteadyOptions::default()).unwrap();
    (plant, r)
}

/// A scenario run stepped by hand so every integrated state is inspected.
struct Trace {
    frames: Vec<TelemetryFrame>,
    /// Largest relative gap between the helium inventory and its ledger.
    worst_ledger: f64,
    /// Highest pressure anywhere above the relief set point, Pa.
    worst_over_set: f64,
    topped_up: f64,
}

fn trace(s: &Scenario) -> Trace {
    let (model, state) = s.prepare().unwrap();
    let set = model.plant().relief.set_pressure;
    let initial = state.total_mass();
    let (mut sim, first) = Simulation::start(model, state, &s.events, s.outputs.sample_interval_s).unwrap();
    let mut t = Trace {
        frames: vec![first],
        worst_ledger: 0.0,
        worst_over_set: f64::NEG_INFINITY,
        topped_up: 0.0,
    };
    let steps = cryoloop::transient::event_step(s.outputs.duration_s, sim.model().dt());
    for _ in 0..steps {
        t.frames.extend(sim.advance().unwrap());
        let st = sim.state();
        let expected = initial + st.topped_up_mass - st.vented_mass;
        t.worst_ledger = t.worst_ledger.max((st.total_mass() - expected).abs() / initial);
        for p in sim.model().pressures(st) {
            t.worst_over_set = t.worst_over_set.max(p - set);
        }
    }
    t.topped_up = sim.state().topped_up_mass;
    t
}

fn series(frames: &[TelemetryFrame], sensor: &str) -> Vec<(f64, f64)> {
    frames.iter().map(|f| (f.time_s, f.sensor(sensor).unwrap())).collect()
}

/// Fastest fall of a trace over any one-minute window, K/min.
fn peak_cooling_rate(trace: &[(f64, f64)]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, (t0, v0)) in trace.iter().enumerate() {
        if let Some((t1, v1)) = trace[i..].iter().find(|(t, _)| *t >= t0 + 60.0) {
            best = best.max((v0 - v1) / (t1 - t0) * 60.0);
        }
    }
    best
}

fn worst_junction_imbalance(topology: &NetworkTopology, mass_flow: &[f64]) -> f64 {
    let mut net: BTreeMap<&str, f64> = BTreeMap::new();
    for (e, m) in topology.edges().iter().zip(mass_flow) {
        *net.entry(e.from.as_str()).or_default() -= m;
        *net.entry(e.to.as_str()).or_default() += m;
    }
    let total = mass_flow.iter().cloned().fold(0.0, f64::max);
    net.values().map(|v| v.abs() / total).fold(0.0, f64::max)
}

fn gas_density() -> Outcome {
    let mut c = Checks::default();
    let rho = density(bar(20.0), 53.0).unwrap();
    c.within("density kg/m3", rho, 18.16, 0.005 * 18.16);
    c.outcome()
}

fn mass_flow() -> Outcome {
    let mut c = Checks::default();
    let gas = GasState::new(bar(20.0), 53.0).unwrap();
    let m = mass_flow_from_volume_flow(m3_per_hour(0.40), &gas).unwrap() * 1e3;
    c.within("mass flow g/s", m, 2.01, 0.01 * 2.01);
    c.outcome()
}

fn four_experiment_table() -> Outcome {
    let started = Instant::now();
    let (_, r) = four_experiment_report();
    let mut c = Checks::default();
    let table = [
        ("T1", 51.0, 3.0),
        ("T2", 55.1, 3.0),
        ("T3", 53.0, 3.0),
        ("T4", 55.0, 3.0),
        ("T5", 79.5, 4.0),
        ("T9", 58.5, 3.0),
        ("T10", 82.5, 4.0),
        ("T11", 62.0, 3.0),
        ("T12", 79.0, 3.0),
        ("T7", 65.0, 3.0),
        ("T8", 70.5, 3.0),
    ];
    for (name, want, tol) in table {
        c.within(name, r.sensor(name).unwrap(), want, tol);
    }
    c.within("Exp 1 mean sink", r.sink("exp1").unwrap().mean, 65.5, 2.0);
    c.within("Exp 2 mean sink", r.sink("exp2").unwrap().mean, 68.0, 2.0);
    c.budget(started, Duration::from_secs(1));
    c.outcome()
}

fn passive_decomposition() -> Outcome {
    let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let d = decompose_passive_loads(&[
        (set(&["exp1"]), 86.0),
        (set(&["exp2"]), 78.0),
        (set(&["exp1", "exp2"]), 108.0),
    ])
    .unwrap();
    let mut c = Checks::default();
    c.within("cryostat W", d.cryostat, 56.0, 1e-9);
    c.within("Exp 1 W", d.loops["exp1"], 30.0, 1e-9);
    c.within("Exp 2 W", d.loops["exp2"], 22.0, 1e-9);
    c.within("residual W", d.residual_norm, 0.0, 1e-9);
    c.outcome()
}

fn flow_inference() -> Outcome {
    let started = Instant::now();
    let plant = ReferenceConfig::default().build().unwrap();
    let inputs = SteadyInputs {
        flows: FlowSpec::Network { rpm: 21000.0 },
        active_loads: [("exp1".to_string(), 40.0), ("exp2".to_string(), 40.0)].into(),
        pressure: bar(20.0),
    };
    let mut c = Checks::default();
    for (id, want) in [("exp1", 0.24), ("exp2", 0.16)] {
        let step = synthesize_heater_step(&plant, &inputs, id, 50.0).unwrap();
        let got = to_m3_per_hour(experiment_volume_flow(&step).unwrap());
        c.within(&format!("{id} m3/hr"), got, want, 0.02 * want);
    }
    c.budget(started, Duration::from_secs(1));
    c.outcome()
}

fn two_experiment_load() -> Outcome {
    let started = Instant::now();
    let plant = ReferenceConfig::default().build().unwrap();
    let r =
        two_experiment_validation(&plant, &[("exp1".to_string(), 40.0), ("exp2".to_string(), 80.0)].into()).unwrap();
    let mut c = Checks::default();
    let t8 = r.sensor("T8").unwrap();
    c.check(t8 < 100.0, format!("Exp 2 outlet {t8:.2} K (want < 100)"));
    c.budget(started, Duration::from_secs(1));
    c.outcome()
}

fn transient_suite() -> Outcome {
    let mut c = Checks::default();

    let started = Instant::now();
    let cool = trace(&scenario("cooldown_single.toml"));
    c.budget(started, Duration::from_secs(30));
    let below = cool
        .frames
        .iter()
        .find(|f| f.sensors.values().all(|t| *t < 40.0))
        .map(|f| f.time_s / 60.0);
    c.check(
        below.is_some_and(|m| m <= 30.0),
        format!(
            "all sensors < 40 K at {:.1} min (want <= 30)",
            below.unwrap_or(f64::NAN)
        ),
    );
    let sink = series(&cool.frames, "T6");
    c.within("sink plateau K", sink.last().unwrap().1, 32.0, 3.0);
    c.within("sink peak cooling K/min", peak_cooling_rate(&sink), 23.0, 0.5 * 23.0);
    c.within(
        "intake peak cooling K/min",
        peak_cooling_rate(&series(&cool.frames, "T3")),
        150.0,
        0.5 * 150.0,
    );

    let started = Instant::now();
    let s = scenario("connect_warm.toml");
    let top_up_at = s
        .events
        .iter()
        .find(|e| matches!(e.action, Action::TopUp { .. }))
        .map(|e| e.time_s)
        .unwrap();
    let warm = trace(&s);
    c.budget(started, Duration::from_secs(30));
    let t8 = series(&warm.frames, "T8");
    let (peak_at, peak) = t8
        .iter()
        .cloned()
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    c.check(
        (60.0..=150.0).contains(&peak) && peak > t8[0].1 + 5.0 && peak_at < top_up_at,
        format!(
            "Exp 2 peak {peak:.1} K at {:.1} min from {:.1} K (want 60..150, rise then fall)",
            peak_at / 60.0,
            t8[0].1
        ),
    );
    // Settled: inside the band from some time on until the top-up.
    let before: Vec<_> = t8.iter().filter(|(t, _)| *t < top_up_at).collect();
    let settle = before
        .iter()
        .rposition(|(_, v)| (v - 36.0).abs() > 3.0)
        .map_or(0.0, |i| before.get(i + 1).map_or(f64::INFINITY, |p| p.0));
    c.check(
        settle <= 90.0 * 60.0,
        format!("Exp 2 inside 36 ± 3 K from {:.1} min (want <= 90)", settle / 60.0),
    );
    c.check(warm.topped_up > 0.0, "top-up added helium");
    c.within("Exp 2 after top-up K", t8.last().unwrap().1, 34.0, 3.0);
    c.outcome()
}

fn conservation_suite() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();

    let mut worst: f64 = 0.0;
    for experiments in 1..=4 {
        for (k, opening) in [1.0, 0.6, 0.2].into_iter().enumerate() {
            let mut plant = ReferenceConfig {
                experiments,
                ..ReferenceConfig::four_experiment()
            }
            .build()
            .unwrap();
            plant.topology.set_valve_mut("exp1", Side::Return, opening).unwrap();
            let gas = GasState::new(bar(20.0), 40.0 + 100.0 * k as f64).unwrap();
            let flow = solve_flow(&plant.topology, 21000.0 - 5000.0 * k as f64, &gas).unwrap();
            worst = worst.max(worst_junction_imbalance(&plant.topology, &flow.mass_flow));
        }
    }
    c.check(
        worst <= 1e-12,
        format!("junction imbalance {worst:.1e} (want <= 1e-12)"),
    );

    let (_, table) = four_experiment_report();
    let plant = ReferenceConfig::default().build().unwrap();
    let pair =
        two_experiment_validation(&plant, &[("exp1".to_string(), 40.0), ("exp2".to_string(), 80.0)].into()).unwrap();
    let energy = [&table, &pair]
        .iter()
        .map(|r| ((r.total_cooling - r.total_load()).abs().max(r.max_residual)) / r.total_load())
        .fold(0.0, f64::max);
    c.check(
        energy <= 1e-6,
        format!("steady energy residual {energy:.1e} (want <= 1e-6)"),
    );

    // A loop held at 23 bar and warmed, then an isolated experiment that
    // warms until it vents.
    let mut settle = Scenario::parse(
        r#"
[plant]
layout = "reference"
experiments = 2

[initial]
pressure_bar = 23.0
rpm = 21000.0
temperature_k = 60.0
cooler_temperature_k = 40.0

[initial.heaters_w]
exp1 = 40.0
exp2 = 80.0

[outputs]
duration_s = 18000.0
sample_interval_s = 60.0
"#,
    )
    .unwrap();
    let run = settle.run().unwrap();
    let end = &run.final_state;
    let steady = solve_steady(
        &run.model.plant_at(end),
        &SteadyInputs {
            flows: FlowSpec::Network { rpm: 21000.0 },
            active_loads: [("exp1".to_string(), 40.0), ("exp2".to_string(), 80.0)].into(),
            pressure: run.model.loop_pressure(end),
        },
        &SteadyOptions::default(),
    )
    .unwrap();
    let last = run.frames.last().unwrap();
    let gap = steady
        .sensors
        .iter()
        .map(|(name, t)| (last.sensor(name).unwrap() - t).abs())
        .fold(0.0, f64::max);
    c.check(gap <= 0.5, format!("end state vs steady {gap:.3} K (want <= 0.5)"));

    settle.initial.from_steady = true;
    settle.initial.pressure_bar = 22.0;
    settle.outputs.duration_s = 3600.0;
    settle.outputs.sample_interval_s = 10.0;
    settle.events = vec![
        cryoloop::transient::Event {
            time_s: 0.0,
            action: Action::DisconnectExperiment { experiment: 1 },
        },
        cryoloop::transient::Event {
            time_s: 0.0,
            action: Action::SetHeater {
                experiment: 1,
                power_w: 50.0,
            },
        },
    ];
    let mut ledger: f64 = 0.0;
    let mut over = f64::NEG_INFINITY;
    for t in [trace(&settle), trace(&scenario("cooldown_single.toml"))] {
        ledger = ledger.max(t.worst_ledger);
        over = over.max(t.worst_over_set);
    }
    c.check(ledger <= 1e-9, format!("mass ledger {ledger:.1e} (want <= 1e-9)"));
    c.check(
        to_bar(over) <= 0.1,
        format!("peak above relief set point {:+.3} bar (want <= 0.1)", to_bar(over)),
    );
    c.budget(started, Duration::from_secs(60));
    c.outcome()
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();
    let mut s = scenario("cooldown_single.toml");
    s.outputs.duration_s = 1800.0;
    s.transient.noise_std_k = 0.05;
    s.transient.noise_seed = 7;
    let a = to_csv_string(&s.run().unwrap().frames);
    let b = to_csv_string(&s.run().unwrap().frames);
    c.check(a == b, "repeated scenario CSV identical");

    let mut session = Session::new(scenario("connect_warm.toml")).unwrap();
    session.advance_steps(2400).unwrap();
    session
        .act(Action::SetHeater {
            experiment: 2,
            power_w: 80.0,
        })
        .unwrap();
    session.advance_steps(1201).unwrap();
    session.act(Action::SetRpm { rpm: 15000.0 }).unwrap();
    session
        .act(Action::SetValve {
            experiment: 1,
            side: Side::Return,
            opening: 0.5,
        })
        .unwrap();
    session.advance_steps(2000).unwrap();
    session.act(Action::TopUp { pressure_bar: 20.0 }).unwrap();
    session.advance_steps(3000).unwrap();
    let replayed = to_csv_string(&session.replay_scenario().run().unwrap().frames);
    c.check(replayed == session.csv(), "action log replays to identical CSV");
    c.budget(started, Duration::from_secs(30));
    c.outcome()
}

fn heating_rate() -> Outcome {
    let mut c = Checks::default();
    let p = HeatingRateParams::new(75.0, 2.0).unwrap();
    let at_t0 = heating_rate_factor(&p, 75.0);
    c.check(at_t0 == 2.0, format!("factor(T0) = {at_t0}"));
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(2000)
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::default()));
    let monotone = runner.run(
        &(10.0f64..75.0, 1.5f64..4.1, 0.0f64..400.0, 0.01f64..50.0),
        |(t0, beta, t, dt)| {
            let p = HeatingRateParams::new(t0, beta).unwrap();
            prop_assert!(heating_rate_factor(&p, t + dt) > heating_rate_factor(&p, t));
            prop_assert_eq!(heating_rate_factor(&p, t0), 2.0);
            Ok(())
        },
    );
    c.check(
        monotone.is_ok(),
        format!("strictly increasing over 2000 cases: {monotone:?}"),
    );
    c.outcome()
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("helium density at the fan", gas_density),
        ("volume to mass flow", mass_flow),
        ("four-experiment temperature table", four_experiment_table),
        ("passive load decomposition", passive_decomposition),
        ("flow inference from heater steps", flow_inference),
        ("two-experiment 40/80 W load", two_experiment_load),
        ("transient cooldown and connection", transient_suite),
        ("conservation", conservation_suite),
        ("determinism and replay", determinism),
        ("heating rate factor", heating_rate),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!(
            "{} [{:>2}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail
        );
        if !o.pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed: {}", failed.join(", "));
}
