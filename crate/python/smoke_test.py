"""Quick check that the extension module loads and runs end to end."""

import pathlib

import cryoloop

SCENARIOS = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


def main():
    rho = cryoloop.density(20e5, 53.0)
    assert abs(rho - 18.16) < 0.09, rho
    assert cryoloop.heating_rate_factor(75.0, 2.0, 75.0) == 2.0

    d = cryoloop.decompose_passive_loads([(["exp1"], 86.0), (["exp2"], 78.0), (["exp1", "exp2"], 108.0)])
    assert abs(d["cryostat"] - 56.0) < 1e-9, d

    table = cryoloop.Scenario.from_file(str(SCENARIOS / "four_experiments.toml")).solve_steady()
    assert abs(table["sensors"]["T3"] - 53.0) < 3.0, table["sensors"]

    scenario = cryoloop.Scenario.from_file(str(SCENARIOS / "connect_warm.toml"), ["duration_s=600"])
    frames = scenario.run()
    assert frames[-1]["time_s"] == 600.0

    session = cryoloop.Session(scenario)
    session.advance(120.0)
    ack = session.act({"action": "set_heater", "experiment": 2, "power_w": 80.0})
    assert ack["events"] == ["set_heater exp2 80 W"], ack
    session.advance(300.0)
    assert session.replay_scenario().run_csv() == session.csv()

    try:
        session.act({"action": "set_heater", "experiment": 3, "power_w": 5.0})
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("heater on a missing experiment accepted")

    print(f"ok: density {rho:.2f} kg/m3, {len(frames)} frames, clock {session.clock:.0f} s")


if __name__ == "__main__":
    main()
