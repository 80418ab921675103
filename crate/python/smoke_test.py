"""Smoke test for the Python extension.

Build and run:

    cargo build -p adaptsim-py --features extension-module --release
    cp target/release/libadaptsim_py.so python/adaptsim_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import adaptsim_py as sim  # noqa: E402

SCENARIOS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "scenarios")


def scenario_path(name):
    return os.path.join(SCENARIOS, name + ".json")


def test_step_through_lowpower():
    s = sim.Scenario.load(scenario_path("lowpower-basic"))
    assert s.name == "lowpower-basic"
    assert s.controllers == ["lowpower"]

    run = sim.Simulation(s, seed=1, mode="level")
    run.run_until(s.start + 249)
    assert not run.goal_met
    run.run_until(s.start + 250)
    assert run.goal_met
    assert all(p["secondWrites"] == 0 for p in run.idempotence_probe())

    run.run()
    report = run.report()
    assert report["converged"] and report["convergenceTimeSeconds"] == 250
    assert report["traceDigest"] == sim.trace_digest(run.records())
    state = run.final_state()
    assert state["objects"]["TeaStoreConfig/default/teastore-config"]["spec"]["lowPowerAdaptation"] is True

    with tempfile.TemporaryDirectory() as out:
        run.write_to(out)
        assert sorted(os.listdir(out)) == ["report.json", "trace.jsonl"]


def test_run_and_compare():
    a = sim.run(scenario_path("cop-slow-client"), seed=2, until=60)
    b = sim.run(scenario_path("cop-slow-client"), seed=2, until=60)
    assert a["traceDigest"] == b["traceDigest"]

    cmp = sim.compare(scenario_path("lowpower-faulty"), [1, 2])
    assert cmp["level"]["converged"] == 2


def test_store_cas():
    store = sim.Store()
    v = store.create("TeaStoreConfig", "cfg", {"lowPowerAdaptation": False, "timeInterval": 300})
    assert v == 1
    assert store.update_spec("TeaStoreConfig", "cfg", {"lowPowerAdaptation": True, "timeInterval": 300}, v) == 2
    assert store.update_spec("TeaStoreConfig", "cfg", {"lowPowerAdaptation": False, "timeInterval": 300}, v) is None
    assert store.get("TeaStoreConfig", "cfg")["spec"]["lowPowerAdaptation"] is True


def test_matcher():
    m = sim.Matcher({
        "name": "oomThenSlow",
        "symbols": [{"symbol": "oom"}, {"symbol": "slow"}],
        "withinSeconds": 30,
    })
    assert m.feed("oom", "webui", 0) is None
    assert m.feed("oom", "webui", 5) is None
    hit = m.feed("slow", "webui", 20)
    assert [e["atTime"] for e in hit] == [5, 20]
    assert m.partial("webui") == 1
    assert m.feed("slow", "webui", 40) is None


def test_bad_scenario():
    try:
        sim.Scenario.parse('{"name": "x", "durationSeconds": "long"}')
    except ValueError as e:
        assert "durationSeconds" in str(e)
    else:
        raise AssertionError("expected a ValueError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print("ok", name)
