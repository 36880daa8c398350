import json
import math
from collections import defaultdict
from dataclasses import replace

import pytest

from conftest import simulate
from xpue.model import Layer, Validity, sample_from_wire, validate_sample
from xpue.simulator import (
    AMD_WATER,
    BUILTIN_SCENARIOS,
    NodeModel,
    Scenario,
    ScenarioError,
    builtin,
    generate,
    hosted_share,
    iter_records,
    load_scenario,
    node_from_profile,
    platform_overhead,
    vm_ramp,
)


def _node_spue(points):
    out = defaultdict(list)
    for p in points:
        lab = p.labels
        if p.kind.value == "spue" and "node" in lab and p.validity is Validity.VALID:
            out[lab["node"]].append((p.window_start, p.value))
    return out


def test_same_seed_same_bytes(tmp_path):
    sc = replace(builtin("kubernetes"), duration_s=40, max_units=12, ramp_s=40)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    generate(sc, a)
    generate(sc, b)
    assert a.read_bytes() == b.read_bytes()
    generate(replace(sc, seed=9), b)
    assert a.read_bytes() != b.read_bytes()


def test_records_are_valid_samples():
    sc = replace(builtin("stacked"), duration_s=5, max_units=20, ramp_s=5)
    for rec in iter_records(sc):
        assert validate_sample(sample_from_wire(rec)) is None


@pytest.mark.parametrize("name", ["intel-ramp", "openstack-ramp", "amd-water"])
def test_physicality(name):
    sc = replace(builtin(name), duration_s=40, ramp_s=30)
    windows, _, engine = simulate(sc)
    for w in windows:
        per_node = defaultdict(lambda: defaultdict(float))
        for (target, tags), e in w.energies.items():
            if target.component != "switch":
                per_node[target.node][tags.layer] += e
        for node, layers in per_node.items():
            assert layers[Layer.SOFTWARE] <= layers[Layer.HARDWARE] * (1 + 1e-9) + 1e-9
            assert layers[Layer.HARDWARE] <= layers[Layer.IT] * (1 + 1e-9) + 1e-9


def test_idle_spue_above_four():
    sc = replace(builtin("idle"), duration_s=10)
    series = _node_spue(simulate(sc)[1])
    assert set(series) == {"w1", "w2", "w3", "w4"}
    assert all(v > 4 for s in series.values() for _, v in s)


def test_intel_full_load_approaches_from_above():
    series = _node_spue(simulate(builtin("intel-ramp"))[1])["w1"]
    tail = [v for _, v in series[-10:]]
    assert all(2.7 < v < 2.8 for v in tail)
    assert abs(tail[-1] - 2.75) < 1e-6


def test_amd_water_full_load():
    series = _node_spue(simulate(builtin("amd-water"))[1])["a1"]
    assert series[-1][1] == pytest.approx(1.4, abs=1e-6)


def test_spue_non_increasing_over_ramp():
    series = _node_spue(simulate(builtin("intel-ramp"))[1])
    for node, values in series.items():
        vals = [v for _, v in values[1:]]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(vals, vals[1:])), node


@pytest.mark.parametrize("name,share", [("kubernetes", 0.9688), ("openstack-ramp", 0.7808)])
def test_platform_overhead_targets(name, share):
    sc = builtin(name)
    assert hosted_share(sc) == pytest.approx(share, abs=0.01 * share)
    assert platform_overhead(sc) == pytest.approx(1 - hosted_share(sc), abs=1e-12)


def test_zero_workload_hosted_share():
    sc = replace(builtin("openstack-ramp"), max_units=0, duration_s=20, ramp_s=None)
    assert hosted_share(sc) == 0.0
    with pytest.raises(ScenarioError):
        platform_overhead(builtin("idle"))


def test_vm_ramp_reaches_twice_capacity():
    sc = builtin("openstack-ramp")
    ramp = vm_ramp(sc)
    assert sc.capacity == 144
    assert ramp[-1] == 288 == 2 * sc.capacity
    assert all(b >= a for a, b in zip(ramp, ramp[1:]))
    assert vm_ramp(sc) == ramp


def test_switch_constant(tmp_path):
    sc = replace(builtin("openstack-ramp"), duration_s=10, ramp_s=10)
    recs = [r for r in iter_records(sc) if r.get("component") == "switch"]
    assert recs and {r["value"] for r in recs} == {115.3}
    assert {(r["layer"], r["node"]) for r in recs} == {("it", "tor-1")}


def test_invalid_scenarios():
    with pytest.raises(ScenarioError):
        NodeModel("x", idle_power_w=200, max_power_w=100)
    with pytest.raises(ScenarioError):
        NodeModel("x", hardware_fraction=((0, 0.5), (1, 0.4)))
    with pytest.raises(ScenarioError):
        Scenario("s", (node_from_profile("w"),), platform="mesos")
    with pytest.raises(ScenarioError):
        Scenario("s", (node_from_profile("w"),), platform="kubernetes")
    with pytest.raises(ScenarioError):
        Scenario("s", (node_from_profile("w"), node_from_profile("w")))
    with pytest.raises(ScenarioError):
        builtin("nope")
    with pytest.raises(ScenarioError):
        node_from_profile("w", "arm-liquid")


def test_scenario_files(tmp_path):
    path = tmp_path / "sc.toml"
    path.write_text('[scenario]\nname = "mine"\nseed = 4\nduration_s = 20\nmax_units = 8\n'
                    '[[scenario.nodes]]\nname = "a1"\nprofile = "amd-water"\n')
    sc = load_scenario(str(path))
    assert sc.name == "mine" and sc.nodes[0].hardware_fraction == AMD_WATER
    jpath = tmp_path / "sc.json"
    jpath.write_text(json.dumps({"base": "kubernetes", "seed": 3, "duration_s": 30, "ramp_s": 20}))
    sc = load_scenario(jpath)
    assert sc.platform == "kubernetes" and sc.seed == 3 and sc.duration_s == 30
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"base": "kubernetes", "colour": "red"}))
    with pytest.raises(ScenarioError):
        load_scenario(bad)
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.toml")


def test_builtins_construct():
    for name in BUILTIN_SCENARIOS:
        sc = builtin(name)
        assert sc.name == name and math.isfinite(sc.duration_s)
