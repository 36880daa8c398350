from __future__ import annotations

import os
import sys

import pytest

from xpue.model import Layer, Plane, PowerSample, Quantity, SourceKind, TagSet, TargetId

os.environ.pop("XPUE_CONFIG", None)


def power(ts, value, node="n1", layer=Layer.IT, source=SourceKind.OUTLET, component=None, process=None,
          platform=None, plane=None, service=None, dc="d1", cluster="c1"):
    layer = Layer(layer)
    if layer is Layer.HARDWARE and component is None:
        component = "cpu-pkg0"
    if layer is Layer.SOFTWARE and process is None:
        process = service or "proc"
    target = TargetId(dc, cluster if node else None, node, component, process)
    tags = TagSet(layer, platform, Plane(plane) if plane else None, service)
    return PowerSample(ts, target, tags, source, Quantity.POWER_W, float(value))


def counter(ts, value, node="n1", component="cpu-pkg0", dc="d1", cluster="c1"):
    return PowerSample(ts, TargetId(dc, cluster, node, component), TagSet(Layer.HARDWARE),
                       SourceKind.CPU_COUNTER, Quantity.ENERGY_J_CUM, float(value))


@pytest.fixture
def mk():
    return power


@pytest.fixture
def mkc():
    return counter


def xpue_cmd():
    return [sys.executable, "-m", "xpue.cli"]


def simulate(scenario, **engine_kw):
    """Generate ``scenario`` in memory and return its aligned windows and metric points."""
    from xpue.alignment import AlignmentPlan, align
    from xpue.metrics import XPUEEngine
    from xpue.model import sample_from_wire
    from xpue.simulator import iter_records, wrap_max

    samples = [sample_from_wire(r) for r in iter_records(scenario)]
    windows = align(samples, AlignmentPlan(1000, wrap_max=wrap_max(scenario)))
    engine = XPUEEngine(**engine_kw).fit()
    return windows, engine.transform(windows), engine
