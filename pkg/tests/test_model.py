import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from xpue.model import (
    Layer,
    MetricKind,
    MetricPoint,
    Plane,
    PowerSample,
    Quantity,
    Rejection,
    SourceKind,
    TagSet,
    TargetId,
    Validity,
    make_scope,
    sample_from_wire,
    sample_to_wire,
    scope_labels,
    validate_sample,
)


def test_negative_value_rejected(mk):
    assert validate_sample(mk(1000, -1.0)) is Rejection.NEGATIVE_VALUE


def test_software_without_process_rejected():
    s = PowerSample(1000, TargetId("d1", "c1", "n1"), TagSet(Layer.SOFTWARE), SourceKind.SW_METER,
                    Quantity.POWER_W, 3.0)
    assert validate_sample(s) is Rejection.UNHOUSED_SOFTWARE_TARGET


def test_well_formed_hardware_sample_ok():
    s = PowerSample(1000, TargetId("d1", "c1", "n1", component="cpu-pkg0"), TagSet(Layer.HARDWARE),
                    SourceKind.CPU_COUNTER, Quantity.POWER_W, 42.0)
    assert validate_sample(s) is None


@pytest.mark.parametrize("sample,reason", [
    (PowerSample(0, TargetId("d1"), TagSet(Layer.DC), SourceKind.FACILITY, Quantity.POWER_W, 1.0),
     Rejection.NONPOSITIVE_TIMESTAMP),
    (PowerSample(5, TargetId("d1"), TagSet(Layer.DC), SourceKind.FACILITY, Quantity.POWER_W, math.nan),
     Rejection.NON_FINITE_VALUE),
    (PowerSample(5, TargetId("d1", "c1", "n1"), TagSet(Layer.HARDWARE), SourceKind.IPMI, Quantity.POWER_W, 1.0),
     Rejection.HARDWARE_WITHOUT_COMPONENT),
    (PowerSample(5, TargetId("d1", "c1", "n1"), TagSet(Layer.IT, platform="kubernetes"), SourceKind.OUTLET,
                 Quantity.POWER_W, 1.0), Rejection.PLATFORM_OUTSIDE_SOFTWARE),
    (PowerSample(5, TargetId("d1"), TagSet(Layer.DC), SourceKind.STATIC_CONFIG, Quantity.POWER_W, 1.0),
     Rejection.STATIC_SOURCE_IN_STREAM),
])
def test_rejection_reasons(sample, reason):
    assert validate_sample(sample) is reason


@pytest.mark.parametrize("kwargs", [
    {"dc": "d1", "node": "n1"},
    {"dc": "d1", "cluster": "c1", "process": "p"},
    {"dc": "d1", "cluster": "c1", "component": "dram"},
    {"dc": ""},
    {"dc": "d1", "cluster": ""},
])
def test_target_prefix_closure(kwargs):
    with pytest.raises(ValueError):
        TargetId(**kwargs)


def test_tagset_equality_includes_extra():
    a = TagSet(Layer.SOFTWARE, extra={"team": "x"})
    assert a == TagSet(Layer.SOFTWARE, extra={"team": "x"})
    assert a != TagSet(Layer.SOFTWARE)
    assert hash(a) == hash(TagSet("software", extra={"team": "x"}))


ident = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=8)


@st.composite
def samples(draw):
    layer = draw(st.sampled_from(list(Layer)))
    node = None if layer is Layer.DC else draw(ident)
    component = draw(ident) if layer is Layer.HARDWARE else None
    process = draw(ident) if layer is Layer.SOFTWARE else None
    platform = draw(st.none() | ident) if layer is Layer.SOFTWARE else None
    plane = draw(st.none() | st.sampled_from(list(Plane))) if layer is Layer.SOFTWARE else None
    extra = draw(st.dictionaries(ident, ident, max_size=2))
    return PowerSample(
        draw(st.integers(1, 2**50)),
        TargetId(draw(ident), draw(ident) if node else None, node, component, process),
        TagSet(layer, platform, plane, draw(st.none() | ident), extra),
        draw(st.sampled_from([k for k in SourceKind if k is not SourceKind.STATIC_CONFIG])),
        draw(st.sampled_from(list(Quantity))),
        draw(st.floats(0, 1e9)),
    )


@given(samples())
def test_wire_round_trip(s):
    assert validate_sample(s) is None
    back = sample_from_wire(sample_to_wire(s))
    assert back == s


def test_wire_csv_coercion_and_declared_source():
    rec = {"ts_ms": "1000", "dc": "d1", "cluster": "c1", "node": "n1", "component": "", "process": "",
           "layer": "it", "platform": "", "plane": "", "service": "", "source": "ipmi",
           "quantity": "power_w", "value": "12.5"}
    s = sample_from_wire(rec, declared_source=SourceKind.OUTLET)
    assert s.timestamp == 1000 and s.value == 12.5 and s.source is SourceKind.OUTLET
    assert s.target.component is None


def test_scope_round_trip():
    scope = make_scope(node="n1", dc="d1", cluster="c1", role=None)
    assert scope == "cluster=c1,dc=d1,node=n1"
    assert scope_labels(scope) == {"cluster": "c1", "dc": "d1", "node": "n1"}
    assert scope_labels("") == {}
    with pytest.raises(ValueError):
        make_scope(dc="a,b")


def test_metric_point_dict_round_trip():
    p = MetricPoint(MetricKind.SPUE, "dc=d1", 1000, 1000, 2.5, 5.0, 2.0, Validity.STALE)
    d = p.to_dict()
    assert set(d) == {"kind", "scope", "window_start_ms", "window_ms", "value", "num_j", "den_j", "validity"}
    assert MetricPoint.from_dict(d) == p
