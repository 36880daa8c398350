import urllib.error
import urllib.request

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpue.exposition import (
    ExpositionError,
    LineProtocolSink,
    Snapshot,
    escape_label,
    parse,
    parse_line,
    serialize,
    serve_exposition,
    to_line_protocol,
    unescape_label,
)
from xpue.metrics import spue
from xpue.model import MetricKind, MetricPoint, Validity, make_scope

label_text = st.text(st.characters(blacklist_characters=",=", blacklist_categories=("Cs",)), min_size=1, max_size=12)
finite = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def points(draw):
    keys = draw(st.lists(st.sampled_from(["dc", "cluster", "node", "role", "scope", "stack"]), unique=True,
                         max_size=4))
    labels = {k: draw(label_text) for k in keys}
    defined = draw(st.booleans())
    start = draw(st.integers(0, 2**41))
    return MetricPoint(
        kind=draw(st.sampled_from(list(MetricKind))),
        scope=make_scope(**labels),
        window_start=start,
        window_duration=draw(st.integers(1, 10**6)),
        value=draw(finite) if defined else None,
        numerator_j=draw(finite),
        denominator_j=draw(finite),
        validity=draw(st.sampled_from(list(Validity))),
    )


def _unique(pts):
    seen, out = set(), []
    for p in pts:
        key = (p.kind, p.scope, p.validity, p.window_start + p.window_duration)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def test_format_example():
    p = spue(2.83, 1.0, scope="cluster=c1,dc=d1,node=n1", window_start=1700000000000, window_ms=1000)
    text = serialize([p])
    assert text.splitlines()[0] == 'xpue_spue{cluster="c1",dc="d1",node="n1"} 2.83 1700000001000'
    assert text.splitlines()[1] == 'xpue_spue_num_j{cluster="c1",dc="d1",node="n1",window_ms="1000"} 2.83 1700000001000'
    assert text.endswith("\n")


@settings(max_examples=200, deadline=None)
@given(st.lists(points(), max_size=20))
def test_round_trip(pts):
    pts = _unique(pts)
    back, counters = parse(serialize(pts))
    assert back == pts
    expected = {}
    for p in pts:
        if not p.defined:
            expected[p.kind.value] = expected.get(p.kind.value, 0) + 1
    assert counters == expected


@given(st.text(st.characters(blacklist_categories=("Cs",))))
def test_escape_round_trip(s):
    assert unescape_label(escape_label(s)) == s
    assert "\n" not in escape_label(s)


def test_labels_sorted_and_escaped():
    p = spue(3.0, 1.0, scope=make_scope(node='a"b\\c\nd', dc="z"), window_ms=1000)
    line = serialize([p]).splitlines()[0]
    assert line == 'xpue_spue{dc="z",node="a\\"b\\\\c\\nd"} 3.0 1000'
    assert parse_line(line)[1] == {"dc": "z", "node": 'a"b\\c\nd'}


def test_undefined_omitted_and_counted():
    p = spue(3.0, 0.0, scope="dc=d1", window_ms=1000)
    text = serialize([p, p.__class__(**{**p.__dict__, "window_start": 1000})])
    lines = text.splitlines()
    assert not any(line.startswith("xpue_spue{") for line in lines)
    assert lines[-1] == 'xpue_undefined_total{kind="spue"} 2'
    assert sum(line.startswith("xpue_spue_num_j") for line in lines) == 2


def test_stale_gets_validity_label():
    p = spue(2.0, 1.0, scope="dc=d1", window_ms=1000, validity=Validity.STALE)
    assert serialize([p]).startswith('xpue_spue{dc="d1",validity="stale"} 2.0 1000')


def test_reserved_label_rejected():
    with pytest.raises(ExpositionError):
        serialize([spue(2.0, 1.0, scope="validity=x")])


@pytest.mark.parametrize("line", ["xpue_spue{dc=d1} 1 2", "xpue_spue 1.0 abc", "not a line", 'xpue_spue{dc="x"} one 5'])
def test_parse_errors(line):
    with pytest.raises(ExpositionError):
        parse(line)


def test_parse_rejects_incomplete_and_foreign():
    with pytest.raises(ExpositionError):
        parse('xpue_spue{dc="d1"} 2.0 1000\n')
    with pytest.raises(ExpositionError):
        parse("node_cpu_seconds 1.0 5\n")


def test_line_protocol(tmp_path):
    p = spue(2.7, 1.0, scope="cluster=c1,dc=d1,node=n1", window_start=1000, window_ms=1000)
    assert to_line_protocol(p) == (
        "xpue,kind=spue,scope=cluster\\=c1\\,dc\\=d1\\,node\\=n1,node=n1 value=2.7,num_j=2.7,den_j=1.0 2000000000")
    u = spue(1.0, 0.0, window_start=0, window_ms=1000)
    assert to_line_protocol(u) == "xpue,kind=spue,scope=- num_j=1.0,den_j=0.0 1000000000"
    with LineProtocolSink(tmp_path / "out" / "sink.lp") as sink:
        sink.write([p, u])
        sink.write([p])
    assert (tmp_path / "out" / "sink.lp").read_text().count("\n") == 3 == sink.records


def _get(addr, path="/metrics"):
    with urllib.request.urlopen(f"http://{addr[0]}:{addr[1]}{path}", timeout=5) as r:
        return r.status, r.read().decode()


def test_scrape_endpoint():
    snap = Snapshot()
    server = serve_exposition(snap, "127.0.0.1:0")
    try:
        assert _get(server.address) == (200, "")
        snap.publish([spue(2.0, 1.0, scope="dc=d1", window_ms=1000), spue(2.0, 0.0, scope="dc=d1", window_ms=1000)])
        status, body = _get(server.address)
        assert status == 200 and body == snap.render()
        assert 'xpue_undefined_total{kind="spue"} 1' in body
        snap.publish([spue(2.0, 0.0, scope="dc=d1", window_start=1000, window_ms=1000)])
        assert 'xpue_undefined_total{kind="spue"} 2' in _get(server.address)[1]
        with pytest.raises(urllib.error.HTTPError):
            _get(server.address, "/other")
    finally:
        server.close()
