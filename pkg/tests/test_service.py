import json
import os
import subprocess
import time
import urllib.request
from dataclasses import replace

import pytest

from conftest import xpue_cmd
from xpue.cli import main
from xpue.exposition import parse
from xpue.ingestion import post_samples
from xpue.model import sample_from_wire, sample_to_wire
from xpue.service import (
    CONFIG_ENV,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_UNDEFINED,
    ConfigError,
    ServeSession,
    check_config,
    default_config_path,
    dump_report,
    hosted_share_from_report,
    load_config,
    replay,
    report_points,
    resolve_config_path,
    run_samples,
)
from xpue.simulator import builtin, generate, iter_records
from xpue.scopes import errors_only

T0 = 1_700_000_000_000


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def _platform_records(seconds=5, hz=1, software_w=80.0):
    out = []
    for k in range(seconds * hz):
        ts = T0 + k * 1000 // hz
        base = {"ts_ms": ts, "dc": "d1", "cluster": "c1", "node": "n1", "quantity": "power_w"}
        out.append(dict(base, layer="it", source="outlet", value=270.0))
        out.append(dict(base, layer="hardware", source="ipmi", component="cpu-pkg0", value=100.0))
        out.append(dict(base, layer="software", source="sw_meter", process="vm-001", platform="openstack",
                        plane="hosted", value=software_w))
    return out


def _config(tmp_path, body):
    path = tmp_path / "cfg.toml"
    path.write_text(body)
    return path


STACK_CFG = """
[alignment]
window_ms = 1000
[[stacks]]
name = "openstack-vm"
layers = ["spue", "vpue(openstack)"]
[factors]
pue = 1.1
"""


# --- config ---------------------------------------------------------------


def test_default_config_is_clean(capsys):
    assert not errors_only(check_config(None))
    assert main(["check"]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_unknown_scope_stack(tmp_path, capsys):
    path = _config(tmp_path, '[[stacks]]\nname = "x"\nlayers = ["vpue(unknown-scope)"]\n')
    assert [d.code for d in errors_only(check_config(path))] == ["unknown_scope"]
    assert main(["check", "--config", str(path)]) == EXIT_CONFIG
    assert "unknown_scope" in capsys.readouterr().out


def test_negative_window(tmp_path):
    path = _config(tmp_path, "[alignment]\nwindow_ms = -5\n")
    assert main(["check", "--config", str(path)]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_registry_file(tmp_path):
    path = _config(tmp_path, '[registry]\npath = "nope.toml"\n')
    assert [d.code for d in check_config(path)] == ["missing_file"]


def test_config_env_fallback(tmp_path, monkeypatch):
    path = _config(tmp_path, "[alignment]\nwindow_ms = 250\n")
    assert resolve_config_path(None) == default_config_path()
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert resolve_config_path(None) == path
    assert load_config().window_ms == 250
    assert resolve_config_path(tmp_path / "x.toml") == tmp_path / "x.toml"


# --- replay ---------------------------------------------------------------


def test_empty_trace(tmp_path):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    code, report = replay(load_config(), [trace])
    assert code == EXIT_OK and report["windows"] == []


def test_cpue_from_trace(tmp_path):
    cfg = load_config(_config(tmp_path, STACK_CFG))
    trace = _write(tmp_path / "t.jsonl", _platform_records())
    out = tmp_path / "report.json"
    code, report = replay(cfg, [trace], out)
    assert code == EXIT_OK
    on_disk = json.loads(out.read_text())
    cpues = [p for w in on_disk["windows"] for p in w["points"] if p["kind"] == "cpue" and p["scope"] == "stack=openstack-vm"]
    assert cpues and all(p["value"] == pytest.approx(3.375, rel=1e-12) for p in cpues)
    gpues = [p for p in on_disk["totals"] if p["kind"] == "gpue" and p["scope"] == "stack=openstack-vm"]
    assert gpues[0]["value"] == pytest.approx(3.375 * 1.1)
    assert on_disk["ingest"]["accepted"] == 15
    assert set(on_disk) >= {"windows", "scopes", "stats", "ingest"}


def test_strict_undefined(tmp_path):
    cfg = load_config(_config(tmp_path, STACK_CFG))
    trace = _write(tmp_path / "t.jsonl", _platform_records(software_w=0.0))
    assert replay(cfg, [trace], strict=False)[0] == EXIT_OK
    assert replay(cfg, [trace], strict=True)[0] == EXIT_UNDEFINED
    cfg_path = tmp_path / "cfg.toml"
    assert main(["replay", "--config", str(cfg_path), "--trace", str(trace), "--out", str(tmp_path / "r.json"),
                 "--strict"]) == EXIT_UNDEFINED


def test_io_errors(tmp_path):
    assert replay(load_config(), [tmp_path / "missing.jsonl"])[0] == EXIT_IO
    trace = _write(tmp_path / "t.jsonl", _platform_records())
    (tmp_path / "blocker").write_text("")
    assert replay(load_config(), [trace], tmp_path / "blocker" / "r.json")[0] == EXIT_IO
    assert main(["replay", "--trace", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r.json")]) == EXIT_IO


def test_cli_config_error(tmp_path):
    bad = _config(tmp_path, "[metrics]\nfloor_j = -1\n")
    assert main(["replay", "--config", str(bad), "--trace", "x"]) == EXIT_CONFIG
    assert main(["replay", "--config", str(tmp_path / "none.toml"), "--trace", "x"]) == EXIT_CONFIG
    assert main(["replay", "--lateness-ms", "-1", "--trace", "x"]) == EXIT_CONFIG


def test_report_bytes_deterministic(tmp_path):
    sc = replace(builtin("kubernetes"), duration_s=20, max_units=30, ramp_s=20)
    trace = tmp_path / "k.jsonl"
    generate(sc, trace)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert replay(load_config(), [trace], a)[0] == EXIT_OK
    assert replay(load_config(), [trace], b)[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())
    assert report["config"]["window_ms"] == 1000
    stats = report["stats"]["spue"]["cluster=c1,dc=dc1"]
    assert set(stats) == {"cluster", "control", "nodes", "worker"}
    assert stats["nodes"]["min"] <= stats["nodes"]["median"] <= stats["nodes"]["max"]
    assert 0 < hosted_share_from_report(report, "kubernetes") < 1


# --- serve ----------------------------------------------------------------


def _scrape(session):
    host, port = session.exposition.address
    with urllib.request.urlopen(f"http://{host}:{port}/metrics", timeout=5) as r:
        return r.status, r.read().decode()


def _cfg_obj(tmp_path, lateness=0):
    cfg = load_config(_config(tmp_path, STACK_CFG))
    return replace(cfg, ingest=replace(cfg.ingest, lateness_ms=lateness))


def test_serve_scrape_and_sink(tmp_path):
    sink = tmp_path / "sink.lp"
    session = ServeSession(_cfg_obj(tmp_path), "127.0.0.1:0", "127.0.0.1:0", sink).start()
    try:
        assert _scrape(session) == (200, "")
        lines = [json.dumps(r) for r in _platform_records(seconds=3)]
        assert post_samples(session.ingest.address, lines)["accepted"] == 9
        assert session.wait_idle()
        deadline = time.time() + 5
        while not session.snapshot.points and time.time() < deadline:
            time.sleep(0.02)
        status, body = _scrape(session)
        assert status == 200
        points, _ = parse(body)
        spue = [p for p in points if p.kind.value == "spue" and p.scope == "cluster=c1,dc=d1,node=n1,role=worker"]
        assert spue and spue[0].value == pytest.approx(2.7)
        assert 'xpue_spue{cluster="c1",dc="d1",node="n1",role="worker"} 2.7 ' in body
    finally:
        report = session.stop()
    written = sink.read_text().splitlines()
    assert written and all(line.startswith("xpue,kind=") for line in written)
    assert len(report["windows"]) == 3
    last = report["windows"][-1]["points"]
    assert {p["validity"] for p in last} == {"stale"}


def test_serve_undefined_counter(tmp_path):
    with ServeSession(_cfg_obj(tmp_path), "127.0.0.1:0", "127.0.0.1:0") as session:
        recs = _platform_records(seconds=3)
        for r in recs:
            if r["layer"] == "hardware":
                r["value"] = 0.0
        post_samples(session.ingest.address, [json.dumps(r) for r in recs])
        assert session.wait_idle()
        deadline = time.time() + 5
        while not session.snapshot.points and time.time() < deadline:
            time.sleep(0.02)
        body = _scrape(session)[1]
    assert 'xpue_undefined_total{kind="spue"}' in body
    assert not any(line.startswith("xpue_spue{") for line in body.splitlines())


def test_mode_equivalence(tmp_path):
    sc = replace(builtin("openstack-ramp"), duration_s=15, max_units=40, ramp_s=15)
    records = list(iter_records(sc))
    cfg = _cfg_obj(tmp_path, lateness=0)
    samples = [sample_from_wire(r) for r in records]
    batch = run_samples(samples, cfg)
    with ServeSession(cfg, "127.0.0.1:0", "127.0.0.1:0") as session:
        lines = [json.dumps(sample_to_wire(s)) for s in samples]
        for i in range(0, len(lines), 2000):
            assert post_samples(session.ingest.address, lines[i:i + 2000])["accepted"] == len(lines[i:i + 2000])
        assert session.wait_idle()
        live = session.stop()
    a, b = report_points(batch), report_points(live)
    assert len(a) == len(b)
    last_start = batch["windows"][-1]["start_ms"]
    for p, q in zip(a, b):
        assert (p.kind, p.scope, p.window_start) == (q.kind, q.scope, q.window_start)
        for x, y in ((p.value, q.value), (p.numerator_j, q.numerator_j), (p.denominator_j, q.denominator_j)):
            assert (x is None and y is None) or x == pytest.approx(y, rel=1e-9, abs=1e-9)
        if p.window_start != last_start:
            assert p.validity == q.validity


def test_serve_bind_failure(tmp_path):
    with ServeSession(_cfg_obj(tmp_path), "127.0.0.1:0", "127.0.0.1:0") as first:
        host, port = first.ingest.address
        assert main(["serve", "--listen", f"{host}:{port}", "--exposition", "127.0.0.1:0"]) == EXIT_IO


# --- CLI subprocesses -------------------------------------------------------


def test_cli_sim_and_replay(tmp_path):
    out = tmp_path / "sim.jsonl"
    env = dict(os.environ)
    env.pop(CONFIG_ENV, None)
    r = subprocess.run(xpue_cmd() + ["sim", "--scenario", "amd-water", "--out", str(out), "--seed", "3"],
                       capture_output=True, text=True, env=env, timeout=120)
    assert r.returncode == 0, r.stderr
    assert out.stat().st_size > 0
    r = subprocess.run(xpue_cmd() + ["replay", "--trace", str(out)], capture_output=True, text=True, env=env,
                       timeout=120)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["windows"]
    r = subprocess.run(xpue_cmd() + ["sim", "--scenario", "nope", "--out", str(out)], capture_output=True,
                       text=True, env=env, timeout=60)
    assert r.returncode == EXIT_CONFIG


def test_cli_serve_subprocess(tmp_path):
    report = tmp_path / "serve.json"
    cfg = _config(tmp_path, STACK_CFG + "[ingest]\nlateness_ms = 0\n")
    proc = subprocess.Popen(xpue_cmd() + ["serve", "--config", str(cfg), "--listen", "127.0.0.1:0",
                                          "--exposition", "127.0.0.1:0", "--out", str(report)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        addrs = json.loads(proc.stdout.readline())
        host, port = addrs["ingest"].rsplit(":", 1)
        ack = post_samples((host, int(port)), [json.dumps(r) for r in _platform_records(seconds=4)])
        assert ack["accepted"] == 12
        time.sleep(0.5)
        host, port = addrs["exposition"].rsplit(":", 1)
        with urllib.request.urlopen(f"http://{host}:{port}/metrics", timeout=5) as r:
            assert r.status == 200
    finally:
        proc.send_signal(2)
        code = proc.wait(timeout=30)
    assert code == 0, proc.stderr.read()
    doc = json.loads(report.read_text())
    assert len(doc["windows"]) == 4
    assert dump_report(doc) == report.read_text()
