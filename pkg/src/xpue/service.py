"""Engine configuration, offline replay, the live serve pipeline, and config checks."""

from __future__ import annotations

import heapq
import json
import logging
import math
import os
import queue
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .alignment import AlignmentPlan, InsufficientDataError, StreamingAligner, align, detect_window, median_intervals
from .exposition import LineProtocolSink, Snapshot, serve_exposition
from .ingestion import (
    DEFAULT_LATENESS_MS,
    DEFAULT_QUEUE_BOUND,
    IngestStats,
    TraceFile,
    iter_trace,
    order_buffer,
    serve_ingest,
)
from .metrics import EnergyLedger, XPUEEngine, distribution
from .model import COMPOUND_KINDS, MetricKind, MetricPoint, PowerSample, SourceKind, Validity
from .scopes import (
    Diagnostic,
    LayerStack,
    RegistryError,
    ScopeRegistry,
    errors_only,
    load_document,
    parse_layer,
    validate_stack,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNDEFINED = 2
EXIT_IO = 3
CONFIG_ENV = "XPUE_CONFIG"
FALLBACK_WINDOW_MS = 1000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IngestConfig:
    listen: str = "127.0.0.1:9101"
    lateness_ms: int = DEFAULT_LATENESS_MS
    queue_bound: int = DEFAULT_QUEUE_BOUND


@dataclass(frozen=True)
class EngineConfig:
    """Everything ``replay`` and ``serve`` need; see the shipped ``default.toml``."""

    ingest: IngestConfig = field(default_factory=IngestConfig)
    window_ms: int | None = None  # None: detect from the trace
    staleness_windows: int = 5
    integration: str = "zero_order_hold"
    wrap_max: Mapping[str, float] = field(default_factory=dict)
    registry_path: Path | None = None
    switch_as_it: bool | None = None
    stacks: tuple = ()
    pue: float | None = None
    cue: float | None = None
    region: str | None = None
    cef: Mapping[str, float] = field(default_factory=dict)
    dc_region: Mapping[str, str] = field(default_factory=dict)
    annual_water_l: float | None = None
    it_energy_kwh: float | None = None
    floor_j: float = 0.1
    exposition_listen: str = "127.0.0.1:9102"
    sink_path: Path | None = None
    source: Path | None = None

    def plan(self, window_ms: int) -> AlignmentPlan:
        return AlignmentPlan(window_ms, self.staleness_windows, self.integration, dict(self.wrap_max))

    def registry(self) -> ScopeRegistry:
        reg = ScopeRegistry.load(self.registry_path) if self.registry_path else ScopeRegistry.default()
        if self.switch_as_it is not None:
            reg = ScopeRegistry(reg.rules, reg.stacks, self.switch_as_it)
        return reg

    def carbon_factor(self) -> float | None:
        if self.cue is not None:
            return self.cue
        if self.region is not None:
            return self.cef.get(self.region)
        return None

    def engine(self) -> XPUEEngine:
        per_dc = {dc: self.cef[r] for dc, r in self.dc_region.items() if r in self.cef}
        if self.region is not None and self.region in self.cef:
            per_dc["*"] = self.cef[self.region]
        return XPUEEngine(
            registry=self.registry(),
            stacks=list(self.stacks),
            floor_j=self.floor_j,
            pue=self.pue,
            cue=self.carbon_factor(),
            annual_water_l=self.annual_water_l,
            it_energy_kwh=self.it_energy_kwh,
            cef=per_dc or None,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "window_ms": self.window_ms,
            "staleness_windows": self.staleness_windows,
            "integration": self.integration,
            "wrap_max": dict(sorted(self.wrap_max.items())),
            "floor_j": self.floor_j,
            "lateness_ms": self.ingest.lateness_ms,
        }


def default_config_path() -> Path:
    return Path(str(resources.files("xpue").joinpath("data/default.toml")))


def resolve_config_path(path: str | Path | None) -> Path:
    """``path``, else ``$XPUE_CONFIG``, else the shipped default."""
    if path:
        return Path(path)
    env = os.environ.get(CONFIG_ENV)
    if env:
        return Path(env)
    return default_config_path()


def _positive(diags: list, name: str, value: Any, *, integer: bool = False, allow_zero: bool = False) -> None:
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if ok and integer:
        ok = isinstance(value, int)
    if ok:
        ok = value >= 0 if allow_zero else value > 0
    if not ok:
        diags.append(Diagnostic("bad_value", f"{name} must be a {'non-negative' if allow_zero else 'positive'} "
                                             f"{'integer' if integer else 'number'}, got {value!r}"))


def _build(doc: Mapping[str, Any], base: Path | None) -> tuple[EngineConfig | None, list[Diagnostic]]:
    diags: list[Diagnostic] = []
    known = {"ingest", "alignment", "registry", "stacks", "factors", "exposition", "sink", "metrics"}
    for key in sorted(set(doc) - known):
        diags.append(Diagnostic("unknown_key", f"unknown config section {key!r}", "warning"))

    def section(name: str) -> dict:
        value = doc.get(name, {})
        if not isinstance(value, Mapping):
            diags.append(Diagnostic("bad_value", f"[{name}] must be a table"))
            return {}
        return dict(value)

    ing, al, reg, fac = section("ingest"), section("alignment"), section("registry"), section("factors")
    expo, sink, met = section("exposition"), section("sink"), section("metrics")
    ingest = IngestConfig(
        listen=str(ing.get("listen", IngestConfig.listen)),
        lateness_ms=ing.get("lateness_ms", DEFAULT_LATENESS_MS),
        queue_bound=ing.get("queue_bound", DEFAULT_QUEUE_BOUND),
    )
    _positive(diags, "ingest.lateness_ms", ingest.lateness_ms, integer=True, allow_zero=True)
    _positive(diags, "ingest.queue_bound", ingest.queue_bound, integer=True)
    window_ms = al.get("window_ms")
    if window_ms is not None:
        _positive(diags, "alignment.window_ms", window_ms, integer=True)
    staleness = al.get("staleness_windows", 5)
    _positive(diags, "alignment.staleness_windows", staleness, integer=True)
    integration = al.get("integration", "zero_order_hold")
    if integration not in ("zero_order_hold", "trapezoid"):
        diags.append(Diagnostic("bad_value", f"alignment.integration {integration!r} unknown"))
    wrap_max = dict(al.get("wrap_max", {}))
    for key, value in wrap_max.items():
        if key not in {s.value for s in SourceKind}:
            diags.append(Diagnostic("bad_value", f"alignment.wrap_max: unknown source {key!r}"))
        _positive(diags, f"alignment.wrap_max.{key}", value)
    registry_path = None
    if reg.get("path"):
        registry_path = Path(reg["path"])
        if not registry_path.is_absolute() and base is not None:
            registry_path = base / registry_path
        if not registry_path.exists():
            diags.append(Diagnostic("missing_file", f"registry file {registry_path} does not exist"))
    switch_as_it = reg.get("switch_as_it")
    stacks = []
    raw_stacks = doc.get("stacks", [])
    if not isinstance(raw_stacks, list):
        diags.append(Diagnostic("bad_value", "stacks must be an array of tables"))
        raw_stacks = []
    for entry in raw_stacks:
        try:
            stacks.append(LayerStack(
                name=entry["name"],
                layers=tuple(parse_layer(x) for x in entry.get("layers", [])),
                pue=entry.get("pue"), cue=entry.get("cue"), wue=entry.get("wue"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            diags.append(Diagnostic("bad_stack", f"stack {entry!r}: {exc}"))
    for name in ("pue", "cue", "annual_water_l", "it_energy_kwh"):
        if fac.get(name) is not None:
            _positive(diags, f"factors.{name}", fac[name], allow_zero=name == "cue")
    if fac.get("pue") is not None and isinstance(fac["pue"], (int, float)) and fac["pue"] < 1:
        diags.append(Diagnostic("bad_factor", f"factors.pue must be >= 1, got {fac['pue']!r}"))
    cef = dict(fac.get("cef", {}))
    for region, value in cef.items():
        _positive(diags, f"factors.cef.{region}", value, allow_zero=True)
    region = fac.get("region")
    if region is not None and region not in cef:
        diags.append(Diagnostic("bad_value", f"factors.region {region!r} has no entry in factors.cef"))
    floor_j = met.get("floor_j", 0.1)
    _positive(diags, "metrics.floor_j", floor_j, allow_zero=True)
    sink_path = None
    if sink.get("path"):
        sink_path = Path(sink["path"])
        if not sink_path.is_absolute() and base is not None:
            sink_path = base / sink_path
    if errors_only(diags):
        return None, diags
    config = EngineConfig(
        ingest=ingest,
        window_ms=window_ms,
        staleness_windows=staleness,
        integration=integration,
        wrap_max=wrap_max,
        registry_path=registry_path,
        switch_as_it=switch_as_it,
        stacks=tuple(stacks),
        pue=fac.get("pue"),
        cue=fac.get("cue"),
        region=region,
        cef=cef,
        dc_region=dict(fac.get("dc_region", {})),
        annual_water_l=fac.get("annual_water_l"),
        it_energy_kwh=fac.get("it_energy_kwh"),
        floor_j=floor_j,
        exposition_listen=str(expo.get("listen", EngineConfig.exposition_listen)),
        sink_path=sink_path,
    )
    try:
        registry = config.registry().with_stacks(config.stacks)
    except (RegistryError, KeyError, TypeError, ValueError) as exc:
        diags.append(Diagnostic("bad_registry", str(exc)))
        return None, diags
    for stack in registry.stacks:
        diags.extend(validate_stack(stack, registry))
    if errors_only(diags):
        return None, diags
    return config, diags


def check_config(path: str | Path | None = None) -> list[Diagnostic]:
    """Every diagnostic for the config at ``path``; clean when none is an error."""
    path = resolve_config_path(path)
    try:
        doc = load_document(path)
    except OSError as exc:
        return [Diagnostic("missing_file", f"cannot read config {path}: {exc}")]
    except ValueError as exc:
        return [Diagnostic("parse_error", f"{path}: {exc}")]
    _, diags = _build(doc, path.parent)
    return diags


def load_config(path: str | Path | None = None) -> EngineConfig:
    path = resolve_config_path(path)
    try:
        doc = load_document(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    config, diags = _build(doc, path.parent)
    errors = errors_only(diags)
    if config is None or errors:
        raise ConfigError("; ".join(str(d) for d in errors))
    for d in diags:
        logger.warning("%s", d)
    return EngineConfig(**{**config.__dict__, "source": path})


# --- report ---------------------------------------------------------------


def _stats_tables(points: Sequence[MetricPoint]) -> dict[str, Any]:
    """Min/max/mean/median tables: per cluster, the cluster value over windows and per-node values by role."""
    groups: dict = defaultdict(lambda: defaultdict(list))
    for p in points:
        if p.kind not in (MetricKind.SPUE, MetricKind.VPUE) or not p.defined or p.validity is not Validity.VALID:
            continue
        lab = p.labels
        if "cluster" not in lab:
            continue
        cluster = f"cluster={lab['cluster']},dc={lab['dc']}"
        if "node" in lab:
            groups[(p.kind.value, cluster)][lab.get("role", "unknown")].append(p.value)
            groups[(p.kind.value, cluster)]["nodes"].append(p.value)
        else:
            groups[(p.kind.value, cluster)]["cluster"].append(p.value)
    out: dict = defaultdict(dict)
    for (kind, cluster), rows in sorted(groups.items()):
        out[kind][cluster] = {row: distribution(vals).to_dict() for row, vals in sorted(rows.items())}
    return dict(out)


def _scope_totals(ledger: EnergyLedger | None, totals: Sequence[MetricPoint]) -> dict[str, Any]:
    if ledger is None:
        return {}
    by_scope = {(p.kind.value, p.scope): p for p in totals}
    out = {}
    for name, st in sorted(ledger.scopes.items()):
        scope = f"scope={name}"
        entry = {
            "software_j": st.software_j,
            "hardware_j": st.hardware_j,
            "hosted_j": st.hosted_j,
            "infrastructure_j": st.infrastructure_j,
            "hosted_share": st.hosted_j / st.software_j if st.software_j > 0 else 0.0,
        }
        for kind in ("vpue", "vpue_platform"):
            p = by_scope.get((kind, scope))
            entry[kind] = p.value if p is not None else None
        out[name] = entry
    return out


def build_report(windows_points: Sequence[tuple[int, int, list[MetricPoint]]], totals: Sequence[MetricPoint],
                 ledger: EnergyLedger | None, stats: IngestStats, config: EngineConfig, window_ms: int | None,
                 ) -> dict[str, Any]:
    all_points = [p for _, _, pts in windows_points for p in pts]
    undefined: dict = defaultdict(int)
    for p in all_points:
        if not p.defined:
            undefined[p.kind.value] += 1
    return {
        "config": dict(config.summary(), window_ms=window_ms),
        "windows": [
            {"start_ms": start, "window_ms": dur, "points": [p.to_dict() for p in pts]}
            for start, dur, pts in windows_points
        ],
        "totals": [p.to_dict() for p in totals],
        "scopes": _scope_totals(ledger, totals),
        "stats": _stats_tables(all_points),
        "ingest": stats.to_dict(),
        "undefined": dict(sorted(undefined.items())),
    }


def dump_report(report: Mapping[str, Any]) -> str:
    return json.dumps(report, sort_keys=True, indent=1, allow_nan=False) + "\n"


def undefined_compounds(report: Mapping[str, Any]) -> int:
    kinds = {k.value for k in COMPOUND_KINDS}
    n = sum(1 for w in report["windows"] for p in w["points"] if p["kind"] in kinds and p["value"] is None)
    return n + sum(1 for p in report["totals"] if p["kind"] in kinds and p["value"] is None)


# --- replay ---------------------------------------------------------------


def run_samples(samples: Iterable[PowerSample], config: EngineConfig, stats: IngestStats | None = None
                ) -> dict[str, Any]:
    """Reorder and align ``samples``, evaluate every window, and return the report document."""
    stats = stats if stats is not None else IngestStats()
    ordered = list(order_buffer(samples, config.ingest.lateness_ms, stats))
    window_ms = config.window_ms
    if window_ms is None and ordered:
        try:
            window_ms = detect_window(median_intervals(ordered))
        except InsufficientDataError:
            window_ms = FALLBACK_WINDOW_MS
            logger.warning("cannot detect a window size; using %d ms", window_ms)
    engine = config.engine().fit()
    windows = align(ordered, config.plan(window_ms)) if ordered else []
    ledgers = engine.ledgers(windows)
    per_window = [(lg.window_start, lg.window_ms, engine.compute(lg)) for lg in ledgers]
    combined = EnergyLedger.combine(ledgers)
    totals = engine.compute(combined) if combined is not None else []
    return build_report(per_window, totals, combined, stats, config, window_ms)


def replay(config: EngineConfig, traces: Sequence[str | Path | TraceFile], report_path: str | Path | None = None,
           strict: bool = False) -> tuple[int, dict[str, Any] | None]:
    """Run the pipeline over trace files and write the report.

    Returns the exit code (0 ok, 2 undefined compound under ``strict``,
    3 unreadable input or unwritable report) and the report.
    """
    stats = IngestStats()

    def samples():
        for trace in traces:
            yield from iter_trace(trace, stats)

    try:
        report = run_samples(samples(), config, stats)
    except OSError as exc:
        logger.error("cannot read trace: %s", exc)
        return EXIT_IO, None
    if report_path is not None:
        try:
            Path(report_path).parent.mkdir(parents=True, exist_ok=True)
            Path(report_path).write_text(dump_report(report), encoding="utf-8")
        except OSError as exc:
            logger.error("cannot write report: %s", exc)
            return EXIT_IO, report
    if strict and undefined_compounds(report):
        return EXIT_UNDEFINED, report
    return EXIT_OK, report


# --- serve ----------------------------------------------------------------


class _Watermark:
    """Global reorder buffer for the live pipeline.

    Samples are released in timestamp order once the newest timestamp seen
    is ``lateness`` ms past them; anything older than what was already
    released counts as out of order.
    """

    def __init__(self, lateness: int, stats: IngestStats):
        self.lateness = lateness
        self.stats = stats
        self.newest: int | None = None
        self.released: int | None = None
        self._heap: list = []
        self._seq = 0

    def push(self, sample: PowerSample) -> list[PowerSample]:
        if self.released is not None and sample.timestamp < self.released:
            self.stats.out_of_order += 1
            return []
        heapq.heappush(self._heap, (sample.timestamp, self._seq, sample))
        self._seq += 1
        self.newest = sample.timestamp if self.newest is None else max(self.newest, sample.timestamp)
        return self._release(self.newest - self.lateness)

    def _release(self, upto: int | None) -> list[PowerSample]:
        out = []
        while self._heap and (upto is None or self._heap[0][0] <= upto):
            ts, _, s = heapq.heappop(self._heap)
            out.append(s)
            self.released = ts
        return out

    def drain(self) -> list[PowerSample]:
        return self._release(None)

    @property
    def watermark(self) -> int | None:
        return None if self.newest is None else self.newest - self.lateness


class ServeSession:
    """ingest -> reorder -> streaming alignment -> metrics -> exposition and sink.

    The pipeline thread owns all window state; scrapes read the snapshot of
    the last completed window. :meth:`stop` closes the ingest endpoint,
    drains what was queued, and flushes the open window as stale.
    """

    def __init__(self, config: EngineConfig, listen: str | None = None, exposition_listen: str | None = None,
                 sink_path: str | Path | None = None):
        self.config = config
        self.listen = listen or config.ingest.listen
        self.exposition_listen = exposition_listen or config.exposition_listen
        self.sink_path = sink_path if sink_path is not None else config.sink_path
        self.window_ms = config.window_ms or FALLBACK_WINDOW_MS
        self.engine = config.engine().fit()
        self.aligner = StreamingAligner(config.plan(self.window_ms))
        self.stats = IngestStats()
        self.snapshot = Snapshot()
        self.windows: list[tuple[int, int, list[MetricPoint]]] = []
        self.ledger: EnergyLedger | None = None
        self._queue: queue.Queue = queue.Queue(maxsize=config.ingest.queue_bound)
        self._buffer = _Watermark(config.ingest.lateness_ms, self.stats)
        self._stop = threading.Event()
        self._idle = threading.Condition()
        self._busy = 0
        self._thread = threading.Thread(target=self._run, name="xpue-pipeline", daemon=True)
        self.ingest = None
        self.exposition = None
        self.sink = None

    def start(self) -> "ServeSession":
        self.ingest = serve_ingest(self.listen, self.config.ingest.queue_bound, self._queue, self.stats)
        try:
            self.exposition = serve_exposition(self.snapshot, self.exposition_listen)
        except Exception:
            self.ingest.close()
            raise
        if self.sink_path is not None:
            self.sink = LineProtocolSink(self.sink_path)
        self._thread.start()
        return self

    def _publish(self, windows) -> None:
        for win in windows:
            ledger = EnergyLedger.from_window(win, self.engine.registry_)
            points = self.engine.compute(ledger)
            self.windows.append((win.start, win.duration, points))
            if self.ledger is None:
                self.ledger = EnergyLedger(ledger.window_start, ledger.window_ms)
            self.ledger.merge(ledger)
            self.snapshot.publish(points)
            if self.sink is not None:
                self.sink.write(points)

    def _feed(self, samples: list[PowerSample]) -> None:
        for s in samples:
            if not self.aligner.push(s):
                self.stats.out_of_order += 1
        wm = self._buffer.watermark
        if wm is not None:
            self._publish(self.aligner.advance(wm))

    def _run(self) -> None:
        while True:
            try:
                sample = self._queue.get(timeout=0.05)
            except queue.Empty:
                if self._stop.is_set():
                    break
                with self._idle:
                    self._idle.notify_all()
                continue
            self._feed(self._buffer.push(sample))
        for s in self._buffer.drain():
            if not self.aligner.push(s):
                self.stats.out_of_order += 1
        self._publish(self.aligner.flush())
        with self._idle:
            self._idle.notify_all()

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until the ingest queue has been consumed."""
        with self._idle:
            return self._idle.wait_for(lambda: self._queue.empty(), timeout)

    def stop(self) -> dict[str, Any]:
        """Graceful shutdown; returns the session report."""
        if self.ingest is not None:
            self.ingest.close()
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join()
        if self.exposition is not None:
            self.exposition.close()
        if self.sink is not None:
            self.sink.close()
        return self.report()

    def report(self) -> dict[str, Any]:
        totals = self.engine.compute(self.ledger) if self.ledger is not None else []
        return build_report(self.windows, totals, self.ledger, self.stats, self.config, self.window_ms)

    def __enter__(self) -> "ServeSession":
        return self.start()

    def __exit__(self, *exc) -> None:
        if not self._stop.is_set():
            self.stop()


def report_points(report: Mapping[str, Any]) -> list[MetricPoint]:
    return [MetricPoint.from_dict(p) for w in report["windows"] for p in w["points"]]


def hosted_share_from_report(report: Mapping[str, Any], scope: str) -> float:
    return report["scopes"][scope]["hosted_share"]

