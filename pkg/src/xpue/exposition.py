"""Text exposition of metric points, its parser, and the line-protocol sink.

Each defined point is written as

    xpue_<kind>{<labels>} <value> <window end ms>

followed by two companion samples ``xpue_<kind>_num_j`` and
``xpue_<kind>_den_j`` carrying the same labels plus ``window_ms``. Undefined
points keep only the companions and bump ``xpue_undefined_total{kind=...}``.
Labels are the scope labels, plus ``validity`` when the point is not valid,
sorted by name.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Mapping

from .ingestion import BindFailure, _parse_addr
from .model import MetricKind, MetricPoint, Validity, make_scope

logger = logging.getLogger(__name__)

PREFIX = "xpue_"
UNDEFINED_COUNTER = "xpue_undefined_total"
RESERVED_LABELS = frozenset({"validity", "window_ms"})
_LABEL_NAME = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")
_LINE = re.compile(r"^([a-zA-Z_:][a-zA-Z0-9_:]*)(?:\{(.*)\})? (\S+)(?: (-?\d+))?$")
_LABEL = re.compile(r'([a-zA-Z_][a-zA-Z0-9_]*)="((?:[^"\\]|\\.)*)"(,|$)')


class ExpositionError(ValueError):
    pass


def escape_label(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def unescape_label(value: str) -> str:
    out = []
    it = iter(value)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"n": "\n", "\\": "\\", '"': '"'}.get(nxt, "\\" + nxt))
    return "".join(out)


def _format_labels(labels: Mapping[str, str]) -> str:
    if not labels:
        return ""
    return "{" + ",".join(f'{k}="{escape_label(labels[k])}"' for k in sorted(labels)) + "}"


def point_labels(point: MetricPoint) -> dict[str, str]:
    labels = point.labels
    for key in labels:
        if key in RESERVED_LABELS or not _LABEL_NAME.match(key):
            raise ExpositionError(f"scope label {key!r} cannot be exposed")
    if point.validity is not Validity.VALID:
        labels["validity"] = point.validity.value
    return labels


def serialize(points: Iterable[MetricPoint], undefined: Mapping[str, int] | None = None) -> str:
    """Render ``points`` in the text format.

    ``undefined`` gives the running undefined counters; by default they are
    counted from ``points``.
    """
    lines = []
    counted: Counter = Counter()
    for p in points:
        labels = point_labels(p)
        name = PREFIX + p.kind.value
        ts = p.window_start + p.window_duration
        if p.defined:
            lines.append(f"{name}{_format_labels(labels)} {p.value!r} {ts}")
        else:
            counted[p.kind.value] += 1
        companion = dict(labels, window_ms=str(p.window_duration))
        lines.append(f"{name}_num_j{_format_labels(companion)} {p.numerator_j!r} {ts}")
        lines.append(f"{name}_den_j{_format_labels(companion)} {p.denominator_j!r} {ts}")
    counters = counted if undefined is None else undefined
    for kind in sorted(counters):
        lines.append(f'{UNDEFINED_COUNTER}{{kind="{escape_label(kind)}"}} {int(counters[kind])}')
    return "".join(line + "\n" for line in lines)


def parse_line(line: str) -> tuple[str, dict[str, str], float, int | None]:
    m = _LINE.match(line)
    if not m:
        raise ExpositionError(f"unparseable line: {line!r}")
    name, body, value, ts = m.groups()
    labels: dict[str, str] = {}
    if body:
        pos = 0
        while pos < len(body):
            lm = _LABEL.match(body, pos)
            if not lm:
                raise ExpositionError(f"bad labels in line: {line!r}")
            labels[lm.group(1)] = unescape_label(lm.group(2))
            pos = lm.end()
    try:
        fvalue = float(value)
    except ValueError:
        raise ExpositionError(f"bad value in line: {line!r}") from None
    return name, labels, fvalue, None if ts is None else int(ts)


def parse(text: str) -> tuple[list[MetricPoint], dict[str, int]]:
    """Inverse of :func:`serialize`: the points, in order, and the undefined counters."""
    order: list[tuple] = []
    parts: dict[tuple, dict] = {}
    counters: dict[str, int] = {}
    kinds = {k.value for k in MetricKind}
    # only "\n" separates lines; label values may hold other line-break characters
    for raw in text.split("\n"):
        if not raw or raw.startswith("#"):
            continue
        name, labels, value, ts = parse_line(raw)
        if name == UNDEFINED_COUNTER:
            counters[labels["kind"]] = int(value)
            continue
        if not name.startswith(PREFIX):
            raise ExpositionError(f"foreign metric {name!r}")
        kind, field = name[len(PREFIX):], "value"
        for suffix in ("_num_j", "_den_j"):
            if kind.endswith(suffix):
                kind, field = kind[: -len(suffix)], suffix[1:]
        if kind not in kinds or ts is None:
            raise ExpositionError(f"unexpected line {raw!r}")
        window_ms = labels.pop("window_ms", None)
        key = (kind, tuple(sorted(labels.items())), ts)
        if key not in parts:
            parts[key] = {}
            order.append(key)
        parts[key][field] = value
        if window_ms is not None:
            parts[key]["window_ms"] = int(window_ms)
    points = []
    for key in order:
        kind, labels, ts = key
        got = parts[key]
        if "num_j" not in got or "den_j" not in got or "window_ms" not in got:
            raise ExpositionError(f"incomplete point {kind} {dict(labels)} at {ts}")
        lab = dict(labels)
        validity = Validity(lab.pop("validity", "valid"))
        points.append(
            MetricPoint(
                kind=MetricKind(kind),
                scope=make_scope(**lab),
                window_start=ts - got["window_ms"],
                window_duration=got["window_ms"],
                value=got.get("value"),
                numerator_j=got["num_j"],
                denominator_j=got["den_j"],
                validity=validity,
            )
        )
    return points, counters


# --- line protocol --------------------------------------------------------


def _lp_escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace(",", "\\,").replace("=", "\\=").replace(" ", "\\ ")


def to_line_protocol(point: MetricPoint) -> str:
    """One record ``xpue,kind=..,scope=..,node=.. value=..,num_j=..,den_j=.. <ns>``.

    ``node`` is present only for node-level points and ``value`` only when defined.
    """
    tags = f"xpue,kind={point.kind.value},scope={_lp_escape(point.scope or '-')}"
    node = point.labels.get("node")
    if node is not None:
        tags += f",node={_lp_escape(node)}"
    fields = []
    if point.defined:
        fields.append(f"value={point.value!r}")
    fields.append(f"num_j={point.numerator_j!r}")
    fields.append(f"den_j={point.denominator_j!r}")
    ts_ns = (point.window_start + point.window_duration) * 1_000_000
    return f"{tags} {','.join(fields)} {ts_ns}"


class LineProtocolSink:
    """Appends one block of records per completed window to a file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        self.records = 0

    def write(self, points: Iterable[MetricPoint]) -> None:
        lines = [to_line_protocol(p) + "\n" for p in points]
        self._fh.writelines(lines)
        self._fh.flush()
        self.records += len(lines)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "LineProtocolSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- scrape endpoint ------------------------------------------------------


class Snapshot:
    """The last completed window set, swapped atomically by the pipeline."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._points: tuple[MetricPoint, ...] = ()
        self._undefined: Counter = Counter()

    def publish(self, points: Iterable[MetricPoint]) -> None:
        points = tuple(points)
        with self._lock:
            for p in points:
                if not p.defined:
                    self._undefined[p.kind.value] += 1
            self._points = points

    def render(self) -> str:
        with self._lock:
            points, undefined = self._points, dict(self._undefined)
        return serialize(points, undefined)

    @property
    def points(self) -> tuple[MetricPoint, ...]:
        with self._lock:
            return self._points


class ExpositionServer:
    def __init__(self, server: ThreadingHTTPServer):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, name="xpue-exposition", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    def start(self) -> "ExpositionServer":
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def serve_exposition(snapshot: Snapshot, listen: str = "127.0.0.1:0") -> ExpositionServer:
    """Serve ``GET /metrics`` with the current snapshot in the text format."""

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def do_GET(self) -> None:  # noqa: N802
            if self.path.split("?")[0].rstrip("/") not in ("", "/metrics"):
                self.send_error(404)
                return
            body = snapshot.render().encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain; version=0.0.4")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt: str, *args) -> None:
            logger.debug("exposition: " + fmt, *args)

    try:
        server = ThreadingHTTPServer(_parse_addr(listen), Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind exposition endpoint {listen}: {exc}") from exc
    server.daemon_threads = True
    return ExpositionServer(server).start()
