"""Trace replay, the live push endpoint, and per-stream reordering."""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import queue
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Iterable, Iterator

from .model import (
    WIRE_FIELDS,
    PowerSample,
    Rejection,
    SourceKind,
    sample_from_wire,
    validate_sample,
)

logger = logging.getLogger(__name__)

DEFAULT_LATENESS_MS = 5000
DEFAULT_QUEUE_BOUND = 65536


class TraceFormatError(ValueError):
    """The header (CSV) or first record (JSONL) of a trace cannot be parsed."""


class BindFailure(OSError):
    pass


@dataclass
class TraceFile:
    path: str | Path
    format: str | None = None  # "jsonl" | "csv"; inferred from the suffix when None
    declared_source: SourceKind | None = None

    def resolved_format(self) -> str:
        if self.format:
            if self.format not in ("jsonl", "csv"):
                raise ValueError(f"unknown trace format {self.format!r}")
            return self.format
        return "csv" if Path(self.path).suffix.lower() == ".csv" else "jsonl"


@dataclass
class IngestStats:
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)
    out_of_order: int = 0
    duplicate: int = 0
    lines_read: int = 0
    _first_ts: dict = field(default_factory=dict, repr=False)
    _last_ts: dict = field(default_factory=dict, repr=False)
    _count: Counter = field(default_factory=Counter, repr=False)

    def record(self, sample: PowerSample) -> None:
        src = sample.source.value
        self.accepted += 1
        self._count[src] += 1
        self._first_ts.setdefault(src, sample.timestamp)
        self._first_ts[src] = min(self._first_ts[src], sample.timestamp)
        self._last_ts[src] = max(self._last_ts.get(src, sample.timestamp), sample.timestamp)

    def reject(self, reason: Rejection) -> None:
        self.rejected[reason.value] += 1

    @property
    def per_source_rate(self) -> dict[str, float]:
        """Samples per second per source kind, from first to last timestamp."""
        rates = {}
        for src, n in sorted(self._count.items()):
            span_s = (self._last_ts[src] - self._first_ts[src]) / 1000.0
            rates[src] = (n - 1) / span_s if span_s > 0 else 0.0
        return rates

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "rejected": dict(sorted(self.rejected.items())),
            "out_of_order": self.out_of_order,
            "duplicate": self.duplicate,
            "lines_read": self.lines_read,
            "per_source_rate": self.per_source_rate,
        }


def parse_record(rec: Any, declared_source: SourceKind | None = None) -> PowerSample | Rejection:
    """Decode and validate one wire record, returning the sample or the rejection."""
    if not isinstance(rec, dict):
        return Rejection.MALFORMED
    try:
        sample = sample_from_wire(rec, declared_source)
    except (KeyError, TypeError, AttributeError):
        return Rejection.MALFORMED
    except ValueError as exc:
        if "requires" in str(exc) or "identifier" in str(exc):
            return Rejection.BROKEN_HIERARCHY
        return Rejection.MALFORMED
    reason = validate_sample(sample)
    return sample if reason is None else reason


def _jsonl_records(fh) -> Iterator[tuple[int, Any]]:
    first = True
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            if first:
                raise TraceFormatError(f"line {lineno}: {exc}") from exc
            rec = None
        first = False
        yield lineno, rec


def _csv_records(fh) -> Iterator[tuple[int, Any]]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        return
    if tuple(h.strip() for h in header) != WIRE_FIELDS:
        raise TraceFormatError(f"CSV header must be {','.join(WIRE_FIELDS)}")
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(WIRE_FIELDS):
            yield lineno, None
            continue
        yield lineno, dict(zip(WIRE_FIELDS, row))


def iter_trace(file: TraceFile | str | Path, stats: IngestStats) -> Iterator[PowerSample]:
    """Yield valid samples in file order, recording every non-blank line in ``stats``.

    Raises :class:`OSError` for unreadable files and :class:`TraceFormatError`
    when the header or first record cannot be parsed.
    """
    if not isinstance(file, TraceFile):
        file = TraceFile(file)
    fmt = file.resolved_format()
    with open(file.path, newline="", encoding="utf-8") as fh:
        records = _csv_records(fh) if fmt == "csv" else _jsonl_records(fh)
        for lineno, rec in records:
            stats.lines_read += 1
            result = parse_record(rec, file.declared_source)
            if isinstance(result, Rejection):
                stats.reject(result)
                logger.warning("%s:%d rejected (%s)", file.path, lineno, result.value)
                continue
            stats.record(result)
            yield result


def read_trace(file: TraceFile | str | Path) -> tuple[list[PowerSample], IngestStats]:
    stats = IngestStats()
    return list(iter_trace(file, stats)), stats


def order_buffer(
    stream: Iterable[PowerSample],
    lateness_budget: int = DEFAULT_LATENESS_MS,
    stats: IngestStats | None = None,
) -> Iterator[PowerSample]:
    """Reorder samples per (target, tags, source) within a lateness budget.

    A sample is released once its stream has seen a timestamp at least
    ``lateness_budget`` ms newer. Samples more than the budget behind the
    newest timestamp of their stream are counted as out of order and dropped.
    A second sample with the same timestamp replaces the pending one.
    """
    if lateness_budget < 0:
        raise ValueError("lateness_budget must be >= 0")
    stats = stats if stats is not None else IngestStats()
    newest: dict = {}
    last_emitted: dict = {}
    pending: dict = defaultdict(list)  # key -> heap of (ts, seq)
    by_slot: dict = {}  # (key, ts) -> sample
    seq = 0

    def release(key, upto: int | None) -> Iterator[PowerSample]:
        heap = pending[key]
        while heap and (upto is None or heap[0][0] <= upto):
            ts, _ = heapq.heappop(heap)
            sample = by_slot.pop((key, ts))
            last_emitted[key] = ts
            yield sample

    for sample in stream:
        key = sample.stream_key
        ts = sample.timestamp
        top = newest.get(key)
        if (top is not None and top - ts > lateness_budget) or (
            key in last_emitted and ts <= last_emitted[key]
        ):
            if key in last_emitted and ts == last_emitted[key]:
                stats.duplicate += 1
            else:
                stats.out_of_order += 1
            continue
        if (key, ts) in by_slot:
            stats.duplicate += 1
            by_slot[(key, ts)] = sample
        else:
            by_slot[(key, ts)] = sample
            heapq.heappush(pending[key], (ts, seq))
            seq += 1
        newest[key] = ts if top is None else max(top, ts)
        yield from release(key, newest[key] - lateness_budget)

    tail = []
    for key in list(pending):
        for s in release(key, None):
            tail.append(s)
    tail.sort(key=lambda s: s.timestamp)
    yield from tail


# --- live endpoint --------------------------------------------------------


@dataclass
class IngestAck:
    accepted: int = 0
    rejected: int = 0
    refused: int = 0
    reasons: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "refused": self.refused,
            "reasons": dict(sorted(self.reasons.items())),
            "backpressure": self.refused > 0,
        }


class IngestListener:
    """Handle for a running push endpoint.

    ``POST /samples`` takes newline-delimited JSON samples and answers with
    one JSON ack per request body. Valid samples go to ``self.queue``. When the
    queue is full the remaining samples of the batch are refused (HTTP 503),
    and the ack says how many, so the sender can retry.
    """

    def __init__(self, server: ThreadingHTTPServer, sample_queue: queue.Queue, stats: IngestStats):
        self._server = server
        self.queue = sample_queue
        self.stats = stats
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=server.serve_forever, name="xpue-ingest", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    def start(self) -> "IngestListener":
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "IngestListener":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def ingest_lines(self, lines: Iterable[bytes | str]) -> IngestAck:
        ack = IngestAck()
        with self._lock:
            for raw in lines:
                line = raw.decode("utf-8", "replace") if isinstance(raw, bytes) else raw
                if not line.strip():
                    continue
                self.stats.lines_read += 1
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    rec = None
                result = parse_record(rec)
                if isinstance(result, Rejection):
                    ack.rejected += 1
                    ack.reasons[result.value] += 1
                    self.stats.reject(result)
                    continue
                try:
                    self.queue.put_nowait(result)
                except queue.Full:
                    ack.refused += 1
                    continue
                ack.accepted += 1
                self.stats.record(result)
        return ack


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve_ingest(
    listen: str = "127.0.0.1:0",
    queue_bound: int = DEFAULT_QUEUE_BOUND,
    sample_queue: queue.Queue | None = None,
    stats: IngestStats | None = None,
) -> IngestListener:
    """Start the push endpoint in a background thread and return its handle."""
    if queue_bound <= 0:
        raise ValueError("queue_bound must be positive")
    sample_queue = sample_queue if sample_queue is not None else queue.Queue(maxsize=queue_bound)
    stats = stats if stats is not None else IngestStats()
    holder: dict[str, IngestListener] = {}

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def do_POST(self) -> None:  # noqa: N802
            if self.path.rstrip("/") != "/samples":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length) if length else b""
            ack = holder["listener"].ingest_lines(io.BytesIO(body))
            payload = json.dumps(ack.to_dict()).encode()
            self.send_response(503 if ack.refused else 200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt: str, *args) -> None:
            logger.debug("ingest: " + fmt, *args)

    try:
        server = ThreadingHTTPServer(_parse_addr(listen), Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind ingest endpoint {listen}: {exc}") from exc
    server.daemon_threads = True
    listener = IngestListener(server, sample_queue, stats)
    holder["listener"] = listener
    return listener.start()


def post_samples(address: tuple[str, int], lines: Iterable[str], timeout: float = 10.0) -> dict[str, Any]:
    """Small client for the push endpoint, used by tests and the serve/replay equivalence check."""
    import http.client

    body = "".join(line if line.endswith("\n") else line + "\n" for line in lines).encode()
    conn = http.client.HTTPConnection(*address, timeout=timeout)
    try:
        conn.request("POST", "/samples", body=body, headers={"Content-Type": "application/x-ndjson"})
        resp = conn.getresponse()
        data = json.loads(resp.read())
        data["status"] = resp.status
        return data
    finally:
        conn.close()

