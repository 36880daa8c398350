"""Resampling of multi-rate power and energy streams onto one window grid.

Power readings are integrated as a step function (zero-order hold) or a
piecewise-linear one (trapezoid). Every reading holds for at most
``staleness_windows * window_ms``; past that horizon the stream contributes
nothing and its windows are flagged stale. Cumulative energy counters are
differenced sample to sample, with wraparound corrected by the per-source
counter modulus.
"""

from __future__ import annotations

import logging
import math
import statistics
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import AlignedWindow, PowerSample, Quantity, SourceKind, TagSet, TargetId, Validity
from .validation import check_samples

logger = logging.getLogger(__name__)


class Integration(str, Enum):
    ZERO_ORDER_HOLD = "zero_order_hold"
    TRAPEZOID = "trapezoid"


class InsufficientDataError(ValueError):
    """No stream has the two samples needed to estimate a sampling interval."""


# When two sources report the same (target, tags), the first one present wins.
SOURCE_PRIORITY = (
    SourceKind.OUTLET,
    SourceKind.FACILITY,
    SourceKind.CPU_COUNTER,
    SourceKind.SW_METER,
    SourceKind.IPMI,
)


@dataclass(frozen=True)
class AlignmentPlan:
    window_ms: int
    staleness_windows: int = 5
    integration: Integration = Integration.ZERO_ORDER_HOLD
    wrap_max: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.window_ms, bool) or not isinstance(self.window_ms, int) or self.window_ms <= 0:
            raise ValueError(f"window_ms must be a positive integer, got {self.window_ms!r}")
        if self.staleness_windows < 1:
            raise ValueError("staleness_windows must be >= 1")
        object.__setattr__(self, "integration", Integration(self.integration))
        wraps = {}
        for key, value in dict(self.wrap_max).items():
            key = SourceKind(key).value
            if not value > 0:
                raise ValueError(f"wrap_max[{key}] must be positive")
            wraps[key] = float(value)
        object.__setattr__(self, "wrap_max", wraps)

    @property
    def horizon_ms(self) -> int:
        return self.staleness_windows * self.window_ms

    def wrap_for(self, source: SourceKind) -> float | None:
        return self.wrap_max.get(source.value)


def median_intervals(samples: Iterable[PowerSample]) -> list[float]:
    """Median inter-sample spacing (ms) of every stream that has at least two samples."""
    times: dict = defaultdict(list)
    for s in samples:
        times[s.stream_key].append(s.timestamp)
    out = []
    for ts in times.values():
        ts = sorted(set(ts))
        if len(ts) >= 2:
            out.append(statistics.median(b - a for a, b in zip(ts, ts[1:])))
    return out


def detect_window(intervals: Sequence[float], granularity_ms: int = 100) -> int:
    """Smallest window in which every stream expects at least one sample.

    That is the slowest stream's median interval, rounded up to a multiple of
    ``granularity_ms``.
    """
    intervals = [float(i) for i in intervals if i is not None and i > 0]
    if not intervals:
        raise InsufficientDataError("need at least one stream with two samples")
    slowest = max(intervals)
    return int(math.ceil(slowest / granularity_ms - 1e-12)) * granularity_ms


class _Stream:
    """Time-ordered samples of one (target, tags, source) with integration helpers."""

    __slots__ = ("quantity", "wrap", "ts", "vals", "deltas", "_prev_raw")

    def __init__(self, quantity: Quantity, wrap: float | None):
        self.quantity = quantity
        self.wrap = wrap
        self.ts: list[int] = []
        self.vals: list[float] = []
        self.deltas: list[float] = []  # counters only; 0.0 for the baseline sample
        self._prev_raw: float | None = None

    def append(self, ts: int, value: float) -> None:
        if self.ts and ts <= self.ts[-1]:
            if ts == self.ts[-1]:
                # duplicate timestamp: last value wins
                self._replace_last(value)
                return
            raise ValueError("samples must be time-ordered per stream")
        self.ts.append(ts)
        self.vals.append(value)
        if self.quantity is Quantity.ENERGY_J_CUM:
            self.deltas.append(self._delta(self._prev_raw, value))
            self._prev_raw = value

    def _replace_last(self, value: float) -> None:
        self.vals[-1] = value
        if self.quantity is Quantity.ENERGY_J_CUM:
            prev = self.vals[-2] if len(self.vals) >= 2 else None
            self.deltas[-1] = self._delta(prev, value)
            self._prev_raw = value

    def _delta(self, prev: float | None, value: float) -> float:
        if prev is None:
            return 0.0
        d = value - prev
        if d >= 0:
            return d
        if self.wrap is not None:
            return d + self.wrap
        logger.warning("counter decreased without a configured wrap_max; treating as reset")
        return value

    def prune_before(self, t: int) -> None:
        """Drop samples no longer needed for windows starting at or after ``t``."""
        keep = bisect_right(self.ts, t) - 1
        if keep > 0:
            del self.ts[:keep]
            del self.vals[:keep]
            if self.deltas:
                del self.deltas[:keep]

    def seen_before(self, b: int) -> bool:
        return bool(self.ts) and self.ts[0] < b

    def window(self, a: int, b: int, horizon: int, integration: Integration) -> tuple[float, Validity]:
        ts, vals = self.ts, self.vals
        j = bisect_left(ts, b)
        if j == 0:
            return 0.0, Validity.MISSING
        validity = Validity.STALE if b - ts[j - 1] > horizon else Validity.VALID
        if self.quantity is Quantity.ENERGY_J_CUM:
            i = bisect_left(ts, a)
            return math.fsum(self.deltas[i:j]), validity
        n = len(ts)
        i = max(bisect_right(ts, a) - 1, 0)
        acc = 0.0  # watt-milliseconds
        for k in range(i, j):
            t0 = ts[k]
            v0 = vals[k]
            nxt = ts[k + 1] if k + 1 < n else None
            linear = (
                integration is Integration.TRAPEZOID
                and nxt is not None
                and nxt - t0 <= horizon
            )
            end = min(nxt, t0 + horizon) if nxt is not None else t0 + horizon
            lo, hi = max(t0, a), min(end, b)
            if hi <= lo:
                continue
            if linear:
                v1 = vals[k + 1]
                slope = (v1 - v0) / (nxt - t0)
                acc += (v0 + slope * ((lo + hi) / 2 - t0)) * (hi - lo)
            else:
                acc += v0 * (hi - lo)
        return acc / 1000.0, validity


def _stream_of(samples: Sequence[PowerSample], plan: AlignmentPlan) -> _Stream:
    first = samples[0]
    stream = _Stream(first.quantity, plan.wrap_for(first.source))
    for s in samples:
        if s.quantity is not first.quantity:
            raise ValueError(f"mixed quantities in stream {s.stream_key}")
        stream.append(s.timestamp, s.value)
    return stream


def integrate_window(
    samples: Sequence[PowerSample], start: int, window_ms: int, plan: AlignmentPlan
) -> tuple[float, Validity]:
    """Energy (J) and validity of one stream over ``[start, start + window_ms)``.

    ``samples`` must belong to a single (target, tags, source) and be time-ordered.
    """
    if not samples:
        return 0.0, Validity.MISSING
    stream = _stream_of(samples, plan)
    return stream.window(start, start + window_ms, plan.horizon_ms, plan.integration)


def _pick_sources(
    streams: Mapping[tuple[TargetId, TagSet, SourceKind], _Stream], a: int, b: int, plan: AlignmentPlan
) -> AlignedWindow:
    energies: dict = {}
    validity: dict = {}
    chosen_rank: dict = {}
    for (target, tags, source), stream in streams.items():
        key = (target, tags)
        energy, val = stream.window(a, b, plan.horizon_ms, plan.integration)
        rank = SOURCE_PRIORITY.index(source)
        if key in validity:
            prev_missing = validity[key] is Validity.MISSING
            if val is Validity.MISSING or (not prev_missing and rank > chosen_rank[key]):
                continue
        energies[key] = energy
        validity[key] = val
        chosen_rank[key] = rank
    return AlignedWindow(start=a, duration=b - a, energies=energies, validity=validity)


def _group(samples: Iterable[PowerSample]) -> dict:
    groups: dict = defaultdict(list)
    for s in samples:
        groups[s.stream_key].append(s)
    return groups


def align(streams: Iterable[PowerSample], plan: AlignmentPlan) -> list[AlignedWindow]:
    """Contiguous windows from the first sample's window to the last sample's window."""
    groups = _group(streams)
    if not groups:
        return []
    built = {}
    for key, samples in groups.items():
        samples.sort(key=lambda s: s.timestamp)
        built[key] = _stream_of(samples, plan)
    w = plan.window_ms
    first = min(s.ts[0] for s in built.values())
    last = max(s.ts[-1] for s in built.values())
    origin = (first // w) * w
    return [_pick_sources(built, a, a + w, plan) for a in range(origin, (last // w) * w + 1, w)]


class StreamingAligner:
    """Incremental counterpart of :func:`align` for live ingestion.

    Windows are emitted once a watermark passes their end. Integration goes
    through the same code path, so a stream fed here produces the same
    window energies as a batch :func:`align` over the same samples.
    """

    def __init__(self, plan: AlignmentPlan):
        self.plan = plan
        self._streams: dict = {}
        self._origin: int | None = None
        self._next_start: int | None = None
        self._last_ts: int | None = None
        self.late = 0

    @property
    def next_window_start(self) -> int | None:
        return self._next_start

    def push(self, sample: PowerSample) -> bool:
        """Add one sample; returns False when it falls inside an already emitted window."""
        w = self.plan.window_ms
        if self._next_start is not None and sample.timestamp < self._next_start:
            self.late += 1
            return False
        start = (sample.timestamp // w) * w
        if self._next_start is None:
            self._origin = start if self._origin is None else min(self._origin, start)
        stream = self._streams.get(sample.stream_key)
        if stream is None:
            stream = _Stream(sample.quantity, self.plan.wrap_for(sample.source))
            self._streams[sample.stream_key] = stream
        elif stream.quantity is not sample.quantity:
            raise ValueError(f"mixed quantities in stream {sample.stream_key}")
        try:
            stream.append(sample.timestamp, sample.value)
        except ValueError:
            self.late += 1
            return False
        self._last_ts = sample.timestamp if self._last_ts is None else max(self._last_ts, sample.timestamp)
        return True

    def _emit(self, upto_start: int, stale_last: bool = False) -> list[AlignedWindow]:
        out = []
        if self._origin is None:
            return out
        w = self.plan.window_ms
        a = self._next_start if self._next_start is not None else self._origin
        while a <= upto_start:
            win = _pick_sources(self._streams, a, a + w, self.plan)
            if stale_last and a == upto_start:
                validity = {
                    k: (Validity.STALE if v is Validity.VALID else v) for k, v in win.validity.items()
                }
                win = AlignedWindow(win.start, win.duration, win.energies, validity)
            out.append(win)
            a += w
        self._next_start = a
        for stream in self._streams.values():
            stream.prune_before(a)
        return out

    def advance(self, watermark: int) -> list[AlignedWindow]:
        """Emit every window whose end is at or before ``watermark``.

        With trapezoid integration a window also waits for the staleness
        horizon past its end, since its last segment may interpolate towards
        a later sample.
        """
        if self._origin is None:
            return []
        w = self.plan.window_ms
        if self.plan.integration is Integration.TRAPEZOID:
            watermark -= self.plan.horizon_ms
        last_complete = (watermark // w) * w - w
        if self._last_ts is not None:
            last_complete = min(last_complete, (self._last_ts // w) * w)
        return self._emit(last_complete)

    def flush(self) -> list[AlignedWindow]:
        """Emit the remaining windows; the open (last) one is marked stale."""
        if self._last_ts is None:
            return []
        w = self.plan.window_ms
        last = (self._last_ts // w) * w
        if self._next_start is not None and self._next_start > last:
            return []
        return self._emit(last, stale_last=True)


class WindowAligner(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`align`.

    ``fit`` settles the window size (detected from the samples when
    ``window_ms`` is None); ``transform`` maps samples to aligned windows.

    Parameters
    ----------
    window_ms : int or None
    staleness_windows : int
    integration : {"zero_order_hold", "trapezoid"}
    wrap_max : dict mapping source kind name to counter modulus in joules
    """

    def __init__(self, window_ms=None, staleness_windows=5, integration="zero_order_hold", wrap_max=None):
        self.window_ms = window_ms
        self.staleness_windows = staleness_windows
        self.integration = integration
        self.wrap_max = wrap_max

    def fit(self, X, y=None):
        samples = check_samples(X)
        if self.window_ms is None:
            self.window_ms_ = detect_window(median_intervals(samples))
        else:
            self.window_ms_ = int(self.window_ms)
        self.plan_ = AlignmentPlan(
            window_ms=self.window_ms_,
            staleness_windows=self.staleness_windows,
            integration=Integration(self.integration),
            wrap_max=dict(self.wrap_max or {}),
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "plan_")
        return align(check_samples(X), self.plan_)
