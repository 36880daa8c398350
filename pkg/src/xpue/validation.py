"""Input checks shared by the estimators, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from typing import Any, Iterable

from .model import AlignedWindow, MetricPoint, PowerSample


def _as_list(X: Any, name: str) -> list:
    if X is None:
        raise ValueError(f"{name}: expected a sequence, got None")
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name}: expected a sequence of objects, got {type(X).__name__}")
    try:
        return list(X)
    except TypeError as exc:
        raise TypeError(f"{name}: expected an iterable, got {type(X).__name__}") from exc


def check_samples(X: Iterable[PowerSample]) -> list[PowerSample]:
    """Materialize ``X`` and make sure every element is a :class:`PowerSample`."""
    samples = _as_list(X, "samples")
    for i, s in enumerate(samples):
        if not isinstance(s, PowerSample):
            raise TypeError(f"samples[{i}] is {type(s).__name__}, expected PowerSample")
    return samples


def check_windows(X: Iterable[AlignedWindow]) -> list[AlignedWindow]:
    windows = _as_list(X, "windows")
    prev_end = None
    for i, w in enumerate(windows):
        if not isinstance(w, AlignedWindow):
            raise TypeError(f"windows[{i}] is {type(w).__name__}, expected AlignedWindow")
        if w.duration <= 0:
            raise ValueError(f"windows[{i}] has non-positive duration")
        if prev_end is not None and w.start < prev_end:
            raise ValueError(f"windows[{i}] overlaps or precedes windows[{i - 1}]")
        prev_end = w.end
    return windows


def check_points(X: Iterable[MetricPoint]) -> list[MetricPoint]:
    points = _as_list(X, "points")
    for i, p in enumerate(points):
        if not isinstance(p, MetricPoint):
            raise TypeError(f"points[{i}] is {type(p).__name__}, expected MetricPoint")
    return points


def check_positive(value: Any, name: str, *, allow_zero: bool = False) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError) as exc:
        raise TypeError(f"{name} must be a number") from exc
    if v < 0 or (v == 0 and not allow_zero) or v != v:
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return v
