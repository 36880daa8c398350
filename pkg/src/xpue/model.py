"""Data types shared by every stage of the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping


class SourceKind(str, Enum):
    """Where a reading comes from. Values are the wire names."""

    FACILITY = "facility"
    OUTLET = "outlet"
    IPMI = "ipmi"
    CPU_COUNTER = "cpu_counter"
    SW_METER = "sw_meter"
    STATIC_CONFIG = "static_config"  # never valid inside a sample stream


class Quantity(str, Enum):
    POWER_W = "power_w"
    ENERGY_J_CUM = "energy_j_cum"


class Layer(str, Enum):
    DC = "dc"
    IT = "it"
    HARDWARE = "hardware"
    SOFTWARE = "software"


class Plane(str, Enum):
    CONTROL = "control"
    WORKER = "worker"
    HOSTED = "hosted"


class Validity(str, Enum):
    VALID = "valid"
    STALE = "stale"
    MISSING = "missing"


class MetricKind(str, Enum):
    PUE = "pue"
    DCIE = "dcie"
    CUE = "cue"
    SPUE = "spue"
    VPUE = "vpue"
    VPUE_PLATFORM = "vpue_platform"
    CPUE = "cpue"
    GPUE = "gpue"
    GCUE = "gcue"
    GWUE = "gwue"


COMPOUND_KINDS = frozenset({MetricKind.CPUE, MetricKind.GPUE, MetricKind.GCUE, MetricKind.GWUE})


@dataclass(frozen=True)
class TargetId:
    """Hierarchical identity of a measured thing, from data center down to a process.

    Construction enforces prefix closure: a process or component needs a node,
    a node needs a cluster, and every present identifier is non-empty.
    """

    dc: str
    cluster: str | None = None
    node: str | None = None
    component: str | None = None
    process: str | None = None

    def __post_init__(self) -> None:
        for name in ("dc", "cluster", "node", "component", "process"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, str) or value == ""):
                raise ValueError(f"empty or non-string identifier for {name!r}")
        if self.dc is None:
            raise ValueError("dc is required")
        if (self.process is not None or self.component is not None) and self.node is None:
            raise ValueError("process/component requires a node")
        if self.node is not None and self.cluster is None:
            raise ValueError("node requires a cluster")

    def sort_key(self) -> tuple[str, ...]:
        return tuple(getattr(self, n) or "" for n in ("dc", "cluster", "node", "component", "process"))

    @property
    def node_key(self) -> tuple[str, str, str] | None:
        if self.node is None:
            return None
        return (self.dc, self.cluster, self.node)  # type: ignore[return-value]


@dataclass(frozen=True)
class TagSet:
    """Scope tags attached to a sample. ``extra`` is an open string map."""

    layer: Layer
    platform: str | None = None
    plane: Plane | None = None
    service: str | None = None
    extra: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer", Layer(self.layer))
        if self.plane is not None:
            object.__setattr__(self, "plane", Plane(self.plane))
        object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))

    def __hash__(self) -> int:
        return hash((self.layer, self.platform, self.plane, self.service, tuple(sorted(self.extra.items()))))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TagSet):
            return NotImplemented
        return (
            self.layer == other.layer
            and self.platform == other.platform
            and self.plane == other.plane
            and self.service == other.service
            and dict(self.extra) == dict(other.extra)
        )

    def sort_key(self) -> tuple:
        return (
            self.layer.value,
            self.platform or "",
            self.plane.value if self.plane else "",
            self.service or "",
            tuple(sorted(self.extra.items())),
        )


@dataclass(frozen=True)
class PowerSample:
    """One timestamped reading. Invariants are checked by :func:`validate_sample`,
    not at construction, so that bad input can be reported instead of raised."""

    timestamp: int
    target: TargetId
    tags: TagSet
    source: SourceKind
    quantity: Quantity
    value: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", SourceKind(self.source))
        object.__setattr__(self, "quantity", Quantity(self.quantity))

    @property
    def stream_key(self) -> tuple[TargetId, TagSet, SourceKind]:
        return (self.target, self.tags, self.source)


class Rejection(str, Enum):
    """Machine-readable reasons for refusing a sample."""

    NEGATIVE_VALUE = "negative_value"
    NON_FINITE_VALUE = "non_finite_value"
    NONPOSITIVE_TIMESTAMP = "nonpositive_timestamp"
    UNHOUSED_SOFTWARE_TARGET = "unhoused_software_target"
    HARDWARE_WITHOUT_COMPONENT = "hardware_without_component"
    PLATFORM_OUTSIDE_SOFTWARE = "platform_outside_software"
    STATIC_SOURCE_IN_STREAM = "static_source_in_stream"
    BROKEN_HIERARCHY = "broken_hierarchy"
    MALFORMED = "malformed"


def validate_sample(s: PowerSample) -> Rejection | None:
    """Return ``None`` when the sample is acceptable, otherwise the first violated rule."""
    if isinstance(s.timestamp, bool) or not isinstance(s.timestamp, int) or s.timestamp <= 0:
        return Rejection.NONPOSITIVE_TIMESTAMP
    if not isinstance(s.value, (int, float)) or isinstance(s.value, bool) or not math.isfinite(s.value):
        return Rejection.NON_FINITE_VALUE
    if s.value < 0:
        return Rejection.NEGATIVE_VALUE
    if s.source is SourceKind.STATIC_CONFIG:
        return Rejection.STATIC_SOURCE_IN_STREAM
    layer = s.tags.layer
    if layer is Layer.SOFTWARE and s.target.process is None:
        return Rejection.UNHOUSED_SOFTWARE_TARGET
    if layer is Layer.HARDWARE and s.target.component is None:
        return Rejection.HARDWARE_WITHOUT_COMPONENT
    if layer is not Layer.SOFTWARE and (s.tags.platform is not None or s.tags.plane is not None):
        return Rejection.PLATFORM_OUTSIDE_SOFTWARE
    return None


@dataclass(frozen=True)
class AlignedWindow:
    """Per-(target, tags) energy in joules for one window ``[start, start + duration)``."""

    start: int
    duration: int
    energies: Mapping[tuple[TargetId, TagSet], float]
    validity: Mapping[tuple[TargetId, TagSet], Validity]

    @property
    def end(self) -> int:
        return self.start + self.duration


def make_scope(**labels: str | None) -> str:
    """Canonical scope expression: sorted ``key=value`` pairs joined by commas."""
    parts = []
    for key in sorted(labels):
        value = labels[key]
        if value is None:
            continue
        if "," in value or "=" in value:
            raise ValueError(f"scope value may not contain ',' or '=': {value!r}")
        parts.append(f"{key}={value}")
    return ",".join(parts)


def scope_labels(scope: str) -> dict[str, str]:
    if not scope:
        return {}
    out = {}
    for part in scope.split(","):
        key, sep, value = part.partition("=")
        if not sep or not key:
            raise ValueError(f"bad scope expression {scope!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class MetricPoint:
    """One computed ratio. ``value`` is ``None`` when the denominator fell below the floor."""

    kind: MetricKind
    scope: str
    window_start: int
    window_duration: int
    value: float | None
    numerator_j: float
    denominator_j: float
    validity: Validity = Validity.VALID

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", MetricKind(self.kind))
        object.__setattr__(self, "validity", Validity(self.validity))

    @property
    def defined(self) -> bool:
        return self.value is not None

    @property
    def labels(self) -> dict[str, str]:
        return scope_labels(self.scope)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "scope": self.scope,
            "window_start_ms": self.window_start,
            "window_ms": self.window_duration,
            "value": self.value,
            "num_j": self.numerator_j,
            "den_j": self.denominator_j,
            "validity": self.validity.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricPoint":
        return cls(
            kind=MetricKind(d["kind"]),
            scope=d["scope"],
            window_start=int(d["window_start_ms"]),
            window_duration=int(d["window_ms"]),
            value=None if d["value"] is None else float(d["value"]),
            numerator_j=float(d["num_j"]),
            denominator_j=float(d["den_j"]),
            validity=Validity(d.get("validity", "valid")),
        )


# --- wire encoding --------------------------------------------------------

WIRE_FIELDS = (
    "ts_ms", "dc", "cluster", "node", "component", "process",
    "layer", "platform", "plane", "service", "source", "quantity", "value",
)
_OPTIONAL_STR = ("cluster", "node", "component", "process", "platform", "plane", "service")


def sample_to_wire(s: PowerSample) -> dict[str, Any]:
    """Encode a sample as the JSONL wire record, omitting absent optional fields."""
    t, g = s.target, s.tags
    rec: dict[str, Any] = {
        "ts_ms": s.timestamp,
        "dc": t.dc,
        "cluster": t.cluster,
        "node": t.node,
        "component": t.component,
        "process": t.process,
        "layer": g.layer.value,
        "platform": g.platform,
        "plane": g.plane.value if g.plane else None,
        "service": g.service,
        "source": s.source.value,
        "quantity": s.quantity.value,
        "value": s.value,
    }
    rec = {k: v for k, v in rec.items() if v is not None}
    if g.extra:
        rec["extra"] = dict(sorted(g.extra.items()))
    return rec


def sample_from_wire(rec: Mapping[str, Any], declared_source: SourceKind | None = None) -> PowerSample:
    """Decode a wire record. Raises ``ValueError``/``KeyError``/``TypeError`` on malformed input."""
    get = {k: (rec.get(k) if rec.get(k) != "" else None) for k in _OPTIONAL_STR}
    ts = rec["ts_ms"]
    if isinstance(ts, str):
        ts = int(ts)
    if isinstance(ts, float) and ts.is_integer():
        ts = int(ts)
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise TypeError("ts_ms must be an integer")
    value = rec["value"]
    if isinstance(value, str):
        value = float(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError("value must be a number")
    extra = rec.get("extra") or {}
    if not isinstance(extra, Mapping):
        raise TypeError("extra must be an object")
    source = declared_source if declared_source is not None else SourceKind(rec["source"])
    return PowerSample(
        timestamp=ts,
        target=TargetId(
            dc=rec["dc"],
            cluster=get["cluster"],
            node=get["node"],
            component=get["component"],
            process=get["process"],
        ),
        tags=TagSet(
            layer=Layer(rec["layer"]),
            platform=get["platform"],
            plane=Plane(get["plane"]) if get["plane"] else None,
            service=get["service"],
            extra={str(k): str(v) for k, v in extra.items()},
        ),
        source=source,
        quantity=Quantity(rec["quantity"]),
        value=float(value),
    )
