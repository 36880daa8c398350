"""Scope rules for processes and services, and the layer stacks that multiply into cPUE."""

from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .model import Layer, MetricKind, Plane, TagSet, TargetId

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class Classification(str, Enum):
    INFRASTRUCTURE = "infrastructure"
    HOSTED = "hosted"


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ScopeRule:
    """A named predicate over sample tags. All criteria that are set must match."""

    name: str
    platform: str | None = None
    plane: Plane | None = None
    services: tuple[str, ...] = ()
    process_glob: str | None = None
    classification: Classification = Classification.HOSTED

    def __post_init__(self) -> None:
        if not self.name:
            raise RegistryError("scope rule needs a name")
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "classification", Classification(self.classification))
        if self.plane is not None:
            object.__setattr__(self, "plane", Plane(self.plane))
        if not (self.platform or self.plane or self.services or self.process_glob):
            raise RegistryError(f"scope rule {self.name!r} names no criteria")

    def matches(self, target: TargetId, tags: TagSet) -> bool:
        if self.platform is not None and tags.platform != self.platform:
            return False
        if self.plane is not None and tags.plane != self.plane:
            return False
        if self.services and tags.service not in self.services:
            return False
        if self.process_glob is not None and (
            target.process is None or not fnmatch.fnmatchcase(target.process, self.process_glob)
        ):
            return False
        return True

    def criteria(self) -> dict[str, Any]:
        return {
            "platform": self.platform,
            "plane": self.plane.value if self.plane else None,
            "services": self.services,
            "process_glob": self.process_glob,
        }


@dataclass(frozen=True)
class StackLayer:
    kind: MetricKind
    scope: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", MetricKind(self.kind))

    def __str__(self) -> str:
        return self.kind.value if self.scope is None else f"{self.kind.value}({self.scope})"


_LAYER_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([^()]*?)\s*\))?\s*$")


def parse_layer(spec: str | Mapping[str, Any]) -> StackLayer:
    """Parse ``"spue"``, ``"vpue(openstack)"`` or ``{kind = "vpue", scope = "openstack"}``."""
    if isinstance(spec, Mapping):
        return StackLayer(MetricKind(spec["kind"]), spec.get("scope"))
    m = _LAYER_RE.match(spec)
    if not m:
        raise RegistryError(f"bad layer declaration {spec!r}")
    return StackLayer(MetricKind(m.group(1)), m.group(2) or None)


@dataclass(frozen=True)
class LayerStack:
    """Ordered layers whose values multiply into cPUE, plus optional facility factors.

    ``pue`` is the facility PUE, ``cue`` kgCO2eq/kWh and ``wue`` L/kWh.
    """

    name: str
    layers: tuple[StackLayer, ...]
    pue: float | None = None
    cue: float | None = None
    wue: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.severity}: {self.code}: {self.message}"


STACK_LAYER_KINDS = (MetricKind.SPUE, MetricKind.VPUE, MetricKind.VPUE_PLATFORM)


@dataclass(frozen=True)
class ScopeRegistry:
    """Immutable set of scope rules and layer stacks.

    Hot reload means building a new registry and swapping the reference.
    """

    rules: tuple[ScopeRule, ...] = ()
    stacks: tuple[LayerStack, ...] = ()
    switch_as_it: bool = True
    _by_name: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "stacks", tuple(self.stacks))
        names = [r.name for r in self.rules]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise RegistryError(f"duplicate scope names: {', '.join(dupes)}")
        snames = [s.name for s in self.stacks]
        sdupes = sorted({n for n in snames if snames.count(n) > 1})
        if sdupes:
            raise RegistryError(f"duplicate stack names: {', '.join(sdupes)}")
        object.__setattr__(self, "_by_name", {r.name: r for r in self.rules})

    @property
    def scope_names(self) -> list[str]:
        return [r.name for r in self.rules]

    def rule(self, name: str) -> ScopeRule:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown scope {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def classify(self, target: TargetId, tags: TagSet) -> tuple[frozenset[str], Classification]:
        """Scopes the sample belongs to, and whether it is infrastructure or hosted work."""
        hits = [r for r in self.rules if r.matches(target, tags)]
        cls = (
            Classification.INFRASTRUCTURE
            if any(r.classification is Classification.INFRASTRUCTURE for r in hits)
            else Classification.HOSTED
        )
        return frozenset(r.name for r in hits), cls

    def effective_layer(self, target: TargetId, tags: TagSet) -> Layer:
        """Network switches count as IT equipment, not compute hardware; with ``switch_as_it`` off, the reverse."""
        if target.component == "switch" and tags.layer in (Layer.IT, Layer.HARDWARE):
            return Layer.IT if self.switch_as_it else Layer.HARDWARE
        return tags.layer

    # --- loading -----------------------------------------------------------

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "ScopeRegistry":
        rules = []
        for entry in doc.get("scopes", []):
            rules.append(
                ScopeRule(
                    name=entry["name"],
                    platform=entry.get("platform"),
                    plane=Plane(entry["plane"]) if entry.get("plane") else None,
                    services=tuple(entry.get("services", ())),
                    process_glob=entry.get("process_glob"),
                    classification=Classification(entry.get("class", "hosted")),
                )
            )
        stacks = []
        for entry in doc.get("stacks", []):
            stacks.append(
                LayerStack(
                    name=entry["name"],
                    layers=tuple(parse_layer(x) for x in entry.get("layers", [])),
                    pue=entry.get("pue"),
                    cue=entry.get("cue"),
                    wue=entry.get("wue"),
                )
            )
        return cls(tuple(rules), tuple(stacks), bool(doc.get("switch_as_it", True)))

    @classmethod
    def load(cls, path: str | Path) -> "ScopeRegistry":
        return cls.from_mapping(load_document(path))

    @classmethod
    def default(cls) -> "ScopeRegistry":
        return cls.from_mapping(DEFAULT_REGISTRY)

    def with_stacks(self, stacks: Iterable[LayerStack]) -> "ScopeRegistry":
        return ScopeRegistry(self.rules, tuple(self.stacks) + tuple(stacks), self.switch_as_it)

    def to_mapping(self) -> dict[str, Any]:
        scopes = []
        for r in self.rules:
            entry: dict[str, Any] = {"name": r.name, "class": r.classification.value}
            entry.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in r.criteria().items() if v})
            scopes.append(entry)
        stacks = []
        for s in self.stacks:
            entry = {"name": s.name, "layers": [str(x) for x in s.layers]}
            entry.update({k: getattr(s, k) for k in ("pue", "cue", "wue") if getattr(s, k) is not None})
            stacks.append(entry)
        return {"switch_as_it": self.switch_as_it, "scopes": scopes, "stacks": stacks}


def load_document(path: str | Path) -> dict[str, Any]:
    """Read a TOML or JSON document (chosen by suffix; TOML otherwise)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _overlap_possible(a: ScopeRule, b: ScopeRule) -> bool:
    ca, cb = a.criteria(), b.criteria()
    for key in ("platform", "plane"):
        if ca[key] is not None and cb[key] is not None and ca[key] != cb[key]:
            return False
    if ca["services"] and cb["services"] and not set(ca["services"]) & set(cb["services"]):
        return False
    return True


def validate_stack(stack: LayerStack, registry: ScopeRegistry) -> list[Diagnostic]:
    """Diagnostics for a stack; an empty list means the stack is usable.

    Rules: non-empty; layer kinds are spue, vpue or vpue_platform; at most one
    spue and only in first position; every vpue layer names a known scope, and
    no scope appears twice among vpue layers. Possibly overlapping vpue scopes
    produce a warning, since their product may count the same energy twice.
    """
    diags: list[Diagnostic] = []
    where = f"stack {stack.name!r}"
    if not stack.layers:
        return [Diagnostic("empty_stack", f"{where} has no layers")]
    seen_vpue = False
    spue_count = 0
    vpue_scopes: list[str] = []
    for pos, layer in enumerate(stack.layers):
        if layer.kind not in STACK_LAYER_KINDS:
            diags.append(Diagnostic("unknown_kind", f"{where}: {layer} cannot be a stack layer"))
            continue
        if layer.scope is not None and layer.scope not in registry:
            diags.append(Diagnostic("unknown_scope", f"{where}: {layer} references unknown scope {layer.scope!r}"))
        if layer.kind is MetricKind.SPUE:
            spue_count += 1
            if spue_count > 1:
                diags.append(Diagnostic("duplicate_layer", f"{where}: spue appears more than once"))
            elif seen_vpue or pos != 0:
                diags.append(Diagnostic("order", f"{where}: spue must precede vpue layers"))
            continue
        seen_vpue = True
        if layer.scope is None:
            diags.append(Diagnostic("missing_scope", f"{where}: {layer} needs a scope"))
            continue
        if layer.scope in vpue_scopes:
            diags.append(Diagnostic("duplicate_layer", f"{where}: scope {layer.scope!r} used twice"))
            continue
        vpue_scopes.append(layer.scope)
    known = [s for s in vpue_scopes if s in registry]
    for i, a in enumerate(known):
        for b in known[i + 1:]:
            if _overlap_possible(registry.rule(a), registry.rule(b)):
                diags.append(
                    Diagnostic(
                        "overlapping_scopes",
                        f"{where}: scopes {a!r} and {b!r} may select the same energy",
                        severity="warning",
                    )
                )
    for name in ("pue", "cue", "wue"):
        v = getattr(stack, name)
        if v is None:
            continue
        if not isinstance(v, (int, float)) or v < 0 or (name == "pue" and v < 1.0):
            diags.append(Diagnostic("bad_factor", f"{where}: {name}={v!r} out of range"))
    return diags


def errors_only(diags: Iterable[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diags if d.severity == "error"]


KUBERNETES_CONTROL = (
    "kube-apiserver", "kube-scheduler", "kube-controller-manager", "etcd",
)
KUBERNETES_RUNTIME = ("containerd", "kubelet")
KUBERNETES_NETWORK = ("flannel", "kube-proxy", "coredns")
MONITORING = ("prometheus", "node-exporter", "powerapi-sensor", "smartwatts-formula")
OPENSTACK_CONTROL = (
    "neutron-api", "nova-api", "nova-conductor", "nova-scheduler", "keystone",
    "glance-api", "placement-api", "cinder-api", "horizon", "rabbitmq-server",
    "mysqld", "memcached",
)
OPENSTACK_COMPUTE = ("nova-compute", "libvirtd", "neutron-openvswitch-agent", "ovs-vswitchd")

DEFAULT_REGISTRY: dict[str, Any] = {
    "switch_as_it": True,
    "scopes": [
        {"name": "kubernetes", "platform": "kubernetes", "class": "hosted"},
        {"name": "kubernetes-control", "platform": "kubernetes", "plane": "control", "class": "infrastructure"},
        {"name": "kubernetes-runtime", "platform": "kubernetes", "services": list(KUBERNETES_RUNTIME),
         "class": "infrastructure"},
        {"name": "kubernetes-network", "platform": "kubernetes", "services": list(KUBERNETES_NETWORK),
         "class": "infrastructure"},
        {"name": "monitoring", "services": list(MONITORING), "class": "infrastructure"},
        {"name": "openstack", "platform": "openstack", "class": "hosted"},
        {"name": "openstack-control", "platform": "openstack", "services": list(OPENSTACK_CONTROL),
         "class": "infrastructure"},
        {"name": "openstack-compute", "platform": "openstack", "services": list(OPENSTACK_COMPUTE),
         "class": "infrastructure"},
    ],
    "stacks": [
        {"name": "openstack-iaas", "layers": ["spue", "vpue_platform(openstack)"]},
        {"name": "kubernetes-caas", "layers": ["spue", "vpue_platform(kubernetes)"]},
        {"name": "kubernetes-on-openstack",
         "layers": ["spue", "vpue_platform(openstack)", "vpue_platform(kubernetes)"]},
    ],
}
