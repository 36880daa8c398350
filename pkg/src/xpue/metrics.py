"""The xPUE formulas, per-window energy ledgers, and cluster aggregation."""

from __future__ import annotations

import logging
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import (
    AlignedWindow,
    Layer,
    MetricKind,
    MetricPoint,
    Plane,
    Validity,
    make_scope,
)
from .scopes import (
    Classification,
    LayerStack,
    ScopeRegistry,
    errors_only,
    validate_stack,
)
from .validation import check_points, check_windows

logger = logging.getLogger(__name__)

DEFAULT_FLOOR_J = 0.1
LOW_VALUE_WARNING = 0.5


class UnknownScopeError(KeyError):
    pass


class NoValidContributorsError(ValueError):
    pass


def _worst(*validities: Validity) -> Validity:
    return Validity.STALE if any(v is Validity.STALE for v in validities) else Validity.VALID


def ratio(
    kind: MetricKind,
    numerator: float,
    denominator: float,
    *,
    scope: str = "",
    window_start: int = 0,
    window_ms: int = 0,
    floor: float = DEFAULT_FLOOR_J,
    validity: Validity = Validity.VALID,
) -> MetricPoint:
    """Build a ratio point; the value is undefined when the denominator is at or below ``floor``."""
    value = numerator / denominator if denominator > floor else None
    if value is not None and value < LOW_VALUE_WARNING and kind is not MetricKind.DCIE and kind is not MetricKind.CUE:
        logger.warning("data quality: %s=%.4g below %.1f for %r", kind.value, value, LOW_VALUE_WARNING, scope)
    return MetricPoint(
        kind=kind,
        scope=scope,
        window_start=window_start,
        window_duration=window_ms,
        value=value,
        numerator_j=float(numerator),
        denominator_j=float(denominator),
        validity=validity,
    )


def pue(dc_j: float, it_j: float, **kw) -> MetricPoint:
    return ratio(MetricKind.PUE, dc_j, it_j, **kw)


def dcie(pue_value: MetricPoint | float, **kw) -> MetricPoint:
    """Reciprocal of PUE; given a PUE point, numerator and denominator swap."""
    if isinstance(pue_value, MetricPoint):
        kw.setdefault("scope", pue_value.scope)
        kw.setdefault("window_start", pue_value.window_start)
        kw.setdefault("window_ms", pue_value.window_duration)
        kw.setdefault("validity", pue_value.validity)
        if not pue_value.defined or pue_value.value <= 0:
            return _undefined(MetricKind.DCIE, pue_value.denominator_j, pue_value.numerator_j, **kw)
        return ratio(MetricKind.DCIE, pue_value.denominator_j, pue_value.numerator_j, floor=0.0, **kw)
    if pue_value is None or pue_value <= 0:
        return _undefined(MetricKind.DCIE, 1.0, 0.0 if pue_value is None else float(pue_value), **kw)
    return ratio(MetricKind.DCIE, 1.0, float(pue_value), floor=0.0, **kw)


def cue(co2_kg: float, dc_energy_kwh: float, **kw) -> MetricPoint:
    """kgCO2eq per kWh drawn by the facility."""
    kw.setdefault("floor", 0.0)
    return ratio(MetricKind.CUE, co2_kg, dc_energy_kwh, **kw)


def spue(it_j: float, hardware_j: float, **kw) -> MetricPoint:
    return ratio(MetricKind.SPUE, it_j, hardware_j, **kw)


def vpue(hardware_j: float, software_j: float, **kw) -> MetricPoint:
    return ratio(MetricKind.VPUE, hardware_j, software_j, **kw)


def vpue_platform(all_services_j: float, hosted_j: float, **kw) -> MetricPoint:
    """Energy of every platform service (hosted work included) over hosted work alone."""
    return ratio(MetricKind.VPUE_PLATFORM, all_services_j, hosted_j, **kw)


def hosted_share(all_services_j: float, hosted_j: float) -> float:
    """Fraction of platform energy left to hosted work; 0 when nothing ran."""
    return hosted_j / all_services_j if all_services_j > 0 else 0.0


def _undefined(kind: MetricKind, num: float, den: float, *, scope="", window_start=0, window_ms=0,
               validity=Validity.VALID, floor=None) -> MetricPoint:
    return MetricPoint(kind, scope, window_start, window_ms, None, float(num), float(den), validity)


def _as_point(x: MetricPoint | float | None) -> MetricPoint | None:
    if x is None or isinstance(x, MetricPoint):
        return x
    x = float(x)
    return MetricPoint(MetricKind.CPUE, "", 0, 0, x, x, 1.0)


def _compound(kind: MetricKind, parts: Sequence[MetricPoint | float | None], kw: dict,
              chained: bool = False) -> MetricPoint:
    points = [_as_point(p) for p in parts]
    real = [p for p in points if p is not None]
    if real:
        first = real[0]
        if first.window_duration:
            kw.setdefault("window_start", first.window_start)
            kw.setdefault("window_ms", first.window_duration)
    kw.setdefault("validity", _worst(*(p.validity for p in real)))
    num = math.prod(p.numerator_j for p in real)
    den = math.prod(p.denominator_j for p in real)
    if chained:
        num, den = real[0].numerator_j, real[-1].denominator_j
    if len(real) != len(points) or any(not p.defined for p in real) or not den > 0:
        return _undefined(kind, num, den, **kw)
    kw.pop("floor", None)
    return ratio(kind, num, den, floor=0.0, **kw)


def _chains(points: Sequence[MetricPoint]) -> bool:
    if len(points) < 2:
        return False
    return all(
        math.isclose(a.denominator_j, b.numerator_j, rel_tol=1e-9, abs_tol=0.0) and a.denominator_j > 0
        for a, b in zip(points, points[1:])
    )


def cpue(layers: Sequence[MetricPoint | float | None], **kw) -> MetricPoint:
    """Product of the layer values.

    When layer energies chain (each denominator equals the next numerator) the
    result carries the outermost numerator and innermost denominator; otherwise
    the products of numerators and denominators. Any undefined layer makes the
    result undefined.
    """
    if not layers:
        raise ValueError("cpue needs at least one layer")
    points = [_as_point(p) for p in layers]
    chained = all(p is not None for p in points) and _chains(points)  # type: ignore[arg-type]
    return _compound(MetricKind.CPUE, points, kw, chained=chained)


def gpue(cpue_value: MetricPoint | float | None, pue_value: MetricPoint | float | None, **kw) -> MetricPoint:
    return _compound(MetricKind.GPUE, [cpue_value, pue_value], kw)


def gcue(cpue_value: MetricPoint | float | None, cue_value: MetricPoint | float | None, **kw) -> MetricPoint:
    return _compound(MetricKind.GCUE, [cpue_value, cue_value], kw)


def gwue(cpue_value: MetricPoint | float | None, annual_water_l: float, it_energy_kwh: float, **kw) -> MetricPoint:
    """cPUE-scaled water usage: ``cpue * annual_water / it_energy`` in L/kWh."""
    if it_energy_kwh is None or not it_energy_kwh > 0:
        water = MetricPoint(MetricKind.GWUE, "", 0, 0, None, float(annual_water_l or 0.0), float(it_energy_kwh or 0.0))
    else:
        water = MetricPoint(MetricKind.GWUE, "", 0, 0, annual_water_l / it_energy_kwh,
                            float(annual_water_l), float(it_energy_kwh))
    return _compound(MetricKind.GWUE, [cpue_value, water], kw)


# --- ledger ---------------------------------------------------------------


@dataclass
class Tally:
    """Joules per layer for one dc, cluster or node, with presence and staleness per layer."""

    joules: dict = field(default_factory=lambda: {layer: 0.0 for layer in Layer})
    present: set = field(default_factory=set)
    stale: set = field(default_factory=set)
    planes: set = field(default_factory=set)

    def add(self, layer: Layer, energy: float, validity: Validity) -> None:
        if validity is Validity.MISSING:
            return
        self.joules[layer] += energy
        self.present.add(layer)
        if validity is Validity.STALE:
            self.stale.add(layer)

    def validity(self, *layers: Layer) -> Validity:
        return Validity.STALE if any(layer in self.stale for layer in layers) else Validity.VALID

    def merge(self, other: "Tally") -> None:
        for layer, j in other.joules.items():
            self.joules[layer] += j
        self.present |= other.present
        self.stale |= other.stale
        self.planes |= other.planes

    @property
    def role(self) -> str | None:
        if Plane.CONTROL in self.planes:
            return "control"
        return "worker" if self.planes else None


@dataclass
class ScopeTally:
    """Software energy selected by one scope, split by classification, plus attributed hardware."""

    software_j: float = 0.0
    hosted_j: float = 0.0
    infrastructure_j: float = 0.0
    hardware_j: float = 0.0
    stale: bool = False
    nodes: set = field(default_factory=set)

    def merge(self, other: "ScopeTally") -> None:
        self.software_j += other.software_j
        self.hosted_j += other.hosted_j
        self.infrastructure_j += other.infrastructure_j
        self.hardware_j += other.hardware_j
        self.stale |= other.stale
        self.nodes |= other.nodes

    @property
    def validity(self) -> Validity:
        return Validity.STALE if self.stale else Validity.VALID


@dataclass
class EnergyLedger:
    """Per-window energy sums that every formula reads from.

    Hardware energy of a node is attributed to scopes in proportion to each
    scope's share of that node's software energy in the window.
    """

    window_start: int
    window_ms: int
    total: Tally = field(default_factory=Tally)
    dcs: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)
    nodes: dict = field(default_factory=dict)
    scopes: dict = field(default_factory=dict)

    @classmethod
    def from_window(cls, window: AlignedWindow, registry: ScopeRegistry) -> "EnergyLedger":
        ledger = cls(window.start, window.duration)
        node_scope_sw: dict = defaultdict(lambda: defaultdict(float))
        for key in sorted(window.energies, key=lambda k: (k[0].sort_key(), k[1].sort_key())):
            target, tags = key
            energy = window.energies[key]
            validity = window.validity.get(key, Validity.VALID)
            if validity is Validity.MISSING:
                continue
            layer = registry.effective_layer(target, tags)
            ledger.total.add(layer, energy, validity)
            ledger.dcs.setdefault(target.dc, Tally()).add(layer, energy, validity)
            if target.cluster is not None:
                ledger.clusters.setdefault((target.dc, target.cluster), Tally()).add(layer, energy, validity)
            node_key = target.node_key
            if node_key is not None:
                node = ledger.nodes.setdefault(node_key, Tally())
                node.add(layer, energy, validity)
                if layer is Layer.SOFTWARE and tags.plane is not None:
                    node.planes.add(tags.plane)
            if layer is not Layer.SOFTWARE:
                continue
            names, cls_ = registry.classify(target, tags)
            for name in names:
                st = ledger.scopes.setdefault(name, ScopeTally())
                st.software_j += energy
                if cls_ is Classification.HOSTED:
                    st.hosted_j += energy
                else:
                    st.infrastructure_j += energy
                st.stale |= validity is Validity.STALE
                if node_key is not None:
                    st.nodes.add(node_key)
                    node_scope_sw[node_key][name] += energy
        for node_key, shares in node_scope_sw.items():
            node = ledger.nodes[node_key]
            sw = node.joules[Layer.SOFTWARE]
            if sw <= 0:
                continue
            hw = node.joules[Layer.HARDWARE]
            for name, part in shares.items():
                st = ledger.scopes[name]
                st.hardware_j += hw * (part / sw)
                st.stale |= Layer.HARDWARE in node.stale
        return ledger

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        """Accumulate another ledger in place (used for whole-run totals)."""
        end = max(self.window_start + self.window_ms, other.window_start + other.window_ms)
        self.window_start = min(self.window_start, other.window_start)
        self.window_ms = end - self.window_start
        self.total.merge(other.total)
        for attr in ("dcs", "clusters", "nodes"):
            mine = getattr(self, attr)
            for k, t in getattr(other, attr).items():
                mine.setdefault(k, Tally()).merge(t)
        for k, t in other.scopes.items():
            self.scopes.setdefault(k, ScopeTally()).merge(t)
        return self

    @classmethod
    def combine(cls, ledgers: Iterable["EnergyLedger"]) -> "EnergyLedger | None":
        out = None
        for ledger in ledgers:
            if out is None:
                out = cls(ledger.window_start, ledger.window_ms)
            out.merge(ledger)
        return out


def scoped_vpue(scope: str, ledger: EnergyLedger, registry: ScopeRegistry | None = None,
                floor: float = DEFAULT_FLOOR_J) -> MetricPoint:
    """Attributed hardware over software energy, both restricted to ``scope``."""
    if registry is not None and scope not in registry:
        raise UnknownScopeError(scope)
    st = ledger.scopes.get(scope, ScopeTally())
    return vpue(st.hardware_j, st.software_j, scope=make_scope(scope=scope), window_start=ledger.window_start,
                window_ms=ledger.window_ms, floor=floor, validity=st.validity)


def platform_vpue(scope: str, ledger: EnergyLedger, registry: ScopeRegistry | None = None,
                  floor: float = DEFAULT_FLOOR_J) -> MetricPoint:
    if registry is not None and scope not in registry:
        raise UnknownScopeError(scope)
    st = ledger.scopes.get(scope, ScopeTally())
    return vpue_platform(st.software_j, st.hosted_j, scope=make_scope(scope=scope),
                         window_start=ledger.window_start, window_ms=ledger.window_ms, floor=floor,
                         validity=st.validity)


# --- aggregation ----------------------------------------------------------


@dataclass(frozen=True)
class DistributionStats:
    min: float
    max: float
    mean: float
    median: float
    count: int

    def to_dict(self) -> dict[str, float]:
        return {"min": self.min, "max": self.max, "mean": self.mean, "median": self.median, "count": self.count}


def distribution(values: Iterable[float]) -> DistributionStats:
    vals = sorted(float(v) for v in values)
    if not vals:
        raise NoValidContributorsError("no values")
    mean = math.fsum(vals) / len(vals)
    return DistributionStats(vals[0], vals[-1], min(max(mean, vals[0]), vals[-1]), statistics.median(vals), len(vals))


LEVEL_LABELS = {
    "node": ("dc", "cluster", "node"),
    "plane": ("dc", "cluster", "role"),
    "cluster": ("dc", "cluster"),
    "dc": ("dc",),
}


def aggregate(points: Iterable[MetricPoint], mode: str = "energy_weighted", scope: str = "") -> MetricPoint | DistributionStats:
    """Combine points of one kind.

    ``energy_weighted`` sums numerators and denominators of valid points before
    dividing; ``distribution`` summarizes their values.
    """
    pts = [p for p in check_points(points) if p.validity is Validity.VALID]
    defined = [p for p in pts if p.defined]
    if not defined:
        raise NoValidContributorsError("no valid contributors")
    kinds = {p.kind for p in pts}
    if len(kinds) != 1:
        raise ValueError(f"cannot aggregate mixed kinds {sorted(k.value for k in kinds)}")
    if mode == "distribution":
        return distribution(p.value for p in defined)
    if mode != "energy_weighted":
        raise ValueError(f"unknown mode {mode!r}")
    start = min(p.window_start for p in pts)
    end = max(p.window_start + p.window_duration for p in pts)
    num = math.fsum(p.numerator_j for p in pts)
    den = math.fsum(p.denominator_j for p in pts)
    return ratio(pts[0].kind, num, den, scope=scope, window_start=start, window_ms=end - start, floor=0.0)


def aggregate_by(points: Iterable[MetricPoint], level: str, mode: str = "energy_weighted",
                 kind: MetricKind | str | None = None) -> dict[str, MetricPoint | DistributionStats]:
    """Group per-node points by ``level`` (node, plane, cluster, dc) and aggregate each group.

    Groups without a valid contributor are left out.
    """
    labels = LEVEL_LABELS[level]
    kind = MetricKind(kind) if kind is not None else None
    groups: dict = defaultdict(list)
    for p in check_points(points):
        if kind is not None and p.kind is not kind:
            continue
        lab = p.labels
        if "node" not in lab or any(k not in lab for k in labels):
            continue
        groups[make_scope(**{k: lab[k] for k in labels})].append(p)
    out = {}
    for scope in sorted(groups):
        try:
            out[scope] = aggregate(groups[scope], mode, scope=scope)
        except NoValidContributorsError:
            continue
    return out


def count_undefined(points: Iterable[MetricPoint]) -> Counter:
    return Counter(p.kind.value for p in points if not p.defined)


# --- engine ---------------------------------------------------------------


class XPUEEngine(TransformerMixin, BaseEstimator):
    """Maps aligned windows to metric points.

    Per window it emits pue/dcie/cue per data center when facility energy is
    metered. spue and vpue come out at every level from data center down to
    node, whenever both layers of the ratio were observed. Every registry
    scope with software in the window gets a scoped vpue and a
    vpue_platform. A declared stack yields cpue with its gpue/gcue/gwue
    extensions once all of its scopes have software in the window.

    Parameters
    ----------
    registry : ScopeRegistry or None
        Defaults to the shipped Kubernetes/OpenStack registry.
    stacks : list of LayerStack or None
        Extra stacks on top of the registry's own.
    floor_j : float
        Denominators at or below this many joules give undefined ratios.
    pue, cue : float or None
        Facility PUE and carbon factor (kgCO2eq/kWh) for stacks that don't carry their own.
    annual_water_l, it_energy_kwh : float or None
        Facility water use and IT energy over the same year, for gwue.
    cef : dict or None
        Carbon factor (kgCO2eq/kWh) per data center name, used for the per-dc
        CUE; the key ``"*"`` applies to every data center not listed.
    """

    def __init__(self, registry=None, stacks=None, floor_j=DEFAULT_FLOOR_J, pue=None, cue=None,
                 annual_water_l=None, it_energy_kwh=None, cef=None):
        self.registry = registry
        self.stacks = stacks
        self.floor_j = floor_j
        self.pue = pue
        self.cue = cue
        self.annual_water_l = annual_water_l
        self.it_energy_kwh = it_energy_kwh
        self.cef = cef

    def fit(self, X=None, y=None):
        registry = self.registry if self.registry is not None else ScopeRegistry.default()
        if self.stacks:
            registry = registry.with_stacks(self.stacks)
        diags = []
        for stack in registry.stacks:
            diags.extend(validate_stack(stack, registry))
        errors = errors_only(diags)
        if errors:
            raise ValueError("invalid stacks: " + "; ".join(str(d) for d in errors))
        if not self.floor_j >= 0:
            raise ValueError("floor_j must be >= 0")
        self.registry_ = registry
        self.diagnostics_ = diags
        return self

    def ledgers(self, X) -> list[EnergyLedger]:
        check_is_fitted(self, "registry_")
        return [EnergyLedger.from_window(w, self.registry_) for w in check_windows(X)]

    def transform(self, X):
        return [p for ledger in self.ledgers(X) for p in self.compute(ledger)]

    def totals(self, X) -> list[MetricPoint]:
        """Whole-run metrics from the sum of all window ledgers."""
        combined = EnergyLedger.combine(self.ledgers(X))
        return [] if combined is None else self.compute(combined)

    # per-ledger computation, also used directly by serve mode
    def compute(self, ledger: EnergyLedger) -> list[MetricPoint]:
        check_is_fitted(self, "registry_")
        floor = self.floor_j
        kw = {"window_start": ledger.window_start, "window_ms": ledger.window_ms, "floor": floor}
        out: list[MetricPoint] = []
        dc_pue: dict = {}
        for dc in sorted(ledger.dcs):
            t = ledger.dcs[dc]
            scope = make_scope(dc=dc)
            if Layer.DC in t.present:
                p = pue(t.joules[Layer.DC], t.joules[Layer.IT], scope=scope,
                        validity=t.validity(Layer.DC, Layer.IT), **kw)
                dc_pue[dc] = p
                out.append(p)
                out.append(dcie(p))
                factors = self.cef or {}
                cef = factors.get(dc, factors.get("*"))
                if cef is not None:
                    kwh = t.joules[Layer.DC] / 3.6e6
                    out.append(cue(cef * kwh, kwh, scope=scope, validity=p.validity,
                                   window_start=ledger.window_start, window_ms=ledger.window_ms))
            out.extend(self._hw_sw(t, scope, kw))
        for key in sorted(ledger.clusters):
            out.extend(self._hw_sw(ledger.clusters[key], make_scope(dc=key[0], cluster=key[1]), kw))
        for key in sorted(ledger.nodes):
            t = ledger.nodes[key]
            scope = make_scope(dc=key[0], cluster=key[1], node=key[2], role=t.role)
            out.extend(self._hw_sw(t, scope, kw))
        for name in self.registry_.scope_names:
            if name not in ledger.scopes:
                continue
            out.append(scoped_vpue(name, ledger, floor=floor))
            out.append(platform_vpue(name, ledger, floor=floor))
        measured_pue = next(iter(dc_pue.values())) if len(dc_pue) == 1 else None
        for stack in self.registry_.stacks:
            # a stack is evaluated once every scope it names has software in the window
            if all(layer.scope is None or layer.scope in ledger.scopes for layer in stack.layers):
                out.extend(self._stack_points(stack, ledger, measured_pue, kw))
        return out

    def _hw_sw(self, t: Tally, scope: str, kw: dict) -> list[MetricPoint]:
        out = []
        if Layer.HARDWARE in t.present and Layer.IT in t.present:
            out.append(spue(t.joules[Layer.IT], t.joules[Layer.HARDWARE], scope=scope,
                            validity=t.validity(Layer.IT, Layer.HARDWARE), **kw))
        if Layer.SOFTWARE in t.present and Layer.HARDWARE in t.present:
            out.append(vpue(t.joules[Layer.HARDWARE], t.joules[Layer.SOFTWARE], scope=scope,
                            validity=t.validity(Layer.HARDWARE, Layer.SOFTWARE), **kw))
        return out

    def layer_point(self, layer, ledger: EnergyLedger) -> MetricPoint:
        floor = self.floor_j
        kw = {"window_start": ledger.window_start, "window_ms": ledger.window_ms, "floor": floor}
        if layer.kind is MetricKind.SPUE:
            if layer.scope is None:
                t = ledger.total
                return spue(t.joules[Layer.IT], t.joules[Layer.HARDWARE],
                            validity=t.validity(Layer.IT, Layer.HARDWARE), **kw)
            st = ledger.scopes.get(layer.scope, ScopeTally())
            it = sum(ledger.nodes[n].joules[Layer.IT] for n in st.nodes)
            hw = sum(ledger.nodes[n].joules[Layer.HARDWARE] for n in st.nodes)
            stale = any(ledger.nodes[n].stale & {Layer.IT, Layer.HARDWARE} for n in st.nodes)
            return spue(it, hw, scope=make_scope(scope=layer.scope),
                        validity=Validity.STALE if stale else Validity.VALID, **kw)
        if layer.kind is MetricKind.VPUE:
            return scoped_vpue(layer.scope, ledger, floor=floor)
        return platform_vpue(layer.scope, ledger, floor=floor)

    def _stack_points(self, stack: LayerStack, ledger: EnergyLedger, measured_pue, kw: dict) -> list[MetricPoint]:
        scope = make_scope(stack=stack.name)
        layers = [self.layer_point(layer, ledger) for layer in stack.layers]
        base = {"scope": scope, "window_start": ledger.window_start, "window_ms": ledger.window_ms}
        c = cpue(layers, **base)
        out = [c]
        facility_pue = stack.pue if stack.pue is not None else self.pue
        if facility_pue is None:
            facility_pue = measured_pue
        if facility_pue is not None:
            out.append(gpue(c, facility_pue, **base))
        carbon = stack.cue if stack.cue is not None else self.cue
        if carbon is not None:
            out.append(gcue(c, carbon, **base))
        if stack.wue is not None:
            out.append(gwue(c, stack.wue, 1.0, **base))
        elif self.annual_water_l is not None and self.it_energy_kwh is not None:
            out.append(gwue(c, self.annual_water_l, self.it_energy_kwh, **base))
        return out


def points_by_kind(points: Iterable[MetricPoint]) -> Mapping[str, list[MetricPoint]]:
    out: dict = defaultdict(list)
    for p in points:
        out[p.kind.value].append(p)
    return out
