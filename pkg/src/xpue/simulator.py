"""Deterministic synthetic power traces for a small cluster.

Node power is affine in utilization; the share reaching the metered hardware
components is a piecewise-linear function of utilization. Utilization only
changes on whole seconds, and every meter samples on a grid that divides a
second, so a zero-order-hold integration of the trace recovers the model
energies exactly. The only randomness is the arrival jitter of workload units.
"""

from __future__ import annotations

import json
import math
import random
from bisect import bisect_right
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .model import WIRE_FIELDS
from .scopes import KUBERNETES_CONTROL, KUBERNETES_RUNTIME, OPENSTACK_COMPUTE, OPENSTACK_CONTROL, load_document

START_MS = 1_700_000_000_000
COUNTER_WRAP_J = 2**32 / 1e6  # 32-bit register in microjoules
SWITCH_POWER_W = 115.3

# control : hosted energy over a full run (kJ)
PLATFORM_TARGETS = {
    "kubernetes": (15.6, 484.3),
    "openstack": (166.7, 593.9),
}
# share of each worker's software energy spent in platform services
WORKER_SERVICE_SHARE = {"kubernetes": 0.01, "openstack": 0.04}
DEFAULT_CONTROL_UTILIZATION = 0.05


class ScenarioError(ValueError):
    pass


class Cooling(str, Enum):
    AIR = "air"
    WATER = "water"


class Role(str, Enum):
    CONTROL = "control"
    WORKER = "worker"


def _interp(points: Sequence[tuple[float, float]], u: float) -> float:
    xs = [p[0] for p in points]
    i = bisect_right(xs, u)
    if i == 0:
        return points[0][1]
    if i == len(points):
        return points[-1][1]
    (x0, y0), (x1, y1) = points[i - 1], points[i]
    return y0 + (y1 - y0) * (u - x0) / (x1 - x0)


INTEL_AIR = ((0.0, 0.22), (1.0, 1 / 2.75))
AMD_WATER = ((0.0, 0.5), (0.3, 1 / 1.4), (1.0, 1 / 1.4))


@dataclass(frozen=True)
class NodeModel:
    """Power model of one server.

    ``hardware_fraction`` gives, as (utilization, fraction) breakpoints, the
    part of outlet power drawn by the metered CPU and DRAM. ``software_fraction``
    is the part of the dynamic hardware power the software meter attributes
    to processes.
    """

    name: str
    idle_power_w: float = 95.0
    max_power_w: float = 200.0
    hardware_fraction: tuple = INTEL_AIR
    cooling: Cooling = Cooling.AIR
    role: Role = Role.WORKER
    threads: int = 36
    software_fraction: float = 0.9

    def __post_init__(self) -> None:
        object.__setattr__(self, "cooling", Cooling(self.cooling))
        object.__setattr__(self, "role", Role(self.role))
        pts = tuple((float(u), float(f)) for u, f in self.hardware_fraction)
        object.__setattr__(self, "hardware_fraction", pts)
        if not 0 < self.idle_power_w < self.max_power_w:
            raise ScenarioError(f"{self.name}: need 0 < idle_power_w < max_power_w")
        if not pts or any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ScenarioError(f"{self.name}: hardware_fraction breakpoints must be strictly increasing in u")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise ScenarioError(f"{self.name}: hardware_fraction must be non-decreasing")
        if any(not 0 < f <= 1 for _, f in pts):
            raise ScenarioError(f"{self.name}: hardware_fraction values must lie in (0, 1]")
        if not 0 < self.software_fraction <= 1:
            raise ScenarioError(f"{self.name}: software_fraction must lie in (0, 1]")
        if self.threads < 1:
            raise ScenarioError(f"{self.name}: threads must be >= 1")

    def it_power(self, u: float) -> float:
        return self.idle_power_w + (self.max_power_w - self.idle_power_w) * u

    def fraction(self, u: float) -> float:
        return _interp(self.hardware_fraction, u)

    def hardware_power(self, u: float) -> float:
        return self.fraction(u) * self.it_power(u)

    def software_power(self, u: float) -> float:
        """Process-attributed power; zero on an idle node."""
        return self.software_fraction * (self.hardware_power(u) - self.hardware_power(0.0))


PROFILES = {
    "intel-air": {"idle_power_w": 95.0, "max_power_w": 200.0, "hardware_fraction": INTEL_AIR,
                  "cooling": "air", "threads": 36},
    "amd-water": {"idle_power_w": 60.0, "max_power_w": 180.0, "hardware_fraction": AMD_WATER,
                  "cooling": "water", "threads": 32},
}


def node_from_profile(name: str, profile: str = "intel-air", **overrides: Any) -> NodeModel:
    try:
        base = dict(PROFILES[profile])
    except KeyError:
        raise ScenarioError(f"unknown node profile {profile!r}") from None
    base.update(overrides)
    return NodeModel(name=name, **base)


@dataclass(frozen=True)
class Scenario:
    """A cluster, a platform and a workload ramp.

    Workload units (VMs, pods or plain stress processes) arrive over
    ``ramp_s`` seconds up to ``max_units`` and are spread round-robin over the
    workers; a worker's utilization is its unit count over its thread count,
    capped at 1.
    """

    name: str
    nodes: tuple
    seed: int = 0
    duration_s: int = 60
    platform: str | None = None  # kubernetes | openstack | stacked
    max_units: int = 0
    ramp_s: int | None = None
    start_ms: int = START_MS
    dc: str = "dc1"
    cluster: str = "c1"
    outlet_hz: int = 50
    counter_hz: int = 10
    software_hz: int = 1
    switch_w: float | None = SWITCH_POWER_W
    facility_pue: float | None = None
    counter_wrap_j: float = COUNTER_WRAP_J
    jitter: float = 0.5
    control_targets: tuple | None = None  # overrides PLATFORM_TARGETS

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.platform not in (None, "kubernetes", "openstack", "stacked"):
            raise ScenarioError(f"unknown platform {self.platform!r}")
        if self.duration_s < 1:
            raise ScenarioError("duration_s must be >= 1")
        if self.max_units < 0:
            raise ScenarioError("max_units must be >= 0")
        if self.ramp_s is not None and not 0 < self.ramp_s <= self.duration_s:
            raise ScenarioError("ramp_s must lie in (0, duration_s]")
        if self.start_ms <= 0 or self.start_ms % 1000:
            raise ScenarioError("start_ms must be a positive whole second")
        for name in ("outlet_hz", "counter_hz", "software_hz"):
            hz = getattr(self, name)
            if hz < 1 or 1000 % hz:
                raise ScenarioError(f"{name} must divide 1000")
        if not self.workers:
            raise ScenarioError("scenario needs at least one worker node")
        if self.platform and not self.controls:
            raise ScenarioError("a platform scenario needs a control node")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ScenarioError("node names must be unique")
        if self.facility_pue is not None and self.facility_pue < 1:
            raise ScenarioError("facility_pue must be >= 1")
        if not 0 <= self.jitter <= 1:
            raise ScenarioError("jitter must lie in [0, 1]")
        if self.counter_wrap_j <= 0:
            raise ScenarioError("counter_wrap_j must be positive")

    @property
    def workers(self) -> list[NodeModel]:
        return [n for n in self.nodes if n.role is Role.WORKER]

    @property
    def controls(self) -> list[NodeModel]:
        return [n for n in self.nodes if n.role is Role.CONTROL]

    @property
    def capacity(self) -> int:
        return sum(n.threads for n in self.workers)

    @property
    def base_platform(self) -> str | None:
        return "openstack" if self.platform == "stacked" else self.platform

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "Scenario":
        doc = dict(doc.get("scenario", doc))
        base = doc.pop("base", None)
        raw_nodes = doc.pop("nodes", None)
        if "control_targets" in doc and doc["control_targets"] is not None:
            doc["control_targets"] = tuple(doc["control_targets"])
        nodes = None
        if raw_nodes is not None:
            nodes = []
            for entry in raw_nodes:
                entry = dict(entry)
                if "hardware_fraction" in entry:
                    entry["hardware_fraction"] = tuple(tuple(p) for p in entry["hardware_fraction"])
                nodes.append(node_from_profile(entry.pop("name"), entry.pop("profile", "intel-air"), **entry))
        try:
            if base is not None:
                out = replace(builtin(base), **doc)
                return replace(out, nodes=tuple(nodes)) if nodes is not None else out
            if nodes is None:
                raise ScenarioError("scenario needs nodes or a base")
            return cls(nodes=tuple(nodes), **doc)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_mapping(load_document(path))


# --- workload schedule ----------------------------------------------------


def vm_ramp(scenario: Scenario) -> list[int]:
    """Active workload units during each second of the run."""
    n = scenario.max_units
    if n == 0:
        return [0] * scenario.duration_s
    ramp = scenario.ramp_s or scenario.duration_s
    rng = random.Random(scenario.seed)
    spacing = ramp / n
    arrivals = []
    for i in range(n):
        t = (i + 0.5 + scenario.jitter * (rng.random() - 0.5)) * spacing
        arrivals.append(min(ramp - 1, max(0, math.floor(t))))
    arrivals.sort()
    return [bisect_right(arrivals, k) for k in range(scenario.duration_s)]


def units_per_worker(scenario: Scenario, m: int) -> list[int]:
    """Round-robin placement of ``m`` units over the workers."""
    w = len(scenario.workers)
    return [(m + w - 1 - i) // w for i in range(w)]


def worker_utilization(scenario: Scenario, m: int) -> list[float]:
    return [min(1.0, k / node.threads) for k, node in zip(units_per_worker(scenario, m), scenario.workers)]


@dataclass(frozen=True)
class _Second:
    """Model state during one second."""

    units: int
    utilization: dict  # node name -> u
    hosted_w: float
    worker_services_w: float
    control_w: float


def _control_u(u0: float, m: int, cap: int) -> float:
    return min(1.0, u0 * (1 + 0.1 * min(m, cap) / cap))


def _seconds(scenario: Scenario, u0: float, ramp: list[int]) -> list[_Second]:
    share = WORKER_SERVICE_SHARE.get(scenario.base_platform or "", 0.0)
    cap = scenario.capacity
    out = []
    for m in ramp:
        util = {}
        hosted = services = control = 0.0
        for node, u in zip(scenario.workers, worker_utilization(scenario, m)):
            util[node.name] = u
            sw = node.software_power(u)
            services += share * sw
            hosted += (1 - share) * sw
        for node in scenario.controls:
            u = _control_u(u0, m, cap)
            util[node.name] = u
            control += node.software_power(u)
        out.append(_Second(m, util, hosted, services, control))
    return out


def _targets(scenario: Scenario) -> tuple[float, float] | None:
    if scenario.control_targets is not None:
        return tuple(scenario.control_targets)  # type: ignore[return-value]
    return PLATFORM_TARGETS.get(scenario.base_platform or "")


def calibrate_control(scenario: Scenario, ramp: list[int] | None = None) -> float:
    """Base control-node utilization that makes the run-level control:hosted split hit its target."""
    ramp = vm_ramp(scenario) if ramp is None else ramp
    targets = _targets(scenario)
    if not scenario.controls or targets is None or not any(ramp):
        return DEFAULT_CONTROL_UTILIZATION
    want = targets[0] / targets[1]

    def ratio(u0: float) -> float:
        secs = _seconds(scenario, u0, ramp)
        hosted = math.fsum(s.hosted_w for s in secs)
        return math.fsum(s.control_w + s.worker_services_w for s in secs) / hosted

    lo, hi = 0.0, 1.0 / 1.1
    if ratio(lo) > want or ratio(hi) < want:
        raise ScenarioError(f"{scenario.name}: control:hosted target {want:.4f} unreachable with these nodes")
    for _ in range(80):
        mid = (lo + hi) / 2
        if ratio(mid) < want:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def platform_overhead(scenario: Scenario, window: tuple[int, int] | None = None) -> float:
    """Infrastructure share of platform energy (control plus worker services) over the run.

    ``window`` restricts the sum to seconds ``[a, b)`` of the run. Returns 0 when
    no platform energy was spent.
    """
    if scenario.platform is None:
        raise ScenarioError("platform_overhead needs a kubernetes, openstack or stacked scenario")
    ramp = vm_ramp(scenario)
    secs = _seconds(scenario, calibrate_control(scenario, ramp), ramp)
    if window is not None:
        secs = secs[window[0]:window[1]]
    infra = math.fsum(s.control_w + s.worker_services_w for s in secs)
    hosted = math.fsum(s.hosted_w for s in secs)
    total = infra + hosted
    return infra / total if total > 0 and hosted > 0 else (1.0 if infra > 0 else 0.0)


def hosted_share(scenario: Scenario, window: tuple[int, int] | None = None) -> float:
    ramp = vm_ramp(scenario)
    if not any(ramp[slice(*window) if window else slice(None)]):
        return 0.0
    return 1.0 - platform_overhead(scenario, window)


# --- trace generation -----------------------------------------------------


def _rec(ts: int, dc: str, layer: str, source: str, quantity: str, value: float, **ids: str | None) -> dict:
    fields = {"ts_ms": ts, "dc": dc, "layer": layer, "source": source, "quantity": quantity, "value": value}
    fields.update(ids)
    return {k: fields[k] for k in WIRE_FIELDS if fields.get(k) is not None}


def _control_services(platform: str) -> list[tuple[str, float]]:
    names = OPENSTACK_CONTROL if platform == "openstack" else KUBERNETES_CONTROL
    lead = "neutron-api" if platform == "openstack" else "kube-apiserver"
    rest = [n for n in names if n != lead]
    return [(lead, 0.3)] + [(n, 0.7 / len(rest)) for n in rest]


def _worker_services(platform: str) -> list[str]:
    return list(OPENSTACK_COMPUTE[:3] if platform == "openstack" else KUBERNETES_RUNTIME + ("kube-proxy",))


def _unit_name(platform: str | None, j: int) -> str:
    if platform in ("openstack", "stacked"):
        return f"vm-{j:03d}"
    if platform == "kubernetes":
        return f"pod-{j:03d}"
    return f"stress-ng-worker-{j}"


def iter_records(scenario: Scenario) -> Iterator[dict]:
    """Wire records of the whole run, sorted by timestamp (ties keep generation order)."""
    ramp = vm_ramp(scenario)
    secs = _seconds(scenario, calibrate_control(scenario, ramp), ramp)
    sc = scenario
    dc, cl, t0 = sc.dc, sc.cluster, sc.start_ms
    platform = sc.base_platform
    share = WORKER_SERVICE_SHARE.get(platform or "", 0.0)
    outlet_p, counter_p, sw_p = 1000 // sc.outlet_hz, 1000 // sc.counter_hz, 1000 // sc.software_hz
    records: list[tuple[int, int, dict]] = []
    seq = 0

    def emit(ts: int, rec: dict) -> None:
        nonlocal seq
        records.append((ts, seq, rec))
        seq += 1

    comps = (("cpu-pkg0", 0.85), ("dram", 0.15))
    energy = {(n.name, c): 0.0 for n in sc.nodes for c, _ in comps}
    for n in sc.nodes:
        for c, _ in comps:
            emit(t0, _rec(t0, dc, "hardware", "cpu_counter", "energy_j_cum", 0.0, cluster=cl, node=n.name, component=c))
    k8s_share = PLATFORM_TARGETS["kubernetes"][0] / sum(PLATFORM_TARGETS["kubernetes"])
    for k, sec in enumerate(secs):
        base = t0 + 1000 * k
        it_total = 0.0
        for n in sc.nodes:
            u = sec.utilization[n.name]
            it = n.it_power(u)
            hw = n.hardware_power(u)
            it_total += it
            for j in range(0, 1000, outlet_p):
                emit(base + j, _rec(base + j, dc, "it", "outlet", "power_w", it, cluster=cl, node=n.name))
            for j in range(counter_p, 1001, counter_p):
                for c, part in comps:
                    energy[(n.name, c)] += hw * part * counter_p / 1000.0
                    ts = base + j - 1
                    emit(ts, _rec(ts, dc, "hardware", "cpu_counter", "energy_j_cum",
                                  math.fmod(energy[(n.name, c)], sc.counter_wrap_j),
                                  cluster=cl, node=n.name, component=c))
            sw_recs = _software(sc, n, u, sec, share, platform)
            for j in range(0, 1000, sw_p):
                for process, plat, plane, service, watts in sw_recs:
                    emit(base + j, _rec(base + j, dc, "software", "sw_meter", "power_w", watts, cluster=cl,
                                        node=n.name, process=process, platform=plat, plane=plane, service=service))
        if sc.platform == "stacked":
            # kubernetes running inside the OpenStack VMs, one virtual node per VM
            for process, node, plane, watts in _nested(sc, sec, share, k8s_share):
                for j in range(0, 1000, sw_p):
                    emit(base + j, _rec(base + j, dc, "software", "sw_meter", "power_w", watts,
                                        cluster=f"{cl}-k8s", node=node, process=process, platform="kubernetes",
                                        plane=plane, service=process if plane == "worker" else None))
        if sc.switch_w is not None:
            it_total += sc.switch_w
            for j in range(0, 1000, outlet_p):
                emit(base + j, _rec(base + j, dc, "it", "outlet", "power_w", sc.switch_w, cluster=cl,
                                    node="tor-1", component="switch"))
        if sc.facility_pue is not None:
            for j in range(0, 1000, sw_p):
                emit(base + j, _rec(base + j, dc, "dc", "facility", "power_w", sc.facility_pue * it_total))
    records.sort(key=lambda r: (r[0], r[1]))
    for _, _, rec in records:
        yield rec


def _software(sc: Scenario, node: NodeModel, u: float, sec: _Second, share: float, platform: str | None) -> list:
    sw = node.software_power(u)
    out = []
    if node.role is Role.CONTROL:
        for service, w in _control_services(platform or "kubernetes"):
            out.append((service, platform, "control", service, sw * w))
        return out
    idx = sc.workers.index(node)
    count = units_per_worker(sc, sec.units)[idx]
    if platform is not None:
        services = _worker_services(platform)
        for service in services:
            out.append((service, platform, "worker", service, share * sw / len(services)))
    hosted = (1 - share) * sw
    nworkers = len(sc.workers)
    for local in range(count):
        j = idx + local * nworkers
        plane = "hosted" if platform is not None else None
        out.append((_unit_name(sc.platform, j), platform, plane, None, hosted / count))
    return out


def _nested(sc: Scenario, sec: _Second, share: float, k8s_share: float) -> list:
    out = []
    nworkers = len(sc.workers)
    counts = units_per_worker(sc, sec.units)
    for idx, node in enumerate(sc.workers):
        count = counts[idx]
        if not count:
            continue
        vm_w = (1 - share) * node.software_power(sec.utilization[node.name]) / count
        for local in range(count):
            vm = _unit_name("stacked", idx + local * nworkers)
            out.append(("kubelet", vm, "worker", vm_w * k8s_share))
            out.append((f"pod-{vm[3:]}", vm, "hosted", vm_w * (1 - k8s_share)))
    return out


def generate(scenario: Scenario, out: str | Path | None = None) -> list[dict]:
    """Build the trace; with ``out`` also write it as JSONL. Same seed, same bytes."""
    records = list(iter_records(scenario))
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return records


def wrap_max(scenario: Scenario) -> dict[str, float]:
    """Alignment wrap configuration matching the simulated counters."""
    return {"cpu_counter": scenario.counter_wrap_j}


# --- built-in scenarios ---------------------------------------------------


def _cluster(profile: str = "intel-air", workers: int = 4, control: bool = True) -> tuple:
    nodes = [node_from_profile(f"w{i + 1}", profile) for i in range(workers)]
    if control:
        nodes.insert(0, node_from_profile("ctl", profile, role="control"))
    return tuple(nodes)


def builtin(name: str) -> Scenario:
    try:
        factory = _BUILTIN[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; built-ins: {', '.join(sorted(_BUILTIN))}") from None
    return factory()


_BUILTIN = {
    "idle": lambda: Scenario("idle", _cluster(control=False), duration_s=30),
    "intel-ramp": lambda: Scenario("intel-ramp", _cluster(control=False), duration_s=90, max_units=288, ramp_s=60),
    "amd-water": lambda: Scenario("amd-water", (node_from_profile("a1", "amd-water"),), duration_s=60,
                                  max_units=64, ramp_s=40),
    "openstack-ramp": lambda: Scenario("openstack-ramp", _cluster(), platform="openstack", duration_s=240,
                                       max_units=288, ramp_s=240),
    "kubernetes": lambda: Scenario("kubernetes", _cluster(), platform="kubernetes", duration_s=120,
                                   max_units=288, ramp_s=120),
    "stacked": lambda: Scenario("stacked", _cluster(), platform="stacked", duration_s=120, max_units=144,
                                ramp_s=60, facility_pue=1.58),
}

BUILTIN_SCENARIOS = tuple(sorted(_BUILTIN))


def load_scenario(spec: str | Path) -> Scenario:
    """A built-in scenario name or a TOML/JSON scenario file."""
    if isinstance(spec, str) and spec in _BUILTIN:
        return builtin(spec)
    path = Path(spec)
    if not path.exists():
        raise ScenarioError(f"no such scenario file or built-in: {spec}")
    return Scenario.load(path)
