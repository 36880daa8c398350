"""Power-usage-effectiveness metrics from heterogeneous power streams."""

from .alignment import AlignmentPlan, Integration, StreamingAligner, WindowAligner, align, detect_window, integrate_window
from .ingestion import IngestStats, TraceFile, order_buffer, read_trace, serve_ingest
from .metrics import (
    DistributionStats,
    EnergyLedger,
    XPUEEngine,
    aggregate,
    aggregate_by,
    cpue,
    cue,
    dcie,
    gcue,
    gpue,
    gwue,
    pue,
    scoped_vpue,
    spue,
    vpue,
    vpue_platform,
)
from .model import (
    AlignedWindow,
    Layer,
    MetricKind,
    MetricPoint,
    Plane,
    PowerSample,
    Quantity,
    SourceKind,
    TagSet,
    TargetId,
    Validity,
    validate_sample,
)
from .scopes import LayerStack, ScopeRegistry, ScopeRule, validate_stack

__version__ = "0.1.0"

__all__ = [
    "AlignedWindow", "AlignmentPlan", "DistributionStats", "EnergyLedger", "IngestStats", "Integration",
    "Layer", "LayerStack", "MetricKind", "MetricPoint", "Plane", "PowerSample", "Quantity", "ScopeRegistry",
    "ScopeRule", "SourceKind", "StreamingAligner", "TagSet", "TargetId", "TraceFile", "Validity",
    "WindowAligner", "XPUEEngine", "aggregate", "aggregate_by", "align", "cpue", "cue", "dcie",
    "detect_window", "gcue", "gpue", "gwue", "integrate_window", "order_buffer", "pue", "read_trace",
    "scoped_vpue", "serve_ingest", "spue", "validate_sample", "validate_stack", "vpue", "vpue_platform",
]
