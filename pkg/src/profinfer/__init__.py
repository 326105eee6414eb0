"""Fine-grained profiling for on-device LLM inference.

Trace sessions carry token, graph-compute and operator events (plus
scheduler activity) captured from an inference runtime; the analysis layers
turn one session into an operator DAG per token, a Perfetto timeline, and
statistical views (latency series, matmul cost fits, memory traffic, expert
activation).  A deterministic synthetic generator provides sessions with
known ground truth for testing and demos.
"""

from .dag import ProfDag, build_profdag, export_dot, export_json, metric_values
from .errors import (
    ConfigError,
    DagUnavailableError,
    DegenerateFitError,
    MetricUnavailableError,
    MissingCounterError,
    ProfInferError,
    StreamError,
    StructuralError,
    UnbalancedProbeError,
    UnknownIterationError,
)
from .events import (
    CANONICAL_PMC_SPECS,
    Backend,
    GraphPayload,
    MoeInfo,
    OpPayload,
    OpType,
    PmcSpec,
    ProbeKind,
    RawEvent,
    SchedPayload,
    SessionHeader,
    ThreadState,
    TokenPayload,
    TraceFlags,
    TraceSession,
    UnknownOp,
    read_session,
    session_from_binary,
    session_from_jsonl,
    session_to_binary,
    session_to_jsonl,
    validate_session,
    write_session,
)
from .ingest import IngestResult, IterationSpan, OpSpan, Phase, ingest
from .stats import (
    ExpertActivationMatrix,
    FitResult,
    MatmulSample,
    MemoryTraffic,
    TokenSeries,
    expert_analysis,
    linear_fit,
    matmul_complexity,
    matmul_samples,
    memory_traffic,
    pearson_r,
    stalled_ratio,
    token_series,
)
from .synth import CostModel, InterferenceSpec, ModelSpec, RunSpec, generate_session
from .timeline import (
    TimelineDoc,
    build_timeline,
    derive_thread_states,
    emit_chrome_trace,
    parse_chrome_trace,
)
from .tracer import (
    ProbePlan,
    QosController,
    build_probe_plan,
    poll_and_decode,
    probe_overhead,
    qos_update,
)

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "CANONICAL_PMC_SPECS",
    "ConfigError",
    "CostModel",
    "DagUnavailableError",
    "DegenerateFitError",
    "ExpertActivationMatrix",
    "FitResult",
    "GraphPayload",
    "IngestResult",
    "InterferenceSpec",
    "IterationSpan",
    "MatmulSample",
    "MemoryTraffic",
    "MetricUnavailableError",
    "MissingCounterError",
    "ModelSpec",
    "MoeInfo",
    "OpPayload",
    "OpSpan",
    "OpType",
    "Phase",
    "PmcSpec",
    "ProbeKind",
    "ProbePlan",
    "ProfDag",
    "ProfInferError",
    "QosController",
    "RawEvent",
    "RunSpec",
    "SchedPayload",
    "SessionHeader",
    "StreamError",
    "StructuralError",
    "ThreadState",
    "TimelineDoc",
    "TokenPayload",
    "TokenSeries",
    "TraceFlags",
    "TraceSession",
    "UnbalancedProbeError",
    "UnknownIterationError",
    "UnknownOp",
    "build_probe_plan",
    "build_profdag",
    "build_timeline",
    "derive_thread_states",
    "emit_chrome_trace",
    "expert_analysis",
    "export_dot",
    "export_json",
    "generate_session",
    "ingest",
    "linear_fit",
    "matmul_complexity",
    "matmul_samples",
    "memory_traffic",
    "metric_values",
    "parse_chrome_trace",
    "pearson_r",
    "poll_and_decode",
    "probe_overhead",
    "qos_update",
    "read_session",
    "session_from_binary",
    "session_from_jsonl",
    "session_to_binary",
    "session_to_jsonl",
    "stalled_ratio",
    "token_series",
    "validate_session",
    "write_session",
]
