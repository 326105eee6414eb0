"""Probe planning, runtime-overhead math and the adaptive QoS governor.

The profiler hooks an inference runtime at three levels — token
(``llama_decode``), graph (``ggml_backend_graph_compute_async``) and
operator (the per-backend ``*_compute_forward`` entry points) — each as an
entry/return probe pair, plus the scheduler tracepoints.  Attaching all
levels yields twelve attachment points.

Live attachment requires the BCC toolchain and root on the target box and
is platform-gated; everything else here (planning, QoS stepping, decoding a
captured byte stream into a session) is pure and runs anywhere, which is
what the tests exercise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from . import wire
from .errors import ConfigError, ProfInferError
from .events import (
    CANONICAL_PMC_SPECS,
    Backend,
    PmcSpec,
    ProbeKind,
    SessionHeader,
    TraceFlags,
    TraceSession,
)

ALL_LEVELS = ("token", "graph", "op", "kernel")


@dataclass(frozen=True)
class ProbeAttachment:
    level: str
    kind: str  # "uprobe" | "uretprobe" | "tracepoint"
    target: str
    emits: ProbeKind
    backend: Backend | None = None
    pmc: tuple[str, ...] = ()


@dataclass
class ProbePlan:
    attachments: tuple[ProbeAttachment, ...]
    flags: TraceFlags

    def by_level(self, level: str) -> tuple[ProbeAttachment, ...]:
        return tuple(a for a in self.attachments if a.level == level)


_OP_SYMBOLS = (
    ("ggml_compute_forward", Backend.CPU),
    ("ggml_cl_compute_forward", Backend.OPENCL_GPU),
    ("ggml_rk_compute_forward", Backend.NPU),
)


def build_probe_plan(
    levels: tuple[str, ...] = ALL_LEVELS,
    flags: TraceFlags | None = None,
    pmc_names: tuple[str, ...] | None = None,
) -> ProbePlan:
    """Lay out the attachment set for the requested probe levels.

    Hardware counters are read only in the CPU operator probes (the
    accelerator entry points just bracket a command-queue flush, so core
    counters there would attribute the wrong work).
    """
    flags = flags or TraceFlags()
    unknown = [lv for lv in levels if lv not in ALL_LEVELS]
    if unknown:
        raise ConfigError(
            f"unknown probe level(s) {', '.join(sorted(unknown))}; valid: {', '.join(ALL_LEVELS)}"
        )
    if pmc_names is None:
        pmc_names = tuple(s.name for s in CANONICAL_PMC_SPECS)
    out: list[ProbeAttachment] = []
    if "token" in levels:
        out.append(ProbeAttachment("token", "uprobe", "llama_decode", ProbeKind.TOKEN_ENTER))
        out.append(ProbeAttachment("token", "uretprobe", "llama_decode", ProbeKind.TOKEN_EXIT))
    if "graph" in levels:
        sym = "ggml_backend_graph_compute_async"
        out.append(ProbeAttachment("graph", "uprobe", sym, ProbeKind.GRAPH_ENTER))
        out.append(ProbeAttachment("graph", "uretprobe", sym, ProbeKind.GRAPH_EXIT))
    if "op" in levels:
        for sym, backend in _OP_SYMBOLS:
            pmc = pmc_names if (backend is Backend.CPU and flags.pmc) else ()
            out.append(
                ProbeAttachment("op", "uprobe", sym, ProbeKind.OP_ENTER, backend, pmc)
            )
            out.append(
                ProbeAttachment("op", "uretprobe", sym, ProbeKind.OP_EXIT, backend, pmc)
            )
    if "kernel" in levels:
        out.append(
            ProbeAttachment("kernel", "tracepoint", "sched:sched_switch", ProbeKind.SCHED_SWITCH)
        )
        out.append(
            ProbeAttachment("kernel", "tracepoint", "sched:sched_wakeup", ProbeKind.SCHED_WAKEUP)
        )
    return ProbePlan(attachments=tuple(out), flags=flags)


def describe_plan(plan: ProbePlan) -> str:
    lines = []
    for a in plan.attachments:
        extra = ""
        if a.backend is not None:
            extra = f" [{a.backend.value}]"
        if a.pmc:
            extra += f" pmc={','.join(a.pmc)}"
        lines.append(f"{a.level:<7} {a.kind:<11} {a.target}{extra}")
    return "\n".join(lines)


def probe_overhead(probe_ns: float, runtime_ns: float, nthreads: int) -> float:
    """Fraction of total thread-time spent inside probe handlers."""
    if runtime_ns <= 0 or nthreads <= 0:
        raise ValueError("runtime and thread count must be positive")
    return probe_ns / (runtime_ns * nthreads)


# ---------------------------------------------------------------------------
# adaptive probe governor
# ---------------------------------------------------------------------------

# Cheapest information lost first.  Token probes are the control signal and
# are never shed.
DISABLE_ORDER = ("pmc", "str", "op", "graph")


@dataclass
class QosController:
    """Sheds probe work when decode throughput falls below target.

    One class toggles per update.  Re-enables run the disable order in
    reverse and only once throughput clears target*(1+margin), so a load
    hovering at the threshold cannot flap a probe class on and off.
    """

    target_tps: float
    window: int = 16
    margin: float = 0.2
    enabled: dict[str, bool] = field(
        default_factory=lambda: {"token": True, "graph": True, "op": True, "str": True, "pmc": True}
    )
    recent_ns: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.target_tps <= 0:
            raise ConfigError(f"qos target must be positive, got {self.target_tps}")
        if self.window < 1:
            raise ConfigError(f"qos window must be >= 1, got {self.window}")
        if self.margin < 0:
            raise ConfigError(f"qos margin must be >= 0, got {self.margin}")
        self.recent_ns = deque(self.recent_ns, maxlen=self.window)


@dataclass
class QosDecision:
    tps: float | None
    mask: dict[str, bool]
    toggled: tuple[str, bool] | None


def qos_update(ctrl: QosController, tpot_ns: int | None = None) -> QosDecision:
    """Feed one decode latency sample and get the (possibly new) probe mask."""
    if tpot_ns is not None:
        if tpot_ns <= 0:
            raise ValueError(f"tpot sample must be positive, got {tpot_ns}")
        ctrl.recent_ns.append(tpot_ns)
    if not ctrl.recent_ns:
        return QosDecision(tps=None, mask=dict(ctrl.enabled), toggled=None)
    tps = 1e9 / (sum(ctrl.recent_ns) / len(ctrl.recent_ns))
    toggled = None
    if tps < ctrl.target_tps:
        for name in DISABLE_ORDER:
            if ctrl.enabled[name]:
                ctrl.enabled[name] = False
                toggled = (name, False)
                break
    elif tps > ctrl.target_tps * (1.0 + ctrl.margin):
        for name in reversed(DISABLE_ORDER):
            if not ctrl.enabled[name]:
                ctrl.enabled[name] = True
                toggled = (name, True)
                break
    return QosDecision(tps=tps, mask=dict(ctrl.enabled), toggled=toggled)


# ---------------------------------------------------------------------------
# captured-stream decoding
# ---------------------------------------------------------------------------


def poll_and_decode(
    data: bytes, *, pmc_specs: tuple[PmcSpec, ...] | None = None
) -> TraceSession:
    """Turn a captured perf-buffer byte stream into a session.

    Sequence numbers are assigned here on the consumer side; drop markers in
    the stream advance the counter so losses stay visible as gaps.  The
    stream does not carry counter names, only a slot count — pass
    ``pmc_specs`` to label them, else the canonical set is assumed.
    """
    stream = wire.decode_stream(data)
    if pmc_specs is None:
        pmc_specs = CANONICAL_PMC_SPECS[: stream.n_pmc]
    elif len(pmc_specs) != stream.n_pmc:
        raise ConfigError(
            f"stream carries {stream.n_pmc} counter slots but {len(pmc_specs)} specs given"
        )
    session_kinds = (
        ProbeKind.TOKEN_ENTER,
        ProbeKind.TOKEN_EXIT,
        ProbeKind.GRAPH_ENTER,
        ProbeKind.GRAPH_EXIT,
        ProbeKind.OP_ENTER,
        ProbeKind.OP_EXIT,
    )
    tids = sorted({e.tid for e in stream.events if e.kind in session_kinds})
    guids = {
        e.payload.backend_guid
        for e in stream.events
        if e.kind in (ProbeKind.GRAPH_ENTER, ProbeKind.GRAPH_EXIT)
    }
    header = SessionHeader(
        pid=stream.events[0].pid if stream.events else 0,
        nthreads=max(len(tids), 1),
        flags=stream.flags,
        pmc_specs=tuple(pmc_specs),
        inference_tids=tuple(tids),
        backend_names={g: g for g in sorted(guids)},
        dropped=stream.dropped,
    )
    return TraceSession(header=header, events=stream.events)


def start_live_trace(plan: ProbePlan, pid: int):
    """Attach the plan to a live process.  Linux + BCC + root only."""
    try:
        import bcc  # type: ignore  # noqa: F401
    except ImportError as exc:
        raise ProfInferError(
            "live tracing needs the BCC toolchain (python3-bcc) and root; "
            "capture a stream on the target and use poll_and_decode instead"
        ) from exc
    raise ProfInferError(
        "live attachment is not wired up in this build; capture a stream on the "
        "target and decode it offline"
    )
