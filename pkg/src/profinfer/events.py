"""Core event model for probe traces captured from a running inference engine.

A trace session is a header (capture configuration) plus a flat list of raw
events.  Events come from user-space probes on the engine's token, graph and
operator entry points and from kernel scheduler tracepoints.  This module
defines the in-memory types, the canonical JSON Lines serialization, a compact
length-prefixed binary alternative, and a structural validator.

Timestamps are nanoseconds from the kernel clock.  Operator and source
addresses are opaque 64-bit identities: they are compared, never dereferenced.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import IO, Iterable, Union

FORMAT_VERSION = 1

# Upper bound imposed by the fixed-size wire record (two-level kernel copy).
MAX_OP_NAME = 63
MAX_SRCS = 10
MAX_EXPERTS = 8
MAX_PMC = 8


class ProbeKind(IntEnum):
    """Event discriminator.  Values double as wire-record kind tags."""

    TOKEN_ENTER = 1
    TOKEN_EXIT = 2
    GRAPH_ENTER = 3
    GRAPH_EXIT = 4
    OP_ENTER = 5
    OP_EXIT = 6
    SCHED_SWITCH = 7
    SCHED_WAKEUP = 8


class Backend(Enum):
    CPU = "CPU"
    OPENCL_GPU = "OpenCL-GPU"
    NPU = "NPU"


class OpType(Enum):
    """Operator types observed at the compute dispatch point.

    The integer values are the stable codes used on the wire.  Types outside
    this set are preserved as :class:`UnknownOp` rather than dropped, so a
    trace from a newer engine build still round-trips.
    """

    NONE = 0
    ADD = 1
    MUL = 2
    MUL_MAT = 3
    MUL_MAT_ID = 4
    SOFT_MAX = 5
    RMS_NORM = 6
    UNARY = 7
    ROPE = 8
    CPY = 9
    GET_ROWS = 10


@dataclass(frozen=True)
class UnknownOp:
    """Escape hatch for operator codes this build does not know about."""

    raw: int

    @property
    def name(self) -> str:
        return f"UNKNOWN({self.raw})"

    @property
    def value(self) -> int:
        return self.raw


OpTypeLike = Union[OpType, UnknownOp]


def op_type_from_code(code: int) -> OpTypeLike:
    try:
        return OpType(code)
    except ValueError:
        return UnknownOp(code)


@dataclass(frozen=True)
class PmcSpec:
    """One performance counter slot: identity, scope and unit conversion.

    ``unit_scale`` converts a raw count into the unit named by ``unit``
    (e.g. one cache refill moves 64 bytes).
    """

    name: str
    scope: str  # "core" | "software" | "hardware"
    unit: str  # "bytes" | "pages" | "cycles"
    unit_scale: int = 1


# Default counter set for the CPU operator probe.
CANONICAL_PMC_SPECS: tuple[PmcSpec, ...] = (
    PmcSpec("l3d_cache_refill", "core", "bytes", 64),
    PmcSpec("mem_access_wr", "core", "bytes", 16),
    PmcSpec("major-faults", "software", "pages", 1),
    PmcSpec("cycles", "hardware", "cycles", 1),
    PmcSpec("idle-backend-cycles", "hardware", "cycles", 1),
)


@dataclass
class TraceFlags:
    """Capture-time feature flags baked into the probe programs."""

    str_parse: bool = True  # tensor name / dims / src pointer parsing
    pmc: bool = True  # per-op performance counter reads
    perf_buffer: bool = False  # perf buffer (lossy, counted) vs ring buffer


@dataclass
class MoeInfo:
    total_experts: int
    experts_per_token: int


@dataclass
class SessionHeader:
    pid: int
    nthreads: int
    flags: TraceFlags = field(default_factory=TraceFlags)
    pmc_specs: tuple[PmcSpec, ...] = CANONICAL_PMC_SPECS
    inference_tids: tuple[int, ...] = ()
    qos_target_tps: float | None = None
    backend_names: dict[str, str] = field(default_factory=dict)
    moe: MoeInfo | None = None
    dropped: int = 0  # events reported lost by the perf buffer


@dataclass
class TokenPayload:
    batch_size: int


@dataclass
class GraphPayload:
    backend_guid: str  # 16 hex digits identifying the backend instance


@dataclass
class OpPayload:
    op_addr: int
    op_type: OpTypeLike
    op_name: str = ""  # empty when string parsing is disabled
    backend: Backend = Backend.CPU
    dims: tuple[int, int, int, int] | None = None
    src_addrs: tuple[int, ...] | None = None
    pmc: tuple[int, ...] | None = None  # cumulative readings, one per PmcSpec
    expert_ids: tuple[int, ...] | None = None


@dataclass
class SchedPayload:
    """Scheduler tracepoint data; switch and wakeup use different fields."""

    prev_tid: int | None = None
    next_tid: int | None = None
    prev_state: int | None = None
    wakee_tid: int | None = None


Payload = Union[TokenPayload, GraphPayload, OpPayload, SchedPayload]

_PAYLOAD_FOR_KIND: dict[ProbeKind, type] = {
    ProbeKind.TOKEN_ENTER: TokenPayload,
    ProbeKind.TOKEN_EXIT: TokenPayload,
    ProbeKind.GRAPH_ENTER: GraphPayload,
    ProbeKind.GRAPH_EXIT: GraphPayload,
    ProbeKind.OP_ENTER: OpPayload,
    ProbeKind.OP_EXIT: OpPayload,
    ProbeKind.SCHED_SWITCH: SchedPayload,
    ProbeKind.SCHED_WAKEUP: SchedPayload,
}


@dataclass
class RawEvent:
    kind: ProbeKind
    ts_ns: int
    pid: int
    tid: int
    cpu: int
    seq: int  # assigned by the consumer at poll time; gaps mean lost records
    payload: Payload


class ThreadState(Enum):
    RUNNING = "running"
    RUNNABLE = "runnable"
    IDLE = "idle"


@dataclass
class TraceSession:
    header: SessionHeader
    events: list[RawEvent] = field(default_factory=list)


# ---------------------------------------------------------------------------
# JSON Lines serialization (canonical on-disk format)
# ---------------------------------------------------------------------------

_KIND_NAMES = {k: k.name.lower() for k in ProbeKind}
_KINDS_BY_NAME = {v: k for k, v in _KIND_NAMES.items()}


def _hex(addr: int) -> str:
    return f"0x{addr:x}"


def _op_type_json(op_type: OpTypeLike):
    if isinstance(op_type, OpType):
        return op_type.name
    return op_type.raw


def _op_type_from_json(value) -> OpTypeLike:
    if isinstance(value, str):
        return OpType[value]
    return op_type_from_code(int(value))


def _payload_to_json(payload: Payload) -> dict:
    if isinstance(payload, TokenPayload):
        return {"batch_size": payload.batch_size}
    if isinstance(payload, GraphPayload):
        return {"backend_guid": payload.backend_guid}
    if isinstance(payload, SchedPayload):
        out = {}
        for key in ("prev_tid", "next_tid", "prev_state", "wakee_tid"):
            value = getattr(payload, key)
            if value is not None:
                out[key] = value
        return out
    out = {
        "op_addr": _hex(payload.op_addr),
        "op_type": _op_type_json(payload.op_type),
        "op_name": payload.op_name,
        "backend": payload.backend.value,
    }
    if payload.dims is not None:
        out["dims"] = list(payload.dims)
    if payload.src_addrs is not None:
        out["src_addrs"] = [_hex(a) for a in payload.src_addrs]
    if payload.pmc is not None:
        out["pmc"] = list(payload.pmc)
    if payload.expert_ids is not None:
        out["expert_ids"] = list(payload.expert_ids)
    return out


def _payload_from_json(kind: ProbeKind, data: dict) -> Payload:
    cls = _PAYLOAD_FOR_KIND[kind]
    if cls is TokenPayload:
        return TokenPayload(batch_size=int(data["batch_size"]))
    if cls is GraphPayload:
        return GraphPayload(backend_guid=str(data["backend_guid"]))
    if cls is SchedPayload:
        return SchedPayload(
            prev_tid=data.get("prev_tid"),
            next_tid=data.get("next_tid"),
            prev_state=data.get("prev_state"),
            wakee_tid=data.get("wakee_tid"),
        )
    dims = data.get("dims")
    srcs = data.get("src_addrs")
    pmc = data.get("pmc")
    experts = data.get("expert_ids")
    return OpPayload(
        op_addr=int(data["op_addr"], 16),
        op_type=_op_type_from_json(data["op_type"]),
        op_name=data.get("op_name", ""),
        backend=Backend(data.get("backend", "CPU")),
        dims=tuple(dims) if dims is not None else None,
        src_addrs=tuple(int(a, 16) for a in srcs) if srcs is not None else None,
        pmc=tuple(pmc) if pmc is not None else None,
        expert_ids=tuple(experts) if experts is not None else None,
    )


def event_to_json(event: RawEvent) -> dict:
    return {
        "kind": _KIND_NAMES[event.kind],
        "ts_ns": event.ts_ns,
        "pid": event.pid,
        "tid": event.tid,
        "cpu": event.cpu,
        "seq": event.seq,
        "payload": _payload_to_json(event.payload),
    }


def event_from_json(data: dict) -> RawEvent:
    kind = _KINDS_BY_NAME[data["kind"]]
    return RawEvent(
        kind=kind,
        ts_ns=int(data["ts_ns"]),
        pid=int(data["pid"]),
        tid=int(data["tid"]),
        cpu=int(data["cpu"]),
        seq=int(data["seq"]),
        payload=_payload_from_json(kind, data["payload"]),
    )


def header_to_json(header: SessionHeader) -> dict:
    data = {
        "pid": header.pid,
        "nthreads": header.nthreads,
        "flags": {
            "str": header.flags.str_parse,
            "pmc": header.flags.pmc,
            "perf_buffer": header.flags.perf_buffer,
        },
        "pmc_specs": [
            {"name": s.name, "scope": s.scope, "unit": s.unit, "unit_scale": s.unit_scale}
            for s in header.pmc_specs
        ],
        "inference_tids": list(header.inference_tids),
        "qos_target_tps": header.qos_target_tps,
        "backend_names": dict(header.backend_names),
        "dropped": header.dropped,
    }
    if header.moe is not None:
        data["moe"] = {
            "total_experts": header.moe.total_experts,
            "experts_per_token": header.moe.experts_per_token,
        }
    return data


def header_from_json(data: dict) -> SessionHeader:
    flags = data.get("flags", {})
    moe = data.get("moe")
    return SessionHeader(
        pid=int(data["pid"]),
        nthreads=int(data["nthreads"]),
        flags=TraceFlags(
            str_parse=bool(flags.get("str", True)),
            pmc=bool(flags.get("pmc", True)),
            perf_buffer=bool(flags.get("perf_buffer", False)),
        ),
        pmc_specs=tuple(
            PmcSpec(s["name"], s["scope"], s["unit"], int(s.get("unit_scale", 1)))
            for s in data.get("pmc_specs", [])
        ),
        inference_tids=tuple(data.get("inference_tids", [])),
        qos_target_tps=data.get("qos_target_tps"),
        backend_names=dict(data.get("backend_names", {})),
        moe=MoeInfo(int(moe["total_experts"]), int(moe["experts_per_token"])) if moe else None,
        dropped=int(data.get("dropped", 0)),
    )


def session_to_jsonl(session: TraceSession) -> bytes:
    """Serialize a session to JSON Lines: header object first, one event per line."""
    lines = [json.dumps({"profinfer_header": header_to_json(session.header), "v": FORMAT_VERSION})]
    lines.extend(json.dumps(event_to_json(e), separators=(",", ":")) for e in session.events)
    return ("\n".join(lines) + "\n").encode()


def session_from_jsonl(data: bytes | str) -> TraceSession:
    if isinstance(data, bytes):
        data = data.decode()
    lines = [ln for ln in data.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty session stream")
    head = json.loads(lines[0])
    if "profinfer_header" not in head:
        raise ValueError("first line is not a session header")
    version = head.get("v")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported session format version {version!r}")
    session = TraceSession(header=header_from_json(head["profinfer_header"]))
    session.events = [event_from_json(json.loads(ln)) for ln in lines[1:]]
    return session


def write_session(session: TraceSession, path: str | Path | IO[bytes]) -> None:
    payload = session_to_jsonl(session)
    if hasattr(path, "write"):
        path.write(payload)  # type: ignore[union-attr]
    else:
        Path(path).write_bytes(payload)


def read_session(path: str | Path | IO[bytes]) -> TraceSession:
    if hasattr(path, "read"):
        data = path.read()  # type: ignore[union-attr]
    else:
        data = Path(path).read_bytes()
    return session_from_jsonl(data)


# ---------------------------------------------------------------------------
# Length-prefixed binary framing (compact alternative to JSON Lines)
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"PFSN"


def session_to_binary(session: TraceSession) -> bytes:
    # Late import: the record codec lives with the rest of the wire layout.
    from . import wire

    chunks = [_BINARY_MAGIC, bytes([FORMAT_VERSION])]
    head = json.dumps(header_to_json(session.header)).encode()
    chunks.append(struct.pack("<I", len(head)))
    chunks.append(head)
    for event in session.events:
        body = wire.encode_event(event, session.header) + struct.pack("<Q", event.seq)
        chunks.append(struct.pack("<I", len(body)))
        chunks.append(body)
    return b"".join(chunks)


def session_from_binary(data: bytes) -> TraceSession:
    from . import wire

    if data[:4] != _BINARY_MAGIC:
        raise ValueError("bad magic; not a binary session")
    if data[4] != FORMAT_VERSION:
        raise ValueError(f"unsupported session format version {data[4]}")
    pos = 5
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = header_from_json(json.loads(data[pos : pos + hlen].decode()))
    pos += hlen
    session = TraceSession(header=header)
    while pos < len(data):
        (blen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        body = data[pos : pos + blen]
        if len(body) != blen:
            raise ValueError(f"truncated record at byte {pos - 4}")
        pos += blen
        event = wire.decode_event(body[:-8], header)
        (event.seq,) = struct.unpack("<Q", body[-8:])
        session.events.append(event)
    return session


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_GUID_HEX = set("0123456789abcdef")


def _check_op(v: list[tuple[int, str]], e: RawEvent, header: SessionHeader) -> None:
    p: OpPayload = e.payload  # type: ignore[assignment]
    if len(p.op_name) > MAX_OP_NAME:
        v.append((e.seq, f"op_name longer than {MAX_OP_NAME} bytes"))
    if not header.flags.str_parse:
        if p.dims is not None:
            v.append((e.seq, "dims present but the Str flag is off"))
        if p.src_addrs is not None:
            v.append((e.seq, "src_addrs present but the Str flag is off"))
    if p.dims is not None and len(p.dims) != 4:
        v.append((e.seq, f"dims has {len(p.dims)} extents, expected 4"))
    if p.src_addrs is not None and len(p.src_addrs) > MAX_SRCS:
        v.append((e.seq, f"more than {MAX_SRCS} source addresses"))
    if p.pmc is not None:
        if not header.flags.pmc:
            v.append((e.seq, "pmc present but the PMC flag is off"))
        elif p.backend is not Backend.CPU:
            v.append((e.seq, f"pmc present on {p.backend.value} backend"))
        elif len(p.pmc) != len(header.pmc_specs):
            v.append(
                (e.seq, f"pmc has {len(p.pmc)} readings, header declares {len(header.pmc_specs)}")
            )
        if any(c < 0 for c in p.pmc):
            v.append((e.seq, "negative counter reading"))
    if p.expert_ids is not None:
        if p.op_type is not OpType.MUL_MAT_ID:
            type_name = p.op_type.name
            v.append((e.seq, f"expert_ids present on {type_name} operator"))
        elif header.moe is not None:
            if len(p.expert_ids) != header.moe.experts_per_token:
                v.append(
                    (
                        e.seq,
                        f"expert_ids length {len(p.expert_ids)} != "
                        f"k={header.moe.experts_per_token}",
                    )
                )
            if any(i >= header.moe.total_experts or i < 0 for i in p.expert_ids):
                v.append((e.seq, "expert id out of range"))
        if len(p.expert_ids) > MAX_EXPERTS:
            v.append((e.seq, f"more than {MAX_EXPERTS} expert ids"))


def validate_session(session: TraceSession) -> list[str]:
    """Check structural invariants; returns human-readable violations.

    The result is deterministic and does not depend on the order of the
    event list (only on the seq values), so permuted copies of the same
    session validate identically.  An empty list means the session is
    structurally sound.

    Args:
        session: the session to check.

    Returns:
        Violation descriptions, one per problem, sorted by seq.
    """
    v: list[tuple[int, str]] = []
    header = session.header
    tids = set(header.inference_tids)
    seen_seq: dict[int, int] = {}
    for e in session.events:
        seen_seq[e.seq] = seen_seq.get(e.seq, 0) + 1
        if e.ts_ns < 0:
            v.append((e.seq, "negative timestamp"))
        expected = _PAYLOAD_FOR_KIND[e.kind]
        if not isinstance(e.payload, expected):
            v.append((e.seq, f"{_KIND_NAMES[e.kind]} carries {type(e.payload).__name__}"))
            continue
        if e.kind in (ProbeKind.TOKEN_ENTER, ProbeKind.TOKEN_EXIT):
            if e.payload.batch_size < 1:
                v.append((e.seq, "batch_size below 1"))
        elif e.kind in (ProbeKind.GRAPH_ENTER, ProbeKind.GRAPH_EXIT):
            guid = e.payload.backend_guid
            if len(guid) != 16 or not set(guid) <= _GUID_HEX:
                v.append((e.seq, f"backend_guid {guid!r} is not 16 hex digits"))
        elif e.kind in (ProbeKind.OP_ENTER, ProbeKind.OP_EXIT):
            _check_op(v, e, header)
        else:
            p: SchedPayload = e.payload
            if e.kind is ProbeKind.SCHED_SWITCH:
                if p.prev_tid is None or p.next_tid is None or p.prev_state is None:
                    v.append((e.seq, "sched_switch missing prev/next/prev_state"))
            elif p.wakee_tid is None:
                v.append((e.seq, "sched_wakeup missing wakee_tid"))
        if e.kind is not ProbeKind.SCHED_SWITCH and e.kind is not ProbeKind.SCHED_WAKEUP:
            if tids and e.tid not in tids:
                v.append((e.seq, f"tid {e.tid} not in inference_tids"))
    for seq, count in seen_seq.items():
        if count > 1:
            v.append((seq, f"seq {seq} assigned to {count} events"))
    v.sort(key=lambda item: (item[0], item[1]))
    return [f"seq {seq}: {msg}" for seq, msg in v]
