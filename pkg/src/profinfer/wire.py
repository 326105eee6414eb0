"""Fixed-layout binary records exchanged between kernel probe handlers and
the user-space collector.

Every record is little-endian with a per-kind fixed size, so a stream is
decodable from the kind tag alone.  Regions for features that were disabled
at compile time are zero-filled, never omitted: the kernel handlers always
emit the full layout and the decoder maps disabled regions to absent fields.

Record layout (offsets in bytes; see docs/wire-format.md for the full table):

    common   0 kind u8 | 1 flags u8 | 2 backend u8 | 3 reserved |
             4 ts_ns u64 | 12 pid u32 | 16 tid u32 | 20 cpu u32
    op       24 op_addr u64 | 32 op_type u32 | 36 expert_count u8 |
             37..40 reserved | 40 name[64] | 104 dims u64[4] |
             136 src_addrs u64[10] | 216 pmc u64[8] | 280 expert_ids u32[8]
    graph    24 guid char[16]
    token    24 batch_size u32
    sched    24 prev_tid u32 | 28 next_tid u32 | 32 wakee_tid u32 |
             36 prev_state u32

A stream opens with an 8-byte header record (kind 0) carrying the format
version, the compile-time flag bits and the number of active counters.
Kind 9 is a drop marker: the collector emits one when the perf buffer
reports lost records, carrying the lost count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import StreamError
from .events import (
    Backend,
    GraphPayload,
    OpPayload,
    OpType,
    ProbeKind,
    RawEvent,
    SchedPayload,
    SessionHeader,
    TokenPayload,
    TraceFlags,
    op_type_from_code,
)

WIRE_VERSION = 1

KIND_STREAM_HEADER = 0
KIND_DROP_MARKER = 9

# flags byte in each record
FLAG_PAYLOAD_FAULT = 1 << 0  # tensor struct was unreadable; dims/srcs dropped
FLAG_NAME_TRUNCATED = 1 << 1
FLAG_PMC_SKIPPED = 1 << 2  # counters not read for this record

# flags byte in the stream header record
HDR_FLAG_STR = 1 << 0
HDR_FLAG_PMC = 1 << 1
HDR_FLAG_PERF_BUFFER = 1 << 2

_BACKEND_CODES = {Backend.CPU: 0, Backend.OPENCL_GPU: 1, Backend.NPU: 2}
_BACKENDS_BY_CODE = {v: k for k, v in _BACKEND_CODES.items()}

_COMMON = struct.Struct("<BBBBQIII")  # kind, flags, backend, pad, ts, pid, tid, cpu
_OP_FIXED = struct.Struct("<QIBBH")  # op_addr, op_type, expert_count, pad, pad

HEADER_RECORD_SIZE = 8
DROP_RECORD_SIZE = 8

RECORD_SIZES: dict[int, int] = {
    KIND_STREAM_HEADER: HEADER_RECORD_SIZE,
    int(ProbeKind.TOKEN_ENTER): 28,
    int(ProbeKind.TOKEN_EXIT): 28,
    int(ProbeKind.GRAPH_ENTER): 40,
    int(ProbeKind.GRAPH_EXIT): 40,
    int(ProbeKind.OP_ENTER): 312,
    int(ProbeKind.OP_EXIT): 312,
    int(ProbeKind.SCHED_SWITCH): 40,
    int(ProbeKind.SCHED_WAKEUP): 40,
    KIND_DROP_MARKER: DROP_RECORD_SIZE,
}


def encode_event(event: RawEvent, header: SessionHeader) -> bytes:
    """Encode one event in the fixed wire layout.

    The session header decides which flag bits get set: a None field whose
    feature flag is on is recorded as skipped so a later decode restores
    None instead of a zero-filled value.
    """
    flags = 0
    backend = 0
    p = event.payload
    if isinstance(p, OpPayload):
        backend = _BACKEND_CODES[p.backend]
        if header.flags.str_parse and (p.dims is None or p.src_addrs is None):
            flags |= FLAG_PAYLOAD_FAULT
        if (
            header.flags.pmc
            and p.backend is Backend.CPU
            and p.pmc is None
        ):
            flags |= FLAG_PMC_SKIPPED
    out = bytearray(RECORD_SIZES[int(event.kind)])
    _COMMON.pack_into(
        out, 0, int(event.kind), flags, backend, 0, event.ts_ns, event.pid, event.tid, event.cpu
    )
    if isinstance(p, TokenPayload):
        struct.pack_into("<I", out, 24, p.batch_size)
    elif isinstance(p, GraphPayload):
        guid = p.backend_guid.encode("ascii")
        if len(guid) != 16:
            raise ValueError(f"backend_guid must be 16 hex digits, got {p.backend_guid!r}")
        out[24:40] = guid
    elif isinstance(p, SchedPayload):
        struct.pack_into(
            "<IIII",
            out,
            24,
            p.prev_tid or 0,
            p.next_tid or 0,
            p.wakee_tid or 0,
            p.prev_state or 0,
        )
    else:
        experts = p.expert_ids or ()
        code = p.op_type.value if isinstance(p.op_type, OpType) else p.op_type.raw
        _OP_FIXED.pack_into(out, 24, p.op_addr, code, len(experts), 0, 0)
        name = p.op_name.encode("utf-8")
        if len(name) > 63:
            name = name[:63]
            flags |= FLAG_NAME_TRUNCATED
            out[1] = flags
        out[40 : 40 + len(name)] = name
        if p.dims is not None:
            struct.pack_into("<4Q", out, 104, *p.dims)
        if p.src_addrs is not None:
            struct.pack_into(f"<{len(p.src_addrs)}Q", out, 136, *p.src_addrs)
        if p.pmc is not None:
            struct.pack_into(f"<{len(p.pmc)}Q", out, 216, *p.pmc)
        if experts:
            struct.pack_into(f"<{len(experts)}I", out, 280, *experts)
    return bytes(out)


def decode_event(data: bytes, header: SessionHeader) -> RawEvent:
    """Decode one record.  The returned event has seq 0; the collector that
    polls the buffer assigns sequence numbers."""
    kind_code, flags, backend_code, _, ts, pid, tid, cpu = _COMMON.unpack_from(data, 0)
    kind = ProbeKind(kind_code)
    expected = RECORD_SIZES[kind_code]
    if len(data) != expected:
        raise StreamError(f"record kind {kind_code} has {len(data)} bytes, expected {expected}", 0)
    payload: object
    if kind in (ProbeKind.TOKEN_ENTER, ProbeKind.TOKEN_EXIT):
        payload = TokenPayload(batch_size=struct.unpack_from("<I", data, 24)[0])
    elif kind in (ProbeKind.GRAPH_ENTER, ProbeKind.GRAPH_EXIT):
        payload = GraphPayload(backend_guid=data[24:40].decode("ascii"))
    elif kind is ProbeKind.SCHED_SWITCH:
        prev_tid, next_tid, _, prev_state = struct.unpack_from("<IIII", data, 24)
        payload = SchedPayload(prev_tid=prev_tid, next_tid=next_tid, prev_state=prev_state)
    elif kind is ProbeKind.SCHED_WAKEUP:
        wakee = struct.unpack_from("<IIII", data, 24)[2]
        payload = SchedPayload(wakee_tid=wakee)
    else:
        op_addr, op_code, expert_count, _, _ = _OP_FIXED.unpack_from(data, 24)
        raw_name = data[40:104]
        name = raw_name.split(b"\x00", 1)[0].decode("utf-8", errors="replace")
        backend = _BACKENDS_BY_CODE[backend_code]
        dims = srcs = None
        if header.flags.str_parse and not flags & FLAG_PAYLOAD_FAULT:
            dims = struct.unpack_from("<4Q", data, 104)
            all_srcs = struct.unpack_from("<10Q", data, 136)
            keep = 0
            while keep < 10 and all_srcs[keep] != 0:
                keep += 1
            srcs = all_srcs[:keep]
        pmc = None
        if (
            header.flags.pmc
            and backend is Backend.CPU
            and not flags & FLAG_PMC_SKIPPED
        ):
            pmc = struct.unpack_from(f"<{len(header.pmc_specs)}Q", data, 216)
        experts = None
        if expert_count:
            experts = struct.unpack_from(f"<{expert_count}I", data, 280)
        payload = OpPayload(
            op_addr=op_addr,
            op_type=op_type_from_code(op_code),
            op_name=name,
            backend=backend,
            dims=dims,
            src_addrs=srcs,
            pmc=pmc,
            expert_ids=experts,
        )
    return RawEvent(kind=kind, ts_ns=ts, pid=pid, tid=tid, cpu=cpu, seq=0, payload=payload)


def encode_stream_header(flags: TraceFlags, n_pmc: int) -> bytes:
    bits = 0
    if flags.str_parse:
        bits |= HDR_FLAG_STR
    if flags.pmc:
        bits |= HDR_FLAG_PMC
    if flags.perf_buffer:
        bits |= HDR_FLAG_PERF_BUFFER
    return struct.pack("<BBBBI", KIND_STREAM_HEADER, WIRE_VERSION, bits, n_pmc, 0)


def encode_drop_marker(count: int) -> bytes:
    return struct.pack("<BBBBI", KIND_DROP_MARKER, 0, 0, 0, count)


def encode_stream(events: list[RawEvent], header: SessionHeader) -> bytes:
    """Serialize events as a self-describing wire stream (header record first)."""
    chunks = [encode_stream_header(header.flags, len(header.pmc_specs))]
    chunks.extend(encode_event(e, header) for e in events)
    return b"".join(chunks)


@dataclass
class DecodedStream:
    version: int
    flags: TraceFlags
    n_pmc: int
    events: list[RawEvent] = field(default_factory=list)
    dropped: int = 0
    truncated_names: list[int] = field(default_factory=list)  # seqs with bit set


def decode_stream(data: bytes) -> DecodedStream:
    """Decode a recorded wire stream into events with consumer-assigned seqs.

    Sequence numbers count every record the probes emitted: a drop marker
    advances the counter by its lost count, so losses stay visible as seq
    gaps downstream.

    Raises:
        StreamError: unknown kind tag, truncated record, or missing header.
    """
    if len(data) < HEADER_RECORD_SIZE or data[0] != KIND_STREAM_HEADER:
        raise StreamError("stream does not start with a header record", 0)
    _, version, bits, n_pmc = struct.unpack_from("<BBBB", data, 0)
    if version != WIRE_VERSION:
        raise StreamError(f"unsupported wire version {version}", 0)
    flags = TraceFlags(
        str_parse=bool(bits & HDR_FLAG_STR),
        pmc=bool(bits & HDR_FLAG_PMC),
        perf_buffer=bool(bits & HDR_FLAG_PERF_BUFFER),
    )
    # Decode with a throwaway header carrying just flag/counter context.
    ctx = SessionHeader(pid=0, nthreads=0, flags=flags)
    ctx.pmc_specs = ctx.pmc_specs[:n_pmc]
    out = DecodedStream(version=version, flags=flags, n_pmc=n_pmc)
    pos = HEADER_RECORD_SIZE
    seq = 0
    while pos < len(data):
        kind_code = data[pos]
        size = RECORD_SIZES.get(kind_code)
        if size is None:
            raise StreamError(f"unknown record kind {kind_code}", pos)
        body = data[pos : pos + size]
        if len(body) < size:
            raise StreamError(f"record kind {kind_code} truncated to {len(body)} bytes", pos)
        if kind_code == KIND_STREAM_HEADER:
            raise StreamError("header record in the middle of a stream", pos)
        if kind_code == KIND_DROP_MARKER:
            count = struct.unpack_from("<I", body, 4)[0]
            out.dropped += count
            seq += count
        else:
            event = decode_event(body, ctx)
            event.seq = seq
            if body[1] & FLAG_NAME_TRUNCATED:
                out.truncated_names.append(seq)
            out.events.append(event)
            seq += 1
        pos += size
    return out
