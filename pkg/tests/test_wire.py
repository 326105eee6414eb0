"""Wire record layout and stream framing.

The layout tests build expected byte images by hand with struct.pack_into,
independent of the encoder, so an accidental layout change fails loudly.
The offsets mirror what the kernel-side handlers and any cross-language
decoder hardcode.
"""

from __future__ import annotations

import struct

import pytest

from profinfer import wire
from profinfer.errors import StreamError
from profinfer.events import (
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
)
from profinfer.synth import ModelSpec, RunSpec, generate_session

# Independently derived record sizes:
#   common header: 1+1+1+1 + 8 + 4+4+4                         = 24
#   op: 24 + (8+4+1+3) + 64 + 4*8 + 10*8 + 8*8 + 8*4           = 312
#   graph: 24 + 16                                              = 40
#   token: 24 + 4                                               = 28
#   sched: 24 + 4*4                                             = 40
OP_SIZE = 24 + (8 + 4 + 1 + 3) + 64 + 4 * 8 + 10 * 8 + 8 * 8 + 8 * 4
EXPECTED_SIZES = {
    0: 8,  # stream header
    1: 28,
    2: 28,
    3: 40,
    4: 40,
    5: OP_SIZE,
    6: OP_SIZE,
    7: 40,
    8: 40,
    9: 8,  # drop marker
}


def _header(**kw) -> SessionHeader:
    return SessionHeader(pid=10, nthreads=2, **kw)


def test_record_sizes_frozen():
    assert OP_SIZE == 312
    assert wire.RECORD_SIZES == EXPECTED_SIZES


def test_op_record_byte_image():
    event = RawEvent(
        kind=ProbeKind.OP_ENTER,
        ts_ns=0x1122334455667788,
        pid=0xAABB,
        tid=0xCCDD,
        cpu=6,
        seq=0,
        payload=OpPayload(
            op_addr=0x7F42000000,
            op_type=OpType.MUL_MAT_ID,
            op_name="ffn_moe_up-0",
            backend=Backend.CPU,
            dims=(256, 1, 2, 1),
            src_addrs=(0x55AA1000, 0x7F42000100, 0x7F42000200),
            pmc=(10, 20, 30, 40, 50),
            expert_ids=(5, 9),
        ),
    )
    expected = bytearray(312)
    struct.pack_into("<BBBB", expected, 0, 5, 0, 0, 0)  # kind, flags, backend=CPU, pad
    struct.pack_into("<QIII", expected, 4, 0x1122334455667788, 0xAABB, 0xCCDD, 6)
    struct.pack_into("<QIB", expected, 24, 0x7F42000000, 4, 2)  # addr, MUL_MAT_ID, n experts
    expected[40 : 40 + 12] = b"ffn_moe_up-0"
    struct.pack_into("<4Q", expected, 104, 256, 1, 2, 1)
    struct.pack_into("<3Q", expected, 136, 0x55AA1000, 0x7F42000100, 0x7F42000200)
    struct.pack_into("<5Q", expected, 216, 10, 20, 30, 40, 50)
    struct.pack_into("<2I", expected, 280, 5, 9)

    assert wire.encode_event(event, _header()) == bytes(expected)


def test_token_graph_sched_byte_images():
    header = _header()
    token = RawEvent(ProbeKind.TOKEN_ENTER, 100, 1, 2, 3, 0, TokenPayload(7))
    expected = bytearray(28)
    struct.pack_into("<BBBBQIII", expected, 0, 1, 0, 0, 0, 100, 1, 2, 3)
    struct.pack_into("<I", expected, 24, 7)
    assert wire.encode_event(token, header) == bytes(expected)

    graph = RawEvent(ProbeKind.GRAPH_EXIT, 200, 1, 2, 3, 0, GraphPayload("c0ffee0000000001"))
    expected = bytearray(40)
    struct.pack_into("<BBBBQIII", expected, 0, 4, 0, 0, 0, 200, 1, 2, 3)
    expected[24:40] = b"c0ffee0000000001"
    assert wire.encode_event(graph, header) == bytes(expected)

    sched = RawEvent(
        ProbeKind.SCHED_SWITCH, 300, 1, 2, 3, 0, SchedPayload(prev_tid=9, next_tid=8, prev_state=1)
    )
    expected = bytearray(40)
    struct.pack_into("<BBBBQIII", expected, 0, 7, 0, 0, 0, 300, 1, 2, 3)
    struct.pack_into("<IIII", expected, 24, 9, 8, 0, 1)
    assert wire.encode_event(sched, header) == bytes(expected)


def test_round_trip_every_kind():
    header = _header()
    events = [
        RawEvent(ProbeKind.TOKEN_ENTER, 1, 10, 20, 0, 0, TokenPayload(4)),
        RawEvent(ProbeKind.TOKEN_EXIT, 2, 10, 20, 0, 0, TokenPayload(4)),
        RawEvent(ProbeKind.GRAPH_ENTER, 3, 10, 20, 0, 0, GraphPayload("0123456789abcdef")),
        RawEvent(ProbeKind.GRAPH_EXIT, 4, 10, 20, 0, 0, GraphPayload("0123456789abcdef")),
        RawEvent(
            ProbeKind.OP_ENTER,
            5,
            10,
            20,
            1,
            0,
            OpPayload(
                op_addr=0xABC,
                op_type=OpType.SOFT_MAX,
                op_name="kq_soft_max-1",
                dims=(8, 1, 4, 1),
                src_addrs=(0xDEF,),
                pmc=(1, 2, 3, 4, 5),
            ),
        ),
        RawEvent(
            ProbeKind.SCHED_SWITCH,
            6,
            10,
            20,
            2,
            0,
            SchedPayload(prev_tid=20, next_tid=99, prev_state=0),
        ),
        RawEvent(ProbeKind.SCHED_WAKEUP, 7, 10, 20, 2, 0, SchedPayload(wakee_tid=20)),
    ]
    for event in events:
        back = wire.decode_event(wire.encode_event(event, header), header)
        assert back == event, event.kind


def test_backend_codes_round_trip():
    header = _header()
    for backend in Backend:
        event = RawEvent(
            ProbeKind.OP_ENTER,
            1,
            1,
            1,
            0,
            0,
            OpPayload(op_addr=1, op_type=OpType.ADD, op_name="x", backend=backend,
                      dims=(1, 1, 1, 1), src_addrs=()),
        )
        back = wire.decode_event(wire.encode_event(event, header), header)
        assert back.payload.backend is backend


def test_disabled_str_region_is_zero_filled_and_absent():
    header = _header(flags=TraceFlags(str_parse=False))
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.MUL_MAT, op_name="", pmc=(1, 2, 3, 4, 5)),
    )
    blob = wire.encode_event(event, header)
    assert blob[40:104] == bytes(64)  # name region
    assert blob[104:216] == bytes(112)  # dims + srcs regions
    back = wire.decode_event(blob, header)
    assert back.payload.dims is None
    assert back.payload.src_addrs is None
    assert back.payload.op_name == ""
    assert back.payload.pmc == (1, 2, 3, 4, 5)


def test_disabled_pmc_region_is_zero_filled_and_absent():
    header = _header(flags=TraceFlags(pmc=False))
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.MUL_MAT, op_name="a",
                  dims=(2, 2, 1, 1), src_addrs=(0x99,)),
    )
    blob = wire.encode_event(event, header)
    assert blob[216:280] == bytes(64)  # counter region
    back = wire.decode_event(blob, header)
    assert back.payload.pmc is None
    assert back.payload.dims == (2, 2, 1, 1)


def test_payload_fault_flag_round_trips_none():
    # str parsing on, but this record's tensor struct was unreadable
    header = _header()
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.MUL_MAT, op_name="a", pmc=(1, 2, 3, 4, 5)),
    )
    blob = wire.encode_event(event, header)
    assert blob[1] & wire.FLAG_PAYLOAD_FAULT
    back = wire.decode_event(blob, header)
    assert back.payload.dims is None
    assert back.payload.src_addrs is None


def test_pmc_skip_flag_round_trips_none():
    header = _header()
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.MUL_MAT, op_name="a",
                  dims=(1, 1, 1, 1), src_addrs=()),
    )
    blob = wire.encode_event(event, header)
    assert blob[1] & wire.FLAG_PMC_SKIPPED
    assert wire.decode_event(blob, header).payload.pmc is None


def test_gpu_op_never_decodes_counters():
    header = _header()
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.MUL_MAT, op_name="a",
                  backend=Backend.OPENCL_GPU, dims=(1, 1, 1, 1), src_addrs=()),
    )
    blob = wire.encode_event(event, header)
    assert not blob[1] & wire.FLAG_PMC_SKIPPED  # not a skip: GPU ops have no counters
    assert wire.decode_event(blob, header).payload.pmc is None


def test_name_truncation_sets_flag():
    header = _header()
    long_name = "x" * 70
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.ADD, op_name=long_name,
                  dims=(1, 1, 1, 1), src_addrs=()),
    )
    blob = wire.encode_event(event, header)
    assert blob[1] & wire.FLAG_NAME_TRUNCATED
    back = wire.decode_event(blob, header)
    assert back.payload.op_name == "x" * 63


def test_unknown_op_code_preserved():
    header = _header()
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.ADD, op_name="a",
                  dims=(1, 1, 1, 1), src_addrs=()),
    )
    blob = bytearray(wire.encode_event(event, header))
    struct.pack_into("<I", blob, 32, 77)  # an op code this build has no name for
    back = wire.decode_event(bytes(blob), header)
    assert back.payload.op_type.value == 77
    assert back.payload.op_type.name == "UNKNOWN(77)"


# ---------------------------------------------------------------------------
# stream framing
# ---------------------------------------------------------------------------


def test_stream_header_byte_image():
    blob = wire.encode_stream_header(TraceFlags(str_parse=True, pmc=False, perf_buffer=True), 5)
    assert blob == struct.pack("<BBBBI", 0, 1, 0b101, 5, 0)


def test_stream_round_trip_assigns_seq():
    session, _ = generate_session(ModelSpec(layers=1), RunSpec(gen_len=2), seed=3)
    blob = wire.encode_stream(session.events, session.header)
    out = wire.decode_stream(blob)
    assert out.version == 1
    assert out.flags == session.header.flags
    assert out.n_pmc == 5
    assert [e.seq for e in out.events] == list(range(len(session.events)))
    assert out.events == session.events
    assert out.dropped == 0


def test_drop_marker_advances_seq():
    header = _header()
    events = [
        RawEvent(ProbeKind.TOKEN_ENTER, 1, 1, 2, 0, 0, TokenPayload(1)),
        RawEvent(ProbeKind.TOKEN_EXIT, 9, 1, 2, 0, 0, TokenPayload(1)),
    ]
    blob = (
        wire.encode_stream_header(header.flags, 5)
        + wire.encode_event(events[0], header)
        + wire.encode_drop_marker(3)
        + wire.encode_event(events[1], header)
    )
    out = wire.decode_stream(blob)
    assert out.dropped == 3
    assert [e.seq for e in out.events] == [0, 4]


def test_stream_errors_carry_byte_offsets():
    header = _header()
    token = wire.encode_event(
        RawEvent(ProbeKind.TOKEN_ENTER, 1, 1, 2, 0, 0, TokenPayload(1)), header
    )
    with pytest.raises(StreamError):
        wire.decode_stream(b"")
    with pytest.raises(StreamError, match="does not start with a header"):
        wire.decode_stream(token)

    good = wire.encode_stream_header(header.flags, 5)
    with pytest.raises(StreamError, match="unknown record kind 77"):
        wire.decode_stream(good + bytes([77]) + bytes(27))
    with pytest.raises(StreamError) as err:
        wire.decode_stream(good + token[:10])
    assert err.value.offset == 8

    with pytest.raises(StreamError, match="middle of a stream"):
        wire.decode_stream(good + token + good)

    bad_version = bytearray(good)
    bad_version[1] = 9
    with pytest.raises(StreamError, match="unsupported wire version"):
        wire.decode_stream(bytes(bad_version) + token)


def test_stream_reports_truncated_names():
    header = _header()
    event = RawEvent(
        ProbeKind.OP_ENTER,
        1,
        1,
        1,
        0,
        0,
        OpPayload(op_addr=0x10, op_type=OpType.ADD, op_name="y" * 80,
                  dims=(1, 1, 1, 1), src_addrs=()),
    )
    blob = wire.encode_stream_header(header.flags, 5) + wire.encode_event(event, header)
    assert wire.decode_stream(blob).truncated_names == [0]


def test_full_session_stream_respects_flag_combinations():
    for flags in (
        TraceFlags(),
        TraceFlags(str_parse=False),
        TraceFlags(pmc=False),
        TraceFlags(str_parse=False, pmc=False),
    ):
        session, _ = generate_session(
            ModelSpec(layers=1), RunSpec(gen_len=1, flags=flags), seed=4
        )
        out = wire.decode_stream(wire.encode_stream(session.events, session.header))
        assert out.events == session.events, flags
