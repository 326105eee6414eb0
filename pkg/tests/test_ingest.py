"""Span pairing, iteration assignment, and loss tolerance."""

from __future__ import annotations

import pytest

from profinfer.errors import StructuralError, UnbalancedProbeError
from profinfer.events import (
    OpPayload,
    OpType,
    ProbeKind,
    RawEvent,
    SessionHeader,
    TokenPayload,
    TraceSession,
)
from profinfer.ingest import Phase, assign_iterations, group_and_sort, ingest, pair_spans
from profinfer.synth import ModelSpec, RunSpec, generate_session


def _op(kind: ProbeKind, ts: int, tid: int, seq: int, addr: int = 0x100) -> RawEvent:
    return RawEvent(
        kind=kind,
        ts_ns=ts,
        pid=1,
        tid=tid,
        cpu=0,
        seq=seq,
        payload=OpPayload(op_addr=addr, op_type=OpType.ADD, op_name="a",
                          dims=(1, 1, 1, 1), src_addrs=()),
    )


def _tok(kind: ProbeKind, ts: int, seq: int, batch: int = 1) -> RawEvent:
    return RawEvent(kind=kind, ts_ns=ts, pid=1, tid=5, cpu=0, seq=seq,
                    payload=TokenPayload(batch))


def _session(events: list[RawEvent]) -> TraceSession:
    return TraceSession(header=SessionHeader(pid=1, nthreads=2), events=events)


def test_group_and_sort_partitions_everything():
    events = [
        _op(ProbeKind.OP_ENTER, 30, 7, 3),
        _op(ProbeKind.OP_ENTER, 10, 5, 0),
        _op(ProbeKind.OP_EXIT, 20, 5, 2),
        _op(ProbeKind.OP_EXIT, 10, 5, 1),  # same ts as seq 0: seq breaks the tie
    ]
    grouped = group_and_sort(_session(events))
    assert set(grouped) == {5, 7}
    assert sum(len(v) for v in grouped.values()) == len(events)
    assert [e.seq for e in grouped[5]] == [0, 1, 2]


def test_assign_iterations_phases():
    events = [
        _tok(ProbeKind.TOKEN_ENTER, 0, 0, batch=4),
        _tok(ProbeKind.TOKEN_EXIT, 10, 1, batch=4),
        _tok(ProbeKind.TOKEN_ENTER, 20, 2, batch=1),
        _tok(ProbeKind.TOKEN_EXIT, 30, 3, batch=1),
        _tok(ProbeKind.TOKEN_ENTER, 40, 4, batch=2),  # chunked prompt continues
        _tok(ProbeKind.TOKEN_EXIT, 50, 5, batch=2),
    ]
    iterations = assign_iterations(_session(events))
    assert [it.phase for it in iterations] == [Phase.PREFILL, Phase.DECODE, Phase.PREFILL]
    assert [it.index for it in iterations] == [0, 1, 2]
    assert iterations[0].duration_ns == 10
    assert iterations[0].batch_size == 4


def test_assign_iterations_unbalanced():
    with pytest.raises(UnbalancedProbeError):
        assign_iterations(_session([
            _tok(ProbeKind.TOKEN_ENTER, 0, 0),
            _tok(ProbeKind.TOKEN_ENTER, 5, 1),
        ]))
    with pytest.raises(UnbalancedProbeError):
        assign_iterations(_session([_tok(ProbeKind.TOKEN_EXIT, 0, 0)]))


def test_pair_spans_clean():
    events = [
        _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
        _op(ProbeKind.OP_EXIT, 20, 5, 1, addr=0xA),
        _op(ProbeKind.OP_ENTER, 30, 5, 2, addr=0xB),
        _op(ProbeKind.OP_EXIT, 45, 5, 3, addr=0xB),
    ]
    spans, orphans = pair_spans(events, {}, [])
    assert orphans == []
    assert [(s.op_addr, s.elapsed_ns) for s in spans] == [(0xA, 10), (0xB, 15)]


def test_pair_spans_structural_errors_without_gap():
    # double enter, lossless stream
    with pytest.raises(StructuralError):
        pair_spans(
            [_op(ProbeKind.OP_ENTER, 10, 5, 0), _op(ProbeKind.OP_ENTER, 20, 5, 1)], {}, []
        )
    # exit with nothing open
    with pytest.raises(StructuralError):
        pair_spans([_op(ProbeKind.OP_EXIT, 10, 5, 0)], {}, [])
    # enter/exit address mismatch
    with pytest.raises(StructuralError):
        pair_spans(
            [
                _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
                _op(ProbeKind.OP_EXIT, 20, 5, 1, addr=0xB),
            ],
            {},
            [],
        )


def test_pair_spans_demotes_to_orphans_when_gap_covers():
    # exit at seq 2 was dropped -> enter 0 orphaned, later pair intact
    events = [
        _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
        _op(ProbeKind.OP_ENTER, 30, 5, 3, addr=0xB),
        _op(ProbeKind.OP_EXIT, 40, 5, 4, addr=0xB),
    ]
    spans, orphans = pair_spans(events, {}, [1, 2])
    assert [s.op_addr for s in spans] == [0xB]
    assert [o.seq for o in orphans] == [0]

    # enter at seq 2 was dropped -> its exit orphaned
    events = [
        _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
        _op(ProbeKind.OP_EXIT, 20, 5, 1, addr=0xA),
        _op(ProbeKind.OP_EXIT, 40, 5, 3, addr=0xB),
    ]
    spans, orphans = pair_spans(events, {}, [2])
    assert [s.op_addr for s in spans] == [0xA]
    assert [o.seq for o in orphans] == [3]


def test_pair_spans_gap_elsewhere_is_still_structural():
    # the stream lost seq 10, far after the mismatch: not an excuse
    events = [
        _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
        _op(ProbeKind.OP_ENTER, 20, 5, 1, addr=0xB),
    ]
    with pytest.raises(StructuralError):
        pair_spans(events, {}, [10])


def test_pair_spans_trailing_enter_is_orphaned():
    spans, orphans = pair_spans([_op(ProbeKind.OP_ENTER, 10, 5, 0)], {}, [])
    assert spans == []
    assert len(orphans) == 1


def test_pair_spans_iteration_mismatch():
    events = [
        _op(ProbeKind.OP_ENTER, 10, 5, 0, addr=0xA),
        _op(ProbeKind.OP_EXIT, 20, 5, 1, addr=0xA),
    ]
    with pytest.raises(StructuralError, match="crosses iterations"):
        pair_spans(events, {0: 0, 1: 1}, [])
    spans, orphans = pair_spans(events, {0: 0, 1: 0}, [])
    assert len(spans) == 1 and spans[0].iteration == 0


def test_ingest_maps_ops_to_iterations():
    events = [
        _tok(ProbeKind.TOKEN_ENTER, 0, 0, batch=2),
        _op(ProbeKind.OP_ENTER, 5, 5, 1, addr=0xA),
        _op(ProbeKind.OP_EXIT, 9, 5, 2, addr=0xA),
        _tok(ProbeKind.TOKEN_EXIT, 10, 3, batch=2),
        _tok(ProbeKind.TOKEN_ENTER, 20, 4),
        _op(ProbeKind.OP_ENTER, 21, 5, 5, addr=0xB),
        _op(ProbeKind.OP_EXIT, 29, 5, 6, addr=0xB),
        _tok(ProbeKind.TOKEN_EXIT, 30, 7),
        # a straggler op outside any token window
        _op(ProbeKind.OP_ENTER, 50, 5, 8, addr=0xC),
        _op(ProbeKind.OP_EXIT, 55, 5, 9, addr=0xC),
    ]
    result = ingest(_session(events))
    assert len(result.iterations) == 2
    assert [s.iteration for s in result.spans] == [0, 1, None]
    assert result.spans_for_iteration(1)[0].op_addr == 0xB
    assert result.iteration_of[8] is None
    assert result.gap_seqs == []


def test_ingest_synthetic_lossless_conservation():
    session, _ = generate_session(ModelSpec(), RunSpec(gen_len=3, nthreads=3), seed=9)
    result = ingest(session)
    non_op = sum(
        1 for e in session.events if e.kind not in (ProbeKind.OP_ENTER, ProbeKind.OP_EXIT)
    )
    assert 2 * len(result.spans) + len(result.orphans) + non_op == len(session.events)
    assert result.orphans == []
    assert result.warnings == []
    # every span is intra-thread and well-formed
    for span in result.spans:
        assert span.enter.tid == span.exit.tid == span.tid
        assert span.enter.ts_ns <= span.exit.ts_ns
        assert span.enter.payload.op_addr == span.exit.payload.op_addr


def test_ingest_lossy_stream_accounts_for_every_event():
    session, truth = generate_session(
        ModelSpec(), RunSpec(gen_len=6, nthreads=2, drop_rate=0.05), seed=11
    )
    assert truth.dropped_seqs, "seed must actually drop something"
    result = ingest(session)
    assert result.gap_seqs == sorted(truth.dropped_seqs)
    non_op = sum(
        1 for e in session.events if e.kind not in (ProbeKind.OP_ENTER, ProbeKind.OP_EXIT)
    )
    assert 2 * len(result.spans) + len(result.orphans) + non_op == len(session.events)
    assert result.warnings  # orphaned events get called out


def test_pmc_delta():
    session, _ = generate_session(ModelSpec(layers=1), RunSpec(gen_len=1), seed=0)
    result = ingest(session)
    for span in result.spans:
        delta = span.pmc_delta()
        assert delta is not None
        assert all(d >= 0 for d in delta)
        assert len(delta) == 5
