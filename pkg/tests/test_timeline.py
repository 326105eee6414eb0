"""Timeline assembly, scheduler-state folding and Chrome trace IO."""

from __future__ import annotations

import json
import logging

import pytest

from profinfer.errors import ConfigError
from profinfer.events import (
    ProbeKind,
    RawEvent,
    SchedPayload,
    ThreadState,
)
from profinfer.ingest import ingest
from profinfer.synth import InterferenceSpec, ModelSpec, RunSpec, generate_session
from profinfer.timeline import (
    STATE_TRACK_OFFSET,
    StateInterval,
    build_timeline,
    derive_thread_states,
    emit_chrome_trace,
    parse_chrome_trace,
)

TID = 77


def _switch(ts, prev, nxt, prev_state, seq=0):
    return RawEvent(
        kind=ProbeKind.SCHED_SWITCH, ts_ns=ts, pid=1, tid=nxt, cpu=2, seq=seq,
        payload=SchedPayload(prev_tid=prev, next_tid=nxt, prev_state=prev_state),
    )


def _wakeup(ts, wakee, seq=0):
    return RawEvent(
        kind=ProbeKind.SCHED_WAKEUP, ts_ns=ts, pid=1, tid=wakee, cpu=2, seq=seq,
        payload=SchedPayload(wakee_tid=wakee),
    )


def test_state_sequence_wakeup_switch_in_switch_out():
    # wakeup -> runnable, switch-in -> running, interruptible switch-out ->
    # runnable again (it still wants the cpu)
    events = [
        _wakeup(1000, TID, seq=0),
        _switch(1400, 5, TID, 0, seq=1),
        _switch(2000, TID, 5, 1, seq=2),
    ]
    states = derive_thread_states(events, (TID,))
    assert states[TID] == [
        StateInterval(ThreadState.RUNNABLE, 1000, 1400, 2),
        StateInterval(ThreadState.RUNNING, 1400, 2000, 2),
        StateInterval(ThreadState.RUNNABLE, 2000, 2000, 2),
    ]


def test_paper_vs_kernel_switch_out_semantics():
    # classic: prev_state == 1 means preempted-but-runnable; kernel: 0 does
    events = [_switch(100, 5, TID, 0, seq=0), _switch(200, TID, 5, 1, seq=1)]
    classic = derive_thread_states(events, (TID,), semantics="classic")
    kernel = derive_thread_states(events, (TID,), semantics="kernel")
    assert classic[TID][-1].state is ThreadState.RUNNABLE
    assert kernel[TID][-1].state is ThreadState.IDLE

    events = [_switch(100, 5, TID, 0, seq=0), _switch(200, TID, 5, 0, seq=1)]
    classic = derive_thread_states(events, (TID,), semantics="classic")
    kernel = derive_thread_states(events, (TID,), semantics="kernel")
    assert classic[TID][-1].state is ThreadState.IDLE
    assert kernel[TID][-1].state is ThreadState.RUNNABLE

    with pytest.raises(ConfigError):
        derive_thread_states(events, (TID,), semantics="strict")


def test_wakeup_of_running_thread_is_ignored_with_warning(caplog):
    events = [
        _switch(100, 5, TID, 0, seq=0),
        _wakeup(150, TID, seq=1),
        _switch(300, TID, 5, 1, seq=2),
    ]
    with caplog.at_level(logging.WARNING, logger="profinfer.timeline"):
        states = derive_thread_states(events, (TID,))
    assert [i.state for i in states[TID]] == [ThreadState.RUNNING, ThreadState.RUNNABLE]
    assert any("wakeup" in rec.message for rec in caplog.records)


def test_consecutive_same_states_merge():
    events = [
        _wakeup(100, TID, seq=0),
        _wakeup(200, TID, seq=1),  # still runnable: no new interval
        _switch(300, 5, TID, 0, seq=2),
    ]
    states = derive_thread_states(events, (TID,))
    assert states[TID] == [
        StateInterval(ThreadState.RUNNABLE, 100, 300, 2),
        StateInterval(ThreadState.RUNNING, 300, 300, 2),
    ]


def test_horizon_extends_final_interval():
    events = [_switch(100, 5, TID, 0, seq=0)]
    states = derive_thread_states(events, (TID,), horizon_ns=5000)
    assert states[TID] == [StateInterval(ThreadState.RUNNING, 100, 5000, 2)]


def test_states_tile_without_gaps():
    session, _ = generate_session(
        ModelSpec(),
        RunSpec(interference=InterferenceSpec(periods=((1000, 2500), (9000, 9800)))),
        seed=4,
    )
    states = derive_thread_states(session.events, session.header.inference_tids)
    for tid, intervals in states.items():
        assert intervals
        for a, b in zip(intervals, intervals[1:]):
            assert a.end_ns == b.start_ns
            assert a.state is not b.state
        total = sum(i.end_ns - i.start_ns for i in intervals)
        assert total == intervals[-1].end_ns - intervals[0].start_ns


def _session():
    session, _ = generate_session(
        ModelSpec(layers=1),
        RunSpec(
            prompt_len=2,
            gen_len=2,
            nthreads=2,
            interference=InterferenceSpec(periods=((1000, 2000),)),
        ),
        seed=9,
    )
    return session


def test_build_timeline_tracks():
    session = _session()
    result = ingest(session)
    doc = build_timeline(session, result)
    assert doc.pid == session.header.pid
    assert set(doc.tracks) == set(session.header.inference_tids)
    main = min(doc.tracks)

    tokens = [e for e in doc.tracks[main] if e.category == "token"]
    assert [e.name.split(" @")[0] for e in tokens] == ["prefill", "decode", "decode"]
    assert tokens[0].args["batch_size"] == 2
    assert tokens[1].args["iteration"] == 1

    graphs = [e for e in doc.tracks[main] if e.category == "graph"]
    assert len(graphs) == 3
    assert all(e.name.startswith("CPU @cpu") for e in graphs)

    ops = [e for e in doc.tracks[main] if e.category == "op"]
    assert any(e.name.startswith("MUL_MAT lm_head @cpu") for e in ops)
    addr = next(e.args["addr"] for e in ops)
    assert addr.startswith("0x")

    # per-track, per-category events never overlap
    for tid, events in doc.tracks.items():
        by_cat: dict[str, list] = {}
        for e in events:
            by_cat.setdefault(e.category, []).append(e)
        for cat_events in by_cat.values():
            cat_events.sort(key=lambda e: e.start_ns)
            for a, b in zip(cat_events, cat_events[1:]):
                assert a.start_ns + a.dur_ns <= b.start_ns

    assert set(doc.states) == set(session.header.inference_tids)


def test_chrome_trace_units_and_metadata():
    # 1500 ns must surface as 1.5 us, not 1 or 2
    doc = build_timeline(_session())
    data = emit_chrome_trace(doc)
    trace = json.loads(data)
    events = trace["traceEvents"]
    names = [e["args"]["name"] for e in events if e["ph"] == "M"]
    assert any(n.startswith("tid ") for n in names)
    assert any("(state)" in n for n in names)

    xs = [e for e in events if e["ph"] == "X"]
    assert xs
    for e in xs:
        assert e["ts"] * 1000 == round(e["ts"] * 1000)  # exact ns
        assert e["dur"] >= 0

    state_rows = [e for e in xs if e["tid"] >= STATE_TRACK_OFFSET]
    assert state_rows
    for e in state_rows:
        assert e["cat"] == "thread_state"
        assert e["name"].split(" @cpu")[0] in ("running", "runnable", "idle")
        assert e["tid"] - STATE_TRACK_OFFSET in doc.states


def test_chrome_trace_microsecond_fraction():
    doc = build_timeline(_session())
    ev = next(iter(doc.tracks.values()))[0]
    ev.start_ns = 1500
    ev.dur_ns = 2500
    trace = json.loads(emit_chrome_trace(doc))
    match = [
        e
        for e in trace["traceEvents"]
        if e["ph"] == "X" and e["ts"] == 1.5 and e["dur"] == 2.5
    ]
    assert match


def test_chrome_trace_round_trip():
    doc = build_timeline(_session())
    parsed = parse_chrome_trace(emit_chrome_trace(doc))
    assert parsed.pid == doc.pid
    assert parsed.tracks == doc.tracks
    assert parsed.states == doc.states
