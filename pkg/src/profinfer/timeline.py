"""Timeline views: token/graph/operator tracks plus scheduler state tracks.

The document model is renderer-neutral; :func:`emit_chrome_trace` writes the
Chrome Trace Event Format (viewable in Perfetto), using complete ("X") events
with microsecond ts/dur converted from the nanosecond source.  Event names get
the processor id appended ("MUL_MAT ffn_out-0 @cpu6") so CPU migration and
contention are visible at a glance.

Scheduler state rules: a thread switched in is Running; switched out with
prev_state 0 it is Idle, with prev_state 1 (or after a wakeup) it is
Runnable.  ``sched_semantics="kernel"`` flips to the kernel's convention,
where prev_state 0 means still runnable (preempted) and nonzero means
sleeping.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .errors import ConfigError
from .ingest import IngestResult, ingest
from .events import ProbeKind, RawEvent, ThreadState, TraceSession

logger = logging.getLogger(__name__)

# Synthetic track ids for per-thread state rows in the trace JSON.
STATE_TRACK_OFFSET = 1 << 20

SCHED_SEMANTICS = ("classic", "kernel")


@dataclass
class DurationEvent:
    name: str
    category: str  # "token" | "graph" | "op"
    start_ns: int
    dur_ns: int
    args: dict


@dataclass
class StateInterval:
    state: ThreadState
    start_ns: int
    end_ns: int
    cpu: int


@dataclass
class TimelineDoc:
    pid: int
    tracks: dict[int, list[DurationEvent]] = field(default_factory=dict)
    states: dict[int, list[StateInterval]] = field(default_factory=dict)


def _switch_out_state(prev_state: int, semantics: str) -> ThreadState:
    if semantics == "classic":
        return ThreadState.RUNNABLE if prev_state == 1 else ThreadState.IDLE
    return ThreadState.RUNNABLE if prev_state == 0 else ThreadState.IDLE


def derive_thread_states(
    events: list[RawEvent],
    tids: tuple[int, ...] | None = None,
    *,
    semantics: str = "classic",
    horizon_ns: int | None = None,
) -> dict[int, list[StateInterval]]:
    """Fold scheduler events into per-thread state intervals.

    Each transition opens an interval that the next transition closes; the
    final state is kept as an interval ending at ``horizon_ns`` (zero-length
    when no horizon extends past the last event).  Intervals tile the span
    between a thread's first and last transition with no gaps or overlaps.

    Args:
        events: any events; only sched kinds are read.
        tids: threads to track; None tracks every tid the sched events touch.
        semantics: prev_state interpretation.  "classic" reads 1 as
            preempted-but-runnable (this profiler's longstanding output
            convention); "kernel" follows the tracepoint's raw meaning,
            where 0 (TASK_RUNNING) marks the preempted case.
        horizon_ns: extend the final interval up to this timestamp.
    """
    if semantics not in SCHED_SEMANTICS:
        raise ConfigError(f"sched semantics must be one of {SCHED_SEMANTICS}, got {semantics!r}")
    sched = sorted(
        (e for e in events if e.kind in (ProbeKind.SCHED_SWITCH, ProbeKind.SCHED_WAKEUP)),
        key=lambda e: (e.ts_ns, e.seq),
    )
    transitions: dict[int, list[tuple[int, ThreadState, int]]] = {}

    def track(tid: int) -> bool:
        return tids is None or tid in tids

    def push(tid: int, ts: int, state: ThreadState, cpu: int) -> None:
        cur = transitions.setdefault(tid, [])
        if cur and cur[-1][1] is state:
            return
        cur.append((ts, state, cpu))

    for e in sched:
        p = e.payload
        if e.kind is ProbeKind.SCHED_SWITCH:
            if p.next_tid is not None and track(p.next_tid):
                push(p.next_tid, e.ts_ns, ThreadState.RUNNING, e.cpu)
            if p.prev_tid is not None and track(p.prev_tid):
                push(p.prev_tid, e.ts_ns, _switch_out_state(p.prev_state or 0, semantics), e.cpu)
        else:
            if p.wakee_tid is not None and track(p.wakee_tid):
                cur = transitions.get(p.wakee_tid)
                if cur and cur[-1][1] is ThreadState.RUNNING:
                    logger.warning(
                        "wakeup for tid %d at %d ns while it is running; ignored",
                        p.wakee_tid,
                        e.ts_ns,
                    )
                    continue
                push(p.wakee_tid, e.ts_ns, ThreadState.RUNNABLE, e.cpu)

    out: dict[int, list[StateInterval]] = {}
    for tid, trans in transitions.items():
        intervals = []
        for (ts, state, cpu), nxt in zip(trans, trans[1:]):
            intervals.append(StateInterval(state, ts, nxt[0], cpu))
        last_ts, last_state, last_cpu = trans[-1]
        end = max(horizon_ns, last_ts) if horizon_ns is not None else last_ts
        intervals.append(StateInterval(last_state, last_ts, end, last_cpu))
        out[tid] = intervals
    return out


def _op_event_name(span) -> str:
    p = span.payload
    type_name = p.op_type.name
    parts = [type_name]
    if p.op_name:
        parts.append(p.op_name)
    return f"{' '.join(parts)} @cpu{span.enter.cpu}"


def build_timeline(
    session: TraceSession,
    result: IngestResult | None = None,
    *,
    sched_semantics: str = "classic",
) -> TimelineDoc:
    """Assemble the timeline document for a session.

    Tokens, graph computations and operators become duration events in their
    own categories on the emitting thread's track; scheduler activity of the
    inference threads becomes state tracks.
    """
    if result is None:
        result = ingest(session)
    doc = TimelineDoc(pid=session.header.pid)

    def track(tid: int) -> list[DurationEvent]:
        return doc.tracks.setdefault(tid, [])

    for it in result.iterations:
        track(it.enter.tid).append(
            DurationEvent(
                name=f"{it.phase.value} @cpu{it.enter.cpu}",
                category="token",
                start_ns=it.enter.ts_ns,
                dur_ns=it.duration_ns,
                args={
                    "cpu": it.enter.cpu,
                    "iteration": it.index,
                    "batch_size": it.batch_size,
                },
            )
        )

    names = session.header.backend_names
    for tid, events in sorted(result.by_thread.items()):
        pending: RawEvent | None = None
        for e in events:
            if e.kind is ProbeKind.GRAPH_ENTER:
                if pending is not None:
                    logger.warning("graph enter at seq %d while one is open; dropped", e.seq)
                pending = e
            elif e.kind is ProbeKind.GRAPH_EXIT:
                if pending is None or pending.payload.backend_guid != e.payload.backend_guid:
                    logger.warning("unmatched graph exit at seq %d; dropped", e.seq)
                    continue
                guid = e.payload.backend_guid
                args = {"cpu": pending.cpu, "guid": guid}
                iteration = result.iteration_of.get(pending.seq)
                if iteration is not None:
                    args["iteration"] = iteration
                track(tid).append(
                    DurationEvent(
                        name=f"{names.get(guid, guid)} @cpu{pending.cpu}",
                        category="graph",
                        start_ns=pending.ts_ns,
                        dur_ns=e.ts_ns - pending.ts_ns,
                        args=args,
                    )
                )
                pending = None

    for span in result.spans:
        args = {"cpu": span.enter.cpu, "addr": f"0x{span.op_addr:x}"}
        if span.iteration is not None:
            args["iteration"] = span.iteration
        track(span.tid).append(
            DurationEvent(
                name=_op_event_name(span),
                category="op",
                start_ns=span.enter.ts_ns,
                dur_ns=span.elapsed_ns,
                args=args,
            )
        )

    for events in doc.tracks.values():
        events.sort(key=lambda ev: (ev.start_ns, -ev.dur_ns, ev.name))
    doc.states = derive_thread_states(
        session.events, session.header.inference_tids or None, semantics=sched_semantics
    )
    return doc


# ---------------------------------------------------------------------------
# Chrome Trace Event Format
# ---------------------------------------------------------------------------


def emit_chrome_trace(doc: TimelineDoc) -> bytes:
    """Serialize to Chrome Trace Event Format JSON (Perfetto-compatible).

    ts/dur are microseconds; the nanosecond fraction is kept as a decimal
    so a 1500 ns span round-trips as dur=1.5.
    """
    out: list[dict] = []
    for tid in sorted(doc.tracks):
        out.append(
            {
                "ph": "M",
                "pid": doc.pid,
                "tid": tid,
                "name": "thread_name",
                "args": {"name": f"tid {tid}"},
            }
        )
        for ev in doc.tracks[tid]:
            out.append(
                {
                    "name": ev.name,
                    "cat": ev.category,
                    "ph": "X",
                    "ts": ev.start_ns / 1000,
                    "dur": ev.dur_ns / 1000,
                    "pid": doc.pid,
                    "tid": tid,
                    "args": ev.args,
                }
            )
    for tid in sorted(doc.states):
        out.append(
            {
                "ph": "M",
                "pid": doc.pid,
                "tid": tid + STATE_TRACK_OFFSET,
                "name": "thread_name",
                "args": {"name": f"tid {tid} (state)"},
            }
        )
        for iv in doc.states[tid]:
            out.append(
                {
                    "name": f"{iv.state.value} @cpu{iv.cpu}",
                    "cat": "thread_state",
                    "ph": "X",
                    "ts": iv.start_ns / 1000,
                    "dur": (iv.end_ns - iv.start_ns) / 1000,
                    "pid": doc.pid,
                    "tid": tid + STATE_TRACK_OFFSET,
                    "args": {"state": iv.state.value, "cpu": iv.cpu},
                }
            )
    return json.dumps({"traceEvents": out}, indent=1).encode()


def parse_chrome_trace(data: bytes | str) -> TimelineDoc:
    """Rebuild a timeline document from emitted trace JSON.

    Inverse of :func:`emit_chrome_trace` for documents it produced.
    """
    if isinstance(data, bytes):
        data = data.decode()
    raw = json.loads(data)
    doc = TimelineDoc(pid=0)
    for ev in raw["traceEvents"]:
        if ev.get("ph") != "X":
            continue
        doc.pid = ev["pid"]
        start = round(ev["ts"] * 1000)
        dur = round(ev["dur"] * 1000)
        tid = ev["tid"]
        if tid >= STATE_TRACK_OFFSET:
            doc.states.setdefault(tid - STATE_TRACK_OFFSET, []).append(
                StateInterval(
                    state=ThreadState(ev["args"]["state"]),
                    start_ns=start,
                    end_ns=start + dur,
                    cpu=ev["args"]["cpu"],
                )
            )
        else:
            doc.tracks.setdefault(tid, []).append(
                DurationEvent(
                    name=ev["name"],
                    category=ev["cat"],
                    start_ns=start,
                    dur_ns=dur,
                    args=ev["args"],
                )
            )
    return doc
