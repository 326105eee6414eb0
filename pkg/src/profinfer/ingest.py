"""Turn a flat event stream into per-thread, per-iteration operator spans.

The runtime emits strictly alternating enter/exit pairs per thread, but a
lossy ring buffer can swallow individual records.  Losses are visible as
gaps in the consumer-assigned seq numbers, so pairing failures that line up
with a gap are demoted to orphans instead of structural errors: analysis
continues on the surviving spans and every event stays accounted for
(2 events per span + orphans + non-operator events = total).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum

from .errors import StructuralError, UnbalancedProbeError
from .events import OpPayload, ProbeKind, RawEvent, TraceSession

_OP_KINDS = (ProbeKind.OP_ENTER, ProbeKind.OP_EXIT)


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass
class IterationSpan:
    """One token-generation iteration, bounded by its token enter/exit pair."""

    index: int
    phase: Phase
    enter: RawEvent
    exit: RawEvent

    @property
    def batch_size(self) -> int:
        return self.enter.payload.batch_size

    @property
    def duration_ns(self) -> int:
        return self.exit.ts_ns - self.enter.ts_ns


@dataclass
class OpSpan:
    tid: int
    enter: RawEvent
    exit: RawEvent
    iteration: int | None

    @property
    def op_addr(self) -> int:
        return self.enter.payload.op_addr

    @property
    def payload(self) -> OpPayload:
        return self.enter.payload

    @property
    def elapsed_ns(self) -> int:
        return self.exit.ts_ns - self.enter.ts_ns

    def pmc_delta(self) -> tuple[int, ...] | None:
        """Per-thread counter increments over the span, when both ends carry
        readings."""
        a = self.enter.payload.pmc
        b = self.exit.payload.pmc
        if a is None or b is None:
            return None
        return tuple(y - x for x, y in zip(a, b))


@dataclass
class IngestResult:
    session: TraceSession
    by_thread: dict[int, list[RawEvent]]
    iterations: list[IterationSpan]
    iteration_of: dict[int, int | None]  # seq -> iteration index (None = outside)
    spans: list[OpSpan]
    orphans: list[RawEvent]
    gap_seqs: list[int]  # seq values missing from the stream, sorted
    warnings: list[str] = field(default_factory=list)

    def spans_for_iteration(self, iteration: int) -> list[OpSpan]:
        return [s for s in self.spans if s.iteration == iteration]


def group_and_sort(session: TraceSession) -> dict[int, list[RawEvent]]:
    """Group events by thread id, each list sorted by (ts_ns, seq).

    Every event of the session lands in exactly one list; the seq tiebreak
    keeps equal-timestamp events in emission order.
    """
    grouped: dict[int, list[RawEvent]] = {}
    for event in session.events:
        grouped.setdefault(event.tid, []).append(event)
    for events in grouped.values():
        events.sort(key=lambda e: (e.ts_ns, e.seq))
    return grouped


def assign_iterations(session: TraceSession) -> list[IterationSpan]:
    """Pair token enter/exit events into iteration spans, in time order.

    Iteration 0 is the prefill; later iterations are prefill only when their
    batch size exceeds one (a chunked prompt), otherwise decode.

    Raises:
        UnbalancedProbeError: a token exit arrives without an open enter, or
            a second enter arrives while one is open.
    """
    token_events = sorted(
        (e for e in session.events if e.kind in (ProbeKind.TOKEN_ENTER, ProbeKind.TOKEN_EXIT)),
        key=lambda e: (e.ts_ns, e.seq),
    )
    iterations: list[IterationSpan] = []
    open_enter: RawEvent | None = None
    for event in token_events:
        if event.kind is ProbeKind.TOKEN_ENTER:
            if open_enter is not None:
                raise UnbalancedProbeError("token enter while previous iteration open", event.seq)
            open_enter = event
        else:
            if open_enter is None:
                raise UnbalancedProbeError("token exit without matching enter", event.seq)
            index = len(iterations)
            batch = open_enter.payload.batch_size
            phase = Phase.PREFILL if (batch > 1 or index == 0) else Phase.DECODE
            iterations.append(IterationSpan(index=index, phase=phase, enter=open_enter, exit=event))
            open_enter = None
    return iterations


def _iteration_lookup(iterations: list[IterationSpan]):
    starts = [it.enter.ts_ns for it in iterations]

    def lookup(ts_ns: int) -> int | None:
        idx = bisect.bisect_right(starts, ts_ns) - 1
        if idx >= 0 and ts_ns <= iterations[idx].exit.ts_ns:
            return idx
        return None

    return lookup


def _find_gaps(session: TraceSession) -> list[int]:
    seqs = sorted(e.seq for e in session.events)
    gaps: list[int] = []
    for a, b in zip(seqs, seqs[1:]):
        gaps.extend(range(a + 1, b))
    return gaps


def _has_gap(gaps: list[int], lo: int | None, hi: int) -> bool:
    # any missing seq strictly inside (lo, hi); lo None means "before hi"
    left = 0 if lo is None else bisect.bisect_right(gaps, lo)
    return left < len(gaps) and gaps[left] < hi


def pair_spans(
    events: list[RawEvent],
    iteration_of: dict[int, int | None],
    gap_seqs: list[int],
) -> tuple[list[OpSpan], list[RawEvent]]:
    """Pair one thread's operator events into spans.

    The runtime never nests or reorders operator probes on a thread, so a
    pairing failure either coincides with a seq gap (a dropped record: the
    stranded events become orphans) or is a structural error.

    Args:
        events: one thread's events, sorted by (ts_ns, seq).
        iteration_of: iteration index per seq, from :func:`assign_iterations`.
        gap_seqs: sorted missing seq values for the whole session.

    Returns:
        (spans, orphans) for this thread.
    """
    spans: list[OpSpan] = []
    orphans: list[RawEvent] = []
    pending: RawEvent | None = None
    prev_seq: int | None = None
    for event in events:
        if event.kind not in _OP_KINDS:
            continue
        if event.kind is ProbeKind.OP_ENTER:
            if pending is not None:
                if not _has_gap(gap_seqs, pending.seq, event.seq):
                    raise StructuralError(
                        f"op enter at seq {event.seq} while enter at seq "
                        f"{pending.seq} is still open"
                    )
                orphans.append(pending)
            pending = event
        else:
            if pending is None:
                if not _has_gap(gap_seqs, prev_seq, event.seq):
                    raise StructuralError(f"op exit without matching enter at seq {event.seq}")
                orphans.append(event)
            elif pending.payload.op_addr != event.payload.op_addr:
                if not _has_gap(gap_seqs, pending.seq, event.seq):
                    raise StructuralError(
                        f"op exit at seq {event.seq} (addr 0x{event.payload.op_addr:x}) does "
                        f"not match open enter at seq {pending.seq} "
                        f"(addr 0x{pending.payload.op_addr:x})"
                    )
                orphans.append(pending)
                orphans.append(event)
                pending = None
            elif iteration_of.get(pending.seq) != iteration_of.get(event.seq):
                if not _has_gap(gap_seqs, pending.seq, event.seq):
                    raise StructuralError(
                        f"op span at seqs {pending.seq}/{event.seq} crosses iterations"
                    )
                orphans.append(pending)
                orphans.append(event)
                pending = None
            else:
                spans.append(
                    OpSpan(
                        tid=event.tid,
                        enter=pending,
                        exit=event,
                        iteration=iteration_of.get(pending.seq),
                    )
                )
                pending = None
        prev_seq = event.seq
    if pending is not None:
        # Capture stopped (or the exit was lost) with the span open.
        orphans.append(pending)
    return spans, orphans


def ingest(session: TraceSession) -> IngestResult:
    """Run the full pipeline: group, assign iterations, pair spans."""
    by_thread = group_and_sort(session)
    iterations = assign_iterations(session)
    lookup = _iteration_lookup(iterations)
    iteration_of: dict[int, int | None] = {}
    for it in iterations:
        iteration_of[it.enter.seq] = it.index
        iteration_of[it.exit.seq] = it.index
    for event in session.events:
        if event.seq not in iteration_of:
            iteration_of[event.seq] = lookup(event.ts_ns)
    gap_seqs = _find_gaps(session)
    spans: list[OpSpan] = []
    orphans: list[RawEvent] = []
    warnings: list[str] = []
    for tid in sorted(by_thread):
        t_spans, t_orphans = pair_spans(by_thread[tid], iteration_of, gap_seqs)
        spans.extend(t_spans)
        orphans.extend(t_orphans)
        if t_orphans:
            warnings.append(f"tid {tid}: {len(t_orphans)} orphaned op events")
    return IngestResult(
        session=session,
        by_thread=by_thread,
        iterations=iterations,
        iteration_of=iteration_of,
        spans=spans,
        orphans=orphans,
        gap_seqs=gap_seqs,
        warnings=warnings,
    )
