"""Aggregate statistics over ingested traces.

Everything here works on the per-iteration operator grouping: spans for one
tensor address within one iteration collapse into a node (same rule the DAG
builder uses), so multi-threaded ops are never double counted.

Covers per-token latency series with name-pattern attribution, matmul
latency-vs-complexity samples with a least-squares fit, memory traffic and
stall ratios from the hardware counters, and expert activation analysis for
mixture-of-experts runs.  CSV writers and plot-spec builders live here too;
rendering the specs to PNG is :mod:`profinfer.figures`'s job.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

from .errors import (
    DegenerateFitError,
    MetricUnavailableError,
    MissingCounterError,
)
from .events import OpType, PmcSpec
from .ingest import IngestResult, OpSpan, Phase

logger = logging.getLogger(__name__)

READ_COUNTER = "l3d_cache_refill"
WRITE_COUNTER = "mem_access_wr"
CYCLES_COUNTER = "cycles"
IDLE_COUNTER = "idle-backend-cycles"


# ---------------------------------------------------------------------------
# per-iteration node view
# ---------------------------------------------------------------------------


@dataclass
class _NodeView:
    """One operator within one iteration, merged across threads."""

    addr: int
    name: str
    op_type: object
    dims: tuple[int, int, int, int] | None
    src_addrs: tuple[int, ...] | None
    elapsed_ns: int
    pmc_totals: dict[str, int] | None
    first_enter_ns: int


def _node_views(result: IngestResult, iteration: int) -> list[_NodeView]:
    groups: dict[int, list[OpSpan]] = {}
    for span in result.spans_for_iteration(iteration):
        groups.setdefault(span.op_addr, []).append(span)
    names = [s.name for s in result.session.header.pmc_specs]
    views = []
    for addr, spans in groups.items():
        rep = spans[0].payload
        totals: dict[str, int] | None = None
        for span in spans:
            delta = span.pmc_delta()
            if delta is None:
                continue
            if totals is None:
                totals = dict.fromkeys(names, 0)
            for name, d in zip(names, delta):
                totals[name] += d
        views.append(
            _NodeView(
                addr=addr,
                name=rep.op_name,
                op_type=rep.op_type,
                dims=rep.dims,
                src_addrs=rep.src_addrs,
                elapsed_ns=max(s.exit.ts_ns for s in spans) - min(s.enter.ts_ns for s in spans),
                pmc_totals=totals,
                first_enter_ns=min(s.enter.ts_ns for s in spans),
            )
        )
    views.sort(key=lambda v: v.first_enter_ns)
    return views


# ---------------------------------------------------------------------------
# token latency series
# ---------------------------------------------------------------------------


@dataclass
class TokenSeries:
    """Per-iteration latencies plus time attributed to op-name patterns."""

    patterns: tuple[str, ...]
    indices: list[int]
    phases: list[Phase]
    duration_ns: list[int]
    pattern_ns: dict[str, list[int]]

    @property
    def ttft_ns(self) -> int:
        """Time to first token: total prefill latency."""
        return sum(d for d, p in zip(self.duration_ns, self.phases) if p is Phase.PREFILL)

    @property
    def tpot_ns(self) -> list[int]:
        """Per decode-token latencies."""
        return [d for d, p in zip(self.duration_ns, self.phases) if p is Phase.DECODE]

    @property
    def mean_tpot_ns(self) -> float:
        tpot = self.tpot_ns
        if not tpot:
            raise MetricUnavailableError("no decode iterations in trace")
        return sum(tpot) / len(tpot)


def token_series(
    result: IngestResult, patterns: tuple[str, ...] = ("kq", "kqv")
) -> TokenSeries:
    """Build the per-iteration latency table.

    Pattern attribution is a case-insensitive substring match on operator
    names, longest pattern first, each operator counted at most once — so
    with patterns ("kq", "kqv") an op named "kqv-3" lands in the kqv bucket
    only.  Requires name capture if any patterns are given.
    """
    if patterns and not result.session.header.flags.str_parse:
        raise MetricUnavailableError(
            "pattern attribution needs operator names; trace was captured with str parsing off"
        )
    ordered = sorted(patterns, key=len, reverse=True)
    series = TokenSeries(
        patterns=tuple(patterns),
        indices=[],
        phases=[],
        duration_ns=[],
        pattern_ns={p: [] for p in patterns},
    )
    for it in result.iterations:
        series.indices.append(it.index)
        series.phases.append(it.phase)
        series.duration_ns.append(it.duration_ns)
        sums = dict.fromkeys(patterns, 0)
        for view in _node_views(result, it.index):
            low = view.name.lower()
            for p in ordered:
                if p.lower() in low:
                    sums[p] += view.elapsed_ns
                    break
        for p in patterns:
            series.pattern_ns[p].append(sums[p])
    return series


# ---------------------------------------------------------------------------
# matmul complexity fits
# ---------------------------------------------------------------------------


def matmul_complexity(m: int, n: int, k: int, h: int = 1) -> int:
    """Multiply-accumulate count M*N*K*H of an (M,K)x(K,N) matmul over H heads."""
    if min(m, n, k, h) < 1:
        raise ValueError(f"matmul dims must be >= 1, got m={m} n={n} k={k} h={h}")
    return m * n * k * h


@dataclass
class MatmulSample:
    iteration: int
    name: str
    addr: int
    m: int
    n: int
    k: int
    h: int
    complexity: int
    elapsed_ns: int
    bandwidth_bps: float | None = None


def _resolve_k(view: _NodeView, produced: dict[int, tuple[int, int, int, int]]) -> int | None:
    """Contraction length from the first source that is an op output.

    Weight sources are constants and never appear in ``produced``; the first
    hit gives K as its dims[0].  When a multi-head source feeds an op whose
    own head dim is 1, the heads were folded into the contraction (attention
    output projection), so K picks up the source's head count.
    """
    if not view.src_addrs or view.dims is None:
        return None
    for src in view.src_addrs:
        dims = produced.get(src)
        if dims is None:
            continue
        k = dims[0]
        if view.dims[2] == 1 and dims[2] > 1:
            k *= dims[2]
        return k
    return None


def matmul_samples(result: IngestResult, phase: str | None = "decode") -> list[MatmulSample]:
    """Collect (complexity, latency) points for plain MUL_MAT ops.

    Output dims give N=dims[0], M=dims[1], H=dims[2]; K comes from the
    producing source tensor.  Ops whose K cannot be resolved (missing dims
    or no traced source) are skipped.  ``phase`` filters iterations
    ("decode", "prefill", or None for all).
    """
    if not result.session.header.flags.str_parse:
        raise MetricUnavailableError(
            "matmul analysis needs tensor dims; trace was captured with str parsing off"
        )
    if phase is not None and phase not in ("prefill", "decode"):
        raise ValueError(f"phase must be 'prefill', 'decode' or None, got {phase!r}")
    specs = result.session.header.pmc_specs
    samples: list[MatmulSample] = []
    for it in result.iterations:
        if phase is not None and it.phase.value != phase:
            continue
        views = _node_views(result, it.index)
        produced = {v.addr: v.dims for v in views if v.dims is not None}
        for view in views:
            if view.op_type is not OpType.MUL_MAT or view.dims is None:
                continue
            k = _resolve_k(view, produced)
            if k is None:
                logger.debug("no resolvable K for %s at iteration %d", view.name, it.index)
                continue
            n, m, h, _ = view.dims
            bandwidth = None
            if view.pmc_totals is not None and view.elapsed_ns > 0:
                try:
                    bandwidth = memory_traffic(
                        view.pmc_totals, specs, view.elapsed_ns
                    ).bandwidth_bps
                except MissingCounterError:
                    pass
            samples.append(
                MatmulSample(
                    iteration=it.index,
                    name=view.name,
                    addr=view.addr,
                    m=m,
                    n=n,
                    k=k,
                    h=h,
                    complexity=matmul_complexity(m, n, k, h),
                    elapsed_ns=view.elapsed_ns,
                    bandwidth_bps=bandwidth,
                )
            )
    return samples


@dataclass
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    n: int

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept


def linear_fit(xs: list[float], ys: list[float]) -> FitResult:
    """Ordinary least squares y = slope*x + intercept."""
    if len(xs) != len(ys):
        raise ValueError("xs and ys must have the same length")
    n = len(xs)
    if n < 2:
        raise DegenerateFitError(f"need at least 2 points, got {n}")
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    if sxx == 0:
        raise DegenerateFitError("all x values identical; cannot fit a slope")
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return FitResult(slope=slope, intercept=intercept, r_squared=r2, n=n)


def pearson_r(xs: list[float], ys: list[float]) -> float:
    """Pearson correlation coefficient."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need two equal-length series of at least 2 points")
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    cov = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    var_x = sum((x - mean_x) ** 2 for x in xs)
    var_y = sum((y - mean_y) ** 2 for y in ys)
    if var_x == 0 or var_y == 0:
        raise ValueError("zero variance series")
    return cov / math.sqrt(var_x * var_y)


# ---------------------------------------------------------------------------
# counter-derived metrics
# ---------------------------------------------------------------------------


@dataclass
class MemoryTraffic:
    bytes_read: int
    bytes_written: int
    bandwidth_bps: float


def _scale(specs: tuple[PmcSpec, ...], name: str) -> int | None:
    for s in specs:
        if s.name == name:
            return s.unit_scale
    return None


def memory_traffic(
    pmc_totals: dict[str, int], pmc_specs: tuple[PmcSpec, ...], elapsed_ns: int
) -> MemoryTraffic:
    """DRAM traffic and bandwidth from cache refill / write counters.

    Reads are counted at cache-line granularity, writes at bus-beat
    granularity; the byte width of each comes from the counter spec.
    """
    missing = [n for n in (READ_COUNTER, WRITE_COUNTER) if n not in pmc_totals]
    if missing:
        raise MissingCounterError(f"counters not in totals: {', '.join(missing)}")
    if elapsed_ns <= 0:
        raise ValueError(f"elapsed_ns must be positive, got {elapsed_ns}")
    read_scale = _scale(pmc_specs, READ_COUNTER)
    write_scale = _scale(pmc_specs, WRITE_COUNTER)
    if read_scale is None or write_scale is None:
        raise MissingCounterError("counter specs lack read/write byte scales")
    bytes_read = pmc_totals[READ_COUNTER] * read_scale
    bytes_written = pmc_totals[WRITE_COUNTER] * write_scale
    return MemoryTraffic(
        bytes_read=bytes_read,
        bytes_written=bytes_written,
        bandwidth_bps=(bytes_read + bytes_written) * 1e9 / elapsed_ns,
    )


def stalled_ratio(pmc_totals: dict[str, int]) -> float:
    """Fraction of cycles the backend was stalled (idle / total)."""
    missing = [n for n in (CYCLES_COUNTER, IDLE_COUNTER) if n not in pmc_totals]
    if missing:
        raise MissingCounterError(f"counters not in totals: {', '.join(missing)}")
    cycles = pmc_totals[CYCLES_COUNTER]
    if cycles == 0:
        raise ValueError("cycle counter is zero; ratio undefined")
    ratio = pmc_totals[IDLE_COUNTER] / cycles
    if ratio > 1.0:
        logger.warning("stalled ratio %.3f exceeds 1.0; counters may be misconfigured", ratio)
    return ratio


# ---------------------------------------------------------------------------
# mixture-of-experts activation
# ---------------------------------------------------------------------------


@dataclass
class ExpertActivationMatrix:
    """Which experts one gated op activated on each decode step."""

    op_name: str
    total_experts: int
    iterations: list[int]
    rows: list[tuple[int, ...]]
    elapsed_ns: list[int]
    density: dict[int, float] = field(default_factory=dict)
    avg_reuse_distance: list[float] = field(default_factory=list)


def expert_analysis(result: IngestResult, op_name: str) -> ExpertActivationMatrix:
    """Expert activation matrix, per-expert density and reuse distances.

    Density of an expert is the fraction of decode steps that activated it,
    so densities sum to experts-per-token.  Reuse distance of an activation
    is the number of steps since that expert last ran; an expert never seen
    before counts the full history including the prefill (step index + 1).
    Per-step values average over the step's activations.
    """
    rows: list[tuple[int, ...]] = []
    iterations: list[int] = []
    elapsed: list[int] = []
    gated_names: set[str] = set()
    for it in result.iterations:
        for view in _node_views(result, it.index):
            if view.op_type is not OpType.MUL_MAT_ID:
                continue
            gated_names.add(view.name)
            if view.name != op_name or it.phase is not Phase.DECODE:
                continue
            payload = None
            for span in result.spans_for_iteration(it.index):
                if span.op_addr == view.addr and span.payload.expert_ids is not None:
                    payload = span.payload
                    break
            if payload is None:
                continue
            iterations.append(it.index)
            rows.append(payload.expert_ids)
            elapsed.append(view.elapsed_ns)
    if not rows:
        if gated_names:
            raise MetricUnavailableError(
                f"no decode activations for {op_name!r}; gated ops present: "
                + ", ".join(sorted(gated_names))
            )
        raise MetricUnavailableError("trace contains no gated (MUL_MAT_ID) ops")

    moe = result.session.header.moe
    total = moe.total_experts if moe is not None else max(max(r) for r in rows) + 1
    matrix = ExpertActivationMatrix(
        op_name=op_name,
        total_experts=total,
        iterations=iterations,
        rows=rows,
        elapsed_ns=elapsed,
    )
    counts = dict.fromkeys(range(total), 0)
    last_seen: dict[int, int] = {}
    for step, row in enumerate(rows):
        dists = []
        for expert in row:
            counts[expert] += 1
            prev = last_seen.get(expert)
            dists.append(step - prev if prev is not None else step + 1)
            last_seen[expert] = step
        matrix.avg_reuse_distance.append(sum(dists) / len(dists))
    matrix.density = {e: c / len(rows) for e, c in counts.items()}
    return matrix


# ---------------------------------------------------------------------------
# CSV and plot-spec output
# ---------------------------------------------------------------------------


def write_tokens_csv(series: TokenSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "phase", "duration_ns"] + [f"{p}_ns" for p in series.patterns]
        )
        for i, idx in enumerate(series.indices):
            writer.writerow(
                [idx, series.phases[i].value, series.duration_ns[i]]
                + [series.pattern_ns[p][i] for p in series.patterns]
            )


def write_matmuls_csv(samples: list[MatmulSample], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "name", "m", "n", "k", "h", "complexity", "elapsed_ns", "bandwidth_bps"]
        )
        for s in samples:
            writer.writerow(
                [
                    s.iteration,
                    s.name,
                    s.m,
                    s.n,
                    s.k,
                    s.h,
                    s.complexity,
                    s.elapsed_ns,
                    "" if s.bandwidth_bps is None else f"{s.bandwidth_bps:.1f}",
                ]
            )


def write_experts_csv(matrix: ExpertActivationMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "elapsed_ns", "avg_reuse_distance", "expert_ids"])
        for i, idx in enumerate(matrix.iterations):
            writer.writerow(
                [
                    idx,
                    matrix.elapsed_ns[i],
                    f"{matrix.avg_reuse_distance[i]:.6f}",
                    ";".join(str(e) for e in matrix.rows[i]),
                ]
            )


def token_plot_spec(series: TokenSeries) -> dict:
    plots = [
        {
            "label": "iteration latency",
            "kind": "line",
            "axis": "left",
            "values": [d / 1e6 for d in series.duration_ns],
        }
    ]
    for p in series.patterns:
        plots.append(
            {
                "label": f"{p} time",
                "kind": "line",
                "axis": "left",
                "values": [d / 1e6 for d in series.pattern_ns[p]],
            }
        )
    return {
        "view": "tokens",
        "title": "Per-iteration latency",
        "x": {"label": "iteration", "values": series.indices},
        "y": {"left": "latency (ms)"},
        "series": plots,
    }


def matmul_plot_spec(samples: list[MatmulSample], fit: FitResult | None = None) -> dict:
    xs = [s.complexity for s in samples]
    spec = {
        "view": "matmuls",
        "title": "MUL_MAT latency vs complexity",
        "x": {"label": "multiply-accumulates (M*N*K*H)", "values": []},
        "y": {"left": "latency (us)"},
        "series": [
            {
                "label": "ops",
                "kind": "scatter",
                "axis": "left",
                "x": xs,
                "values": [s.elapsed_ns / 1e3 for s in samples],
            }
        ],
    }
    if fit is not None and xs:
        lo, hi = min(xs), max(xs)
        spec["series"].append(
            {
                "label": f"fit (r2={fit.r_squared:.3f})",
                "kind": "line",
                "axis": "left",
                "x": [lo, hi],
                "values": [fit.predict(lo) / 1e3, fit.predict(hi) / 1e3],
            }
        )
    return spec


def expert_plot_spec(matrix: ExpertActivationMatrix) -> dict:
    return {
        "view": "experts",
        "title": f"Expert reuse vs latency ({matrix.op_name})",
        "x": {"label": "decode iteration", "values": matrix.iterations},
        "y": {"left": "avg reuse distance", "right": "latency (ms)"},
        "series": [
            {
                "label": "avg reuse distance",
                "kind": "bar",
                "axis": "left",
                "values": matrix.avg_reuse_distance,
            },
            {
                "label": "op latency",
                "kind": "line",
                "axis": "right",
                "values": [d / 1e6 for d in matrix.elapsed_ns],
            },
        ],
    }
