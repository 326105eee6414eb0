"""Per-iteration dataflow DAG reconstruction from operator spans.

Nodes are operator tensors keyed by their runtime address; edges follow the
source-address lists captured at operator entry.  Source addresses that never
appear as executed operators are constant inputs (weights, caches, embedded
activations) and carry no timing or counter data.

Elapsed time for a node is end-to-end across every thread that worked on it:
latest exit minus earliest enter.  Counter totals are the sum of per-thread
deltas, so intra-operator parallelism does not double-count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DagUnavailableError, MetricUnavailableError, UnknownIterationError
from .events import Backend, OpTypeLike, PmcSpec
from .ingest import IngestResult, OpSpan


@dataclass
class DagNode:
    addr: int
    is_constant: bool = False
    name: str | None = None
    op_type: OpTypeLike | None = None
    backend: Backend | None = None
    dims: tuple[int, int, int, int] | None = None
    order: int | None = None  # execution index within the iteration
    elapsed_ns: int | None = None
    pmc_totals: dict[str, int] | None = None


@dataclass
class ProfDag:
    iteration: int
    nodes: dict[int, DagNode] = field(default_factory=dict)
    edges: dict[tuple[int, int], int] = field(default_factory=dict)  # (src, dst) -> multiplicity
    pmc_specs: tuple[PmcSpec, ...] = ()
    warnings: list[str] = field(default_factory=list)

    @property
    def op_nodes(self) -> list[DagNode]:
        ops = [n for n in self.nodes.values() if not n.is_constant]
        ops.sort(key=lambda n: n.order)
        return ops

    def available_metrics(self) -> list[str]:
        metrics = ["elapsed"]
        present: set[str] = set()
        for node in self.nodes.values():
            if node.pmc_totals:
                present.update(node.pmc_totals)
        metrics.extend(sorted(present))
        if "l3d_cache_refill" in present and "mem_access_wr" in present:
            metrics.append("bandwidth")
        if "l3d_cache_refill" in present:
            metrics.append("refills")
        if "cycles" in present and "idle-backend-cycles" in present:
            metrics.append("stalled")
        return metrics


def op_elapsed(spans: list[OpSpan]) -> int:
    """End-to-end elapsed time of one operator across its worker threads."""
    if not spans:
        raise ValueError("no spans given")
    return max(s.exit.ts_ns for s in spans) - min(s.enter.ts_ns for s in spans)


def _sum_pmc(spans: list[OpSpan], specs: tuple[PmcSpec, ...]) -> dict[str, int] | None:
    totals: list[int] | None = None
    for span in spans:
        delta = span.pmc_delta()
        if delta is None:
            continue
        if totals is None:
            totals = [0] * len(delta)
        for i, d in enumerate(delta):
            totals[i] += d
    if totals is None:
        return None
    return {spec.name: totals[i] for i, spec in enumerate(specs[: len(totals)])}


def build_profdag(result: IngestResult, iteration: int) -> ProfDag:
    """Reconstruct the dataflow DAG of one iteration.

    One reference thread (the one with the most spans; lowest tid on ties)
    fixes the node set and execution order; timing and counters then
    aggregate over all threads.

    Raises:
        DagUnavailableError: the capture ran without source/dims parsing.
        UnknownIterationError: the iteration does not exist in the session.
    """
    if not result.session.header.flags.str_parse:
        raise DagUnavailableError(
            "graph reconstruction needs source addresses; the session was "
            "captured with the Str flag off"
        )
    if iteration < 0 or iteration >= len(result.iterations):
        raise UnknownIterationError(
            f"iteration {iteration} not in session (has {len(result.iterations)})"
        )
    spans = result.spans_for_iteration(iteration)
    dag = ProfDag(iteration=iteration, pmc_specs=result.session.header.pmc_specs)

    per_thread: dict[int, list[OpSpan]] = {}
    for span in spans:
        per_thread.setdefault(span.tid, []).append(span)
    if not per_thread:
        return dag
    ref_tid = min(per_thread, key=lambda t: (-len(per_thread[t]), t))
    ref_spans = sorted(per_thread[ref_tid], key=lambda s: (s.enter.ts_ns, s.enter.seq))

    by_addr: dict[int, list[OpSpan]] = {}
    for span in spans:
        by_addr.setdefault(span.op_addr, []).append(span)

    ref_addrs = {s.op_addr for s in ref_spans}
    missing = sorted(set(by_addr) - ref_addrs)
    for addr in missing:
        tids = sorted({s.tid for s in by_addr[addr]})
        dag.warnings.append(
            f"op 0x{addr:x} ran on tids {tids} but not on reference thread {ref_tid}"
        )

    for order, span in enumerate(ref_spans):
        p = span.payload
        dag.nodes[span.op_addr] = DagNode(
            addr=span.op_addr,
            name=p.op_name,
            op_type=p.op_type,
            backend=p.backend,
            dims=p.dims,
            order=order,
            elapsed_ns=op_elapsed(by_addr[span.op_addr]),
            pmc_totals=_sum_pmc(by_addr[span.op_addr], dag.pmc_specs),
        )

    for span in ref_spans:
        srcs = span.payload.src_addrs
        if srcs is None:
            continue
        for src in srcs:
            if src not in dag.nodes:
                dag.nodes[src] = DagNode(addr=src, is_constant=True)
            key = (src, span.op_addr)
            dag.edges[key] = dag.edges.get(key, 0) + 1
    return dag


# ---------------------------------------------------------------------------
# Node metrics
# ---------------------------------------------------------------------------


def _unit_scale(specs: tuple[PmcSpec, ...], name: str) -> int:
    for spec in specs:
        if spec.name == name:
            return spec.unit_scale
    return 1


def metric_values(dag: ProfDag, metric: str) -> dict[int, float]:
    """Metric value per non-constant node address.

    Nodes that lack the inputs for the metric (e.g. counter-less offloaded
    operators) are simply absent from the result.

    Raises:
        MetricUnavailableError: no node in the DAG can produce the metric.
    """
    values: dict[int, float] = {}
    for node in dag.op_nodes:
        value = _node_metric(dag, node, metric)
        if value is not None:
            values[node.addr] = value
    if not values:
        raise MetricUnavailableError(
            f"metric {metric!r} unavailable in this session; "
            f"available: {', '.join(dag.available_metrics())}"
        )
    return values


def _node_metric(dag: ProfDag, node: DagNode, metric: str) -> float | None:
    if metric == "elapsed":
        return float(node.elapsed_ns) if node.elapsed_ns is not None else None
    pmc = node.pmc_totals
    if metric == "refills":
        metric = "l3d_cache_refill"
    if pmc is None:
        return None
    if metric in pmc:
        return float(pmc[metric])
    if metric == "bandwidth":
        if "l3d_cache_refill" not in pmc or "mem_access_wr" not in pmc or not node.elapsed_ns:
            return None
        moved = pmc["l3d_cache_refill"] * _unit_scale(dag.pmc_specs, "l3d_cache_refill")
        moved += pmc["mem_access_wr"] * _unit_scale(dag.pmc_specs, "mem_access_wr")
        return moved * 1e9 / node.elapsed_ns
    if metric == "stalled":
        if "cycles" not in pmc or "idle-backend-cycles" not in pmc or not pmc["cycles"]:
            return None
        return pmc["idle-backend-cycles"] / pmc["cycles"]
    return None


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

# Node shapes by operator type, matching the rendering convention of the
# graph views: matmuls round, adds triangular, and so on.  UNARY gets the
# rotated hexagon.
_SHAPES: dict[str, tuple[str, str | None]] = {
    "MUL_MAT": ("circle", None),
    "MUL_MAT_ID": ("doublecircle", None),
    "ADD": ("triangle", None),
    "SOFT_MAX": ("square", None),
    "RMS_NORM": ("hexagon", None),
    "UNARY": ("hexagon", 'orientation="90"'),
    "MUL": ("octagon", None),
}


def _palette(size: int) -> list[str]:
    lo, hi = (255, 247, 204), (128, 0, 38)
    if size < 1:
        raise ValueError("palette size must be positive")
    out = []
    for i in range(size):
        t = i / (size - 1) if size > 1 else 0.0
        rgb = tuple(round(a + (b - a) * t) for a, b in zip(lo, hi))
        out.append("#{:02x}{:02x}{:02x}".format(*rgb))
    return out


def _bucket(value: float, lo: float, hi: float, size: int) -> int:
    if hi <= lo:
        return 0
    return min(int((value - lo) / (hi - lo) * size), size - 1)


def export_dot(dag: ProfDag, metric: str = "elapsed", palette_size: int = 9) -> str:
    """Render the DAG as Graphviz DOT, nodes shaded by the chosen metric.

    Shading buckets the metric min-max over the iteration's nodes into
    ``palette_size`` ordinal colors; constants stay unfilled and dashed.
    """
    values = metric_values(dag, metric)
    palette = _palette(palette_size)
    lo, hi = min(values.values()), max(values.values())
    lines = [
        "digraph profdag {",
        "  rankdir=TB;",
        f'  label="iteration {dag.iteration}, metric {metric}";',
    ]
    for node in dag.op_nodes:
        type_name = node.op_type.name if node.op_type is not None else "?"
        shape, extra = _SHAPES.get(type_name, ("ellipse", None))
        attrs = [f'label="{node.order}:{node.name or hex(node.addr)}"', f'shape="{shape}"']
        if extra:
            attrs.append(extra)
        if node.addr in values:
            color = palette[_bucket(values[node.addr], lo, hi, palette_size)]
            attrs.append(f'style="filled", fillcolor="{color}"')
        lines.append(f'  "n{node.addr:#x}" [{", ".join(attrs)}];')
    for addr, node in dag.nodes.items():
        if node.is_constant:
            lines.append(f'  "n{addr:#x}" [label="{addr:#x}", shape="box", style="dashed"];')
    for (src, dst), mult in dag.edges.items():
        suffix = f' [label="x{mult}"]' if mult > 1 else ""
        lines.append(f'  "n{src:#x}" -> "n{dst:#x}"{suffix};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(dag: ProfDag) -> dict:
    """Mirror of the DOT export for programmatic consumers."""
    nodes = []
    for node in dag.op_nodes:
        nodes.append(
            {
                "addr": f"0x{node.addr:x}",
                "name": node.name,
                "op_type": node.op_type.name if node.op_type is not None else None,
                "backend": node.backend.value if node.backend is not None else None,
                "dims": list(node.dims) if node.dims is not None else None,
                "order": node.order,
                "elapsed_ns": node.elapsed_ns,
                "pmc_totals": node.pmc_totals,
            }
        )
    consts = [
        {"addr": f"0x{n.addr:x}", "constant": True}
        for n in dag.nodes.values()
        if n.is_constant
    ]
    return {
        "iteration": dag.iteration,
        "nodes": nodes + consts,
        "edges": [
            {"src": f"0x{s:x}", "dst": f"0x{d:x}", "multiplicity": m}
            for (s, d), m in dag.edges.items()
        ],
        "available_metrics": dag.available_metrics(),
        "warnings": list(dag.warnings),
    }
