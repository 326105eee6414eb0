"""Deterministic synthetic inference workloads with exact ground truth.

The generator lays out a stylized transformer forward pass per token
iteration (attention block, gated FFN, final norm + LM head), realizes each
operator as enter/exit probe events on every worker thread, and returns the
session together with the ground truth the analyzers should reconstruct:
per-iteration dataflow DAGs with elapsed times and counter totals, token
durations, expert activation schedules, and the seq numbers of injected
drops.

Everything derives from (ModelSpec, RunSpec, seed): two calls with equal
inputs produce byte-identical sessions.

Intra-operator parallelism only: an operator occupies a closed time window
[T, T+elapsed] on all threads, and the next operator starts exactly at the
window's end, so token durations decompose exactly into operator times plus
the configured bookkeeping overhead.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .dag import DagNode, ProfDag
from .events import (
    Backend,
    CANONICAL_PMC_SPECS,
    GraphPayload,
    MoeInfo,
    OpPayload,
    OpType,
    ProbeKind,
    RawEvent,
    SchedPayload,
    SessionHeader,
    TokenPayload,
    TraceFlags,
    TraceSession,
)

_OP_ADDR_BASE = 0x7F4200000000
_CONST_ADDR_BASE = 0x55AA00000000
_PID = 4001
_MAIN_TID = 5000
_FOREIGN_TID = 99999
_BASE_TS = 1_000_000_000
_GUID_CPU = "c0ffee0000000001"
_GUID_GPU = "c0ffee0000000002"


@dataclass
class ModelSpec:
    """Architecture of the synthetic model."""

    name: str = "dense"
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    kv_heads: int = 2
    ffn: int = 256
    vocab: int = 1024
    n_expert: int = 0  # >0 switches the FFN to a gated mixture
    experts_per_token: int = 0
    qwen_style: bool = False  # bias ADD after each of the QKV matmuls
    gemma_style: bool = False  # extra SOFT_MAX x3, UNARY, RMS_NORM, MUL per layer

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.heads % self.kv_heads:
            raise ValueError("heads must be divisible by kv_heads")
        if self.n_expert:
            if not 0 < self.experts_per_token <= min(self.n_expert, 8):
                raise ValueError("experts_per_token must be in 1..min(n_expert, 8)")

    @property
    def moe(self) -> bool:
        return self.n_expert > 0


@dataclass
class CostModel:
    """Maps operator work to nanoseconds and counter values."""

    ns_per_unit: float = 0.5  # per unit of arithmetic work
    op_overhead_ns: int = 2_000  # fixed dispatch cost per operator
    token_overhead_ns: int = 50_000  # sampling/bookkeeping inside a token span
    inter_token_gap_ns: int = 50_000
    kv_block: int = 32  # KV cache growth granularity (steps in attention time)
    bytes_per_unit: int = 2  # traffic model: bytes read per unit of work
    read_const: int = 16  # per-op constant cache refills
    write_const: int = 4
    cycles_per_ns: int = 2
    stalled_fraction: float | None = None  # None: grows with thread count
    expert_miss_penalty_ns: int = 20_000  # per unit of average reuse distance
    expert_resident_iters: int = 8  # reuse distance beyond this faults


@dataclass
class InterferenceSpec:
    """A foreign task occupying the victim thread's CPU for given periods.

    Periods are (start_ns, end_ns) offsets from the session base timestamp.
    """

    periods: tuple[tuple[int, int], ...]
    victim_index: int = 0


@dataclass
class RunSpec:
    prompt_len: int = 4
    gen_len: int = 8
    nthreads: int = 2
    flags: TraceFlags = field(default_factory=TraceFlags)
    drop_rate: float = 0.0
    offload_layers: int = 0  # trailing layers + head run on the GPU backend
    interference: InterferenceSpec | None = None
    qos_target_tps: float | None = None
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if self.prompt_len < 1 or self.gen_len < 0 or self.nthreads < 1:
            raise ValueError("prompt_len >= 1, gen_len >= 0, nthreads >= 1 required")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must be in [0, 1)")


@dataclass
class GtIteration:
    index: int
    phase: str  # "prefill" | "decode"
    batch_size: int
    enter_ts: int
    exit_ts: int
    duration_ns: int
    dag: ProfDag


@dataclass
class GroundTruth:
    iterations: list[GtIteration]
    ttft_ns: int
    tpot_ns: list[int]
    # decode-iteration expert ids / average reuse distance, per gated op name
    expert_schedule: dict[str, list[tuple[int, ...]]]
    expert_avg_distance: dict[str, list[float]]
    dropped_seqs: list[int]
    token_overhead_ns: int


# ---------------------------------------------------------------------------
# Operator template
# ---------------------------------------------------------------------------


@dataclass
class _PlannedOp:
    name: str
    op_type: OpType
    addr: int
    dims: tuple[int, int, int, int]
    srcs: tuple[int, ...]
    units: int  # arithmetic work driving time and read traffic
    layer: int | None = None
    gated: bool = False
    backend: Backend = Backend.CPU


class _Consts:
    """Stable constant-tensor addresses, allocated by name."""

    def __init__(self) -> None:
        self._by_name: dict[str, int] = {}

    def __call__(self, name: str) -> int:
        if name not in self._by_name:
            self._by_name[name] = _CONST_ADDR_BASE + len(self._by_name) * 0x1000
        return self._by_name[name]


def _blocked(ctx: int, block: int) -> int:
    return -(-ctx // block) * block


def build_iteration_ops(
    model: ModelSpec, batch: int, ctx: int, consts: _Consts, cost: CostModel
) -> list[_PlannedOp]:
    """Plan the operator sequence of one iteration.

    ``batch`` is the number of tokens processed (prompt length in prefill,
    one in decode) and ``ctx`` the KV cache length attention reads.
    """
    hid, heads = model.hidden, model.heads
    hd = hid // heads
    kvd = hd * model.kv_heads
    bctx = _blocked(ctx, cost.kv_block)
    m = batch
    ops: list[_PlannedOp] = []

    def op(name, op_type, dims, srcs, units, layer=None, gated=False) -> int:
        addr = _OP_ADDR_BASE + len(ops) * 0x100
        ops.append(_PlannedOp(name, op_type, addr, dims, tuple(srcs), units, layer, gated))
        return addr

    resid = consts("inp_tokens")
    for L in range(model.layers):
        a_norm = op(f"attn_norm-{L}", OpType.RMS_NORM, (hid, m, 1, 1), [resid], hid * m, L)
        q = op(f"Qcur-{L}", OpType.MUL_MAT, (hid, m, 1, 1), [consts(f"wq-{L}"), a_norm],
               m * hid * hid, L)
        k = op(f"Kcur-{L}", OpType.MUL_MAT, (kvd, m, 1, 1), [consts(f"wk-{L}"), a_norm],
               m * kvd * hid, L)
        v = op(f"Vcur-{L}", OpType.MUL_MAT, (kvd, m, 1, 1), [consts(f"wv-{L}"), a_norm],
               m * kvd * hid, L)
        if model.qwen_style:
            q = op(f"Qbias-{L}", OpType.ADD, (hid, m, 1, 1), [q, consts(f"bq-{L}")], hid * m, L)
            k = op(f"Kbias-{L}", OpType.ADD, (kvd, m, 1, 1), [k, consts(f"bk-{L}")], kvd * m, L)
            v = op(f"Vbias-{L}", OpType.ADD, (kvd, m, 1, 1), [v, consts(f"bv-{L}")], kvd * m, L)
        q_rope = op(f"Qrope-{L}", OpType.ROPE, (hd, m, heads, 1), [q], hid * m, L)
        op(f"Krope-{L}", OpType.ROPE, (hd, m, model.kv_heads, 1), [k], kvd * m, L)
        kq = op(f"kq-{L}", OpType.MUL_MAT, (ctx, m, heads, 1), [consts(f"k_cache-{L}"), q_rope],
                m * bctx * hd * heads, L)
        sm_src = kq
        if model.gemma_style:
            scale = op(f"kq_scale-{L}", OpType.MUL, (ctx, m, heads, 1),
                       [kq, consts(f"attn_scale-{L}")], ctx * m * heads, L)
            sm_src = op(f"kq_cap-{L}", OpType.UNARY, (ctx, m, heads, 1), [scale],
                        ctx * m * heads, L)
        soft_max = op(f"kq_soft_max-{L}", OpType.SOFT_MAX, (ctx, m, heads, 1), [sm_src],
                      ctx * m * heads, L)
        if model.gemma_style:
            cascade = sm_src
            for tag in ("a", "b", "c"):
                cascade = op(f"kq_sm_{tag}-{L}", OpType.SOFT_MAX, (ctx, m, heads, 1),
                             [cascade], ctx * m * heads, L)
        kqv = op(f"kqv-{L}", OpType.MUL_MAT, (hd, m, heads, 1),
                 [consts(f"v_cache-{L}"), soft_max], m * hd * bctx * heads, L)
        attn_out = op(f"attn_out-{L}", OpType.MUL_MAT, (hid, m, 1, 1),
                      [consts(f"wo-{L}"), kqv], m * hid * hid, L)
        if model.gemma_style:
            attn_out = op(f"attn_post_norm-{L}", OpType.RMS_NORM, (hid, m, 1, 1), [attn_out],
                          hid * m, L)
        attn_resid = op(f"attn_resid-{L}", OpType.ADD, (hid, m, 1, 1), [attn_out, resid],
                        hid * m, L)
        ffn_norm = op(f"ffn_norm-{L}", OpType.RMS_NORM, (hid, m, 1, 1), [attn_resid], hid * m, L)
        if model.moe:
            ne, k_act = model.n_expert, model.experts_per_token
            logits = op(f"ffn_moe_logits-{L}", OpType.MUL_MAT, (ne, m, 1, 1),
                        [consts(f"w_router-{L}"), ffn_norm], m * ne * hid, L)
            probs = op(f"ffn_moe_probs-{L}", OpType.SOFT_MAX, (ne, m, 1, 1), [logits], ne * m, L)
            topk = op(f"ffn_moe_topk-{L}", OpType.GET_ROWS, (k_act, m, 1, 1), [probs],
                      k_act * m, L)
            up = op(f"ffn_moe_up-{L}", OpType.MUL_MAT_ID, (model.ffn, m, k_act, 1),
                    [consts(f"w_exp_up-{L}"), ffn_norm, topk], k_act * m * model.ffn * hid, L,
                    gated=True)
            gate = op(f"ffn_moe_gate-{L}", OpType.MUL_MAT_ID, (model.ffn, m, k_act, 1),
                      [consts(f"w_exp_gate-{L}"), ffn_norm, topk], k_act * m * model.ffn * hid, L,
                      gated=True)
            silu = op(f"ffn_moe_silu-{L}", OpType.UNARY, (model.ffn, m, k_act, 1), [gate],
                      model.ffn * m * k_act, L)
            par = op(f"ffn_moe_gate_par-{L}", OpType.MUL, (model.ffn, m, k_act, 1), [silu, up],
                     model.ffn * m * k_act, L)
            down = op(f"ffn_moe_down-{L}", OpType.MUL_MAT_ID, (hid, m, k_act, 1),
                      [consts(f"w_exp_down-{L}"), par, topk], k_act * m * hid * model.ffn, L,
                      gated=True)
            out = op(f"ffn_moe_weighted-{L}", OpType.MUL, (hid, m, 1, 1), [down, topk],
                     hid * m, L)
        else:
            up = op(f"ffn_up-{L}", OpType.MUL_MAT, (model.ffn, m, 1, 1),
                    [consts(f"w_up-{L}"), ffn_norm], m * model.ffn * hid, L)
            gate = op(f"ffn_gate-{L}", OpType.MUL_MAT, (model.ffn, m, 1, 1),
                      [consts(f"w_gate-{L}"), ffn_norm], m * model.ffn * hid, L)
            silu = op(f"ffn_silu-{L}", OpType.UNARY, (model.ffn, m, 1, 1), [gate],
                      model.ffn * m, L)
            par = op(f"ffn_gate_par-{L}", OpType.MUL, (model.ffn, m, 1, 1), [silu, up],
                     model.ffn * m, L)
            out = op(f"ffn_down-{L}", OpType.MUL_MAT, (hid, m, 1, 1),
                     [consts(f"w_down-{L}"), par], m * hid * model.ffn, L)
        resid = op(f"ffn_resid-{L}", OpType.ADD, (hid, m, 1, 1), [out, attn_resid], hid * m, L)
    o_norm = op("output_norm", OpType.RMS_NORM, (hid, m, 1, 1), [resid], hid * m)
    op("lm_head", OpType.MUL_MAT, (model.vocab, m, 1, 1), [consts("w_output"), o_norm],
       m * model.vocab * hid)
    return ops


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _stalled_fraction(cost: CostModel, nthreads: int) -> float:
    if cost.stalled_fraction is not None:
        return cost.stalled_fraction
    return min(0.9, 0.45 + 0.1 * nthreads)


def _op_counters(op: _PlannedOp, elapsed: int, cost: CostModel, stalled: float,
                 faults: int) -> list[int]:
    out_elems = op.dims[0] * op.dims[1] * op.dims[2] * op.dims[3]
    refills = op.units * cost.bytes_per_unit // 64 + cost.read_const
    writes = out_elems * 2 // 16 + cost.write_const
    cycles = elapsed * cost.cycles_per_ns
    idle = int(cycles * stalled)
    return [refills, writes, faults, cycles, idle]


def generate_session(
    model: ModelSpec, run: RunSpec, seed: int = 0
) -> tuple[TraceSession, GroundTruth]:
    """Produce a synthetic trace session and its exact ground truth.

    Args:
        model: architecture to emulate.
        run: execution shape, capture flags, cost model and fault injection.
        seed: RNG seed; fully determines the output together with the specs.

    Returns:
        (session, ground_truth).
    """
    rng = random.Random(seed)
    cost = run.cost
    consts = _Consts()
    flags = run.flags
    tids = [_MAIN_TID + i for i in range(run.nthreads)]
    ncpus = max(run.nthreads, 4)
    cpu_of = {tid: (tid - _MAIN_TID) % ncpus for tid in tids}
    cpu_of[_FOREIGN_TID] = cpu_of[tids[0]]
    stalled = _stalled_fraction(cost, run.nthreads)
    if run.offload_layers < 0 or run.offload_layers > model.layers:
        raise ValueError("offload_layers out of range")

    n_pmc = len(CANONICAL_PMC_SPECS)
    counters = {tid: [(tid * 7 + c) * 1000 for c in range(n_pmc)] for tid in tids}

    events: list[RawEvent] = []
    gt_iters: list[GtIteration] = []
    expert_last: dict[int, dict[int, int]] = {L: {} for L in range(model.layers)}
    schedule: dict[str, list[tuple[int, ...]]] = {}
    distances: dict[str, list[float]] = {}
    if model.moe:
        for L in range(model.layers):
            for kind in ("up", "gate", "down"):
                schedule[f"ffn_moe_{kind}-{L}"] = []
                distances[f"ffn_moe_{kind}-{L}"] = []

    prelude = cost.token_overhead_ns * 2 // 5
    postlude = cost.token_overhead_ns - prelude
    cursor = _BASE_TS
    ttft = 0
    tpot: list[int] = []

    def emit(kind, ts, tid, payload):
        events.append(
            RawEvent(kind=kind, ts_ns=ts, pid=_PID, tid=tid, cpu=cpu_of[tid], seq=0,
                     payload=payload)
        )

    def op_payload(op: _PlannedOp, pmc: tuple[int, ...] | None,
                   experts: tuple[int, ...] | None) -> OpPayload:
        return OpPayload(
            op_addr=op.addr,
            op_type=op.op_type,
            op_name=op.name if flags.str_parse else "",
            backend=op.backend,
            dims=op.dims if flags.str_parse else None,
            src_addrs=op.srcs if flags.str_parse else None,
            pmc=pmc,
            expert_ids=experts,
        )

    for index in range(1 + run.gen_len):
        batch = run.prompt_len if index == 0 else 1
        ctx = run.prompt_len + index
        phase = "prefill" if index == 0 else "decode"
        ops = build_iteration_ops(model, batch, ctx, consts, cost)
        first_gpu = len(ops)
        if run.offload_layers:
            cut = model.layers - run.offload_layers
            first_gpu = next(
                i for i, o in enumerate(ops) if o.layer is None or o.layer >= cut
            )
            for o in ops[first_gpu:]:
                o.backend = Backend.OPENCL_GPU

        # Expert draws: the layer's router picks once per iteration; the
        # three gated operators share the selection.
        layer_ids: dict[int, tuple[int, ...]] = {}
        layer_dist: dict[int, float] = {}
        layer_faults: dict[int, int] = {}
        if model.moe:
            for L in range(model.layers):
                ids = tuple(rng.sample(range(model.n_expert), model.experts_per_token))
                layer_ids[L] = ids
                if phase == "decode":
                    d = index - 1  # decode ordinal
                    dists = [
                        d - expert_last[L][e] if e in expert_last[L] else d + 1 for e in ids
                    ]
                    avg = sum(dists) / len(dists)
                    layer_dist[L] = avg
                    layer_faults[L] = sum(1 for x in dists if x > cost.expert_resident_iters)
                    for e in ids:
                        expert_last[L][e] = d
                    for kind in ("up", "gate", "down"):
                        schedule[f"ffn_moe_{kind}-{L}"].append(ids)
                        distances[f"ffn_moe_{kind}-{L}"].append(avg)

        token_enter_ts = cursor
        emit(ProbeKind.TOKEN_ENTER, token_enter_ts, tids[0], TokenPayload(batch))
        t = token_enter_ts + prelude

        dag = ProfDag(iteration=index, pmc_specs=CANONICAL_PMC_SPECS)
        segments: list[tuple[str, list[_PlannedOp]]] = []
        if first_gpu > 0:
            segments.append((_GUID_CPU, ops[:first_gpu]))
        if first_gpu < len(ops):
            segments.append((_GUID_GPU, ops[first_gpu:]))

        order = 0
        for guid, seg_ops in segments:
            emit(ProbeKind.GRAPH_ENTER, t, tids[0], GraphPayload(guid))
            for op in seg_ops:
                elapsed = int(op.units * cost.ns_per_unit) + cost.op_overhead_ns
                faults = 0
                experts = None
                if op.gated:
                    experts = layer_ids[op.layer]
                    if op.layer in layer_dist:
                        elapsed += int(cost.expert_miss_penalty_ns * layer_dist[op.layer])
                        faults = layer_faults[op.layer]
                cpu_op = op.backend is Backend.CPU
                op_tids = tids if cpu_op else tids[:1]
                with_pmc = flags.pmc and cpu_op
                totals = (
                    _op_counters(op, elapsed, cost, stalled, faults) if with_pmc else None
                )
                enters, exits = [], []
                for j, tid in enumerate(op_tids):
                    if j == 0:
                        t_in, t_out = t, t + elapsed
                    else:
                        t_in = t + rng.randrange(0, max(1, elapsed // 4))
                        t_out = t + elapsed - rng.randrange(0, max(1, elapsed // 4))
                    pmc_in = pmc_out = None
                    if with_pmc:
                        share = [
                            totals[c] // len(op_tids)
                            + (1 if j < totals[c] % len(op_tids) else 0)
                            for c in range(n_pmc)
                        ]
                        pmc_in = tuple(counters[tid])
                        for c in range(n_pmc):
                            counters[tid][c] += share[c]
                        pmc_out = tuple(counters[tid])
                    enters.append((t_in, tid, op_payload(op, pmc_in, experts)))
                    exits.append((t_out, tid, op_payload(op, pmc_out, experts)))
                for t_in, tid, payload in sorted(enters, key=lambda x: (x[0], x[1])):
                    emit(ProbeKind.OP_ENTER, t_in, tid, payload)
                for t_out, tid, payload in sorted(exits, key=lambda x: (x[0], x[1])):
                    emit(ProbeKind.OP_EXIT, t_out, tid, payload)

                total_map = (
                    {s.name: v for s, v in zip(CANONICAL_PMC_SPECS, totals)}
                    if with_pmc else None
                )
                dag.nodes[op.addr] = DagNode(
                    addr=op.addr,
                    name=op.name if flags.str_parse else "",
                    op_type=op.op_type,
                    backend=op.backend,
                    dims=op.dims if flags.str_parse else None,
                    order=order,
                    elapsed_ns=elapsed,
                    pmc_totals=total_map,
                )
                order += 1
                t += elapsed
            emit(ProbeKind.GRAPH_EXIT, t, tids[0], GraphPayload(guid))
        if flags.str_parse:
            for op in ops:
                for src in op.srcs:
                    if src not in dag.nodes:
                        dag.nodes[src] = DagNode(addr=src, is_constant=True)
                    key = (src, op.addr)
                    dag.edges[key] = dag.edges.get(key, 0) + 1

        token_exit_ts = t + postlude
        emit(ProbeKind.TOKEN_EXIT, token_exit_ts, tids[0], TokenPayload(batch))
        duration = token_exit_ts - token_enter_ts
        if index == 0:
            ttft = duration
        else:
            tpot.append(duration)
        gt_iters.append(
            GtIteration(
                index=index,
                phase=phase,
                batch_size=batch,
                enter_ts=token_enter_ts,
                exit_ts=token_exit_ts,
                duration_ns=duration,
                dag=dag,
            )
        )
        cursor = token_exit_ts + cost.inter_token_gap_ns

    if run.interference is not None:
        victim = tids[run.interference.victim_index]
        for i, tid in enumerate(tids):
            emit(
                ProbeKind.SCHED_SWITCH,
                _BASE_TS - 5_000 + i * 10,
                tid,
                SchedPayload(prev_tid=0, next_tid=tid, prev_state=0),
            )
        for start, end in run.interference.periods:
            emit(
                ProbeKind.SCHED_SWITCH,
                _BASE_TS + start,
                victim,
                SchedPayload(prev_tid=victim, next_tid=_FOREIGN_TID, prev_state=1),
            )
            emit(
                ProbeKind.SCHED_SWITCH,
                _BASE_TS + end,
                victim,
                SchedPayload(prev_tid=_FOREIGN_TID, next_tid=victim, prev_state=0),
            )

    events.sort(key=lambda e: e.ts_ns)  # stable: same-ts events keep build order
    for seq, event in enumerate(events):
        event.seq = seq

    dropped_seqs: list[int] = []
    if run.drop_rate > 0:
        kept = []
        for event in events:
            droppable = event.kind in (ProbeKind.OP_ENTER, ProbeKind.OP_EXIT)
            if droppable and rng.random() < run.drop_rate:
                dropped_seqs.append(event.seq)
            else:
                kept.append(event)
        events = kept

    backend_names = {_GUID_CPU: "CPU"}
    if run.offload_layers:
        backend_names[_GUID_GPU] = "OpenCL-GPU"
    header = SessionHeader(
        pid=_PID,
        nthreads=run.nthreads,
        flags=replace(flags),
        pmc_specs=CANONICAL_PMC_SPECS,
        inference_tids=tuple(tids),
        qos_target_tps=run.qos_target_tps,
        backend_names=backend_names,
        moe=MoeInfo(model.n_expert, model.experts_per_token) if model.moe else None,
        dropped=len(dropped_seqs),
    )
    session = TraceSession(header=header, events=events)
    truth = GroundTruth(
        iterations=gt_iters,
        ttft_ns=ttft,
        tpot_ns=tpot,
        expert_schedule=schedule,
        expert_avg_distance=distances,
        dropped_seqs=dropped_seqs,
        token_overhead_ns=cost.token_overhead_ns,
    )
    return session, truth
