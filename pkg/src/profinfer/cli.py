"""Command line interface.

Subcommands mirror the library layers: ``synth`` writes a session, ``dag``
/ ``timeline`` / ``stats`` are the three analysis views over one, ``trace``
plans probe attachments and decodes captured byte streams, ``validate``
checks a session file.  Exit codes: 0 success, 1 analysis/session error,
2 usage or unreadable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import dag as dag_mod
from . import events, stats, synth, timeline, tracer
from .errors import DegenerateFitError, MetricUnavailableError, MissingCounterError, ProfInferError
from .ingest import Phase, ingest


def _load_session(path: str) -> events.TraceSession:
    data = Path(path).read_bytes()
    if data[:4] == events._BINARY_MAGIC:
        return events.session_from_binary(data)
    return events.session_from_jsonl(data)


def _write_bytes(data: bytes, out: str) -> None:
    if out == "-":
        sys.stdout.buffer.write(data)
    else:
        Path(out).write_bytes(data)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = config_mod.load_config(args.config)
    if args.model is not None:
        cfg.model = config_mod.MODEL_PRESETS[args.model]
    run_over = {
        "prompt_len": args.prompt_len,
        "gen_len": args.gen_len,
        "nthreads": args.threads,
        "drop_rate": args.drop_rate,
        "offload_layers": args.offload_layers,
        "seed": args.seed,
    }
    cfg.run = dataclasses.replace(
        cfg.run, **{k: v for k, v in run_over.items() if v is not None}
    )
    if args.interference:
        periods = []
        for spec in args.interference:
            try:
                start, end = (int(v) for v in spec.split(":"))
            except ValueError:
                raise ProfInferError(
                    f"interference period must be START_NS:END_NS, got {spec!r}"
                ) from None
            periods.append((start, end))
        cfg.run = dataclasses.replace(cfg.run, interference=tuple(periods))
    if args.no_str:
        cfg.trace.flags = dataclasses.replace(cfg.trace.flags, str_parse=False)
    if args.no_pmc:
        cfg.trace.flags = dataclasses.replace(cfg.trace.flags, pmc=False)

    session, _ = synth.generate_session(cfg.model, config_mod.make_run_spec(cfg), seed=cfg.run.seed)
    if args.binary or cfg.trace.binary:
        _write_bytes(events.session_to_binary(session), args.output)
    else:
        _write_bytes(events.session_to_jsonl(session), args.output)
    if args.output != "-":
        n = len(session.events)
        print(f"wrote {n} events ({cfg.model.name}, {cfg.run.gen_len} tokens) to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _cmd_validate(args: argparse.Namespace) -> int:
    session = _load_session(args.input)
    issues = events.validate_session(session)
    for issue in issues:
        print(issue)
    if issues:
        print(f"{len(issues)} issue(s) found")
        return 1
    print(f"ok: {len(session.events)} events, {session.header.nthreads} threads")
    return 0


# ---------------------------------------------------------------------------
# dag
# ---------------------------------------------------------------------------


def _cmd_dag(args: argparse.Namespace) -> int:
    session = _load_session(args.input)
    result = ingest(session)
    iteration = args.iteration
    if iteration is None:
        iteration = len(result.iterations) - 1
    dag = dag_mod.build_profdag(result, iteration)
    if args.format == "dot":
        out = dag_mod.export_dot(dag, metric=args.metric)
    else:
        out = json.dumps(dag_mod.export_json(dag), indent=2) + "\n"
    _write_bytes(out.encode(), args.output)
    for warning in dag.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# timeline
# ---------------------------------------------------------------------------


def _cmd_timeline(args: argparse.Namespace) -> int:
    session = _load_session(args.input)
    doc = timeline.build_timeline(session, sched_semantics=args.sched_semantics)
    _write_bytes(timeline.emit_chrome_trace(doc), args.output)
    if args.output != "-":
        tracks = len(doc.tracks) + len(doc.states)
        print(f"wrote {tracks} tracks to {args.output} (load in Perfetto / chrome://tracing)")
    return 0


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def _fmt_bytes(n: float) -> str:
    for unit in ("B", "KB", "MB", "GB"):
        if abs(n) < 1024 or unit == "GB":
            return f"{n:.1f} {unit}"
        n /= 1024
    return f"{n:.1f} GB"


def _cmd_stats(args: argparse.Namespace) -> int:
    session = _load_session(args.input)
    result = ingest(session)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    patterns = tuple(p for p in args.patterns.split(",") if p)
    render = None
    if not args.no_figures:
        from .figures import render_plot_spec as render

    written: list[str] = []

    def emit(name: str, spec: dict) -> None:
        spec_path = outdir / f"{name}.json"
        spec_path.write_text(json.dumps(spec, indent=2) + "\n")
        written.append(spec_path.name)
        if render is not None:
            png = outdir / f"{name}.png"
            render(spec, png)
            written.append(png.name)

    series = stats.token_series(result, patterns)
    stats.write_tokens_csv(series, outdir / "tokens.csv")
    written.append("tokens.csv")
    emit("tokens", stats.token_plot_spec(series))
    print(f"ttft: {series.ttft_ns / 1e6:.3f} ms")
    tpot = series.tpot_ns
    if tpot:
        mean = series.mean_tpot_ns
        print(f"mean tpot: {mean / 1e6:.3f} ms ({1e9 / mean:.1f} tok/s over {len(tpot)} tokens)")

    phase = None if args.phase == "all" else args.phase
    samples = stats.matmul_samples(result, phase)
    stats.write_matmuls_csv(samples, outdir / "matmuls.csv")
    written.append("matmuls.csv")
    fit = None
    if len(samples) >= 2:
        try:
            fit = stats.linear_fit(
                [float(s.complexity) for s in samples], [float(s.elapsed_ns) for s in samples]
            )
            print(
                f"matmul fit: {fit.slope:.4f} ns/unit + {fit.intercept:.0f} ns "
                f"(r2={fit.r_squared:.4f}, n={fit.n})"
            )
        except DegenerateFitError:
            pass
    emit("matmuls", stats.matmul_plot_spec(samples, fit))

    decode_ns = sum(it.duration_ns for it in result.iterations if it.phase is Phase.DECODE)
    names = [s.name for s in session.header.pmc_specs]
    totals = dict.fromkeys(names, 0)
    saw_pmc = False
    for span in result.spans:
        if span.iteration is None:
            continue
        if result.iterations[span.iteration].phase is not Phase.DECODE:
            continue
        delta = span.pmc_delta()
        if delta is None:
            continue
        saw_pmc = True
        for name, d in zip(names, delta):
            totals[name] += d
    if saw_pmc and decode_ns > 0:
        try:
            traffic = stats.memory_traffic(totals, session.header.pmc_specs, decode_ns)
            print(
                f"decode memory: {_fmt_bytes(traffic.bytes_read)} read, "
                f"{_fmt_bytes(traffic.bytes_written)} written, "
                f"{traffic.bandwidth_bps / 1e6:.1f} MB/s"
            )
        except MissingCounterError:
            pass
        try:
            print(f"decode stalled: {stats.stalled_ratio(totals) * 100:.1f}% of cycles")
        except (MissingCounterError, ValueError):
            pass

    expert_op = args.expert_op
    if expert_op is None:
        gated = sorted(
            {
                s.payload.op_name
                for s in result.spans
                if s.payload.op_type is events.OpType.MUL_MAT_ID and s.payload.op_name
            }
        )
        expert_op = gated[0] if gated else None
    if expert_op is not None:
        try:
            matrix = stats.expert_analysis(result, expert_op)
        except MetricUnavailableError:
            if args.expert_op is not None:
                raise
        else:
            stats.write_experts_csv(matrix, outdir / "experts.csv")
            written.append("experts.csv")
            emit("experts", stats.expert_plot_spec(matrix))
            k = sum(matrix.density.values())
            print(
                f"experts ({expert_op}): {matrix.total_experts} total, "
                f"{k:.1f} active per token"
            )

    print(f"wrote {', '.join(written)} in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


def _cmd_trace(args: argparse.Namespace) -> int:
    cfg = config_mod.load_config(args.config)
    levels = tuple(args.levels.split(",")) if args.levels else cfg.trace.levels
    plan = tracer.build_probe_plan(
        levels, cfg.trace.flags, tuple(s.name for s in cfg.pmc_specs)
    )
    if args.input is not None:
        data = Path(args.input).read_bytes()
        session = tracer.poll_and_decode(data, pmc_specs=cfg.pmc_specs)
        events.write_session(session, sys.stdout.buffer if args.output == "-" else args.output)
        if args.output != "-":
            print(f"decoded {len(session.events)} events to {args.output}")
        return 0
    print(tracer.describe_plan(plan))
    print(f"{len(plan.attachments)} attachment points")
    if args.dry_run:
        return 0
    pid = args.pid if args.pid is not None else cfg.trace.pid
    if pid is None:
        raise ProfInferError("live tracing needs --pid (or trace.pid in the config)")
    tracer.start_live_trace(plan, pid)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="profinfer",
        description="Fine-grained inference profiling: token, graph and operator level.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session with known ground truth")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--model", choices=sorted(config_mod.MODEL_PRESETS))
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--gen-len", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--offload-layers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--interference", action="append", metavar="START_NS:END_NS")
    p.add_argument("--no-str", action="store_true", help="drop tensor names/dims/sources")
    p.add_argument("--no-pmc", action="store_true", help="drop hardware counter readings")
    p.add_argument("--binary", action="store_true", help="write the binary container")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check a session file for structural problems")
    p.add_argument("input")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("dag", help="export the operator graph of one iteration")
    p.add_argument("input")
    p.add_argument("--iter", dest="iteration", type=int, help="iteration index (default: last)")
    p.add_argument("--metric", default="elapsed", help="node coloring metric")
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=_cmd_dag)

    p = sub.add_parser("timeline", help="export a Chrome/Perfetto trace")
    p.add_argument("input")
    p.add_argument("--sched-semantics", choices=timeline.SCHED_SEMANTICS, default="classic")
    p.add_argument("-o", "--output", default="trace.json")
    p.set_defaults(func=_cmd_timeline)

    p = sub.add_parser("stats", help="write CSV tables, plot specs and figures")
    p.add_argument("input")
    p.add_argument("--outdir", default="profstat-out")
    p.add_argument("--patterns", default="kq,kqv", help="comma-separated op-name patterns")
    p.add_argument("--phase", choices=("prefill", "decode", "all"), default="decode",
                   help="which iterations feed the matmul samples")
    p.add_argument("--expert-op", help="gated op to analyze (default: first one found)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("trace", help="plan probe attachments / decode captured streams")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--levels", help="comma-separated subset of token,graph,op,kernel")
    p.add_argument("--pid", type=int, help="process to attach to (live mode)")
    p.add_argument("--input", help="captured perf-buffer stream to decode")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    p.set_defaults(func=_cmd_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProfInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: cannot read {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
