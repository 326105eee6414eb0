"""TOML configuration for the CLI and trace pipeline.

A config file is optional everywhere; every knob has a default and the CLI
flags override the file.  The file path can also come from the
``PROFINFER_CONFIG`` environment variable.  Unknown keys are rejected
loudly rather than silently ignored — a typoed ``perf_bufer`` should not
cost anyone a debugging afternoon.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # py310
    import tomli as tomllib

from .errors import ConfigError
from .events import CANONICAL_PMC_SPECS, PmcSpec, TraceFlags
from .synth import InterferenceSpec, ModelSpec, RunSpec
from .timeline import SCHED_SEMANTICS
from .tracer import ALL_LEVELS

MODEL_PRESETS: dict[str, ModelSpec] = {
    "dense2": ModelSpec(),
    "qwen2": ModelSpec(name="qwen2", qwen_style=True),
    "gemma2": ModelSpec(name="gemma2", gemma_style=True),
    "moe60x4": ModelSpec(name="moe60x4", n_expert=60, experts_per_token=4),
}


@dataclass
class TraceConfig:
    levels: tuple[str, ...] = ALL_LEVELS
    binary: bool = False
    pid: int | None = None
    sched_semantics: str = "classic"
    flags: TraceFlags = field(default_factory=TraceFlags)


@dataclass
class QosConfig:
    target_tps: float | None = None
    window: int = 16
    margin: float = 0.2


@dataclass
class RunSettings:
    prompt_len: int = 4
    gen_len: int = 8
    nthreads: int = 2
    drop_rate: float = 0.0
    offload_layers: int = 0
    seed: int = 0
    interference: tuple[tuple[int, int], ...] = ()


@dataclass
class Config:
    trace: TraceConfig = field(default_factory=TraceConfig)
    qos: QosConfig = field(default_factory=QosConfig)
    pmc_specs: tuple[PmcSpec, ...] = CANONICAL_PMC_SPECS
    model: ModelSpec = field(default_factory=ModelSpec)
    run: RunSettings = field(default_factory=RunSettings)


_TOP_KEYS = ("trace", "qos", "pmc", "model", "run")
_TRACE_KEYS = ("levels", "binary", "pid", "sched_semantics", "flags")
_FLAG_KEYS = ("str", "pmc", "perf_buffer")
_QOS_KEYS = ("target_tps", "window", "margin")
_PMC_KEYS = ("counters",)
_MODEL_KEYS = (
    "preset",
    "name",
    "layers",
    "hidden",
    "heads",
    "kv_heads",
    "ffn",
    "vocab",
    "n_expert",
    "experts_per_token",
    "qwen_style",
    "gemma_style",
)
_RUN_KEYS = (
    "prompt_len",
    "gen_len",
    "nthreads",
    "drop_rate",
    "offload_layers",
    "seed",
    "interference",
)


def _check_keys(section: dict, valid: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(section) - set(valid))
    if unknown:
        raise ConfigError(
            f"unknown key(s) {', '.join(unknown)} in [{where}]; valid: {', '.join(valid)}"
        )


def parse_config(data: dict) -> Config:
    """Validate a parsed TOML document and build the config object."""
    _check_keys(data, _TOP_KEYS, "top level")
    cfg = Config()

    trace = data.get("trace", {})
    _check_keys(trace, _TRACE_KEYS, "trace")
    flags = trace.get("flags", {})
    _check_keys(flags, _FLAG_KEYS, "trace.flags")
    levels = tuple(trace.get("levels", ALL_LEVELS))
    bad = sorted(set(levels) - set(ALL_LEVELS))
    if bad:
        raise ConfigError(
            f"unknown probe level(s) {', '.join(bad)}; valid: {', '.join(ALL_LEVELS)}"
        )
    semantics = trace.get("sched_semantics", "classic")
    if semantics not in SCHED_SEMANTICS:
        raise ConfigError(
            f"sched_semantics must be one of {', '.join(SCHED_SEMANTICS)}, got {semantics!r}"
        )
    cfg.trace = TraceConfig(
        levels=levels,
        binary=bool(trace.get("binary", False)),
        pid=trace.get("pid"),
        sched_semantics=semantics,
        flags=TraceFlags(
            str_parse=bool(flags.get("str", True)),
            pmc=bool(flags.get("pmc", True)),
            perf_buffer=bool(flags.get("perf_buffer", False)),
        ),
    )

    qos = data.get("qos", {})
    _check_keys(qos, _QOS_KEYS, "qos")
    cfg.qos = QosConfig(
        target_tps=qos.get("target_tps"),
        window=int(qos.get("window", 16)),
        margin=float(qos.get("margin", 0.2)),
    )

    pmc = data.get("pmc", {})
    _check_keys(pmc, _PMC_KEYS, "pmc")
    if "counters" in pmc:
        by_name = {s.name: s for s in CANONICAL_PMC_SPECS}
        specs = []
        for name in pmc["counters"]:
            if name not in by_name:
                raise ConfigError(
                    f"unknown counter {name!r}; known: {', '.join(by_name)}"
                )
            specs.append(by_name[name])
        cfg.pmc_specs = tuple(specs)

    model = dict(data.get("model", {}))
    _check_keys(model, _MODEL_KEYS, "model")
    preset = model.pop("preset", None)
    if preset is not None:
        if preset not in MODEL_PRESETS:
            raise ConfigError(
                f"unknown model preset {preset!r}; known: {', '.join(MODEL_PRESETS)}"
            )
        cfg.model = MODEL_PRESETS[preset]
    if model:
        cfg.model = dataclasses.replace(cfg.model, **model)

    run = dict(data.get("run", {}))
    _check_keys(run, _RUN_KEYS, "run")
    interference = tuple(tuple(p) for p in run.pop("interference", ()))
    for p in interference:
        if len(p) != 2:
            raise ConfigError(f"interference periods are [start_ns, end_ns] pairs, got {list(p)}")
    cfg.run = RunSettings(interference=interference, **run)
    return cfg


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Read a config file (or PROFINFER_CONFIG, or built-in defaults)."""
    if path is None:
        path = os.environ.get("PROFINFER_CONFIG")
    if path is None:
        return Config()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    return parse_config(data)


def make_run_spec(cfg: Config) -> RunSpec:
    """Combine the run, trace and qos sections into a generator run spec."""
    interference = None
    if cfg.run.interference:
        interference = InterferenceSpec(periods=cfg.run.interference)
    return RunSpec(
        prompt_len=cfg.run.prompt_len,
        gen_len=cfg.run.gen_len,
        nthreads=cfg.run.nthreads,
        flags=cfg.trace.flags,
        drop_rate=cfg.run.drop_rate,
        offload_layers=cfg.run.offload_layers,
        interference=interference,
        qos_target_tps=cfg.qos.target_tps,
    )
