"""TOML config loading and validation."""

from __future__ import annotations

import pytest

from profinfer.config import (
    MODEL_PRESETS,
    load_config,
    make_run_spec,
    parse_config,
)
from profinfer.errors import ConfigError

FULL = """
[trace]
levels = ["token", "op"]
binary = true
sched_semantics = "kernel"

[trace.flags]
str = false
perf_buffer = true

[qos]
target_tps = 5.0
window = 8

[pmc]
counters = ["cycles", "l3d_cache_refill"]

[model]
preset = "moe60x4"
layers = 3

[run]
prompt_len = 16
gen_len = 32
nthreads = 4
drop_rate = 0.05
interference = [[1000, 2000], [5000, 6000]]
"""


def test_defaults():
    cfg = load_config(None)
    assert cfg.trace.levels == ("token", "graph", "op", "kernel")
    assert cfg.trace.flags.str_parse and cfg.trace.flags.pmc
    assert not cfg.trace.flags.perf_buffer
    assert cfg.qos.target_tps is None
    assert len(cfg.pmc_specs) == 5
    assert cfg.model.layers == 2
    assert cfg.run.gen_len == 8


def test_full_file(tmp_path):
    path = tmp_path / "profinfer.toml"
    path.write_text(FULL)
    cfg = load_config(path)
    assert cfg.trace.levels == ("token", "op")
    assert cfg.trace.binary is True
    assert cfg.trace.sched_semantics == "kernel"
    assert cfg.trace.flags.str_parse is False
    assert cfg.trace.flags.perf_buffer is True
    assert cfg.qos.target_tps == 5.0
    assert cfg.qos.window == 8
    assert [s.name for s in cfg.pmc_specs] == ["cycles", "l3d_cache_refill"]
    # preset applies first, explicit keys override it
    assert cfg.model.n_expert == 60
    assert cfg.model.layers == 3
    assert cfg.run.interference == ((1000, 2000), (5000, 6000))


def test_env_var_path(tmp_path, monkeypatch):
    path = tmp_path / "env.toml"
    path.write_text("[run]\ngen_len = 3\n")
    monkeypatch.setenv("PROFINFER_CONFIG", str(path))
    assert load_config().run.gen_len == 3


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[trace\n")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(bad)


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"tracing": {}}, "tracing"),
        ({"trace": {"level": []}}, "level"),
        ({"trace": {"flags": {"perf_bufer": True}}}, "perf_bufer"),
        ({"trace": {"levels": ["token", "opz"]}}, "opz"),
        ({"trace": {"sched_semantics": "loose"}}, "loose"),
        ({"qos": {"hysteresis": 1}}, "hysteresis"),
        ({"pmc": {"counters": ["tlb_miss"]}}, "tlb_miss"),
        ({"model": {"preset": "dense99"}}, "dense99"),
        ({"run": {"interference": [[1, 2, 3]]}}, "pairs"),
    ],
)
def test_rejects_unknown_or_invalid(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_presets_cover_paper_models():
    assert set(MODEL_PRESETS) == {"dense2", "qwen2", "gemma2", "moe60x4"}
    assert MODEL_PRESETS["moe60x4"].n_expert == 60
    assert MODEL_PRESETS["moe60x4"].experts_per_token == 4
    assert MODEL_PRESETS["qwen2"].qwen_style
    assert MODEL_PRESETS["gemma2"].gemma_style


def test_make_run_spec_carries_everything():
    path_free = parse_config(
        {
            "qos": {"target_tps": 7.5},
            "run": {"gen_len": 2, "nthreads": 3, "interference": [[10, 20]]},
            "trace": {"flags": {"pmc": False}},
        }
    )
    spec = make_run_spec(path_free)
    assert spec.gen_len == 2
    assert spec.nthreads == 3
    assert spec.qos_target_tps == 7.5
    assert spec.flags.pmc is False
    assert spec.interference.periods == ((10, 20),)
