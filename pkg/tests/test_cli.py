"""End-to-end CLI runs through main()."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from profinfer.cli import main

DATA = Path(__file__).parent / "data"


@pytest.fixture
def session_file(tmp_path):
    path = tmp_path / "session.jsonl"
    assert main(["synth", "--seed", "0", "-o", str(path)]) == 0
    return path


def test_synth_writes_valid_session(session_file, capsys):
    assert main(["validate", str(session_file)]) == 0
    out = capsys.readouterr().out
    assert "ok: 1404 events, 2 threads" in out


def test_synth_binary_container(tmp_path):
    path = tmp_path / "session.bin"
    assert main(["synth", "--seed", "0", "--binary", "-o", str(path)]) == 0
    assert path.read_bytes()[:4] == b"PFSN"
    assert main(["validate", str(path)]) == 0


def test_synth_stdout_prints_summary(tmp_path, capsys):
    path = tmp_path / "s.jsonl"
    main(["synth", "--seed", "0", "--model", "moe60x4", "--gen-len", "2", "-o", str(path)])
    out = capsys.readouterr().out
    assert "(moe60x4, 2 tokens)" in out


def test_synth_rejects_bad_interference(capsys):
    assert main(["synth", "--interference", "1000-2000", "-o", "/dev/null"]) == 1
    assert "START_NS:END_NS" in capsys.readouterr().err


def test_validate_reports_issues(tmp_path, capsys):
    path = tmp_path / "session.jsonl"
    main(["synth", "--seed", "0", "--gen-len", "1", "-o", str(path)])
    lines = path.read_text().splitlines()
    doc = json.loads(lines[1])
    doc["ts_ns"] = -5
    lines[1] = json.dumps(doc)
    path.write_text("\n".join(lines) + "\n")
    assert main(["validate", str(path)]) == 1
    out = capsys.readouterr().out
    assert "issue(s) found" in out
    assert "negative timestamp" in out


def test_dag_matches_golden_dot(session_file, tmp_path):
    out = tmp_path / "dag.dot"
    assert main(["dag", str(session_file), "--iter", "1", "--metric", "elapsed",
                 "-o", str(out)]) == 0
    assert out.read_text() == (DATA / "dense2_iter1.dot").read_text()


def test_dag_json_export(session_file, tmp_path):
    out = tmp_path / "dag.json"
    assert main(["dag", str(session_file), "--format", "json", "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["iteration"] == 8  # defaults to the last iteration
    assert any(n.get("name") == "lm_head" for n in doc["nodes"])


def test_dag_unknown_metric_exits_nonzero(session_file, capsys):
    assert main(["dag", str(session_file), "--metric", "watts"]) == 1
    assert "available" in capsys.readouterr().err


def test_timeline_export(session_file, tmp_path):
    out = tmp_path / "trace.json"
    assert main(["timeline", str(session_file), "-o", str(out)]) == 0
    trace = json.loads(out.read_text())
    xs = [e for e in trace["traceEvents"] if e["ph"] == "X"]
    cats = {e["cat"] for e in xs}
    assert {"token", "graph", "op"} <= cats


def test_stats_writes_tables_figures_and_specs(session_file, tmp_path, capsys):
    outdir = tmp_path / "report"
    assert main(["stats", str(session_file), "--outdir", str(outdir)]) == 0
    names = {p.name for p in outdir.iterdir()}
    assert {"tokens.csv", "matmuls.csv"} <= names
    assert {"tokens.png", "matmuls.png"} <= names
    assert {"tokens.json", "matmuls.json"} <= names
    spec = json.loads((outdir / "tokens.json").read_text())
    assert spec["view"] == "tokens"
    out = capsys.readouterr().out
    assert "ttft" in out
    assert "mean tpot" in out
    assert "fit:" in out
    assert "stalled" in out


def test_stats_no_figures(session_file, tmp_path):
    outdir = tmp_path / "report"
    assert main(["stats", str(session_file), "--outdir", str(outdir), "--no-figures"]) == 0
    names = {p.name for p in outdir.iterdir()}
    assert "tokens.csv" in names
    assert not any(n.endswith(".png") for n in names)


def test_stats_expert_outputs_for_moe(tmp_path, capsys):
    path = tmp_path / "moe.jsonl"
    main(["synth", "--seed", "0", "--model", "moe60x4", "--gen-len", "4", "-o", str(path)])
    outdir = tmp_path / "report"
    assert main(["stats", str(path), "--outdir", str(outdir)]) == 0
    assert (outdir / "experts.csv").exists()
    assert "experts (ffn_moe_" in capsys.readouterr().out


def test_stats_unknown_expert_op_fails(session_file, tmp_path, capsys):
    outdir = tmp_path / "report"
    assert main(["stats", str(session_file), "--outdir", str(outdir),
                 "--expert-op", "ffn_moe_up-0"]) == 1
    assert "no gated" in capsys.readouterr().err


def test_trace_dry_run_prints_plan(capsys):
    assert main(["trace", "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "12 attachment points" in out
    assert "llama_decode" in out
    assert "uretprobe" in out


def test_trace_dry_run_levels_subset(capsys):
    assert main(["trace", "--dry-run", "--levels", "token,kernel"]) == 0
    out = capsys.readouterr().out
    assert "4 attachment points" in out


def test_trace_decodes_stream_input(session_file, tmp_path):
    from profinfer import wire
    from profinfer.cli import _load_session

    session = _load_session(str(session_file))
    raw = tmp_path / "capture.bin"
    raw.write_bytes(wire.encode_stream(session.events, session.header))
    out = tmp_path / "decoded.jsonl"
    assert main(["trace", "--input", str(raw), "-o", str(out)]) == 0
    assert main(["validate", str(out)]) == 0


def test_trace_live_without_bcc_fails_cleanly(capsys):
    assert main(["trace", "--pid", "4242"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_input_file_is_exit_2(capsys):
    assert main(["validate", "/nonexistent/session.jsonl"]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_config_file_drives_synth(tmp_path):
    cfg = tmp_path / "p.toml"
    cfg.write_text("[model]\npreset = \"qwen2\"\n\n[run]\ngen_len = 1\nseed = 3\n")
    out = tmp_path / "s.jsonl"
    assert main(["synth", "--config", str(cfg), "-o", str(out)]) == 0
    header = json.loads(out.read_text().splitlines()[0])["profinfer_header"]
    assert header["nthreads"] == 2
    # 2 iterations x (44 ops x 2 threads x 2 events + 2 graph + 2 token) + stream shape
    assert main(["dag", str(out), "--iter", "1", "-o", str(tmp_path / "d.dot")]) == 0
    dot = (tmp_path / "d.dot").read_text()
    assert "Qbias-0" in dot  # qwen adds explicit bias adds
