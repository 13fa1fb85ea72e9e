import json

import numpy as np
import pytest

from actgradq import codec
from actgradq.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_memory_table_megatron(capsys):
    code, out, _ = run(capsys, "memory-table", "--scheme", "megatron")
    assert code == 0
    assert "28U" in out and "AGoQ" not in out


def test_memory_table_json(capsys):
    code, out, _ = run(capsys, "memory-table", "--format", "json")
    data = json.loads(out)
    assert data["schemes"]["AGOQ"]["Total"] == 7.75
    assert data["schemes"]["COAT"]["Total"] == 16.5


def test_dbca_plan(capsys):
    code, out, _ = run(capsys, "dbca-plan", "4", "--format", "json", "--reuse-onto", "8")
    data = json.loads(out)
    assert code == 0
    assert data["assigned_bits"] == [4, 5, 6, 8]
    assert data["peak_check"]["verdict"] == "PASS"
    assert data["reuse_check"]["verdict"] == "PASS"


def test_allreduce_naive_overflows(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, out, _ = run(capsys, "allreduce-sim", "8", "--protocol", "naive", "--const", "64",
                       "--elements", "1024", "--format", "json", "--trace", str(trace))
    data = json.loads(out)
    assert data["overflow_count"] > 0 and data["result_first"] == 64.0
    lines = trace.read_text().strip().split("\n")
    assert len(lines) == data["messages"]


def test_allreduce_decomposed_exact(capsys):
    code, out, _ = run(capsys, "allreduce-sim", "8", "--const", "64", "--elements", "1024",
                       "--format", "json")
    data = json.loads(out)
    assert data["overflow_count"] == 0 and data["result_first"] == 512.0
    assert data["max_abs_error_vs_oracle"] == 0.0


def test_quantize_dump_and_ordering(capsys, tmp_path):
    path = tmp_path / "q.agqt"
    _, out4, _ = run(capsys, "quantize", "--bits", "4", "--format", "json", "--dump", str(path))
    _, out8, _ = run(capsys, "quantize", "--bits", "8", "--format", "json")
    d4, d8 = json.loads(out4), json.loads(out8)
    assert d8["mae"] < d4["mae"]
    assert d4["dump_roundtrip_exact"] is True
    assert codec.load(path).bit_width == 4


def test_quantize_zeros_and_file_input(capsys, tmp_path):
    _, out, _ = run(capsys, "quantize", "--const", "0", "--format", "json")
    assert json.loads(out)["mae"] == 0
    f = tmp_path / "x.npy"
    np.save(f, np.arange(10.0))
    _, out, _ = run(capsys, "quantize", "--input", str(f), "--bits", "8", "--format", "json")
    assert json.loads(out)["elements"] == 10


def test_error_sweep_csv(capsys):
    code, out, _ = run(capsys, "error-sweep", "--layer", "rmsnorm", "--trials", "3", "--dim", "8",
                       "--format", "csv")
    lines = out.strip().split("\n")
    assert lines[0].startswith("layer,case,dim,epsilon_q,trial,empirical,bound,ratio")
    assert len(lines) == 1 + 2 * 3 * 3


def test_layer_error_qkv(capsys):
    code, out, _ = run(capsys, "layer-error", "--quantize-qkv", "--format", "json")
    roles = json.loads(out)["roles"]
    assert roles["ATTENTION"]["normalized_L2"] > 0


def test_deterministic_outputs(capsys):
    a = run(capsys, "error-sweep", "--layer", "silu", "--trials", "4", "--seed", "3", "--format", "json")[1]
    b = run(capsys, "error-sweep", "--layer", "silu", "--trials", "4", "--seed", "3", "--format", "json")[1]
    c = run(capsys, "error-sweep", "--layer", "silu", "--trials", "4", "--seed", "4", "--format", "json")[1]
    assert a == b and a != c


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bits": 8, "format": "json", "elements": 256}))
    d = json.loads(run(capsys, "quantize", "--config", str(cfg))[1])
    assert d["bit_width"] == 8 and d["elements"] == 256
    d = json.loads(run(capsys, "quantize", "--config", str(cfg), "--bits", "5")[1])
    assert d["bit_width"] == 5


def test_out_and_plot(capsys, tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "table.csv"
    code, stdout, _ = run(capsys, "memory-table", "--format", "csv", "--out", str(out), "--plot")
    assert code == 0 and stdout == ""
    assert out.read_text().startswith("Scheme,QKV")
    assert (tmp_path / "table.png").stat().st_size > 0


@pytest.mark.parametrize("argv", [
    ["quantize", "--bits", "3"],
    ["dbca-plan", "4", "--micro-batches", "3"],
    ["bogus"],
    [],
    ["allreduce-sim", "0"],
    ["quantize", "--config", "/nonexistent.json"],
    ["layer-error", "--policy", "full", "--quantize-qkv"],
])
def test_errors_are_json_on_stderr(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code != 0 and out == ""
    data = json.loads(err)
    assert set(data) == {"error", "message"}


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"nope": 1}')
    code, _, err = run(capsys, "memory-table", "--config", str(cfg))
    assert code != 0 and "nope" in json.loads(err)["message"]


@pytest.mark.parametrize("argv", [["--format", "json", "dbca-plan", "4"], ["dbca-plan", "4", "--format", "json"]])
def test_common_flags_either_side(capsys, argv):
    code, out, _ = run(capsys, *argv)
    assert code == 0 and json.loads(out)["assigned_bits"] == [4, 5, 6, 8]


def test_config_common_key_and_flag_before_command(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"format": "csv"}))
    _, out, _ = run(capsys, "--config", str(cfg), "memory-table")
    assert out.startswith("Scheme,")
    _, out, _ = run(capsys, "--format", "text", "--config", str(cfg), "memory-table")
    assert "28U" in out
