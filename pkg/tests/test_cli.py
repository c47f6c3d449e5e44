import json

import pytest

from flashnpu.cli import main

TINY_MODEL = """
[model]
name = tiny
layer_count = 2
d_model = 512
ffn_dim = 2048
head_count = 8
vocab_size = 4096
"""


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def test_run_smoke(capsys):
    code, out = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b")
    assert code == 0
    rec = json.loads(out)
    assert rec["report"]["tokens_per_s"] > 0
    assert rec["config"]["flash"]["channel_num"] == 8  # reproducibility header


def test_run_deterministic_output(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        code, _ = run_cli(capsys, "run", "--preset", "S", "--model",
                          "opt-6.7b", "--seed", "7", "--out", str(path))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_strategy_c_not_slower_than_b(capsys):
    speeds = {}
    for strat in ("b", "c"):
        _, out = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b",
                         "--strategy", strat)
        speeds[strat] = json.loads(out)["report"]["tokens_per_s"]
    assert speeds["c"] >= speeds["b"]


def test_tile_override_slower_than_default(capsys):
    _, out_default = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b")
    _, out_tile = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b",
                          "--tile", "128x4096")
    fast = json.loads(out_default)["report"]["tokens_per_s"]
    slow = json.loads(out_tile)["report"]["tokens_per_s"]
    assert slow < fast


def test_custom_config_and_model_files(tmp_path, capsys):
    cfg_path = tmp_path / "hw.cfg"
    from flashnpu.hwconfig import dumps_config, preset
    cfg_path.write_text(dumps_config(preset("S")))
    model_path = tmp_path / "tiny.model"
    model_path.write_text(TINY_MODEL)
    code, out = run_cli(capsys, "run", "--config", str(cfg_path),
                        "--model", str(model_path))
    assert code == 0
    assert json.loads(out)["report"]["model"] == "tiny"


def test_plan_and_layout_export(tmp_path, capsys):
    model_path = tmp_path / "tiny.model"
    model_path.write_text(TINY_MODEL)
    plan, layout = tmp_path / "plan.txt", tmp_path / "layout.tsv"
    code, _ = run_cli(capsys, "run", "--preset", "S", "--model", str(model_path),
                      "--plan", str(plan), "--layout", str(layout))
    assert code == 0
    assert plan.read_text().startswith("# L0.q_proj")
    assert layout.read_text().startswith("kind\tmatrix")


def test_trace_export(tmp_path, capsys):
    trace = tmp_path / "events.tsv"
    code, _ = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b",
                      "--trace", str(trace), "--trace-rounds", "4")
    assert code == 0
    lines = trace.read_text().strip().split("\n")
    assert len(lines) > 10
    ts, resource, action, req = lines[0].split("\t")
    int(ts)
    assert action in ("transfer-in", "array-read", "register-move",
                      "compute", "transfer-out", "read-payload")


def test_sweep_rows_and_csv(tmp_path, capsys):
    csv = tmp_path / "sweep.csv"
    code, out = run_cli(capsys, "sweep", "--preset", "S", "--model", "opt-6.7b",
                        "--axis", "chips", "--range", "1,2", "--csv", str(csv))
    assert code == 0
    rec = json.loads(out)
    assert [r["point"] for r in rec["rows"]] == [1, 2]
    assert rec["rows"][1]["tokens_per_s"] >= rec["rows"][0]["tokens_per_s"]
    header, *rows = csv.read_text().strip().split("\n")
    assert header == "point,tokens_per_s,utilization"
    assert len(rows) == 2


def test_sweep_single_point(capsys):
    code, out = run_cli(capsys, "sweep", "--preset", "S", "--model", "opt-6.7b",
                        "--axis", "channels", "--range", "4")
    assert code == 0
    assert len(json.loads(out)["rows"]) == 1


def test_ablate_slicing_speedup(capsys):
    code, out = run_cli(capsys, "ablate-slicing", "--preset", "S",
                        "--model", "opt-6.7b")
    assert code == 0
    rec = json.loads(out)
    assert rec["speedup"] > 1.0


def test_ablate_tiling_speedup(capsys):
    code, out = run_cli(capsys, "ablate-tiling", "--preset", "S",
                        "--model", "opt-6.7b")
    assert code == 0
    assert json.loads(out)["speedup"] > 1.0


def test_ablate_tile_size(capsys):
    code, out = run_cli(capsys, "ablate-tile-size", "--preset", "S",
                        "--model", "opt-6.7b", "--tiles", "128x4096")
    assert code == 0
    rec = json.loads(out)
    assert set(rec["results"]) == {"256x2048", "128x4096"}


def test_bad_model_name_is_clean_error(capsys):
    code = main(["run", "--preset", "S", "--model", "gpt-5"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_bad_tile_spec(capsys):
    code = main(["run", "--preset", "S", "--model", "opt-6.7b",
                 "--tile", "257x2048"])
    assert code == 1


def test_output_dir_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FLASHNPU_OUTPUT_DIR", str(tmp_path))
    code, _ = run_cli(capsys, "run", "--preset", "S", "--model", "opt-6.7b",
                      "--out", "rel.json")
    assert code == 0
    assert (tmp_path / "rel.json").exists()
