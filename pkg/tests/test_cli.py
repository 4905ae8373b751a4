import csv
import json

import numpy as np
import pytest

from leanconv.cli import DEFAULTS, build_parser, main, resolve_config
from leanconv.network.checkpoint import load_checkpoint
from leanconv.records import ResultRecord, config_hash, rows_to_csv, rows_to_text
from leanconv.verify import STENCIL_CHOICES


def run(capsys, *argv):
    code = main(list(argv) + ["--threads", "1"])
    return code, capsys.readouterr().out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def record(out, command):
    return ResultRecord.read(out / f"{command}.json")


# --- verify ---------------------------------------------------------------------


def test_verify_passes_on_a_correct_build(tmp_path, capsys):
    code, text = run(capsys, "verify", "--cases", "24", "--out", str(tmp_path))
    assert code == 0
    for suite in ("oracle[float64]", "oracle[float32]", "adjoint", "kernel-gradient", "network-gradient"):
        assert suite in text
    rec = record(tmp_path, "verify")
    assert rec.summary["passed"] and all(r["max_rel_error"] < r["tolerance"] for r in rec.rows)


def test_verify_flags_a_perturbed_weight(tmp_path, capsys):
    code, text = run(capsys, "verify", "--cases", "8", "--no-network", "--perturb", "1e-3", "--out", str(tmp_path))
    assert code == 16
    assert "FAIL" in text


def test_verify_default_matrix():
    cfg = DEFAULTS["verify"]
    assert set(cfg["stencils"]) == set(STENCIL_CHOICES)
    assert cfg["groups"] == ["1", "8", "cin"]
    args = build_parser().parse_args(["verify", "--stencil", "3pt", "--groups", "cin/2"])
    resolved = resolve_config(args)
    assert resolved["stencils"] == ["3pt-h", "3pt-v"] and resolved["groups"] == ["cin/2"]


# --- count ----------------------------------------------------------------------


def table_total(text):
    for line in text.splitlines():
        fields = line.split()
        if fields and fields[0] == "TOTAL":
            return int(fields[-2]), int(fields[-1])
    raise AssertionError("no TOTAL row in text table")


def test_count_csv_matches_text_and_formula(tmp_path, capsys):
    code, text = run(capsys, "count", "--stencil", "5pt", "--groups", "4", "--out", str(tmp_path))
    assert code == 0
    rows = read_csv(tmp_path / "count_Res18_5pt.csv")
    total = rows[-1]
    assert total["layer"] == "TOTAL"
    assert (int(total["params"]), int(total["mults"])) == table_total(text)
    assert int(total["params"]) == sum(int(r["params"]) for r in rows[:-1])
    lean_five = [r for r in rows if r["stencil"] == "5pt" and r["coupling"] == "lean"]
    assert len(lean_five) == 16
    for r in lean_five:
        g, c_in, c_out = int(r["groups"]), int(r["c_in"]), int(r["c_out"])
        assert int(r["params"]) * g == (g + 4) * c_in * c_out


def test_count_res18_full9(tmp_path, capsys):
    code, text = run(capsys, "count", "--out", str(tmp_path))
    summary = record(tmp_path, "count").summary
    assert code == 0 and summary["params"] == 2_755_210 and summary["conv_layers"] == 20
    assert "2,755,210" in text


def test_config_hash_tracks_effective_config(tmp_path, capsys):
    hashes = []
    for size in ("32", "32", "16"):
        run(capsys, "count", "--size", size, "--out", str(tmp_path))
        hashes.append(record(tmp_path, "count").config_hash)
    assert hashes[0] == hashes[1] != hashes[2]
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 1.5})


def test_flags_override_config_file(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"size": 16, "seed": 5, "network": {"stencil": "3pt"}}))
    run(capsys, "count", "--config", str(cfg_path), "--size", "8", "--out", str(tmp_path))
    cfg = record(tmp_path, "count").config
    assert cfg["size"] == 8 and cfg["seed"] == 5 and cfg["network"]["stencil"] == "3pt"


def test_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["count", "--config", str(bad), "--out", str(tmp_path)]) == 2


# --- train and synth ------------------------------------------------------------


def test_zero_epochs_writes_header_and_initial_checkpoint(tmp_path, capsys):
    code, _ = run(capsys, "train", "--epochs", "0", "--out", str(tmp_path))
    assert code == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines == ["epoch,lr,train_loss,train_acc,val_loss,val_acc"]
    model = load_checkpoint(tmp_path / "checkpoint.npz")
    assert model.param_count() == record(tmp_path, "train").summary["params"]


def test_train_is_reproducible(tmp_path, capsys):
    traces = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, text = run(capsys, "train", "--epochs", "2", "--batch", "64", "--subset", "128",
                         "--seed", "3", "--out", str(out))
        assert code == 0 and "final val accuracy" in text
        traces.append((out / "trace.csv").read_text())
    assert traces[0] == traces[1]
    assert len(read_csv(tmp_path / "a" / "trace.csv")) == 2


def test_train_reports_unreadable_data(tmp_path, capsys):
    code = main(["train", "--data", f"cifar10:{tmp_path / 'nowhere'}", "--out", str(tmp_path)])
    assert code == 4


def test_synth_then_train_on_the_file(tmp_path, capsys):
    code, _ = run(capsys, "synth", "--samples", "40", "--size", "8", "--out", str(tmp_path))
    assert code == 0
    code, _ = run(capsys, "train", "--data", str(tmp_path / "synthetic.npz"), "--epochs", "1",
                  "--out", str(tmp_path / "run"))
    assert code == 0
    assert record(tmp_path / "run", "train").summary["params"] > 0


# --- bench ----------------------------------------------------------------------


def test_bench_small_sweep(tmp_path, capsys):
    code, _ = run(capsys, "bench", "--channels", "4", "--size", "32", "--points", "2", "--repeats", "3",
                  "--precision", "f32", "--out", str(tmp_path))
    assert code == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert [(int(r["channels"]), int(r["size"])) for r in rows] == [(4, 32), (8, 16)]
    for r in rows:
        assert float(r["rel_baseline"]) == 1.0
        assert float(r["separate_s"]) > 0 and float(r["fused_s"]) > 0
        assert np.isclose(float(r["rel_fused"]), float(r["fused_s"]) / float(r["baseline_s"]))


# --- records --------------------------------------------------------------------


def test_record_round_trip_and_schema_guard(tmp_path):
    rec = ResultRecord("count", {"x": 1}, rows=[{"a": 1}], summary={"s": 2}, wall_clock_s=0.5)
    path = rec.write(tmp_path / "r.json")
    back = ResultRecord.read(path)
    assert back.config_hash == rec.config_hash and back.rows == rec.rows
    doc = json.loads(path.read_text())
    assert doc["schema_version"] == 1 and "machine" in doc
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        ResultRecord.read(path)


def test_text_and_csv_tables_agree():
    rows = [{"name": "a", "n": 1}, {"name": "bb", "n": 22}]
    assert rows_to_csv(rows).splitlines() == ["name,n", "a,1", "bb,22"]
    text = rows_to_text(rows).splitlines()
    assert text[0].split() == ["name", "n"] and text[-1].split() == ["bb", "22"]
