import csv
import io
import json

import pytest

from cli.runner import build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(tmp_path, tensors, name="custom"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({"name": name, "dtype_bytes": 4, "tensors": tensors}))
    return str(path)


# ------------------------------------------------------------------
# plan / validate
# ------------------------------------------------------------------


def test_plan_toy(capsys):
    code, out, err = run(capsys, "plan", "toy", "--devices", "2", "--gcoll-bytes", "4")
    assert code == 0
    document = json.loads(out)
    assert document["config"] == "toy"
    plan = document["groups"][0]["plan"]
    assert plan["S"] == 6
    assert plan["g_coll"] == 1
    assert [t["interval"] for t in plan["tensors"]] == [[0, 6], [6, 10]]
    assert plan["padding"] == [[10, 12]]
    assert plan["violations"] == []
    assert "toy on 2 devices" in err


def test_plan_output_is_byte_stable(capsys):
    _, first, _ = run(capsys, "plan", "toy", "--devices", "2", "--gcoll-bytes", "4")
    _, second, _ = run(capsys, "plan", "toy", "--devices", "2", "--gcoll-bytes", "4")
    assert first == second


def test_plan_then_validate(capsys, tmp_path):
    path = str(tmp_path / "plan.json")
    assert run(capsys, "plan", "toy_mlp", "--devices", "3", "--out", path)[0] == 0
    code, out, _ = run(capsys, "validate", path)
    assert code == 0
    assert [p["valid"] for p in json.loads(out)["plans"]] == [True]


def test_naive_plan_fails_validation(capsys, tmp_path):
    path = str(tmp_path / "naive.json")
    code, _, _ = run(capsys, "plan", "toy", "--devices", "2", "--gcoll-bytes", "4", "--naive", "--out", path)
    assert code == 2
    code, out, _ = run(capsys, "validate", path)
    assert code == 2
    (result,) = json.loads(out)["plans"]
    assert not result["valid"]
    assert [(v["constraint"], v["tensor"], v["boundary"]) for v in result["violations"]] == [
        ("non_sharded_block", "t1", 1)
    ]


def test_validate_rejects_malformed_plan(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"groups": [{"group": "g"}]}))
    code, _, err = run(capsys, "validate", str(path))
    assert code == 3
    assert "\"error\": \"ConfigError\"" in err


def test_validate_single_plan_object(capsys, tmp_path):
    plan_path = tmp_path / "plan.json"
    assert run(capsys, "plan", "toy", "--devices", "2", "--gcoll-bytes", "4", "--out", str(plan_path))[0] == 0
    single = tmp_path / "single.json"
    single.write_text(json.dumps(json.loads(plan_path.read_text())["groups"][0]["plan"]))
    assert run(capsys, "validate", str(single))[0] == 0


def test_non_dividing_granularity_is_a_config_error(capsys, tmp_path):
    path = write_config(tmp_path, [{"name": "w", "shape": [5, 4], "quantized": True}])
    code, _, err = run(capsys, "plan", path, "--devices", "2", "--granularity", "2")
    assert code == 3
    assert "NonDividingGranularity" in err


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "plan", str(tmp_path / "absent.json"))
    assert code == 3
    assert "ConfigError" in err


def test_unknown_group(capsys):
    assert run(capsys, "plan", "toy", "--group", "nope")[0] == 3


def test_plan_needs_a_single_device_count(capsys):
    assert run(capsys, "plan", "toy", "--devices", "2,4")[0] == 3


def test_settings_file_is_honoured(capsys, tmp_path):
    settings = tmp_path / "settings.yaml"
    settings.write_text("planner:\n  gcoll_bytes: 4\n")
    code, out, _ = run(capsys, "plan", "toy", "--devices", "2", "--settings", str(settings))
    assert code == 0
    assert json.loads(out)["groups"][0]["plan"]["S"] == 6


def test_bad_device_list_is_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["plan", "toy", "--devices", "0"])


# ------------------------------------------------------------------
# sweep
# ------------------------------------------------------------------


def test_sweep_csv(capsys):
    code, out, _ = run(capsys, "sweep", "toy", "--devices", "2,4", "--granularity", "1", "--gcoll-bytes", "4")
    assert code == 0
    assert out.splitlines() == [
        "m,granularity,S,padding_ratio",
        "2,1,6,0.200000",
        "4,1,3,0.200000",
    ]


def test_sweep_to_file(capsys, tmp_path):
    path = tmp_path / "padding.csv"
    code, out, _ = run(capsys, "sweep", "quant32", "--devices", "2,4,8", "--granularity", "16,32",
                       "--out", str(path))
    assert code == 0
    assert out == ""
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    assert [(r["m"], r["granularity"]) for r in rows] == [
        ("2", "16"), ("4", "16"), ("8", "16"), ("2", "32"), ("4", "32"), ("8", "32"),
    ]
    assert all(float(r["padding_ratio"]) >= 0 for r in rows)


# ------------------------------------------------------------------
# simulate
# ------------------------------------------------------------------


def test_simulate_muon(capsys):
    code, out, _ = run(capsys, "simulate", "toy_mlp", "--demo", "muon", "--devices", "4", "--steps", "5")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["step"] for r in rows] == ["1", "2", "3", "4", "5"]
    assert all(float(r["max_rel_error"]) < 1e-6 for r in rows)
    assert float(rows[-1]["loss"]) < float(rows[0]["loss"])


def test_simulate_muon_needs_a_matrix(capsys, tmp_path):
    path = write_config(tmp_path, [{"name": "bias", "shape": [8]}])
    code, _, err = run(capsys, "simulate", path, "--demo", "muon", "--devices", "2", "--steps", "1")
    assert code == 3
    assert "NotMatrix" in err


def test_simulate_quant_contained(capsys):
    code, out, _ = run(capsys, "simulate", "quant32", "--demo", "quant", "--devices", "4")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert sorted(r["tensor"] for r in rows) == ["attn.out", "attn.qkv", "mlp.down", "mlp.up"]
    assert all(r["contained"] == "true" and r["shard_local_exact"] == "true" for r in rows)
    assert all(float(r["max_error"]) <= float(r["error_bound"]) for r in rows)


@pytest.mark.parametrize("devices", ["2", "4", "5"])
def test_simulate_quant_block_granularity(capsys, devices):
    code, out, _ = run(capsys, "simulate", "quant_tiles", "--demo", "quant", "--devices", devices)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert sorted(r["tensor"] for r in rows) == ["attn.out", "attn.qkv", "mlp.down"]
    assert all(r["contained"] == "true" and r["shard_local_exact"] == "true" for r in rows)


def test_simulate_quant_single_block_tensor(capsys, tmp_path):
    path = write_config(tmp_path, [
        {"name": "w", "shape": [64, 64], "granularity": {"kind": "block", "value": [32, 32]}, "quantized": True},
    ], name="blk")
    code, out, _ = run(capsys, "simulate", path, "--demo", "quant", "--devices", "4")
    assert code == 0
    (row,) = list(csv.DictReader(io.StringIO(out)))
    assert (row["group"], row["tensor"]) == ("model", "w")
    assert (row["contained"], row["crossings"], row["shard_local_exact"]) == ("true", "0", "true")


def test_simulate_quant_crossing(capsys):
    code, out, _ = run(capsys, "simulate", "quant_element", "--demo", "quant", "--devices", "4")
    assert code == 2
    (row,) = list(csv.DictReader(io.StringIO(out)))
    assert row["contained"] == "false"
    assert row["crossings"] == "3"
