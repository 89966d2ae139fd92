import json

import numpy as np
import pytest

from policylab.cli import main
from policylab.io import read_dataset, read_truth
from policylab.policies import load_policy

FAST_CV = ["--outer-folds", "3", "--inner-folds", "2", "--max-depth", "1,2", "--min-samples-leaf", "100"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--preset", "level-dominant", "--n", "20000", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_gen_outputs_and_manifest(gen_dir):
    manifest = json.loads((gen_dir / "run_manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "gen"
    assert {"data.bin", "data.csv", "data.bin.truth", "data.csv.truth"} <= set(manifest["outputs"])
    d = read_dataset(gen_dir / "data.bin")
    assert d.content_hash() == read_dataset(gen_dir / "data.csv").content_hash()
    assert read_truth(gen_dir / "data.bin.truth", gen_dir / "data.bin").shape == (20000, 4)
    assert manifest["summary"]["n_rows"] == 20000
    assert "numpy" in manifest["versions"]


def test_gen_arm_shares_at_scale(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--preset", "level-dominant", "--n", 1_000_000, "--seed", 7,
                       "--format", "binary", "--out", tmp_path)
    assert code == 0
    shares = np.array(json.loads(out)["summary"]["arm_shares"])
    assert np.abs(shares - [0.8668, 0.0444, 0.0444, 0.0444]).max() < 0.002


def test_gen_is_byte_identical(tmp_path, gen_dir):
    assert main(["gen", "--preset", "level-dominant", "--n", "20000", "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("data.bin", "data.csv", "data.csv.meta.json", "data.bin.truth", "run_manifest.json"):
        assert (tmp_path / name).read_bytes() == (gen_dir / name).read_bytes(), name


def test_missing_seed_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--preset", "level-dominant", "--out", tmp_path)
    assert code == 1 and "--seed" in err
    code, _, _ = run(capsys, "train", "--data", "x.bin", "--out", tmp_path)
    assert code == 1
    code, _, _ = run(capsys, "gen", "--preset", "nope", "--seed", 1)
    assert code == 1


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"preset": "null-effects", "n": 5000, "seed": 3}))
    code, out, _ = run(capsys, "gen", "--config", cfg, "--n", 4000, "--out", tmp_path / "o")
    assert code == 0
    summary = json.loads(out)["summary"]
    assert summary["n_rows"] == 4000
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert run(capsys, "gen", "--config", bad, "--seed", 1)[0] == 1


def test_env_var_sets_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("POLICYLAB_OUT", str(tmp_path / "envout"))
    code, _, _ = run(capsys, "gen", "--preset", "null-effects", "--n", 1000, "--seed", 1, "--format", "csv")
    assert code == 0
    assert (tmp_path / "envout" / "data.csv").exists()


def test_train_round_trip_and_three_files(tmp_path, gen_dir, capsys):
    code, out, _ = run(capsys, "train", "--data", gen_dir / "data.bin", "--approach", "op,cp,tp",
                       "--seed", 1, "--out", tmp_path, *FAST_CV)
    assert code == 0
    files = sorted(p.name for p in tmp_path.glob("policy_*.json"))
    assert files == ["policy_cp.json", "policy_op.json", "policy_tp.json"]
    d = read_dataset(gen_dir / "data.bin")
    pol = load_policy(tmp_path / "policy_tp.json")
    again = load_policy(tmp_path / "policy_tp.json")
    assert np.array_equal(pol.assign(d.features), again.assign(d.features))
    assert pol.provenance["training_data_hash"] == d.content_hash()


def test_train_negative_outcomes_surface_row(tmp_path, capsys):
    csv = tmp_path / "neg.csv"
    csv.write_text("f0,t,y\n0,0,1\n1,1,-2\n0,1,3\n1,0,1\n")
    (tmp_path / "neg.csv.meta.json").write_text(json.dumps({
        "format_version": 1, "schema": {"feature_cardinalities": [2], "arm_count": 2},
        "propensity_table": [0.5, 0.5], "n_rows": 4, "schema_hash": "x"}))
    code, _, err = run(capsys, "train", "--data", csv, "--approach", "tp", "--seed", 1, "--out", tmp_path)
    assert code == 2
    assert "row 1" in err
    code, out, _ = run(capsys, "validate", "--data", csv, "--out", tmp_path)
    assert code == 2
    assert json.loads(out)["summary"]["first_violations"] == [{"row": 1, "rule": "outcome must be non-negative"}]


def test_eval_constant_control(tmp_path, gen_dir, capsys):
    code, out, _ = run(capsys, "eval", "--data", gen_dir / "data.bin", "--policy", "constant:0", "--out", tmp_path)
    assert code == 0
    rep = json.loads((tmp_path / "eval_constant-0.json").read_text())
    assert rep["summary"]["lift_vs_control"] == 0.0
    assert rep["summary"]["entropy_bits"] == 0.0
    assert rep["summary"]["regret"] is not None  # truth sidecar picked up automatically
    assert "| constant-0 | 100.00% |" in (tmp_path / "assignment_shares.md").read_text()


def test_schema_mismatch_is_an_error(tmp_path, gen_dir, capsys):
    assert main(["gen", "--preset", "null-effects", "--n", "2000", "--seed", "1", "--out", str(tmp_path / "g")]) == 0
    scen = json.loads((tmp_path / "g" / "data.scenario.json").read_text())
    scen["propensity_table"] = [0.25, 0.25, 0.25, 0.25]
    (tmp_path / "s.json").write_text(json.dumps(scen))
    assert main(["gen", "--scenario", str(tmp_path / "s.json"), "--seed", "1", "--out", str(tmp_path / "h")]) == 0
    assert main(["train", "--data", str(tmp_path / "g" / "data.bin"), "--approach", "tp", "--seed", "1",
                 "--out", str(tmp_path / "p"), *FAST_CV]) == 0
    code, _, err = run(capsys, "eval", "--data", tmp_path / "h" / "data.bin",
                       "--policy", tmp_path / "p" / "policy_tp.json", "--out", tmp_path / "e")
    assert code == 2 and "schema" in err
    code, _, err = run(capsys, "eval", "--data", gen_dir / "data.bin", "--truth", tmp_path / "g" / "data.bin.truth",
                       "--policy", "constant:0", "--out", tmp_path / "e")
    assert code == 2 and "does not belong" in err


def test_missing_file_is_data_error(tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--data", tmp_path / "none.bin", "--policy", "constant:0", "--out", tmp_path)
    assert code == 2


def test_curve_shape_and_svg_determinism(tmp_path, capsys):
    assert main(["gen", "--preset", "level-dominant", "--n", "10000", "--seed", "2", "--out", str(tmp_path / "g")]) == 0
    outs = []
    for k, threads in enumerate(("1", "3")):
        out = tmp_path / f"c{k}"
        code, _, _ = run(capsys, "curve", "--data", tmp_path / "g" / "data.bin", "--sizes", "1000,3000,10000",
                         "--seed", 5, "--threads", threads, "--out", out, *FAST_CV)
        assert code == 0
        outs.append(out)
    rows = (outs[0] / "curve.csv").read_text().splitlines()[1:]
    keys = {tuple(r.split(",")[:3]) for r in rows}
    # one row group per (approach, size, fold): 4 approaches x 3 sizes x 3 folds
    assert len(keys) == 4 * 3 * 3
    svg = (outs[0] / "curve.svg").read_text()
    assert svg.startswith("<?xml") and "<svg" in svg
    for name in ("curve.csv", "curve.svg", "run_manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_crosstask_outputs(tmp_path, gen_dir, capsys):
    code, out, _ = run(capsys, "crosstask", "--data", gen_dir / "data.bin", "--seed", 4, "--out", tmp_path, *FAST_CV)
    assert code == 0
    table = json.loads((tmp_path / "crosstask.json").read_text())
    assert set(table["rows"]) == {"op", "cp", "tp"}
    assert set(table["flags"]) == {"op_best_mse_outcome", "cp_best_mse_effect_proxy", "tp_best_lift", "tp_lowest_regret"}


def test_internal_error_exit_code(monkeypatch, tmp_path, capsys):
    import policylab.cli as cli

    def boom(args, run):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.COMMANDS, "validate", boom)
    code, _, err = run(capsys, "validate", "--data", "x", "--out", tmp_path)
    assert code == 3 and "RuntimeError" in err
