import json
import subprocess
import sys

import pytest

from gosh.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny dataset plus checkpoints, shared by the subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-dataset", "--config", "desk10", "--intervals", "40", "--seed", "1",
                 "--out", str(root / "ds.csv")]) == 0
    assert main(["train", "--dataset", str(root / "ds.csv"), "--folds", "2", "--epochs", "2",
                 "--out", str(root / "ck")]) == 0
    return root


def test_gen_dataset_reports_records(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-dataset", "--config", "desk10", "--intervals", 12,
                       "--out", tmp_path / "d.csv")
    assert code == 0 and json.loads(out)["records"] == 12


def test_train_writes_all_checkpoints(trained):
    names = {p.name for p in (trained / "ck").iterdir()}
    assert {"npn.zip", "fcn.zip", "lstm.npz"} <= names


def test_run_and_compare(capsys, trained, tmp_path):
    for kind in ("GOBI", "GOSH"):
        code, out, _ = run(capsys, "run", "--config", "desk10", "--kind", kind, "--seeds", "0",
                           "--intervals", 4, "--checkpoints", trained / "ck",
                           "--out", tmp_path / kind)
        assert code == 0 and json.loads(out)["kind"] == kind
    code, out, _ = run(capsys, "compare", tmp_path / "GOBI", tmp_path / "GOSH",
                       "--out", tmp_path / "cmp")
    assert code == 0 and len(json.loads(out)["table"]) == 2


def test_sweep_k(capsys, trained, tmp_path):
    code, out, _ = run(capsys, "sweep-k", "--config", "desk10_shift", "--ks", "0.5,10",
                       "--seeds", "0", "--intervals", 6, "--checkpoints", trained / "ck",
                       "--out", tmp_path / "sw")
    res = json.loads(out)
    assert code == 0 and set(res) == {"k=0.5", "k=10.0", "dynamic"}
    assert res["dynamic"]["recovery_slope"] is None  # switch lies beyond six intervals
    assert (tmp_path / "sw" / "sweep_k_summary.csv").exists()


def test_run_is_byte_identical(capsys, trained, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "run", "--config", "desk10", "--kind", "SGOBI", "--seeds", "2",
                   "--intervals", 4, "--checkpoints", trained / "ck", "--out", tmp_path / d)[0] == 0
    for name in ("metrics.csv", "tasks.csv"):
        assert ((tmp_path / "a" / "seed_2" / name).read_bytes()
                == (tmp_path / "b" / "seed_2" / name).read_bytes())


def test_missing_checkpoint_gives_json_error(capsys, tmp_path):
    code, out, err = run(capsys, "run", "--config", "desk10", "--kind", "GOSH", "--seeds", "0",
                         "--checkpoints", tmp_path, "--out", tmp_path / "r")
    assert code == 1 and out == ""
    payload = json.loads(err)
    assert payload["error"] == "ConfigurationError" and payload["command"] == "run"


def test_bad_config_gives_json_error(capsys, tmp_path):
    code, _, err = run(capsys, "gen-dataset", "--config", "nope", "--out", tmp_path / "d.csv")
    assert code == 1 and "nope" in json.loads(err)["message"]


def test_usage_error_is_json(capsys):
    code, _, err = run(capsys, "launch")
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "gosh", "gen-dataset", "--config", "desk10",
                         "--intervals", "3", "--out", str(tmp_path / "d.csv")],
                        capture_output=True, text=True)
    assert ok.returncode == 0, ok.stderr
    bad = subprocess.run([sys.executable, "-m", "gosh", "compare", str(tmp_path),
                          "--out", str(tmp_path / "c")], capture_output=True, text=True)
    assert bad.returncode != 0 and "error" in json.loads(bad.stderr)


def test_starred_pipeline(capsys, trained, tmp_path):
    code, out, _ = run(capsys, "gen-dataset", "--config", "desk10", "--intervals", 12,
                       "--starred", "--checkpoints", trained / "ck", "--out", tmp_path / "s.csv")
    assert code == 0
    assert run(capsys, "train", "--dataset", tmp_path / "s.csv", "--models", "npn,fcn",
               "--folds", "2", "--epochs", "2", "--out", trained / "ck")[0] == 0
    assert {"npn_star.zip", "fcn_star.zip"} <= {p.name for p in (trained / "ck").iterdir()}
    for kind in ("GOSH*", "GOBI*"):
        code, out, err = run(capsys, "run", "--config", "desk10", "--kind", kind, "--seeds", "0",
                             "--intervals", 3, "--checkpoints", trained / "ck",
                             "--out", tmp_path / kind.rstrip("*"))
        assert code == 0, err
        assert json.loads(out)["kind"] == kind
