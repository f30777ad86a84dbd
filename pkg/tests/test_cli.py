import json
import re

import pytest

from app.core.data import prepare_splits
from app.core.models import TrainingRun
from app.core.network import build_model
from app.core.train import evaluate
from app.core.utils import load_parameters
from app.main import app

ERROR_LINE = re.compile(r"^\d\.\d{4}$")


@pytest.fixture
def invoke(runner, small_env):
    def run(*args, env=None):
        return runner.invoke(app, [str(arg) for arg in args], env={**small_env, **(env or {})})

    return run


def printed_error(result):
    lines = [line.strip() for line in result.stdout.splitlines()]
    return [line for line in lines if ERROR_LINE.match(line)]


def test_verify_p4_passes(invoke, tmp_path):
    result = invoke("verify", "--group", "p4", "--seed", 0, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["ok"] is True
    assert report["group"] == "p4"
    assert "attention:circulant:n=8" in {check["check"] for check in report["checks"]}
    assert (tmp_path / "verify.config.json").is_file()


def test_verify_p4m_runs_block_checks(invoke, tmp_path):
    result = invoke("verify", "--group", "p4m", "--out", tmp_path)
    assert result.exit_code == 0, result.output
    checks = {check["check"] for check in json.loads((tmp_path / "verify.json").read_text())["checks"]}
    assert "attention:block_circulant:n=8" in checks
    assert "commutation:p4m" in checks


def test_unknown_choices_are_usage_errors(invoke, tmp_path):
    assert invoke("verify", "--group", "bogus", "--out", tmp_path).exit_code == 2
    assert invoke("train", "--arch", "p6cnn", "--out", tmp_path).exit_code == 2
    assert invoke("eval", "--split", "holdout", "--out", tmp_path).exit_code == 2


def test_train_writes_artifacts_and_is_reproducible(invoke, tmp_path):
    histories = []
    for run in ("first", "second"):
        out = tmp_path / run
        result = invoke(
            "train", "--arch", "a-p4cnn", "--synthetic", "quarter", "--epochs", 1, "--seed", 0, "--out", out
        )
        assert result.exit_code == 0, result.output
        histories.append((out / "history.csv").read_bytes())
    assert histories[0] == histories[1]

    out = tmp_path / "first"
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,valid_error"
    assert len(lines) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["arch"] == "a-p4cnn" and manifest["dtype"] == "<f8"
    assert (out / "params.bin").stat().st_size == 8 * manifest["count"]
    checks = json.loads((out / "equivariance.json").read_text())
    assert len(checks["per_epoch"]) == 1
    assert checks["final"]["passed"] is True


def test_train_rejects_a_group_the_architecture_does_not_have(invoke, tmp_path):
    result = invoke("train", "--arch", "a-p4cnn", "--group", "p4m", "--synthetic", "quarter", "--out", tmp_path)
    assert result.exit_code == 2
    assert not (tmp_path / "params.bin").exists()


def test_train_records_the_architecture_group(invoke, tmp_path):
    result = invoke(
        "train", "--arch", "p4mcnn", "--group", "p4m", "--attention-init", "identity", "--synthetic", "quarter",
        "--epochs", 1, "--out", tmp_path,
    )
    assert result.exit_code == 0, result.output
    settings = json.loads((tmp_path / "train.config.json").read_text())["settings"]
    assert settings["group"] == "p4m" and settings["attention_init"] == "identity"
    assert json.loads((tmp_path / "manifest.json").read_text())["group"] == "p4m"


def test_train_without_data_fails(invoke, tmp_path):
    result = invoke("train", "--arch", "p4cnn", "--out", tmp_path)
    assert result.exit_code == 1


def test_train_with_missing_data_file_fails(invoke, tmp_path):
    result = invoke("train", "--data", tmp_path / "missing.amat", "--out", tmp_path)
    assert result.exit_code == 1


def test_eval_prints_the_error_rate(invoke, tmp_path):
    trained = invoke("train", "--arch", "p4cnn", "--synthetic", "quarter", "--epochs", 1, "--out", tmp_path)
    assert trained.exit_code == 0, trained.output
    result = invoke("eval", "--synthetic", "quarter", "--out", tmp_path)
    assert result.exit_code == 0, result.output
    printed = printed_error(result)
    assert len(printed) == 1
    assert 0.0 <= float(printed[0]) <= 1.0

    elsewhere = tmp_path / "eval"
    result = invoke("eval", "--synthetic", "quarter", "--params", tmp_path, "--split", "valid", "--out", elsewhere)
    assert result.exit_code == 0, result.output
    assert (elsewhere / "eval.config.json").is_file()


def test_eval_rebuilds_the_training_run_from_the_manifest(invoke, tmp_path):
    trained = invoke(
        "train", "--arch", "p4cnn", "--synthetic", "quarter", "--epochs", 1, "--seed", 4, "--out", tmp_path,
        env={"COATTN_CHANNELS": "3"},
    )
    assert trained.exit_code == 0, trained.output
    run = TrainingRun.model_validate(json.loads((tmp_path / "manifest.json").read_text())["run"])
    assert run.channels == 3 and run.seed == 4 and run.synthetic == "quarter"
    assert run.recipe.n_test == 16

    # width, seed, source and split sizes all differ from training here
    result = invoke("eval", "--out", tmp_path, env={"COATTN_CHANNELS": None, "COATTN_N_TEST": "20"})
    assert result.exit_code == 0, result.output

    model = build_model("p4cnn", run.seed, run.channels)
    model.load_parameters(load_parameters(tmp_path / "params.bin", tmp_path / "manifest.json")[1])
    splits = prepare_splits(run.recipe, run.data, run.synthetic)
    assert printed_error(result) == [f"{evaluate(model, splits['test']):.4f}"]


def test_eval_rejects_truncated_parameters(invoke, tmp_path):
    trained = invoke("train", "--arch", "z2cnn", "--synthetic", "quarter", "--epochs", 1, "--out", tmp_path)
    assert trained.exit_code == 0, trained.output
    blob = tmp_path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    result = invoke("eval", "--synthetic", "quarter", "--out", tmp_path)
    assert result.exit_code == 1
    assert not printed_error(result)


def test_eval_without_parameters_fails(invoke, tmp_path):
    assert invoke("eval", "--synthetic", "quarter", "--out", tmp_path).exit_code == 1


def test_gen_data_is_deterministic(invoke, tmp_path):
    for run in ("a", "b"):
        result = invoke("gen-data", "--synthetic", "uniform", "--seed", 3, "--out", tmp_path / run)
        assert result.exit_code == 0, result.output
    for split, size in (("train", 32), ("valid", 16), ("test", 16)):
        first = (tmp_path / "a" / f"{split}.amat").read_bytes()
        assert first == (tmp_path / "b" / f"{split}.amat").read_bytes()
        assert len(first.decode().splitlines()) == size


def test_gen_data_needs_a_rotation_mode(invoke, tmp_path):
    assert invoke("gen-data", "--out", tmp_path).exit_code == 1


def test_compare_tabulates_both_networks(invoke, tmp_path):
    result = invoke(
        "compare", "--group", "p4", "--synthetic", "quarter", "--epochs", 1, "--seeds", 2, "--out", tmp_path
    )
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert lines[0] == "arch,mean_error,std_error,parameters"
    assert [line.split(",")[0] for line in lines[1:]] == ["p4cnn", "a-p4cnn"]
    rows = json.loads((tmp_path / "compare.json").read_text())
    assert [len(row["test_errors"]) for row in rows] == [2, 2]
    assert rows[1]["parameters"] - rows[0]["parameters"] == 4 * 2 * 4


def test_compare_without_data_fails(invoke, tmp_path):
    assert invoke("compare", "--group", "p4", "--out", tmp_path).exit_code == 1


def test_flags_beat_environment_beat_config_file(invoke, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"seed": 5, "epochs": 3, "n_train": 10, "lr": 0.5}))
    result = invoke(
        "gen-data", "--synthetic", "quarter", "--config", config, "--seed", 7, "--out", tmp_path / "out",
        env={"COATTN_N_TRAIN": None, "COATTN_EPOCHS": "4"},
    )
    assert result.exit_code == 0, result.output
    record = json.loads((tmp_path / "out" / "gen-data.config.json").read_text())
    assert record["command"] == "gen-data"
    assert record["settings"]["seed"] == 7
    assert record["settings"]["epochs"] == 4
    assert record["settings"]["n_train"] == 10
    assert record["settings"]["lr"] == 0.5
    assert len((tmp_path / "out" / "train.amat").read_text().splitlines()) == 10


def test_bad_config_file_fails(invoke, tmp_path):
    assert invoke("verify", "--config", tmp_path / "absent.json", "--out", tmp_path).exit_code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": "many"}))
    assert invoke("verify", "--config", bad, "--out", tmp_path).exit_code == 1


def test_nothing_is_written_outside_out(invoke, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    result = invoke("gen-data", "--synthetic", "quarter", "--out", "run")
    assert result.exit_code == 0, result.output
    assert [path.name for path in tmp_path.iterdir()] == ["run"]
    assert sorted(path.name for path in (tmp_path / "run").iterdir()) == [
        "gen-data.config.json",
        "test.amat",
        "train.amat",
        "valid.amat",
    ]
