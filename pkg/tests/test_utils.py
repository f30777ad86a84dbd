import json

import numpy as np
import pytest

from app.core.models import ComparisonRow, EpochRecord, TrainConfig, TrainingRun
from app.core.utils import load_parameters, save_parameters, write_history_csv, write_rows_csv


def test_parameters_round_trip(tmp_path, rng):
    params = {"lift.filters": rng.normal(size=(2, 1, 1, 3, 3)), "dense.bias": rng.normal(size=10)}
    manifest = save_parameters(tmp_path / "params.bin", tmp_path / "manifest.json", params, "p4cnn", "p4")
    assert manifest.count == 28
    assert [entry.offset for entry in manifest.tensors] == [0, 18]
    assert (tmp_path / "params.bin").stat().st_size == 28 * 8

    loaded_manifest, loaded = load_parameters(tmp_path / "params.bin", tmp_path / "manifest.json")
    assert loaded_manifest == manifest
    for key, value in params.items():
        np.testing.assert_array_equal(loaded[key], value)


def test_manifest_keeps_the_training_run(tmp_path):
    run = TrainingRun(channels=3, seed=4, synthetic="uniform", recipe=TrainConfig(seed=4, n_test=16))
    save_parameters(tmp_path / "p.bin", tmp_path / "m.json", {"w": np.zeros(2)}, "a-p4cnn", "p4", run)
    manifest, _ = load_parameters(tmp_path / "p.bin", tmp_path / "m.json")
    assert manifest.run == run
    assert manifest.run.recipe.standardize is True


def test_blob_is_little_endian_float64(tmp_path):
    save_parameters(tmp_path / "p.bin", tmp_path / "m.json", {"w": np.array([1.0, -2.5])}, "z2cnn", "z2")
    assert (tmp_path / "p.bin").read_bytes() == np.array([1.0, -2.5], dtype="<f8").tobytes()
    assert json.loads((tmp_path / "m.json").read_text())["dtype"] == "<f8"


def test_size_mismatch_is_rejected(tmp_path):
    save_parameters(tmp_path / "p.bin", tmp_path / "m.json", {"w": np.zeros(4)}, "z2cnn", "z2")
    (tmp_path / "p.bin").write_bytes(b"\x00" * 24)
    with pytest.raises(ValueError, match="24 bytes, manifest expects 32"):
        load_parameters(tmp_path / "p.bin", tmp_path / "m.json")


def test_history_csv(tmp_path):
    path = write_history_csv(
        tmp_path / "history.csv",
        [EpochRecord(epoch=1, train_loss=2.25, valid_error=0.5), EpochRecord(epoch=2, train_loss=1.5, valid_error=0.25)],
    )
    assert path.read_text() == "epoch,train_loss,valid_error\n1,2.25,0.5\n2,1.5,0.25\n"


def test_rows_csv(tmp_path):
    row = ComparisonRow(arch="p4cnn", seeds=[0], test_errors=[0.1], mean_error=0.1, std_error=0.0, parameters=42)
    path = write_rows_csv(tmp_path / "rows.csv", [row], ["arch", "parameters"])
    assert path.read_text() == "arch,parameters\np4cnn,42\n"
