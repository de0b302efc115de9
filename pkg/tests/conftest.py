"""Shared fixtures: a small synthetic dataset and a trained checkpoint."""

import json

import pytest

from rostfine import cli


TINY_SPEC = {"samples": 20, "frames": 8, "height": 16, "width": 16,
             "profile": [0.15, 0.3, 0.35, 0.1, 0.1]}

TINY_CONFIG = {
    "model": {"frames": 4, "height": 16, "width": 16, "patch": 8, "embed_dim": 8,
              "depth": 2, "heads": 2, "top_k": 2, "alpha": 1.0, "loss_kind": "mse",
              "seed": 0},
    "train": {"epochs": 2, "batch_size": 4, "folds": 4, "seed": 0},
    "loss": {"alpha": 1.0},
}


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Dataset + config + checkpoint produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cliws")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    config_path = root / "config.json"
    config_path.write_text(json.dumps(TINY_CONFIG))
    data_dir = root / "data"
    ckpt = root / "model.ckpt"
    assert cli.main(["synth", "--spec", str(spec_path), "--out", str(data_dir), "--seed", "3"]) == 0
    assert cli.main([
        "train", "--data", str(data_dir), "--config", str(config_path),
        "--fold", "0", "--out", str(ckpt), "--seed", "5",
    ]) == 0
    return {
        "root": root,
        "spec": spec_path,
        "config": config_path,
        "data": data_dir,
        "ckpt": ckpt,
        "log": root / "model.ckpt.log.csv",
    }
