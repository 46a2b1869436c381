import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from dcube.cli import load_dcube, load_denoiser, main
from dcube.config import ConfigError, RunConfig, config_from_dict, load_config, make_streams, parse_override, stream_seed
from dcube.data import LabeledImages, save_dataset, write_labels


# --------------------------------------------------------------------------- config


def test_override_parsing():
    assert parse_override("stage1.lr=0.01") == {"stage1": {"lr": 0.01}}
    assert parse_override("stage2.input_mode=x0_t0") == {"stage2": {"input_mode": "x0_t0"}}
    assert parse_override("data.counts=[1,2,3]") == {"data": {"counts": [1, 2, 3]}}
    with pytest.raises(ConfigError):
        parse_override("stage1.lr")


def test_layering_order(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "stage1": {"lr": 0.5, "steps": 7}}))
    cfg = load_config(p, ["stage1.lr=0.25"], seed=9)
    assert (cfg.seed, cfg.stage1.lr, cfg.stage1.steps) == (9, 0.25, 7)
    base = load_config(overrides=["stage2.epochs=3"])
    assert load_config(p, base=base).stage2.epochs == 3


@pytest.mark.parametrize(
    "override",
    ["stage1.nope=1", "stage1.steps=1.5", "stage2.input_mode=random", "scan.t=5000", "stage2.use_cr=1", "denoiser.num_classes=4"],
)
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_config_round_trip():
    cfg = load_config(overrides=["stage2.lambda1=100", "data.counts=[5,5,20]"])
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()
    assert RunConfig().hash() != cfg.hash()


def test_streams_independent_and_stable():
    assert stream_seed(0, "data") == stream_seed(0, "data")
    assert len({stream_seed(0, n) for n in ("data", "noise", "init", "pairing")}) == 4
    assert stream_seed(0, "data") != stream_seed(1, "data")
    assert 0 <= stream_seed(2**40, "x") < 2**32
    g = make_streams(3, ["a", "b"])
    assert not torch.equal(torch.rand(4, generator=g["a"]), torch.rand(4, generator=g["b"]))


# --------------------------------------------------------------------------- CLI


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """train-diffusion -> scan -> train-classifier on the tiny config."""
    from conftest import TINY_RUN

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_RUN))
    assert run("train-diffusion", "--config", cfg, "--seed", 1, "--out", root / "d", "--fid") == 0
    assert run("scan", "--checkpoint", root / "d/checkpoint", "--out", root / "s") == 0
    assert run(
        "train-classifier", "--checkpoint", root / "d/checkpoint", "--out", root / "c", "--override", "stage2.selection_mode=manual", "--override", 'stage2.manual_taps=["enc1","mid"]'
    ) == 0
    return root


def test_pipeline_artifacts(pipeline):
    rep = json.loads((pipeline / "d/report.json").read_text())
    assert rep["step"] == 5 and rep["fid_lite"] >= 0
    assert len((pipeline / "d/train_log.jsonl").read_text().splitlines()) >= 1
    scan = json.loads((pipeline / "s/gaussianity.json").read_text())
    assert scan["protocol"]["t"] == 10 and scan["protocol"]["batch"] == 16
    assert {t["id"] for t in scan["taps"]} >= {"enc0", "mid", "out"}
    metrics = json.loads((pipeline / "c/metrics.json").read_text())
    assert metrics["tap_ids"] == ["enc1", "mid"] and 0 <= metrics["macro_f1"] <= 1


def test_checkpoint_round_trip_bitwise(pipeline):
    model, cfg, manifest = load_denoiser(pipeline / "d/checkpoint")
    again, _, _ = load_denoiser(pipeline / "d/checkpoint")
    assert manifest["kind"] == "denoiser" and cfg.seed == 1
    x = torch.rand(3, 1, 16, 16)
    a = model(x, torch.tensor([1, 5, 20]), torch.tensor([0, 1, 2])).eps_hat
    b = again(x, torch.tensor([1, 5, 20]), torch.tensor([0, 1, 2])).eps_hat
    assert torch.equal(a, b)
    dcube, den, _, man = load_dcube(pipeline / "c/checkpoint")
    assert man["kind"] == "dcube" and dcube.tap_ids == ["enc1", "mid"]
    with pytest.raises(ConfigError):
        load_dcube(pipeline / "d/checkpoint")


def test_evaluate_checkpoint_matches_training_report(pipeline):
    assert run("evaluate", "--checkpoint", pipeline / "c/checkpoint", "--out", pipeline / "e") == 0
    m = json.loads((pipeline / "e/metrics.json").read_text())
    assert set(m) >= {"accuracy", "macro_precision", "macro_recall", "macro_f1", "confusion"}


def test_generate_shard(pipeline):
    assert run("generate", "--checkpoint", pipeline / "d/checkpoint", "--class", 2, "--count", 3, "--out", pipeline / "g") == 0
    man = json.loads((pipeline / "g/manifest.json").read_text())
    assert man["counts"]["synthetic"] == [0, 0, 3]
    assert man["splits"]["synthetic"]["synthetic_indices"] == [0, 1, 2]
    assert run("generate", "--checkpoint", pipeline / "d/checkpoint", "--class", 7, "--count", 3, "--out", pipeline / "g2") == 2


def test_perfect_oracle_predictions(tmp_path):
    y = np.array([0, 2, 1, 1, 0])
    save_dataset(tmp_path / "ds", {"test": LabeledImages(np.zeros((5, 1, 2, 2)), y)})
    (tmp_path / "p.json").write_text(json.dumps(y.tolist()))
    write_labels(tmp_path / "p.u16", y)
    for pred in ("p.json", "p.u16"):
        assert run("evaluate", "--dataset", tmp_path / "ds", "--predictions", tmp_path / pred, "--out", tmp_path / "e") == 0
        m = json.loads((tmp_path / "e/metrics.json").read_text())
        assert (m["accuracy"], m["macro_precision"], m["macro_recall"], m["macro_f1"]) == (1.0, 1.0, 1.0, 1.0)


def test_perfect_oracle_on_single_class_shard(tmp_path):
    y = np.full(4, 2)
    save_dataset(tmp_path / "ds", {"synthetic": LabeledImages(np.zeros((4, 1, 2, 2)), y)})
    (tmp_path / "p.json").write_text(json.dumps(y.tolist()))
    args = ("evaluate", "--dataset", tmp_path / "ds", "--split", "synthetic", "--predictions", tmp_path / "p.json", "--num-classes", 3, "--out", tmp_path / "e")
    assert run(*args) == 0
    assert json.loads((tmp_path / "e/metrics.json").read_text())["macro_f1"] == 1.0


@pytest.mark.parametrize(
    "argv",
    [
        ("train-diffusion", "--override", "stage1.bogus=1"),
        ("train-diffusion", "--override", "stage2.input_mode=nope"),
        ("evaluate",),
    ],
)
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path / "o") == 2
    assert "config error" in capsys.readouterr().err


def test_best_selection_needs_report(pipeline, tmp_path):
    assert run("train-classifier", "--checkpoint", pipeline / "d/checkpoint", "--out", tmp_path / "c") == 2


def test_ablation_table4_structure(tiny_run_config, tmp_path):
    argv = ["ablation", "--suite", "table4", "--config", tiny_run_config, "--seeds", 0, 1, "--out", tmp_path / "a"]
    argv += ["--override", "scan.standardize=false"]  # raw activations: every tap is non-Gaussian, so best selection exists
    assert run(*argv) == 0
    rep = json.loads((tmp_path / "a/table4.json").read_text())
    assert len(rep["rows"]) == 10
    assert [r["variant"] for r in rep["rows"][:5]] == ["baseline", "+L_Gen", "+Fs", "+L_Cls", "+f_sub"]
    assert {r["seed"] for r in rep["rows"]} == {0, 1}
    assert (tmp_path / "a/table4.txt").exists()


def test_cli_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "dcube.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-diffusion" in out.stdout
