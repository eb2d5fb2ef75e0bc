import json
import re

import pytest

from coral.cli import DEFAULTS, EXIT_CONFIG, EXIT_DATA, build_parser, main
from coral.longtail_data import read_dataset

SMALL_CONFIG = {
    "arch.hidden": 16,
    "arch.bottleneck": 8,
    "arch.proj_dim": 4,
    "arch.time_embed_dim": 8,
    "schedule.T": 20,
    "train.steps": 20,
    "train.batch_size": 32,
    "train.lr": 1e-3,
}


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.ltds"
    assert main(["make-data", "--classes", "4", "--head-count", "80", "--rho", "0.25", "--out", str(path)]) == 0
    return path


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def test_make_data_sidecar(tmp_path):
    out = tmp_path / "c10.ltds"
    assert main(["make-data", "--classes", "10", "--head-count", "5000", "--rho", "0.01", "--out", str(out)]) == 0
    side = json.loads((tmp_path / "c10.ltds.counts.json").read_text())
    assert side["total"] == 12406
    assert read_dataset(out).n_total == 12406


def test_make_data_balanced_and_deterministic(tmp_path):
    a, b = tmp_path / "a.ltds", tmp_path / "b.ltds"
    for p in (a, b):
        assert main(["make-data", "--classes", "3", "--head-count", "20", "--rho", "1.0", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert list(read_dataset(a).class_counts) == [20, 20, 20]


def test_make_data_errors(tmp_path):
    assert main(["make-data", "--rho", "0", "--out", str(tmp_path / "x.ltds")]) == EXIT_CONFIG
    assert main(["make-data", "--head-count", "5", "--out", str(tmp_path / "no" / "such" / "x.ltds")]) == EXIT_DATA


def test_train_baseline_equals_zero_weight(tmp_path, dataset, config):
    assert main(["train", "--config", str(config), "--data", str(dataset), "--out-dir", str(tmp_path / "a"),
                 "--baseline"]) == 0
    zero = tmp_path / "zero.json"
    zero.write_text(json.dumps({**SMALL_CONFIG, "train.w": 0.0}))
    assert main(["train", "--config", str(zero), "--data", str(dataset), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_train_missing_dataset(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "missing.ltds"),
                 "--out-dir", str(out)]) == EXIT_DATA
    assert not (out / "model.ckpt").exists()


def test_train_resume_matches_unsplit(tmp_path, dataset, config):
    full, split = tmp_path / "full", tmp_path / "split"
    assert main(["train", "--config", str(config), "--data", str(dataset), "--out-dir", str(full)]) == 0
    assert main(["train", "--config", str(config), "--data", str(dataset), "--out-dir", str(split),
                 "--steps", "8"]) == 0
    assert main(["train", "--config", str(config), "--data", str(dataset), "--out-dir", str(split),
                 "--resume"]) == 0
    for name in ("train_log.csv", "model.ckpt", "train_state.npz"):
        assert (full / name).read_bytes() == (split / name).read_bytes(), name


def test_config_errors_listed_exhaustively(tmp_path, dataset, caplog):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train.p_uncond": 1.5, "train.tau_r": -1.0, "nonsense": 3, "arch.hidden": "wide"}))
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    text = caplog.text
    assert "nonsense" in text and "arch.hidden" in text
    bad.write_text(json.dumps({"train.p_uncond": 1.5, "train.tau_r": -1.0}))
    caplog.clear()
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "train.p_uncond" in caplog.text and "train.tau_r" in caplog.text
    assert not (tmp_path / "r" / "model.ckpt").exists()


@pytest.fixture
def trained(tmp_path, dataset, config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--data", str(dataset), "--out-dir", str(out)]) == 0
    return out / "model.ckpt"


def test_sample_outputs(tmp_path, trained):
    empty = tmp_path / "empty.ltds"
    assert main(["sample", "--checkpoint", str(trained), "--per-class", "0", "--out", str(empty)]) == 0
    assert read_dataset(empty).n_total == 0
    a, b = tmp_path / "a.ltds", tmp_path / "b.ltds"
    for p in (a, b):
        assert main(["sample", "--checkpoint", str(trained), "--per-class", "5", "--omega", "0", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert list(read_dataset(a).class_counts) == [5, 5, 5, 5]


def test_sample_arch_mismatch(tmp_path, trained):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL_CONFIG, "arch.hidden": 32}))
    assert main(["sample", "--checkpoint", str(trained), "--config", str(other), "--per-class", "2",
                 "--out", str(tmp_path / "g.ltds")]) == EXIT_DATA


def test_sample_default_omega():
    args = build_parser().parse_args(["sample", "--checkpoint", "c", "--out", "o"])
    assert args.omega == 0.6


def test_eval_self_comparison(tmp_path, dataset, trained):
    out = tmp_path / "report.json"
    lat = tmp_path / "lat.csv"
    assert main(["eval", "--real", str(dataset), "--gen", str(dataset), "--checkpoint", str(trained),
                 "--out", str(out), "--latents-out", str(lat), "--clusters", "20"]) == 0
    report = json.loads(out.read_text())
    assert list(report) == ["frechet", "per_class_frechet", "classifier_score", "f8", "f_inv8",
                            "improved_precision", "improved_recall", "latent_knn_purity", "silhouette"]
    assert report["frechet"] == 0.0
    assert report["f8"] == pytest.approx(1.0, abs=1e-12)
    assert report["improved_precision"] == report["improved_recall"] == 1.0
    assert lat.read_text().splitlines()[0].endswith(",label")


def test_eval_errors(tmp_path, dataset):
    assert main(["eval", "--real", str(dataset), "--gen", str(dataset), "--clusters", "100000",
                 "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG
    other = tmp_path / "d3.ltds"
    main(["make-data", "--classes", "4", "--head-count", "20", "--dim", "3", "--out", str(other)])
    assert main(["eval", "--real", str(dataset), "--gen", str(other), "--out", str(tmp_path / "r.json")]) == EXIT_DATA


def test_eval_deterministic(tmp_path, dataset, trained):
    outs = []
    for i in range(2):
        gen = tmp_path / f"g{i}.ltds"
        main(["sample", "--checkpoint", str(trained), "--per-class", "10", "--out", str(gen)])
        out = tmp_path / f"r{i}.json"
        lat = tmp_path / f"l{i}.csv"
        assert main(["eval", "--real", str(dataset), "--gen", str(gen), "--checkpoint", str(trained),
                     "--clusters", "10", "--out", str(out), "--latents-out", str(lat)]) == 0
        outs.append((out.read_bytes(), lat.read_bytes()))
    assert outs[0] == outs[1]


EXPECTED_FLAGS = {
    "make-data": {"--classes": "10", "--head-count": "5000", "--rho": "0.01", "--radius": "3.0", "--sigma": "0.5",
                  "--dim": "2", "--seed": "0", "--out": None},
    "train": {"--config": "None", "--data": "None", "--out-dir": "None", "--steps": "None", "--seed": "None",
              "--baseline": "False", "--resume": "False"},
    "sample": {"--checkpoint": None, "--config": "None", "--omega": "0.6", "--per-class": "100",
               "--sigma-rule": "beta", "--seed": "0", "--out": None},
    "eval": {"--real": None, "--gen": None, "--checkpoint": "None", "--knn-k": "3", "--clusters": "None",
             "--latent-k": "10", "--latent-t": "None", "--latent-condition": "label", "--seed": "0",
             "--out": "report.json", "--latents-out": "latents.csv"},
}


@pytest.mark.parametrize("command", sorted(EXPECTED_FLAGS))
def test_help_lists_every_flag_with_default(command, capsys):
    with pytest.raises(SystemExit):
        main([command, "--help"])
    text = " ".join(capsys.readouterr().out.split())
    found = set(re.findall(r"(--[a-z][a-z-]*)", text)) - {"--help"}
    assert found == set(EXPECTED_FLAGS[command])
    for flag, default in EXPECTED_FLAGS[command].items():
        if default is not None:
            assert re.search(re.escape(flag) + r".*?\(default: " + re.escape(default) + r"\)", text), flag


def test_every_config_key_has_default():
    assert all(v is not None for v in DEFAULTS.values())
    assert all("." in k for k in DEFAULTS)
