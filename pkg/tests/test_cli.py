import csv
import json

import numpy as np
import pytest

from mvrefer import cli
from mvrefer import io as fio


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert run("generate-dataset", "--preset", "smoke", "--count", 4, "--seed", 2, "--out", out) == 0
    return out


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_generate_is_deterministic(dataset, tmp_path):
    assert run("generate-dataset", "--preset", "smoke", "--count", 4, "--seed", 2, "--out", tmp_path) == 0
    for name in ("manifest.json", "run_config.json", "samples/s00002.json"):
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()
    manifest = fio.load_manifest(dataset / "manifest.json")
    assert manifest["count"] == 4 and all(r["num_positive"] >= 1 for r in manifest["samples"])


def test_config_file_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "smoke", "count": 2, "scene": {"num_objects": 3}}))
    out = tmp_path / "o"
    assert run("generate-dataset", "--config", cfg, "--out", out) == 0
    manifest = fio.load_manifest(out / "manifest.json")
    assert manifest["count"] == 2 and manifest["spec"]["num_objects"] == 3
    rc = json.loads((out / "run_config.json").read_text())
    assert rc["params"]["spec"]["num_objects"] == 3


def test_zero_epochs_checkpoint_equals_init(dataset, tmp_path):
    assert run("train", "--dataset", dataset, "--epochs", 0, "--seed", 5, "--out", tmp_path) == 0
    cfg, params = fio.load_checkpoint(tmp_path / "checkpoint.json")
    from mvrefer.model import init_params

    init = init_params(cfg, 5)
    assert all(params[k].tobytes() == init[k].tobytes() for k in init)


def test_train_curve_and_reproducibility(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("train", "--dataset", dataset, "--epochs", 4, "--seed", 1, "--out", out) == 0
    assert (a / "loss_curve.csv").read_bytes() == (b / "loss_curve.csv").read_bytes()
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    rows = _rows(a / "loss_curve.csv")
    assert {"step", "bce", "pvso", "total"} <= set(rows[0])
    assert len(rows) == 16
    first = np.mean([float(r["total"]) for r in rows[:4]])
    last = np.mean([float(r["total"]) for r in rows[-4:]])
    assert last < first


def test_evaluate_ground_truth_and_empty(dataset, tmp_path):
    from mvrefer.io import load_dataset

    _, samples = load_dataset(dataset / "manifest.json")
    fio.save_predictions(tmp_path / "gt.json", {s.sample_id: s.gt_mask3d.values for s in samples})
    fio.save_predictions(tmp_path / "empty.json", {s.sample_id: np.zeros(len(s.cloud)) for s in samples})
    assert run("evaluate", "--dataset", dataset, "--predictions", tmp_path / "gt.json", "--out", tmp_path / "g") == 0
    rows = _rows(tmp_path / "g" / "report.csv")
    assert [r["split"] for r in rows] == ["hard", "easy", "unique", "multiple", "overall"]
    overall = rows[-1]
    for k in ("miou_global", "miou_view", "miou_pos", "miou_neg", "acc@25", "acc@50"):
        assert float(overall[k]) == 100.0
    assert run("evaluate", "--dataset", dataset, "--predictions", tmp_path / "empty.json", "--out", tmp_path / "e") == 0
    overall = _rows(tmp_path / "e" / "report.csv")[-1]
    assert float(overall["miou_neg"]) == 100.0
    assert float(overall["miou_pos"]) == 0.0 and float(overall["miou_global"]) == 0.0
    assert (tmp_path / "e" / "report.txt").exists() and (tmp_path / "e" / "run_config.json").exists()


def test_evaluate_checkpoint(dataset, tmp_path):
    assert run("train", "--dataset", dataset, "--epochs", 1, "--out", tmp_path / "t") == 0
    assert run("evaluate", "--dataset", dataset, "--checkpoint", tmp_path / "t" / "checkpoint.json",
               "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "predictions.json").exists()


def test_errors_write_a_record(dataset, tmp_path):
    fio.save_predictions(tmp_path / "p.json", {"nobody": np.zeros(3)})
    code = run("evaluate", "--dataset", dataset, "--predictions", tmp_path / "p.json", "--out", tmp_path / "x")
    assert code == 1
    rec = json.loads((tmp_path / "x" / "error.json").read_text())
    assert rec["error_type"] == "ProtocolError" and "missing" in rec["message"]
    assert run("ablate-ratio", "--dataset", dataset, "--ratios", 1.5, "--out", tmp_path / "y") == 1
    assert run("train", "--dataset", tmp_path / "nowhere", "--out", tmp_path / "z") == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_is_reported(dataset, tmp_path):
    code = run("train", "--dataset", dataset, "--epochs", 1, "--lr", 1e300, "--out", tmp_path)
    assert code == 1
    rec = json.loads((tmp_path / "error.json").read_text())
    assert rec["error_type"] == "NonFiniteLoss" and "step" in rec


def test_fgd_demo(tmp_path):
    assert run("fgd-demo", "--sizes", 1e2, 1e4, 1e6, "--out", tmp_path) == 0
    rows = [r for r in _rows(tmp_path / "fgd.csv") if r["init"] == "zero"]
    assert [float(r["empirical_grad"]) for r in rows] == [2e-2, 2e-4, 2e-6]
    text = (tmp_path / "summary.txt").read_text()
    assert "log-log slope (zero init): -1.000000" in text
    ratio = float(text.split("ratio: min ")[1].split(",")[0])
    assert ratio >= 10


def test_ablate_ratio_default_rows(dataset, tmp_path):
    assert run("ablate-ratio", "--dataset", dataset, "--epochs", 1, "--out", tmp_path) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert [float(r["ratio"]) for r in rows] == [0.0, 0.25, 0.5, 0.75]
    assert (tmp_path / "ratio_0.5_report.csv").exists()


def test_worker_pool_matches_serial(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("generate-dataset", "--preset", "smoke", "--count", 3, "--seed", 8, "--out", a) == 0
    assert run("generate-dataset", "--preset", "smoke", "--count", 3, "--seed", 8, "--workers", 2, "--out", b) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
