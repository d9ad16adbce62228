import csv
import json

import numpy as np
import pytest

from advkit.cli import main
from advkit.io import write_cifar10_binary

BASE = {
    "seed": 3,
    "dataset": {"classes": 4, "dim": 8, "samples_per_class": 50, "test_samples_per_class": 10},
    "models": [{"id": "std", "path": "std.advf", "hidden": [16], "train": {"epochs": 5}},
               {"id": "obf", "path": "std.advf", "hidden": [16], "logit_scale": 10000}],
    "attack": {"iterations": 20, "engine": "pgd", "losses": ["ce", "ce-scaled", "l2-scaled", "jitter"],
               "tune_sigma": True, "tuning_samples": 10},
    "analysis": {"csm_samples": 5, "landscape_steps": 5},
}


def write_config(tmp_path, doc=BASE, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run_all(cfg, out, *extra):
    for command in ("train", "attack", "analyze", "report"):
        assert main([command, "--config", str(cfg), "--out", str(out), *extra]) == 0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    run_all(cfg, tmp / "a")
    run_all(cfg, tmp / "b", "--threads", "3")
    return tmp, cfg


def test_artifacts_written(pipeline):
    tmp, _ = pipeline
    out = tmp / "a"
    for name in ("train_summary.json", "results.csv", "summary.json", "analysis.json", "table.csv",
                 "ablation.csv", "norms.csv", "models/std.advf", "adv/std__jitter.npy"):
        assert (out / name).exists(), name


def test_pipeline_is_byte_identical(pipeline):
    tmp, _ = pipeline
    a, b = tmp / "a", tmp / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.json")
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_summary_cross_product(pipeline):
    tmp, _ = pipeline
    summary = json.loads((tmp / "a" / "summary.json").read_text())
    rows = [(m, loss) for m, entry in summary["models"].items() for loss in entry["losses"]]
    assert len(rows) == 2 * 4
    for entry in summary["models"].values():
        best = min(v["robust_accuracy"] for v in entry["losses"].values())
        assert entry["best"] == sorted(k for k, v in entry["losses"].items() if v["robust_accuracy"] == best)
        others = min(v["robust_accuracy"] for k, v in entry["losses"].items() if k != "jitter")
        assert entry["diff"] == pytest.approx(entry["losses"]["jitter"]["robust_accuracy"] - others)
    results = read_csv(tmp / "a" / "results.csv")
    assert len(results) == 2 * 4 * 40


def test_sigma_tuning_cost_is_grid_times_batch(pipeline):
    tmp, _ = pipeline
    summary = json.loads((tmp / "a" / "summary.json").read_text())
    tuning = summary["models"]["std"]["tuning"]["jitter"]
    assert tuning["sample_attacks"] == 5 * 10
    assert tuning["sigma"] in (0.0, 0.05, 0.1, 0.15, 0.2)
    timing = json.loads((tmp / "a" / "timing.json").read_text())
    assert timing["seconds"]["std"]["jitter/tuning"] > 0


def test_ablation_report(pipeline):
    tmp, _ = pipeline
    rows = [r for r in read_csv(tmp / "a" / "ablation.csv") if r["model"] == "obf"]
    assert [r["component"] for r in rows] == ["CE", "CE + scaled", "scaled + L2", "Jitter"]
    acc = [float(r["accuracy"]) for r in rows]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert float(rows[0]["delta"]) == 0
    assert [float(r["delta"]) for r in rows] == pytest.approx([a - acc[0] for a in acc])


def test_analysis_report_identities(pipeline):
    tmp, _ = pipeline
    report = json.loads((tmp / "a" / "analysis.json").read_text())
    for loss, part in report["partition"].items():
        assert sum(part["histogram"]) == 40
        assert part["robust"] + part["non_robust"] + part["intermediate"] == 40
    for by_loss in report["confusion"].values():
        for variants in by_loss.values():
            full, mis, binary = (np.array(variants[v]["counts"]) for v in ("all", "misclassified-only", "binarized"))
            assert full.sum() == 40 and not np.diag(mis).any()
            np.testing.assert_array_equal(binary, (mis > 0).astype(int))


def test_missing_upstream_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "advkit attack" in capsys.readouterr().err
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "advkit train" in capsys.readouterr().err
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path, {"attack": {"scale_alpha": 100}})
    assert main(["attack", "--config", str(cfg)]) == 2
    assert "attack.scale_alpha" in capsys.readouterr().err


def test_flags(tmp_path):
    with pytest.raises(SystemExit):
        main(["train"])
    with pytest.raises(SystemExit):
        main(["train", "--config", "x.json", "--precision", "16"])


def test_seed_override_changes_streams(tmp_path):
    doc = dict(BASE, models=[BASE["models"][0]], attack=dict(BASE["attack"], losses=["jitter"], tune_sigma=False))
    cfg = write_config(tmp_path, doc)
    run_all(cfg, tmp_path / "s1", "--seed", "1")
    run_all(cfg, tmp_path / "s2", "--seed", "2")
    r1, r2 = read_csv(tmp_path / "s1" / "results.csv"), read_csv(tmp_path / "s2" / "results.csv")
    assert r1[0]["seed"] != r2[0]["seed"]


def test_precision_64(tmp_path):
    doc = dict(BASE, models=[BASE["models"][0]], attack=dict(BASE["attack"], losses=["cw"], tune_sigma=False))
    cfg = write_config(tmp_path, doc)
    run_all(cfg, tmp_path / "o", "--precision", "64")
    assert np.load(tmp_path / "o" / "adv" / "std__cw.npy").dtype == np.float64


def test_cifar_dataset(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("train.bin", "test.bin"):
        write_cifar10_binary(rng.integers(0, 256, (20, 3072)) / 255, rng.integers(0, 10, 20), tmp_path / name)
    doc = {"dataset": {"kind": "cifar10", "train_files": [str(tmp_path / "train.bin")],
                       "test_file": str(tmp_path / "test.bin"), "limit": 6},
           "models": [{"id": "c", "path": "c.advf", "hidden": [4], "train": {"epochs": 1}}],
           "attack": {"iterations": 5, "losses": ["cw"]},
           "analysis": {"csm_samples": 2, "landscape_steps": 3, "channels": 3}}
    cfg = write_config(tmp_path, doc)
    run_all(cfg, tmp_path / "o")
    assert len(read_csv(tmp_path / "o" / "results.csv")) == 6
    report = json.loads((tmp_path / "o" / "analysis.json").read_text())
    assert len(report["perturbation_magnitude"]["c"]["cw"]) == 1024
