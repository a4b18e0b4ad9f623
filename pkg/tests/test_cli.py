import json

import numpy as np
import pytest
from click.testing import CliRunner

from fvattn.cli import main
from fvattn.tensorio import read_tensor


def invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res.output


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"kind": "blob_images", "counts": {"train": 12, "val": 6, "test": 6}}))
    out = json.loads(invoke("synth", "--spec", spec, "--out-dir", root / "data"))
    assert out["train"]["n"] == 12
    for split in ("train", "val", "test"):
        invoke("--seed", 1, "extract", "--manifest", root / f"data/{split}.json",
               "--out-dir", root / f"feat-{split}")
    return root


def test_extract_writes_stage_tensors(workdir):
    m = json.loads((workdir / "feat-train" / "manifest.json").read_text())
    assert len(m["samples"]) == 12
    assert sorted(m["samples"][0]["stage_feature_paths"]) == ["3", "4"]


def test_rank_gmm_encode_train_eval(workdir):
    w = workdir
    invoke("rank", "--manifest", w / "data/train.json", "--cap", 8, "--out", w / "rank.json")
    assert len(json.loads((w / "rank.json").read_text())["entries"]) == 8
    fit = json.loads(invoke("gmm-fit", "--features", w / "feat-train/manifest.json",
                            "--ranking", w / "rank.json", "--k", 2, "--out", w / "g.bin"))
    assert fit["K"] == 2 and fit["d"] == 192
    for split in ("train", "val", "test"):
        invoke("encode", "--gmm", w / "g.bin", "--manifest", w / f"feat-{split}/manifest.json",
               "--out", w / f"fv-{split}.fvt")
    assert read_tensor(w / "fv-train.fvt").shape == (12, 2 * (1 + 2 * 192))
    cfg = w / "train.json"
    cfg.write_text(json.dumps({"hidden": 16, "epochs": 3, "decay_epochs": [2, 3]}))
    out = json.loads(invoke("train", "--features", w / "fv-train.fvt",
                            "--manifest", w / "data/train.json",
                            "--val-features", w / "fv-val.fvt", "--val-manifest", w / "data/val.json",
                            "--config", cfg, "--out", w / "model.bin"))
    assert 1 <= out["epochs_run"] <= 3
    assert (w / "model.bin.log.jsonl").exists()
    scores = json.loads(invoke("eval", "--model", w / "model.bin", "--features", w / "fv-test.fvt",
                               "--manifest", w / "data/test.json", "--out", w / "report.json"))
    rep = json.loads((w / "report.json").read_text())
    assert rep["acc"] == scores["acc"] and rep["n"] == 6


def test_kl_and_matrix_study(tmp_path):
    spec = tmp_path / "mix.json"
    spec.write_text(json.dumps({"kind": "planted_mixture", "means": [[0, 0], [6, 6]],
                                "stds": [1, 1], "counts": [200, 200]}))
    invoke("synth", "--spec", spec, "--out-dir", tmp_path)
    invoke("--seed", 3, "gmm-fit", "--features", tmp_path / "features.fvt", "--k", 2,
           "--out", tmp_path / "fit.bin")
    est = json.loads(invoke("kl", "--gmm-f", tmp_path / "planted_gmm.bin",
                            "--gmm-g", tmp_path / "fit.bin", "--samples", 20000))
    assert 0 <= est["value"] < 0.05 and est["n"] == 20000
    same = json.loads(invoke("kl", "--gmm-f", tmp_path / "fit.bin", "--gmm-g", tmp_path / "fit.bin",
                             "--samples", 100))
    assert same["value"] == 0.0
    out = json.loads(invoke("study", "--matrix", tmp_path / "features.fvt", "--ratios", "0.5,1.0",
                            "--seeds", "0,1", "--k", 2, "--samples", 2000, "--out-dir", tmp_path / "st"))
    assert out["rows"] == 4
    rows = json.loads((tmp_path / "st" / "study.json").read_text())
    assert [r["kl_to_full"] for r in rows if r["ratio"] == 1.0 and r["seed"] == 0] == [0.0]


def test_pipeline_command(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "blob_images", "counts": {"train": 16, "val": 6, "test": 8}}))
    invoke("synth", "--spec", spec, "--out-dir", tmp_path / "data")
    cfg = tmp_path / "pipe.json"
    cfg.write_text(json.dumps({
        "manifests": {s: f"data/{s}.json" for s in ("train", "val", "test")},
        "cap": 16, "gmm": {"K": 2, "max_iters": 20},
        "classifier": {"hidden": 16, "epochs": 2, "decay_epochs": [1, 2]},
    }))
    out = json.loads(invoke("--config", cfg, "--out-dir", tmp_path / "run", "pipeline"))
    assert 0 <= out["acc"] <= 1
    assert (tmp_path / "run" / "report.json").exists()


def test_errors_exit_nonzero(tmp_path):
    res = CliRunner().invoke(main, ["study", "--ratios", "0.5"])
    assert res.exit_code != 0
    X = np.zeros((5, 2))
    from fvattn.tensorio import write_tensor

    write_tensor(tmp_path / "z.fvt", X)
    res = CliRunner().invoke(main, ["gmm-fit", "--features", str(tmp_path / "z.fvt"), "--k", 2,
                                    "--out", str(tmp_path / "g.bin")])
    assert res.exit_code != 0
