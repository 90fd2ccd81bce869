import json
import zipfile

import numpy as np
import pytest
import torch

from avsl import cli, training
from avsl.data import load_png
from avsl.model import load_checkpoint

TINY = ["--width-mult", "0.125", "--k", "8", "--batch-size", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("synth-data", "--n-train", 8, "--n-test", 4, "--n-typed", 3, "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--manifest", dataset / "train.jsonl", "--epochs", 2, *TINY, "--out-dir", out) == 0
    return out


def test_synth_data_files(dataset):
    for name, n in (("train", 8), ("test", 4), ("typeA", 3), ("typeB", 3)):
        lines = (dataset / f"{name}.jsonl").read_text().splitlines()
        assert len(lines) == n
    rec = json.loads((dataset / "typeB.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"id", "image", "audio", "boxes", "split"}


def test_synth_data_type_b_and_same_seed_bytes(tmp_path):
    for d in ("a", "b"):
        assert run("synth-data", "--n-train", 1, "--n-test", 30, "--n-typed", 1, "--type-mix", "B",
                   "--out-dir", tmp_path / d) == 0
    a = (tmp_path / "a" / "test.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "test.jsonl").read_bytes()
    assert len(a.splitlines()) == 30
    for f in sorted((tmp_path / "a" / "media").iterdir())[:6]:
        assert f.read_bytes() == (tmp_path / "b" / "media" / f.name).read_bytes()


def test_synth_data_zero_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("synth-data", "--n-train", 0, "--n-test", 1, "--out-dir", tmp_path)
    assert info.value.code == 2


def test_train_outputs(trained, capsys):
    assert (trained / "checkpoint.zip").exists()
    assert len((trained / "trace.jsonl").read_text().splitlines()) == 4
    model, extra = load_checkpoint(trained / "checkpoint.zip")
    assert model.config.k == 8 and model.config.ablate_constant_p is False


def test_train_rerun_identical_trace_and_ablation_flag(tmp_path, dataset, trained, capsys):
    out = tmp_path / "again"
    assert run("train", "--manifest", dataset / "train.jsonl", "--epochs", 2, *TINY, "--out-dir", out) == 0
    assert (out / "trace.jsonl").read_bytes() == (trained / "trace.jsonl").read_bytes()
    printed = capsys.readouterr().out
    assert "epoch   1" in printed and "epoch   2" in printed
    abl = tmp_path / "abl"
    assert run("train", "--manifest", dataset / "train.jsonl", "--epochs", 1, *TINY, "--ablate-constant-p",
               "--out-dir", abl) == 0
    assert load_checkpoint(abl / "checkpoint.zip")[0].config.ablate_constant_p is True


def test_eval_both_writes_three_reports(tmp_path, dataset, trained):
    assert run("eval", "--checkpoint", trained / "checkpoint.zip", "--manifest", dataset / "test.jsonl",
               "--mode", "both", "--out-dir", tmp_path) == 0
    loc = json.loads((tmp_path / "loc.json").read_text())
    pot = json.loads((tmp_path / "potential.json").read_text())
    gap = json.loads((tmp_path / "gap.json").read_text())
    assert gap["auc"] == pytest.approx(loc["auc"] - pot["auc"], abs=1e-12)
    assert len(loc["curve"]) == 101 and len(loc["per_sample"]) == 4


def test_eval_potential_without_audio(tmp_path, dataset, trained):
    import shutil

    copy = tmp_path / "data"
    shutil.copytree(dataset, copy)
    for wav in (copy / "media").glob("*.wav"):
        wav.unlink()
    assert run("eval", "--checkpoint", trained / "checkpoint.zip", "--manifest", copy / "test.jsonl",
               "--mode", "potential", "--out-dir", tmp_path / "o") == 0
    assert len(json.loads((tmp_path / "o" / "potential.json").read_text())["per_sample"]) == 4


def test_eval_random_reproducible(tmp_path, dataset):
    for d in ("a", "b"):
        assert run("eval", "--manifest", dataset / "test.jsonl", "--mode", "random", "--seed", 7,
                   "--out-dir", tmp_path / d) == 0
    assert (tmp_path / "a" / "random.json").read_bytes() == (tmp_path / "b" / "random.json").read_bytes()


def test_concat_and_gap_commands(tmp_path, dataset, trained, capsys):
    ck = trained / "checkpoint.zip"
    assert run("concat-eval", "--checkpoint", ck, "--manifest", dataset / "test.jsonl", "--n-pairs", 3,
               "--out-dir", tmp_path) == 0
    assert len(json.loads((tmp_path / "concat_loc.json").read_text())["per_sample"]) == 6
    assert run("gap", "--checkpoint", ck, "--type-a", dataset / "typeA.jsonl", "--type-b", dataset / "typeB.jsonl",
               "--out-dir", tmp_path) == 0
    assert "Type B" in (tmp_path / "type_gap.txt").read_text()
    assert set(json.loads((tmp_path / "type_gap.json").read_text())["rows"]) == {"Type A", "Type B"}


def test_visualize(tmp_path, dataset, trained):
    sid = json.loads((dataset / "test.jsonl").read_text().splitlines()[0])["id"]
    other = json.loads((dataset / "test.jsonl").read_text().splitlines()[1])["audio"]
    base = ["visualize", "--checkpoint", trained / "checkpoint.zip", "--manifest", dataset / "test.jsonl",
            "--sample-id", sid]
    assert run(*base, "--out", tmp_path / "own") == 0
    assert run(*base, "--audio", dataset / other, "--out", tmp_path / "swap") == 0
    pngs = sorted((tmp_path / "own").glob("*.png"))
    assert len(pngs) == 3
    for p in pngs:
        assert load_png(p).shape == (256, 256, 3)
    name = f"{sid}_potential.png"
    assert (tmp_path / "own" / name).read_bytes() == (tmp_path / "swap" / name).read_bytes()


def test_visualize_unknown_id(tmp_path, dataset, trained):
    assert run("visualize", "--checkpoint", trained / "checkpoint.zip", "--manifest", dataset / "test.jsonl",
               "--sample-id", "nope", "--out-dir", tmp_path) == 2


def test_config_mismatch_exit_code(tmp_path, dataset, trained):
    src = trained / "checkpoint.zip"
    with zipfile.ZipFile(src) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    cfg = json.loads(files["config.json"])
    cfg["k"] = 16
    files["config.json"] = json.dumps(cfg).encode()
    bad = tmp_path / "bad.zip"
    with zipfile.ZipFile(bad, "w") as zf:
        for n, b in files.items():
            zf.writestr(n, b)
    assert run("eval", "--checkpoint", bad, "--manifest", dataset / "test.jsonl", "--out-dir", tmp_path) == 4


def test_nonfinite_exit_code(tmp_path, dataset, monkeypatch, capsys):
    real = training.batch_loss

    def poisoned(*a, **k):
        res = real(*a, **k)
        res.loss = res.loss * float("nan")
        return res

    monkeypatch.setattr(training, "batch_loss", poisoned)
    code = run("train", "--manifest", dataset / "train.jsonl", "--epochs", 1, *TINY, "--out-dir", tmp_path)
    assert code == 3
    assert "step 0" in capsys.readouterr().err


def test_missing_manifest_exit_code(tmp_path):
    assert run("eval", "--manifest", tmp_path / "none.jsonl", "--mode", "random", "--out-dir", tmp_path) == 2
