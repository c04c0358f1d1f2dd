import csv
import json
import subprocess
import sys

import pytest
from helpers import tiny_config

from cmseg.cli import main
from cmseg.config import save_config
from cmseg.data import read_volume


def error_payload(err: str) -> dict:
    line = [ln for ln in err.splitlines() if ln.startswith("error: ")][-1]
    return json.loads(line[len("error: "):])


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    save_config(tiny_config("unused", epochs=2), path)
    return path


@pytest.fixture(scope="module")
def trained(tiny_dataset, tiny_ini, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["train", "--config", str(tiny_ini), "--manifest", str(tiny_dataset.root / "manifest.txt"),
                 "--out", str(out), "--seed", "2"])
    assert code == 0
    return out


def test_gradcheck_suite_exit_zero(capsys):
    assert main(["gradcheck", "--suite", "norm"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out
    assert main(["gradcheck", "--suite", "nosuch"]) == 2
    assert error_payload(capsys.readouterr().err)["type"] == "UsageError"


def test_gen_data_is_reproducible(tmp_path, capsys):
    args = ["--seed", "7", "--set", "dims=12,12,12", "--set", "counts.train=1,1", "--set", "counts.test=1,1"]
    assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
    a = (tmp_path / "a" / "manifest.txt").read_text()
    b = (tmp_path / "b" / "manifest.txt").read_text()
    assert a == b and len(a.splitlines()) >= 4
    for name in sorted(p.name for p in (tmp_path / "a").glob("*.csg")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("argv,code", [
    (["train", "--no-such-flag"], 2),
    (["frobnicate"], 2),
    (["train", "--set", "model.nosuch=1", "--manifest", "m.txt"], 2),
    (["train", "--set", "epochs=0", "--manifest", "m.txt"], 2),
    (["evaluate", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.txt"], 1),
])
def test_errors_print_one_json_line(argv, code, capsys):
    assert main(argv) == code
    payload = error_payload(capsys.readouterr().err)
    assert set(payload) == {"type", "message"}


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "cmseg", "train", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert error_payload(proc.stderr)["type"] == "UsageError"


def test_train_outputs(trained):
    assert (trained / "trace.csv").exists() and (trained / "config.ini").exists()
    assert any(trained.glob("*.ckpt"))


def test_evaluate_and_infer(trained, tiny_dataset, tmp_path, capsys):
    ckpt = str(next(trained.glob("best*.ckpt")))
    assert main(["evaluate", "--checkpoint", ckpt, "--manifest", str(tiny_dataset.root / "manifest.txt"),
                 "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "modality 0" in out and "modality 1" in out
    with open(tmp_path / "ev" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    summary = {(r["modality"], r["class"]) for r in rows if r["scope"] == "summary"}
    assert ("0", "mean") in summary and ("1", "whole_foreground") in summary
    assert all(0.0 <= float(r["dice"]) <= 1.0 for r in rows)

    entry = next(e for e in tiny_dataset.entries if e.split == "test")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(tiny_dataset.root / entry.path),
                 "--out", str(tmp_path / "inf"), "--slices", "3,8"]) == 0
    vol, pred = read_volume(tmp_path / "inf" / "prediction.csg")
    assert pred.shape == vol.dims and int(pred.max()) < 8
    assert len(list((tmp_path / "inf").glob("*.ppm"))) >= 2


def test_compare_schema(tiny_dataset, tiny_ini, tmp_path, capsys):
    code = main(["compare", "--config", str(tiny_ini), "--manifest", str(tiny_dataset.root / "manifest.txt"),
                 "--out", str(tmp_path / "cmp"), "--seeds", "0", "--set", "epochs=1"])
    assert code == 0
    with open(tmp_path / "cmp" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["protocol"] for r in rows] == ["baseline", "fine-tune", "joint", "conditional-interleaved"]
    for r in rows:
        assert 0.0 <= float(r["mean_dice_b"]) <= 1.0 and r["seeds"] == "1"
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("protocol,seeds,mean_dice_b")
