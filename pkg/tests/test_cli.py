import json

import numpy as np
import pytest

from crowncut.cli import run
from crowncut.harness import read_csv
from crowncut.raster_io import load_mask

TINY = ["--size", "16", "--depth", "2", "--base", "4", "--epochs", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--count", "4", "--size", "128", "--trees", "1", "--seed", "3", "--out", str(d / "s")]) == 0
    assert run(["groundtruth", "--in", str(d / "s"), "--out", str(d / "g"), "--theta-m", "0.15", "--k", "5"]) == 0
    assert run(["train", "--in", str(d / "g"), "--out", str(d / "ms.unet"), *TINY]) == 0
    assert run(["train", "--in", str(d / "g"), "--band", "GRE", "--out", str(d / "one.unet"), *TINY]) == 0
    assert run(["quantize", "--model", str(d / "one.unet"), "--in", str(d / "g"), "--calib", "2"]) == 0
    return d


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_and_groundtruth_outputs(work):
    scenes = sorted(p.name for p in (work / "s").iterdir())
    assert scenes == ["scene_000", "scene_001", "scene_002", "scene_003"]
    assert len(list((work / "g").glob("*_mask.pgm"))) == 4
    doc = json.loads((work / "g" / "scene_000_gt.json").read_text())
    assert doc["parameters"]["theta_m"] == 0.15 and doc["parameters"]["k"] == 5
    assert doc["alignment"]["ref"] == "NIR"
    assert load_mask(work / "g" / "scene_000_mask.pgm").shape[0] < 128


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--count", "2", "--size", "128", "--trees", "1", "--seed", "9",
                    "--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_groundtruth_threads_identical(work, tmp_path):
    assert run(["groundtruth", "--in", str(work / "s"), "--out", str(tmp_path / "t2"), "--threads", "2"]) == 0
    assert _tree(tmp_path / "t2") == _tree(work / "g")


def test_align_writes_bands_and_chain(work, tmp_path):
    assert run(["align", "--in", str(work / "s"), "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a").glob("*_NIR.pgm"))) == 4
    chain = json.loads((tmp_path / "a" / "scene_001_chain.json").read_text())
    assert set(chain["homographies"]) == {"GRE", "RED", "REG", "NIR"}


def test_train_outputs_and_reproducibility(work, tmp_path):
    trace = json.loads((work / "ms.trace.json").read_text())
    assert len(trace["trace"]) == 2 and len(trace["test_scenes"]) == 1
    assert run(["train", "--in", str(work / "g"), "--out", str(tmp_path / "again.unet"), *TINY]) == 0
    assert (tmp_path / "again.unet").read_bytes() == (work / "ms.unet").read_bytes()


def test_infer_one_band_quantized_from_band_file(work, tmp_path):
    band = work / "s" / "scene_000" / "scene_000_GRE.pgm"
    assert run(["infer", "--model", str(work / "one.qunet"), "--band", "GRE", "--in", str(band),
                "--out", str(tmp_path)]) == 0
    assert load_mask(tmp_path / "scene_000_GRE_pred.pgm").shape == (128, 128)


def test_infer_multispectral_dir_and_rgb(work, tmp_path):
    assert run(["infer", "--model", str(work / "ms.unet"), "--in", str(work / "s"), "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*_pred.pgm"))) == 4
    rgb = work / "g" / "scene_002_rgb.pgm"
    assert run(["infer", "--model", str(work / "ms.unet"), "--in", str(rgb), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "scene_002_pred.pgm").exists()


def test_infer_threads_identical(work, tmp_path):
    args = ["infer", "--model", str(work / "one.qunet"), "--in", str(work / "s")]
    assert run([*args, "--out", str(tmp_path / "1")]) == 0
    assert run([*args, "--out", str(tmp_path / "3"), "--threads", "3"]) == 0
    assert _tree(tmp_path / "1") == _tree(tmp_path / "3")


def test_eval_reports(work, tmp_path):
    assert run(["eval", "--model", str(work / "one.qunet"), "--in", str(work / "g"), "--out", str(tmp_path)]) == 0
    kind, rows = read_csv(tmp_path / "eval.csv")
    assert kind == "eval" and len(rows) == 4
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert doc["path"] == "quantized" and 0 <= doc["accuracy"] <= 1
    assert sum(doc["confusion"].values()) == 4 * 16 * 16


def test_bench_reports(work, tmp_path):
    assert run(["bench", "--model", str(work / "ms.unet"), "--model", str(work / "one.qunet"),
                "--in", str(work / "s" / "scene_000"), "--reps", "3", "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "bench.csv")
    pre = {r["model"]: r["ms_median"] for r in rows if r["stage"] == "preprocess"}
    assert pre["one.qunet"] < pre["ms.unet"]
    assert run(["bench", "--model", str(work / "ms.unet"), "--in", str(work / "s"), "--reps", "2"]) == 1


def test_sweep_reports(work, tmp_path):
    assert run(["sweep", "--in", str(work / "g"), "--sizes", "1,2", "--repeats", "1", *TINY[:6],
                "--epochs", "1", "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "sweep.csv")
    assert [r["train_size"] for r in rows] == [1, 2]
    assert set(json.loads((tmp_path / "sweep.json").read_text())["means"]) == {"1", "2"}
    assert run(["sweep", "--in", str(work / "g"), "--sizes", "0", *TINY]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        from crowncut.cli import main
        main(["--version"])
    assert e.value.code == 0
    assert "model format v1" in capsys.readouterr().out


def test_help_per_subcommand(capsys):
    for cmd in ("synth", "align", "groundtruth", "train", "quantize", "infer", "eval", "bench", "sweep"):
        assert run([cmd, "--help"]) == 0
    assert "--theta-m" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["synth", "--bogus"],
    ["align"],
    ["groundtruth", "--in", "x", "--rp", "1,2"],
    ["groundtruth", "--in", "x", "--theta-m", "-1"],
    ["synth", "--count", "0"],
    ["infer", "--model", "m.bin", "--in", "x"],
])
def test_usage_errors_exit_1(argv, tmp_path):
    if argv and argv[-1] == "x":
        (tmp_path / "x").mkdir()
        argv = [*argv[:-1], str(tmp_path / "x")]
    assert run(argv) == 1


def test_data_errors_exit_2(work, tmp_path):
    assert run(["align", "--in", str(tmp_path / "missing")]) == 2
    (tmp_path / "empty").mkdir()
    assert run(["groundtruth", "--in", str(tmp_path / "empty")]) == 2
    bad = tmp_path / "bad.unet"
    bad.write_bytes(b"not a model")
    assert run(["eval", "--model", str(bad), "--in", str(work / "g")]) == 2
    broken = tmp_path / "broken"
    (broken / "s").mkdir(parents=True)
    for b in ("GRE", "RED", "REG", "NIR"):
        (broken / "s" / f"p_{b}.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    assert run(["align", "--in", str(broken), "--out", str(tmp_path / "o")]) == 2
