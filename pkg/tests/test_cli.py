import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from decodet.cli import main
from decodet.formats import write_tensor

DATA = Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--detections", "x"])
    assert exc.value.code == 1
    assert run("detect") == 1
    assert run("simulate", "--out", "/nonexistent/x", "--set", "nms_mode=bogus") == 1


def test_eval_golden(tmp_path):
    out = tmp_path / "r.json"
    assert run("eval", "--detections", DATA / "eval_dets.jsonl", "--gt", DATA / "eval_gt.jsonl", "--out", out) == 0
    got = json.loads(out.read_text())
    want = json.loads((DATA / "eval_report_golden.json").read_text())
    assert got["map"] == pytest.approx(want["map"], abs=1e-12)
    assert [(r["class"], r["num_gt"], r["num_det"]) for r in got["per_class"]] == [
        (r["class"], r["num_gt"], r["num_det"]) for r in want["per_class"]
    ]
    assert [r["ap"] for r in got["per_class"]] == pytest.approx([r["ap"] for r in want["per_class"]], abs=1e-12)
    out7 = tmp_path / "r7.json"
    run("eval", "--detections", DATA / "eval_dets.jsonl", "--gt", DATA / "eval_gt.jsonl", "--iou", 0.7, "--out", out7)
    assert json.loads(out7.read_text())["map"] == pytest.approx((5 / 6 + 0.5 + 0.0) / 3, abs=1e-12)


def test_eval_malformed_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"box": [0,0,1,1], "class": 0, "score": 0.5}\n{"box": [0,0,1,1], "class": 0, "score"\n')
    assert run("eval", "--detections", bad, "--gt", DATA / "eval_gt.jsonl") == 2
    assert "bad.jsonl:2: malformed JSON" in capsys.readouterr().err


def test_eval_unknown_class(tmp_path, capsys):
    assert run("eval", "--detections", DATA / "eval_dets.jsonl", "--gt", DATA / "eval_gt.jsonl", "--num-classes", 2) == 2
    assert "class" in capsys.readouterr().err
    assert run("eval", "--detections", DATA / "eval_dets.jsonl", "--gt", DATA / "eval_gt.jsonl", "--num-classes", 3) == 0
    odd = tmp_path / "odd.jsonl"
    odd.write_text('{"box": [0,0,1,1], "class": 9, "score": 0.5}\n')
    assert run("eval", "--detections", odd, "--gt", DATA / "eval_gt.jsonl", "--strict-classes") == 2


def test_eval_empty_detections(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    out = tmp_path / "r.json"
    assert run("eval", "--detections", empty, "--gt", DATA / "eval_gt.jsonl", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["map"] == 0.0
    assert [r["class"] for r in rep["per_class"]] == [0, 1, 2]


def test_cluster_cli(tmp_path):
    feats = tmp_path / "f.ddk"
    write_tensor(feats, np.random.default_rng(0).normal(size=(20, 6)))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("cluster", "--features", feats, "--k", 4, "--seed", 3, "--out", a) == 0
    assert run("cluster", "--features", feats, "--k", 4, "--seed", 3, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert (doc["C"], doc["K"], doc["D"]) == (20, 4, 6)
    assert run("cluster", "--features", feats, "--k", 1, "--seed", 0, "--out", a) == 0
    assert json.loads(a.read_text())["assignment"] == [0] * 20
    assert run("cluster", "--features", feats, "--k", 21, "--seed", 0) == 2
    write_tensor(feats, np.zeros((2, 3, 4)))
    assert run("cluster", "--features", feats, "--k", 1, "--seed", 0) == 2


def test_cluster_bad_tensor(tmp_path, capsys):
    p = tmp_path / "x.ddk"
    p.write_bytes(b"NOPE" + bytes(8))
    assert run("cluster", "--features", p, "--k", 1, "--seed", 0) == 2
    assert "magic" in capsys.readouterr().err


def test_simulate_detect_eval_loss(tmp_path):
    scen = tmp_path / "scen"
    assert run("simulate", "--set", "num_classes=20", "--set", "num_superclasses=3", "--images", 2, "--objects", 3, "--out", scen) == 0
    dets = tmp_path / "d.jsonl"
    assert run("detect", "--scenario", scen, "--out", dets) == 0
    rep = tmp_path / "r.json"
    assert run("eval", "--detections", dets, "--gt", scen / "gt.jsonl", "--num-classes", 20, "--out", rep) == 0
    assert json.loads(rep.read_text())["map"] >= 0.95
    loss = tmp_path / "l.json"
    tg = tmp_path / "t.json"
    assert run("loss-check", "--scenario", scen, "--image", 1, "--out", loss, "--targets-out", tg) == 0
    report = json.loads(loss.read_text())
    assert set(report) >= {"detection_loss", "regression_loss", "classification_loss", "total", "selected_rois"}
    assert run("loss-check", "--scenario", scen, "--image", 7) == 2


def test_detect_conflicting_config(tmp_path, capsys):
    scen = tmp_path / "scen"
    run("simulate", "--set", "num_classes=20", "--images", 1, "--objects", 1, "--out", scen)
    assert run("detect", "--scenario", scen, "--set", "num_classes=30") == 2
    assert "num_classes" in capsys.readouterr().err
    # repeating the scenario's own value is fine
    assert run("detect", "--scenario", scen, "--set", "num_classes=20", "--out", tmp_path / "d.jsonl") == 0
    assert run("detect", "--scenario", tmp_path / "nowhere") == 2


def test_detect_from_map_files(tmp_path):
    scen = tmp_path / "scen"
    run("simulate", "--set", "num_classes=12", "--set", "num_superclasses=2", "--images", 1, "--objects", 2, "--out", scen)
    d = scen / "image_0000" / "scale_0"
    base = ["--detection-map", d / "detection.ddk", "--regression-map", d / "regression.ddk", "--class-map", d / "classification.ddk"]
    base += ["--rois", scen / "image_0000" / "proposals.jsonl", "--set", "num_classes=12", "--set", "num_superclasses=2"]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("detect", *base, "--taxonomy", scen / "taxonomy.json", "--out", a) == 0
    assert run("detect", "--scenario", scen, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    # the detection bank does not match a K=1 head
    assert run("detect", *base[:-2], "--set", "num_superclasses=1", "--out", a) == 2
    c = tmp_path / "c.jsonl"
    assert run("detect", *base, "--taxonomy", scen / "taxonomy.json", "--nms-clusters-file", scen / "taxonomy.json", "--out", c) == 0


def test_nms_bench_cli(tmp_path):
    out = tmp_path / "b.csv"
    assert run("nms-bench", "--detections", 500, "--classes", 50, "--clusters", "50,5", "--repetitions", 1, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "clusters,detections,wall_time_ms,kept"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["50", "5"]
    assert run("nms-bench", "--detections", 0, "--out", out) == 0
    assert out.read_text() == "clusters,detections,wall_time_ms,kept\n"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "decodet", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
    proc = subprocess.run([sys.executable, "-m", "decodet", "eval"], capture_output=True, text=True)
    assert proc.returncode == 1
