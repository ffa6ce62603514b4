import json
import os
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from rdd import cli, collector, dataset as ds, evalmetrics as em
from rdd.dataset import ImageRecord
from rdd.evalmetrics import Detection
from rdd.schemas import ERROR, SCHEMAS

from conftest import SIX_FOLDERS, make_record, write_dataset


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip()]
    assert len(lines) == 1, out
    return code, json.loads(lines[0])


def check(doc, schema):
    jsonschema.validate(doc, SCHEMAS[schema] if isinstance(schema, str) else schema)


def test_parse_examples():
    a = cli.parse(["eval", "--gt", ".", "--pred", __file__, "--iou", "0.5", "--conf", "0.25"])
    assert (a.command, a.iou, a.conf) == ("eval", 0.5, 0.25)
    a = cli.parse(["split", "--root", ".", "--target", "United_States", "--seed", "7"])
    assert (a.command, a.target, a.seed) == ("split", "United_States", 7)
    assert cli.parse(["ca-check"]).seed == 0


@pytest.mark.parametrize("argv", [["bogus"], ["ca-check", "--nope"], ["stats"], ["stats", "--root", "/does/not/exist"],
                                  ["eval", "--gt", ".", "--pred", ".", "--iou", "2"], ["--jobs", "0", "ca-check"], []])
def test_usage_errors(capsys, argv):
    code, doc = run(capsys, *argv)
    assert code == 2
    check(doc, ERROR)


def test_subprocess_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "rdd", "ca-check", "--seed", "1"], capture_output=True, text=True)
    assert ok.returncode == 0
    doc = json.loads(ok.stdout)
    check(doc, "ca-check")
    assert doc["pass"] is True and doc["max_rel_err"] < 1e-4
    bad = subprocess.run([sys.executable, "-m", "rdd", "bogus"], capture_output=True, text=True)
    assert bad.returncode == 2 and "usage" in bad.stderr


def test_ca_check_failure_is_domain_error(capsys):
    code, doc = run(capsys, "ca-check", "--seed", "1", "--tol", "1e-30")
    assert code == 1 and doc["pass"] is False
    check(doc, "ca-check")


def test_stats(capsys, small_dataset, tmp_path):
    root, records = small_dataset
    code, doc = run(capsys, "stats", "--root", root, "--out", tmp_path / "rep", "--write-index")
    assert code == 0
    check(doc, "stats")
    assert doc["total"] == ds.stats(records)["total"]
    for p in doc["outputs"]:
        assert os.path.getsize(p) > 0
    assert any(p.endswith(".png") for p in doc["outputs"])


def norway_fixture(root):
    rec = make_record("n0", "Norway", (4040, 2041), [
        (0, (100, 500, 300, 700)),
        (1, (2000, 500, 2200, 700)),
        (2, (1800, 1000, 1900, 1100)),
    ])
    img = np.zeros((2041, 4040, 3), np.uint8)
    img[217:, :1824] = 200
    ds.write_record(root, rec, img, suffix=".png")
    return rec


def test_crop_norway(capsys, tmp_path):
    norway_fixture(tmp_path)
    code, doc = run(capsys, "crop-norway", "--in", tmp_path / "Norway", "--out", tmp_path / "Norway1")
    assert code == 0
    check(doc, "crop-norway")
    assert (doc["kept"], doc["clipped"], doc["dropped"], doc["total"], doc["images"]) == (1, 1, 1, 3, 1)
    (rec,) = ds.load_dataset(tmp_path, ["Norway1"])
    assert rec.dims == (1824, 1824)
    boxes = [b.as_tuple() for _, b in rec.pixel_boxes()]
    # two 6-decimal label round trips (2041 px in, 1824 px out): at most 0.75e-6 * (2041 + 1824) px
    tol = 0.75e-6 * (2041 + 1824)
    assert boxes[0] == pytest.approx((100, 283, 300, 483), abs=tol)
    assert boxes[1] == pytest.approx((1800, 783, 1824, 883), abs=tol)
    import cv2
    assert (cv2.imread(str(tmp_path / "Norway1" / "images" / "n0.jpg")) > 150).all()


def test_crop_norway_rejects_small_image(capsys, tmp_path):
    ds.write_record(tmp_path, ImageRecord("s", "Norway", 64, 64), np.zeros((64, 64, 3), np.uint8), suffix=".png")
    code, doc = run(capsys, "crop-norway", "--in", tmp_path / "Norway", "--out", tmp_path / "Norway1", "--labels-only")
    assert code == 1
    check(doc, ERROR)


def tiny_six_folders(root):
    spec = {f: ((16, 16), n, e) for f, (_, n, e) in SIX_FOLDERS.items()}
    return write_dataset(root, spec)


def test_split(capsys, tmp_path):
    tiny_six_folders(tmp_path / "d")
    argv = ("split", "--root", tmp_path / "d", "--target", "United_States", "--seed", "7", "--out", tmp_path / "s")
    code, doc = run(capsys, *argv)
    assert code == 0
    check(doc, "split")
    assert doc["n_val"] == 3 and doc["n_train"] == 27 + sum(n for f, (_, n, _) in SIX_FOLDERS.items() if f != "United_States")
    assert (tmp_path / "s" / "val.txt").read_text().count("\n") == 3
    assert run(capsys, *argv)[1] == doc


def test_split_domain_errors(capsys, tmp_path):
    tiny_six_folders(tmp_path / "d")
    for target in ("Atlantis", "China_Drone"):
        code, doc = run(capsys, "split", "--root", tmp_path / "d", "--target", target)
        assert code == 1
        check(doc, ERROR)


def test_augment_preview(capsys, small_dataset, tmp_path):
    root, _ = small_dataset
    argv = ("augment", "preview", "--root", root, "--n", 4, "--size", 64, "--seed", 3, "--out", tmp_path / "a")
    code, doc = run(capsys, *argv)
    assert code == 0
    check(doc, "augment")
    assert len(doc["samples"]) == 4
    sidecar = (tmp_path / "a" / "augment_preview.json").read_text()
    assert os.path.getsize(tmp_path / "a" / "augment_preview.png") > 0
    code2, doc2 = run(capsys, *argv)
    assert doc2 == doc and (tmp_path / "a" / "augment_preview.json").read_text() == sidecar


def test_augment_config_file(capsys, small_dataset, tmp_path):
    root, _ = small_dataset
    cfg = tmp_path / "hyp.yaml"
    cfg.write_text("mosaic: 0.0\nmixup: 0.0\n")
    code, doc = run(capsys, "augment", "preview", "--root", root, "--config", cfg, "--n", 2, "--size", 32,
                    "--out", tmp_path / "a")
    assert code == 0 and doc["config"]["mosaic"] == 0.0
    assert all(s["ops"][0] == "letterbox" for s in doc["samples"])
    cfg.write_text("mosaic: 2.0\n")
    code, doc = run(capsys, "augment", "preview", "--root", root, "--config", cfg, "--out", tmp_path / "a")
    assert code == 1


def perfect_predictions(records, path):
    dets = [Detection(r.id, c, b, 0.9) for r in records for c, b in r.pixel_boxes()]
    em.write_predictions(dets, path)
    return dets


def test_eval_perfect(capsys, small_dataset, tmp_path):
    root, records = small_dataset
    perfect_predictions(records, tmp_path / "p.csv")
    code, doc = run(capsys, "eval", "--gt", root, "--pred", tmp_path / "p.csv", "--out", tmp_path / "e")
    assert code == 0
    check(doc, "eval")
    assert doc["map50"] == 1.0 and doc["f1"] == 1.0
    assert set(doc["boards"]) == {"Czech", "United_States"}
    assert (tmp_path / "e" / "pr_curves.png").exists()


def test_eval_labels_dir(capsys, small_dataset, tmp_path):
    root, records = small_dataset
    czech = [r for r in records if r.folder == "Czech"]
    perfect_predictions(czech, tmp_path / "p.csv")
    code, doc = run(capsys, "eval", "--gt", root / "Czech" / "labels", "--pred", tmp_path / "p.csv",
                    "--iou", "0.5", "--conf", "0.25")
    assert code == 0 and doc["f1"] == 1.0 and doc["Overall"]["n_ground_truth"] == sum(len(r.annotations) for r in czech)


def test_eval_bad_label_file(capsys, small_dataset, tmp_path):
    root, records = small_dataset
    perfect_predictions(records, tmp_path / "p.csv")
    (root / "Czech" / "labels" / "Czech_0000.txt").write_text("0 0.5 oops 0.1 0.1\n")
    code, doc = run(capsys, "eval", "--gt", root, "--pred", tmp_path / "p.csv")
    assert code == 1 and "line 1" in doc["error"]
    check(doc, ERROR)


def test_ensemble(capsys, small_dataset, tmp_path):
    _, records = small_dataset
    perfect_predictions(records, tmp_path / "m1.csv")
    perfect_predictions(records[:3], tmp_path / "m2.csv")
    code, doc = run(capsys, "ensemble", "--pred", tmp_path / "m1.csv", "--pred", tmp_path / "m2.csv",
                    "--out", tmp_path / "fused.csv")
    assert code == 0
    check(doc, "ensemble")
    assert doc["sources"] == ["m1", "m2"] and doc["mode"] == "wbf"
    fused = em.read_predictions(tmp_path / "fused.csv")
    assert len(fused) == doc["detections"] == sum(len(r.annotations) for r in records)
    code, doc = run(capsys, "ensemble", "--pred", tmp_path / "m1.csv", "--weights", "1,2")
    assert code == 2
    check(doc, ERROR)
    code, doc = run(capsys, "ensemble", "--pred", tmp_path / "m1.csv", "--mode", "nms", "--iou", "0.5")
    assert code == 0 and doc["mode"] == "nms"


def write_route(path):
    path.write_text(json.dumps([[30.0, -95.0], [30.0009, -95.0]]))
    return path


def test_collect_dry_run(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv(collector.API_KEY_ENV, raising=False)
    code, doc = run(capsys, "collect", "--route", write_route(tmp_path / "r.json"), "--spacing", "50",
                    "--headings", "90,270", "--dry-run", "--cache", tmp_path / "c")
    assert code == 0
    check(doc, "collect")
    assert doc["requests"] == 2 * 3  # about 100 m at 50 m spacing


def test_collect_requires_key(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv(collector.API_KEY_ENV, raising=False)
    code, doc = run(capsys, "collect", "--route", write_route(tmp_path / "r.json"), "--cache", tmp_path / "c")
    assert code == 2
    check(doc, ERROR)


def test_collect_with_stub_transport(capsys, tmp_path, monkeypatch):
    secret = "cli-secret-key"
    monkeypatch.setenv(collector.API_KEY_ENV, secret)
    clock = collector.VirtualClock()
    calls = []

    def transport(url, timeout):
        calls.append(url)
        return collector.Response(200, b"img", {"X-Capture-Date": "2020-01"})

    real = collector.Fetcher
    monkeypatch.setattr(collector, "Fetcher", lambda policy: real(policy, transport, clock))
    argv = ("collect", "--route", write_route(tmp_path / "r.json"), "--spacing", "50", "--headings", "0",
            "--cache", tmp_path / "c")
    code, doc = run(capsys, *argv)
    assert code == 0
    check(doc, "collect")
    assert doc["fetched"] == 3 and len(calls) == 3
    code, doc = run(capsys, *argv)
    assert doc["cached"] == 3 and len(calls) == 3
    assert secret not in json.dumps(doc)
    for p in (tmp_path / "c").iterdir():
        assert secret.encode() not in p.read_bytes()
