import json

import numpy as np
import pytest

from damagemap import assess, cli, data, weights

SIZE = "32"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = data.generate_synthetic(root / "synth", data.SyntheticSpec(count=40, size=32, seed=3))
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(root / "w.dmgw"), "--merge-labels",
                     "--image-size", SIZE, "--epochs", "3", "--batch", "8", "--seed", "1",
                     "--split-dir", str(root / "split"), "--report", str(root / "report.json")]) == 0
    return root, manifest


def net_flags(root):
    return ["--weights", root / "w.dmgw", "--image-size", SIZE]


def test_synth(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--count", 6, "--size", 16)
    assert code == 0 and out.strip().endswith("manifest.csv")
    assert len(data.load_manifest(tmp_path / "manifest.csv")) == 6


def test_train_outputs(workspace):
    root, _ = workspace
    report = json.loads((root / "report.json").read_text())
    assert len(report["losses"]) == 3 and report["train_size"] + report["test_size"] == 40
    assert "test_accuracy" in report
    train = data.load_manifest(root / "split" / "train.csv")
    assert {e.label for e in train} <= set(data.SEVERITY_LABELS)
    assert weights.read_tensors(root / "w.dmgw")["out.weight"].shape[1] == 2


def test_train_prints_epochs(tmp_path, capsys, workspace):
    root, manifest = workspace
    code, out, _ = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "x.dmgw", "--merge-labels",
                       "--image-size", SIZE, "--epochs", 1, "--batch", 8, "--init-weights", root / "w.dmgw")
    assert code == 0
    assert out.splitlines()[0].startswith("epoch 1 loss ") and "test_acc" in out


def test_predict(capsys, workspace):
    root, _ = workspace
    img = next((root / "synth" / "images").iterdir())
    code, out, _ = run(capsys, "predict", *net_flags(root), img)
    assert code == 0
    header, row = out.splitlines()
    assert header == "image,damage,no_damage,predicted"
    probs = [float(v) for v in row.split(",")[1:3]]
    assert sum(probs) == pytest.approx(1.0, abs=1e-5)


def test_map_and_mask(tmp_path, capsys, workspace):
    root, _ = workspace
    img = root / "synth" / "images" / "img_0000.ppm"
    code, out, _ = run(capsys, "map", *net_flags(root), "--image", img, "--out", tmp_path / "h.png",
                       "--mask-out", tmp_path / "m.pgm", "--grid-out", tmp_path / "g.dmgw")
    assert code == 0
    value = float(out.split()[1])
    assert value >= 0
    assert data.read_image(tmp_path / "h.png").shape == (32, 32, 3)
    grid = weights.read_tensors(tmp_path / "g.dmgw")["saliency_grid"]
    assert grid.shape == (16, 16)
    assert value == pytest.approx(assess.dav(grid), abs=1e-6)
    code, out, _ = run(capsys, "mask", *net_flags(root), "--image", img, "--out", tmp_path / "m2.pgm")
    assert code == 0
    np.testing.assert_array_equal(data.read_mask(tmp_path / "m2.pgm"), data.read_mask(tmp_path / "m.pgm"))
    assert int(out.split()[1]) == np.count_nonzero(data.read_mask(tmp_path / "m.pgm"))


def test_severity_pipeline(tmp_path, capsys, workspace):
    root, manifest = workspace
    code, out, _ = run(capsys, "dav", *net_flags(root), "--manifest", manifest, "--out", tmp_path / "dav.csv",
                       "--histogram", tmp_path / "hist.csv", "--bins", 5)
    assert code == 0 and "mean_dav none" in out
    records = assess.read_dav_csv(tmp_path / "dav.csv")
    assert len(records) == 40 and all(r.dav >= 0 for r in records)
    assert len((tmp_path / "hist.csv").read_text().splitlines()) == 1 + 5 * len({r.label for r in records})

    code, out, _ = run(capsys, "fit-thresholds", "--dav", tmp_path / "dav.csv", "--out", tmp_path / "t.txt")
    assert code == 0 and out.startswith("c1 ")
    code, out, _ = run(capsys, "classify", "--thresholds", tmp_path / "t.txt", "--dav", tmp_path / "dav.csv",
                       "--out", tmp_path / "cls.csv")
    assert code == 0
    acc = float(out.split()[1])
    labels = [r.label for r in records]
    majority = max(labels.count(l) for l in set(labels)) / len(labels)
    assert acc >= majority

    code, out, _ = run(capsys, "report", "--classified", tmp_path / "cls.csv")
    assert code == 0 and f"{acc:.3f}" in out


def test_eval_iou_and_report(tmp_path, capsys, workspace):
    root, manifest = workspace
    code, out, _ = run(capsys, "eval-iou", *net_flags(root), "--manifest", manifest, "--merge-labels",
                       "--label", "damage", "--name", "synthetic", "--csv", tmp_path / "iou.csv")
    assert code == 0 and "Detected" in out.splitlines()[0]
    assert out.splitlines()[1].startswith("synthetic")
    code, out2, _ = run(capsys, "report", "--iou-csv", tmp_path / "iou.csv", "--out", tmp_path / "r.txt")
    assert code == 0 and out2 == out == (tmp_path / "r.txt").read_text()


def test_report_rows(capsys):
    code, out, _ = run(capsys, "report", "--row", "A=0.5,0.3", "--row", "B=0.1,0.9")
    assert code == 0 and "0.400 ± 0.141" in out


@pytest.mark.parametrize("argv, kind", [
    (["report"], "ValueError"),
    (["report", "--row", "A"], "ValueError"),
    (["fit-thresholds", "--dav", "/nonexistent.csv", "--out", "/tmp/x"], "FileNotFoundError"),
])
def test_errors_are_one_line(capsys, argv, kind):
    code, out, err = run(capsys, *argv)
    assert code == 1 and out == ""
    assert err.count("\n") == 1 and err.startswith(f"error: {kind}: ")


def test_bad_manifest_and_weights(tmp_path, capsys, workspace):
    root, _ = workspace
    (tmp_path / "m.csv").write_text("path,label\nx.ppm,flooded\n")
    code, _, err = run(capsys, "dav", *net_flags(root), "--manifest", tmp_path / "m.csv", "--out", tmp_path / "d")
    assert code == 1 and "ManifestError" in err and err.count("\n") == 1
    (tmp_path / "bad.dmgw").write_bytes(b"NOPE" + bytes(8))
    code, _, err = run(capsys, "predict", "--weights", tmp_path / "bad.dmgw", "--image-size", SIZE,
                       root / "synth" / "images" / "img_0000.ppm")
    assert code == 1 and "WeightFormatError" in err


def test_preset_class_mismatch(tmp_path, capsys, workspace):
    _, manifest = workspace
    code, _, err = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "w", "--preset", "vgg19-binary",
                       "--image-size", SIZE, "--epochs", 1)
    assert code == 1 and "labels imply 3" in err


def test_three_class_tiny_round_trip(tmp_path, capsys, workspace):
    root, manifest = workspace
    code, _, _ = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "w3", "--image-size", SIZE,
                     "--epochs", 1, "--batch", 8)
    assert code == 0
    code, out, _ = run(capsys, "predict", "--weights", tmp_path / "w3", "--image-size", SIZE,
                       root / "synth" / "images" / "img_0000.ppm")
    assert code == 0 and out.splitlines()[0] == "image,severe,mild,none,predicted"
