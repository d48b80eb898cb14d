import json

import numpy as np
import pytest

from hnseg import autodiff as ad
from hnseg import cli, nifti_io, pipeline
from hnseg.metrics import evaluate_case
from hnseg.volume import Volume

from conftest import TOY_OVERRIDES


def toy_args():
    return [a for kv in TOY_OVERRIDES for a in ("--set", kv)]


@pytest.fixture(scope="module")
def prepped(raw_dataset, tmp_path_factory):
    root, _ = raw_dataset
    out = tmp_path_factory.mktemp("cli_pre")
    assert cli.main(["preprocess", "--data-root", str(root), "--out", str(out), "--grid", "16"]) == 0
    return out


def test_preprocess_idempotent(raw_dataset, prepped, capsys):
    root, _ = raw_dataset
    manifest = (prepped / cli.MANIFEST_FILE).read_text()
    stamps = {p.name: p.stat().st_mtime_ns for p in prepped.glob("*.nii.gz")}
    capsys.readouterr()
    assert cli.main(["preprocess", "--data-root", str(root), "--out", str(prepped), "--grid", "16"]) == 0
    assert "preprocessed 0 case(s), 10 up to date" in capsys.readouterr().out
    assert (prepped / cli.MANIFEST_FILE).read_text() == manifest
    assert {p.name: p.stat().st_mtime_ns for p in prepped.glob("*.nii.gz")} == stamps
    assert len(stamps) == 30


def test_preprocess_empty_root(tmp_path):
    (tmp_path / "raw").mkdir()
    assert cli.main(["preprocess", "--data-root", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == 2


def test_train_zero_epochs_and_same_seed(prepped, tmp_path):
    args = ["train", "--data", str(prepped), "--fold", "C"] + toy_args()
    assert cli.main(args + ["--epochs", "0", "--out", str(tmp_path / "z")]) == 0
    report = json.loads((tmp_path / "z" / cli.REPORT_FILE).read_text())
    assert report["epochs_run"] == 0 and report["val_ids"] == ["C001"]
    for name in ("a", "b"):
        assert cli.main(args + ["--epochs", "2", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    logs = [(tmp_path / n / "loss_log.csv").read_text() for n in ("a", "b")]
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 3


def test_unknown_fold_and_bad_key(prepped, tmp_path):
    base = ["train", "--data", str(prepped), "--out", str(tmp_path)] + toy_args()
    assert cli.main(base + ["--fold", "Z"]) == 4
    assert cli.main(base + ["--fold", "A", "--set", "model.colour=red"]) == 4
    assert cli.main(base + ["--fold", "A", "--augment", "MR,QQ"]) == 4


def test_grid_must_match_model(prepped, tmp_path):
    assert cli.main(["train", "--data", str(prepped), "--fold", "A", "--out", str(tmp_path)]) == 4


def test_non_finite_loss_exit(prepped, tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline, "combined_loss", lambda p, g, c: ad.scale(ad.sum_all(p), float("inf")))
    assert cli.main(["train", "--data", str(prepped), "--fold", "A", "--out", str(tmp_path)] + toy_args()) == 3


def write_masks(directory, masks):
    directory.mkdir()
    for pid, m in masks.items():
        nifti_io.save(Volume(m.astype(np.float32)), directory / f"{pid}_gtvt.nii.gz")


def test_evaluate(tmp_path, rng):
    gts = {f"A00{i}": rng.random((8, 8, 8)) > 0.6 for i in range(3)}
    gts["B001"] = np.zeros((8, 8, 8), bool)
    write_masks(tmp_path / "gt", gts)
    write_masks(tmp_path / "same", gts)
    assert cli.main(["evaluate", "--pred", str(tmp_path / "same"), "--gt", str(tmp_path / "gt"),
                     "--out", str(tmp_path / "r1")]) == 0
    rows = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "patient_id,center_id,dsc,precision,recall"
    assert all(line.split(",")[2:5] == ["1.0", "1.0", "1.0"] for line in rows[1:])

    preds = {k: rng.random((8, 8, 8)) > 0.5 for k in gts}
    preds["A000"] = np.zeros((8, 8, 8), bool)  # empty vs nonempty
    write_masks(tmp_path / "pred", {k.replace("_gtvt", ""): v for k, v in preds.items()})
    assert cli.main(["evaluate", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                     "--out", str(tmp_path / "r2")]) == 0
    got = {line.split(",")[0]: [float(v) for v in line.split(",")[2:5]]
           for line in (tmp_path / "r2" / "metrics.csv").read_text().splitlines()[1:]}
    assert got["A000"][0] == 0.0
    for pid in gts:
        row = evaluate_case(preds[pid], gts[pid], pid, pid[0])
        np.testing.assert_allclose(got[pid], [row.dsc, row.precision, row.recall], rtol=1e-12)

    (tmp_path / "pred" / "A001_gtvt.nii.gz").unlink()
    assert cli.main(["evaluate", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                     "--out", str(tmp_path / "r3")]) == 2


def overlay_case(tmp_path, mask, gt=None):
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 100, (144, 144, 5)).astype(np.float32)
    nifti_io.save(Volume(image), tmp_path / "P1_ct.nii.gz")
    nifti_io.save(Volume(mask.astype(np.float32)), tmp_path / "P1_pred.nii.gz")
    args = ["overlay", "--image", str(tmp_path / "P1_ct.nii.gz"), "--mask", str(tmp_path / "P1_pred.nii.gz"),
            "--out", str(tmp_path / "img")]
    if gt is not None:
        nifti_io.save(Volume(gt.astype(np.float32)), tmp_path / "P1_gtvt.nii.gz")
        args += ["--gt", str(tmp_path / "P1_gtvt.nii.gz")]
    assert cli.main(args) == 0
    return image[:, :, 2], cli.read_pgm(tmp_path / "img" / "P1_z2.pgm")


def test_overlay_empty_mask_leaves_slice(tmp_path):
    slice2d, pix = overlay_case(tmp_path, np.zeros((144, 144, 5)))
    assert pix.shape == (144, 144)
    np.testing.assert_array_equal(pix, cli.to_gray(slice2d).T)


def test_overlay_full_mask_draws_border(tmp_path):
    slice2d, pix = overlay_case(tmp_path, np.ones((144, 144, 5)))
    ring = np.zeros((144, 144), bool)
    ring[[0, -1], :] = ring[:, [0, -1]] = True
    assert np.all(pix[ring] == 255)
    np.testing.assert_array_equal(pix[~ring], cli.to_gray(slice2d).T[~ring])


def test_overlay_ground_truth_gray(tmp_path):
    gt = np.zeros((144, 144, 5))
    gt[40:60, 50:80, :] = 1
    slice2d, pix = overlay_case(tmp_path, np.zeros((144, 144, 5)), gt)
    # rows are y, columns x
    assert pix[50, 40] == cli.GT_GRAY and pix[79, 59] == cli.GT_GRAY
    assert pix[60, 50] == cli.to_gray(slice2d)[50, 60]  # interior untouched


def test_overlay_grid_mismatch(tmp_path):
    nifti_io.save(Volume(np.zeros((8, 8, 8), np.float32)), tmp_path / "a.nii.gz")
    nifti_io.save(Volume(np.zeros((8, 8, 9), np.float32)), tmp_path / "b.nii.gz")
    assert cli.main(["overlay", "--image", str(tmp_path / "a.nii.gz"), "--mask", str(tmp_path / "b.nii.gz"),
                     "--out", str(tmp_path / "o")]) == 2


def test_augment_preview(prepped, tmp_path):
    args = ["augment-preview", "--data", str(prepped), "--patient", "B001", "--augment", "MR,RT,GC,ED",
            "--set", "augment.probability.MR=1", "--out", str(tmp_path)] + toy_args()
    assert cli.main(args) == 0
    report = json.loads((tmp_path / cli.REPORT_FILE).read_text())
    assert report["augment_pipeline"] == "MR,RT,GC,ED"
    aug = nifti_io.load(tmp_path / "B001_aug_gtvt.nii.gz").data
    assert set(np.unique(aug)) <= {0.0, 1.0}
    assert (tmp_path / "B001_aug_z8.pgm").exists()


def test_predict_then_evaluate(raw_dataset, tmp_path, toy_cfg):
    from hnseg import unetr

    root, _ = raw_dataset
    ckpt = tmp_path / "m.ckpt"
    ckpt.write_bytes(unetr.checkpoint_bytes(unetr.init_params(toy_cfg.model, 0), toy_cfg.model))
    assert cli.main(["predict", "--data-root", str(root), "--checkpoint", str(ckpt), "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*_pred.nii.gz"))) == 10
    mask = nifti_io.load(tmp_path / "p" / "A001_pred.nii.gz")
    assert mask.shape == (16, 16, 16)
