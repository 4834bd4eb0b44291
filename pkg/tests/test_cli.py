import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mdpformer.cli import main
from mdpformer.volumes import read_manifest

SPACING_ARGS = ["--target-spacing", "1.5", "1.5", "3.0", "--margin-range", "0", "2"]


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = root / "data"
    rc = main(["generate", "--preset", "tiny", "--out", str(gen),
               "--n-cases", "10", "--seed", "5"])
    assert rc == 0
    return root, gen


@pytest.fixture(scope="module")
def trained(workspace):
    root, gen = workspace
    out = root / "run"
    rc = main(["train", "--manifest", str(gen / "manifest.csv"), "--out", str(out),
               "--model", "dpformer", "--profile", "tiny", "--folds", "2",
               "--pretrain-epochs", "1", "--joint-epochs", "2", "--batch-size", "4",
               "--seed", "0"] + SPACING_ARGS)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def inferred(workspace, trained):
    root, gen = workspace
    out = root / "preds"
    rc = main(["infer", "--checkpoints", str(trained),
               "--manifest", str(gen / "manifest.csv"), "--out", str(out),
               "--oracle-loc"] + SPACING_ARGS)
    assert rc == 0
    return out


class TestGenerate:
    def test_manifest_has_requested_rows(self, workspace):
        _, gen = workspace
        rows = read_manifest(gen / "manifest.csv")
        assert len(rows) == 10
        assert (gen / "resolved.json").exists()
        assert (gen / "phantom_spec.json").exists()

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        _, gen = workspace
        rerun = tmp_path / "again"
        rc = main(["generate", "--preset", "tiny", "--out", str(rerun),
                   "--n-cases", "10", "--seed", "5"])
        assert rc == 0
        assert file_hash(rerun / "manifest.csv") == file_hash(gen / "manifest.csv")
        row = read_manifest(gen / "manifest.csv")[0]
        assert file_hash(rerun / row.image_path) == file_hash(gen / row.image_path)

    def test_malformed_spec_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not valid json")
        rc = main(["generate", "--spec", str(bad), "--out", str(tmp_path / "o"),
                   "--n-cases", "10"])
        assert rc == 2


class TestTrain:
    def test_fold_checkpoints_written(self, trained):
        assert (trained / "fold0" / "best.pt").exists()
        assert (trained / "fold0" / "last.pt").exists()
        assert (trained / "fold1" / "best.pt").exists()
        assert (trained / "resolved.json").exists()

    def test_missing_manifest_exits_2(self, tmp_path):
        rc = main(["train", "--manifest", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_locnet_training(self, workspace):
        root, gen = workspace
        out = root / "loc"
        rc = main(["train", "--manifest", str(gen / "manifest.csv"),
                   "--out", str(out), "--model", "locnet", "--joint-epochs", "2",
                   "--batch-size", "4", "--seed", "0"] + SPACING_ARGS)
        assert rc == 0
        assert (out / "locnet.pt").exists()
        root.joinpath(".locnet_path").write_text(str(out / "locnet.pt"))


class TestInfer:
    def test_predictions_csv_consistent(self, inferred, workspace):
        _, gen = workspace
        with open(inferred / "predictions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10
        from mdpformer.taxonomy import CLASS10_LABELS
        for rec in rows:
            probs = np.array([float(rec[f"prob_{n}"]) for n in CLASS10_LABELS])
            assert abs(probs.sum() - 1.0) <= 1e-6
            assert rec["pred_class"] == CLASS10_LABELS[int(probs.argmax())]
            assert (inferred / rec["seg10_path"]).exists()
            case_json = json.loads((inferred / "cases" / f"{rec['case_id']}.json")
                                   .read_text())
            assert case_json["predicted_class"] == rec["pred_class"]

    def test_dpformer_ignores_meta(self, workspace, trained, tmp_path):
        _, gen = workspace
        manifest = read_manifest(gen / "manifest.csv")
        # clone the dataset manifest with perturbed meta fields
        from mdpformer.volumes import write_manifest, ManifestRow
        import dataclasses
        altered = [dataclasses.replace(r, gender="male", age_years=r.age_years + 17)
                   for r in manifest]
        alt_path = gen / "manifest_altered_meta.csv"
        write_manifest(altered, alt_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for mani, out in ((gen / "manifest.csv", out_a), (alt_path, out_b)):
            rc = main(["infer", "--checkpoints", str(trained), "--manifest",
                       str(mani), "--out", str(out), "--oracle-loc"] + SPACING_ARGS)
            assert rc == 0
        a = (out_a / "predictions.csv").read_text()
        b = (out_b / "predictions.csv").read_text()
        assert a == b

    def test_single_checkpoint_accepted(self, workspace, trained, tmp_path):
        _, gen = workspace
        rc = main(["infer", "--checkpoint", str(trained / "fold0" / "best.pt"),
                   "--manifest", str(gen / "manifest.csv"),
                   "--case-id", "case_0000", "--out", str(tmp_path / "one"),
                   "--oracle-loc"] + SPACING_ARGS)
        assert rc == 0

    def test_locnet_based_inference(self, workspace, trained, tmp_path):
        root, gen = workspace
        locnet_path = root.joinpath(".locnet_path").read_text()
        rc = main(["infer", "--checkpoints", str(trained),
                   "--manifest", str(gen / "manifest.csv"),
                   "--case-id", "case_0001", "--out", str(tmp_path / "loc"),
                   "--locnet", locnet_path] + SPACING_ARGS)
        assert rc == 0

    def test_missing_checkpoint_exits_2(self, workspace, tmp_path):
        _, gen = workspace
        rc = main(["infer", "--checkpoint", str(tmp_path / "ghost.pt"),
                   "--manifest", str(gen / "manifest.csv"),
                   "--out", str(tmp_path / "o"), "--oracle-loc"])
        assert rc == 2


class TestEvaluate:
    def test_metrics_and_overlays(self, workspace, inferred, tmp_path_factory):
        _, gen = workspace
        out = tmp_path_factory.mktemp("eval")
        rc = main(["evaluate", "--predictions", str(inferred / "predictions.csv"),
                   "--manifest", str(gen / "manifest.csv"), "--out", str(out)])
        assert rc == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) >= {"balanced_acc", "regular_acc", "per_class_accuracy",
                                "dice_mean", "confusion"}
        assert len(list((out / "overlays").glob("*.png"))) == 10
        for name in ("classification.csv", "dice.csv", "confusion.csv", "confusion.png"):
            assert (out / name).exists()
        out.joinpath(".keep").write_text("")

    def test_coverage_gap_exits_3(self, workspace, inferred, tmp_path):
        _, gen = workspace
        trimmed = tmp_path / "predictions.csv"
        lines = (inferred / "predictions.csv").read_text().splitlines()
        trimmed.write_text("\n".join(lines[:-1]) + "\n")
        # seg paths in the trimmed copy are relative to its directory; symlink them
        (tmp_path / "segs").symlink_to(inferred / "segs")
        (tmp_path / "pancreas_pred").symlink_to(inferred / "pancreas_pred")
        rc = main(["evaluate", "--predictions", str(trimmed),
                   "--manifest", str(gen / "manifest.csv"),
                   "--out", str(tmp_path / "o")])
        assert rc == 3


class TestReport:
    def test_merges_metrics(self, workspace, inferred, tmp_path):
        _, gen = workspace
        eval_out = tmp_path / "ev"
        rc = main(["evaluate", "--predictions", str(inferred / "predictions.csv"),
                   "--manifest", str(gen / "manifest.csv"), "--out", str(eval_out),
                   "--no-overlays"])
        assert rc == 0
        out = tmp_path / "report"
        rc = main(["report", "--metrics", f"runA={eval_out / 'metrics.json'}",
                   f"runB={eval_out / 'metrics.json'}", "--out", str(out)])
        assert rc == 0
        table = (out / "classification.csv").read_text().splitlines()
        assert table[0] == "class,runA,runB"
        assert len(table) == 13
        assert (out / "balanced_accuracy.png").exists()

    def test_missing_metrics_exits_2(self, tmp_path):
        rc = main(["report", "--metrics", str(tmp_path / "none.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
