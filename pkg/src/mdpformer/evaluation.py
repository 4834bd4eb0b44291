"""Classification/segmentation metrics, the nonPDAC relabeling rule, reports.

Classification is scored with a 10x10 confusion matrix (rows = truth),
per-class accuracy (recall), regular accuracy, and balanced accuracy (the
unweighted mean of per-class accuracies).  Segmentation is scored per class
with the Dice coefficient on the relabeled 10-class prediction: nonPDAC
voxels take the class predicted by the classifier.  For ground-truth-normal
cases the reported Dice is the stage-1 pancreas-mask overlap, since those
cases have no lesion voxels to score.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .taxonomy import CLASS10_LABELS, LesionClass10
from .volumes import RELABELED_CODES, UNASSIGNED_CODE, LabelVolume


def confusion(labels, preds, n_classes: int = 10) -> np.ndarray:
    """Count matrix: entry [i, j] = number of cases with truth i, prediction j."""
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} predictions")
    if len(labels) == 0:
        raise ValueError("at least one case is required")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[int(t), int(p)] += 1
    return cm


@dataclass
class AccuracySummary:
    per_class: np.ndarray        # recall per class; NaN where the class has no cases
    regular: float               # trace / total
    balanced: float              # mean of the defined per-class recalls
    undefined: list[int]         # classes with zero ground-truth cases


def accuracies(cm: np.ndarray) -> AccuracySummary:
    """Per-class/regular/balanced accuracy; empty truth rows are excluded and flagged."""
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total == 0:
        raise ValueError("confusion matrix is empty")
    row_sums = cm.sum(axis=1)
    per_class = np.full(cm.shape[0], np.nan)
    defined = row_sums > 0
    per_class[defined] = np.diag(cm)[defined] / row_sums[defined]
    return AccuracySummary(per_class=per_class,
                           regular=float(np.trace(cm) / total),
                           balanced=float(np.nanmean(per_class)),
                           undefined=[int(i) for i in np.nonzero(~defined)[0]])


def dice_score(pred, truth, code: int) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|) of the voxels equal to ``code``.

    Both-empty counts as 1.0 (correct absence); exactly-one-empty as 0.0.
    """
    a = pred.data if isinstance(pred, LabelVolume) else np.asarray(pred)
    b = truth.data if isinstance(truth, LabelVolume) else np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a == code
    b = b == code
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def relabel_nonpdac(seg3: LabelVolume, predicted_class: LesionClass10 | int):
    """Rewrite nonPDAC voxels to the predicted class code (10-class volume).

    Normal and PDAC voxels pass through unchanged.  If the predicted class is
    normal or PDAC there is no class to assign: nonPDAC voxels get the
    distinguished unassigned code and the returned flag is set.
    """
    predicted_class = LesionClass10.from_code(int(predicted_class))
    data = seg3.data.astype(np.int64).copy()
    nonpdac = seg3.data == 2
    flag = False
    if predicted_class in (LesionClass10.NORMAL, LesionClass10.PDAC):
        if nonpdac.any():
            data[nonpdac] = UNASSIGNED_CODE
            flag = True
    else:
        data[nonpdac] = predicted_class.value
    out = LabelVolume(data, seg3.spacing, valid_codes=RELABELED_CODES, origin=seg3.origin)
    return out, flag


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class CaseEval:
    case_id: str
    true_class: str
    pred_class: str
    dice: float
    dice_kind: str               # "lesion" or "pancreas"
    relabel_flag: bool = False


@dataclass
class MetricsReport:
    per_class_accuracy: list     # fractions; None where undefined
    regular_acc: float
    balanced_acc: float
    undefined_classes: list
    dice_mean: list              # per class; None where no cases
    dice_std: list
    dice_case_counts: list
    dice_average: float
    confusion: list
    cases: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_labels"] = list(CLASS10_LABELS)
        return d


def case_dice(true_class: LesionClass10, pred10_full: np.ndarray, gt10_full: np.ndarray,
              pancreas_pred: np.ndarray | None, pancreas_gt: np.ndarray | None):
    """Per-case Dice: lesion-class overlap, or pancreas overlap for normal cases."""
    if true_class is LesionClass10.NORMAL:
        if pancreas_pred is None or pancreas_gt is None:
            return float("nan"), "pancreas"
        return dice_score(pancreas_pred, pancreas_gt, 1), "pancreas"
    return dice_score(pred10_full, gt10_full, true_class.value), "lesion"


def build_report(case_rows: list[CaseEval]) -> MetricsReport:
    truths = [LesionClass10.from_label(c.true_class).value for c in case_rows]
    preds = [LesionClass10.from_label(c.pred_class).value for c in case_rows]
    cm = confusion(truths, preds)
    acc = accuracies(cm)
    dice_mean, dice_std, counts = [], [], []
    for cls in range(10):
        vals = [c.dice for c in case_rows
                if LesionClass10.from_label(c.true_class).value == cls
                and not np.isnan(c.dice)]
        counts.append(len(vals))
        dice_mean.append(float(np.mean(vals)) if vals else None)
        dice_std.append(float(np.std(vals)) if vals else None)
    defined = [m for m in dice_mean if m is not None]
    per_class = [None if np.isnan(v) else float(v) for v in acc.per_class]
    return MetricsReport(per_class_accuracy=per_class,
                         regular_acc=acc.regular, balanced_acc=acc.balanced,
                         undefined_classes=acc.undefined,
                         dice_mean=dice_mean, dice_std=dice_std,
                         dice_case_counts=counts,
                         dice_average=float(np.mean(defined)) if defined else float("nan"),
                         confusion=cm.tolist(), cases=case_rows)


# ---------------------------------------------------------------------------
# emission: JSON, CSV tables, figures

def write_metrics_json(report: MetricsReport, path: str | Path) -> None:
    d = report.to_dict()
    d["cases"] = [asdict(c) for c in report.cases]
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _pct(v) -> str:
    return "" if v is None else f"{100.0 * v:.1f}"


def write_classification_csv(report: MetricsReport, path: str | Path,
                             column: str = "model") -> None:
    """Class-wise accuracy table: 10 class rows plus regular/balanced summary rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", column])
        for name, v in zip(CLASS10_LABELS, report.per_class_accuracy):
            w.writerow([name, _pct(v)])
        w.writerow(["regular_acc", _pct(report.regular_acc)])
        w.writerow(["balanced_acc", _pct(report.balanced_acc)])


def write_dice_csv(report: MetricsReport, path: str | Path, column: str = "model") -> None:
    """Per-class Dice (mean +/- std) table plus the average row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", f"{column}_dice_mean", f"{column}_dice_std", "cases"])
        for name, m, s, n in zip(CLASS10_LABELS, report.dice_mean, report.dice_std,
                                 report.dice_case_counts):
            w.writerow([name, "" if m is None else f"{m:.3f}",
                        "" if s is None else f"{s:.3f}", n])
        w.writerow(["average", f"{report.dice_average:.3f}", "", sum(report.dice_case_counts)])


def write_confusion_csv(cm, path: str | Path) -> None:
    cm = np.asarray(cm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + list(CLASS10_LABELS))
        for name, row in zip(CLASS10_LABELS, cm):
            w.writerow([name] + [int(v) for v in row])


def confusion_figure(cm, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    cm = np.asarray(cm, dtype=float)
    row = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, row, out=np.zeros_like(cm), where=row > 0)
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(10), CLASS10_LABELS, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(10), CLASS10_LABELS, fontsize=7)
    ax.set_xlabel("prediction")
    ax.set_ylabel("truth")
    for i in range(10):
        for j in range(10):
            if cm[i, j] > 0:
                ax.text(j, i, f"{int(cm[i, j])}", ha="center", va="center",
                        fontsize=6, color="black" if norm[i, j] < 0.6 else "white")
    fig.colorbar(im, ax=ax, label="row-normalized")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def overlay_figure(image: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray,
                   pancreas: np.ndarray | None, title: str, path: str | Path) -> None:
    """Mid-axial slice with segmentation contours (prediction vs. ground truth)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    z = image.shape[-1] // 2
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image[..., z], cmap="gray")
    if pancreas is not None and pancreas[..., z].any():
        ax.contour(pancreas[..., z], levels=[0.5], colors="tab:red", linewidths=0.8)
    if gt_mask[..., z].any():
        ax.contour(gt_mask[..., z], levels=[0.5], colors="tab:green", linewidths=0.8)
    if pred_mask[..., z].any():
        ax.contour(pred_mask[..., z], levels=[0.5], colors="tab:blue", linewidths=0.8)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)
