"""Command-line entry points: generate, train, infer, evaluate, report.

All randomness flows from a single --seed through the documented derivation
scheme (sha256 of "seed:purpose", see seeding.py).  Every run directory gets
a resolved.json with the exact configuration used.  Exit codes: 0 success,
2 input error, 3 coverage/consistency error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import evaluation, phantom, training
from .config import MODEL_PRESETS, ModelConfig
from .locnet import LocalizerConfig
from .pipeline import (PipelineConfig, paste_to_full, predict_with_models,
                       prepare_row)
from .taxonomy import CLASS10_LABELS, LesionClass10
from .volumes import (RELABELED_CODES, LabelVolume, read_label, read_manifest,
                      read_volume, resample, write_nifti, znormalize)

EXIT_INPUT_ERROR = 2
EXIT_COVERAGE_ERROR = 3


class InputError(Exception):
    pass


class CoverageError(Exception):
    pass


def _default_out(command: str, out: str | None) -> Path:
    if out:
        return Path(out)
    root = os.environ.get("MDPFORMER_OUT", ".")
    return Path(root) / command


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read config file {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    return cfg


def _merge(defaults: dict, file_cfg: dict, flag_values: dict) -> dict:
    """Layered resolution: defaults <- config file <- explicit flags."""
    resolved = dict(defaults)
    resolved.update({k: v for k, v in file_cfg.items() if k in defaults})
    resolved.update({k: v for k, v in flag_values.items() if v is not None})
    return resolved


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    out_dir = _default_out("generate", args.out)
    if args.spec:
        try:
            spec = phantom.PhantomSpec.load_json(args.spec)
        except (OSError, json.JSONDecodeError, TypeError, KeyError, ValueError) as e:
            raise InputError(f"invalid phantom spec {args.spec}: {e}") from e
    else:
        spec = phantom.SPEC_PRESETS[args.preset](seed=0)
    if args.seed is not None:
        spec = dataclasses.replace(spec, rng_seed=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, {"command": "generate", "n_cases": args.n_cases,
                              "jobs": args.jobs, "spec": spec.to_dict()})
    spec.save_json(out_dir / "phantom_spec.json")
    phantom.generate_dataset(spec, args.n_cases, out_dir=out_dir, jobs=args.jobs)
    print(f"wrote {args.n_cases} cases to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train

def _prepare_manifest_cases(manifest_path: Path, pcfg: PipelineConfig):
    rows = read_manifest(manifest_path)
    root = manifest_path.parent
    return rows, [prepare_row(r, root, pcfg, oracle_loc=True) for r in rows]


def cmd_train(args) -> int:
    out_dir = _default_out("train", args.out)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise InputError(f"manifest not found: {manifest_path}")
    file_cfg = _load_config_file(args.config)
    defaults = dataclasses.asdict(training.TrainConfig())
    flags = {"lr_initial": args.lr, "batch_size": args.batch_size,
             "pretrain_epochs": args.pretrain_epochs, "joint_epochs": args.joint_epochs,
             "fold_count": args.folds, "seed": args.seed}
    try:
        cfg = training.TrainConfig(**_merge(defaults, file_cfg, flags))
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid training config: {e}") from e
    model_cfg = MODEL_PRESETS[args.profile]()
    pcfg = PipelineConfig(target_spacing=tuple(args.target_spacing),
                          margin_range=tuple(args.margin_range))
    rows, cases = _prepare_manifest_cases(manifest_path, pcfg)
    _write_resolved(out_dir, {"command": "train", "model": args.model,
                              "profile": args.profile,
                              "manifest": str(manifest_path),
                              "train_config": dataclasses.asdict(cfg),
                              "model_config": model_cfg.to_dict(),
                              "pipeline": dataclasses.asdict(pcfg)})

    if args.model == "locnet":
        loc_cfg = LocalizerConfig()
        result = training.train_locnet(cases, loc_cfg, cfg, out_dir)
        print(f"locnet checkpoint: {result}")
        return 0

    folds = training.make_folds(rows, cfg.fold_count, cfg.seed)
    for fold_index, (train_idx, val_idx) in enumerate(folds):
        result = training.train_fold(
            args.model, [cases[i] for i in train_idx], [cases[i] for i in val_idx],
            model_cfg, cfg, out_dir, fold_index=fold_index, pcfg=pcfg)
        print(f"fold {fold_index}: best val balanced acc "
              f"{result.best_metric:.3f} -> {result.best_path}")
    return 0


# ---------------------------------------------------------------------------
# infer

def _collect_checkpoints(args) -> list[Path]:
    paths: list[Path] = []
    if args.checkpoints:
        d = Path(args.checkpoints)
        if d.is_file():
            paths = [d]
        else:
            paths = sorted(d.glob("fold*/best.pt"))
    if args.checkpoint:
        paths.extend(Path(p) for p in args.checkpoint)
    if not paths:
        raise InputError("no checkpoints given (use --checkpoints DIR or --checkpoint FILE)")
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise InputError(f"missing checkpoint(s): {[str(p) for p in missing]}")
    return paths


def cmd_infer(args) -> int:
    out_dir = _default_out("infer", args.out)
    ckpt_paths = _collect_checkpoints(args)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise InputError(f"manifest not found: {manifest_path}")
    loaded = [training.load_checkpoint(p) for p in ckpt_paths]
    kinds = {ck["kind"] for ck in loaded}
    hashes = {ck["config_hash"] for ck in loaded}
    if len(kinds) > 1 or len(hashes) > 1:
        raise InputError(f"incompatible checkpoints: kinds={sorted(kinds)}")
    kind = loaded[0]["kind"]
    model_cfg: ModelConfig = loaded[0]["model_config"]
    models = [training.model_from_checkpoint(ck) for ck in loaded]
    pcfg = PipelineConfig(target_spacing=tuple(args.target_spacing),
                          margin_range=tuple(args.margin_range))
    locnet = None
    if not args.oracle_loc:
        if not args.locnet:
            raise InputError("--locnet checkpoint required unless --oracle-loc is set")
        loc_ck = training.load_checkpoint(args.locnet)
        if loc_ck["kind"] != "locnet":
            raise InputError(f"--locnet expects a locnet checkpoint, got {loc_ck['kind']!r}")
        locnet = training.model_from_checkpoint(loc_ck)

    rows = read_manifest(manifest_path)
    if args.case_id:
        rows = [r for r in rows if r.case_id == args.case_id]
        if not rows:
            raise InputError(f"case {args.case_id!r} not found in manifest")
    (out_dir / "segs").mkdir(parents=True, exist_ok=True)
    (out_dir / "pancreas_pred").mkdir(parents=True, exist_ok=True)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, {"command": "infer", "kind": kind,
                              "checkpoints": [str(p) for p in ckpt_paths],
                              "oracle_loc": args.oracle_loc,
                              "model_config": model_cfg.to_dict(),
                              "pipeline": dataclasses.asdict(pcfg)})

    import csv
    pred_csv = out_dir / "predictions.csv"
    with open(pred_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "pred_class"] + [f"prob_{n}" for n in CLASS10_LABELS]
                        + ["seg10_path", "pancreas_pred_path", "loc_fallback", "relabel_flag"])
        for row in rows:
            prep = prepare_row(row, manifest_path.parent, pcfg, locnet=locnet,
                               oracle_loc=args.oracle_loc)
            pred = predict_with_models(models, kind, prep, model_cfg, pcfg)
            extent = prep.volume.spatial_shape
            crop_labels = pred.seg_probs.argmax(axis=0)
            full = paste_to_full(crop_labels, pred.grown_box, extent)
            flag = False
            if kind == "seg10":
                seg10 = LabelVolume(full, prep.volume.spacing, valid_codes=RELABELED_CODES)
            else:
                seg3 = LabelVolume(full, prep.volume.spacing)
                seg10, flag = evaluation.relabel_nonpdac(seg3, pred.pred_class)
            seg_path = f"segs/{row.case_id}.nii.gz"
            write_nifti(out_dir / seg_path, seg10)
            panc_path = f"pancreas_pred/{row.case_id}.nii.gz"
            write_nifti(out_dir / panc_path, prep.loc_mask)
            payload = {"case_id": row.case_id,
                       "class_probabilities": {n: float(p) for n, p
                                               in zip(CLASS10_LABELS, pred.probs)},
                       "predicted_class": pred.pred_class.label,
                       "seg_path": seg_path, "pancreas_path": panc_path}
            (out_dir / "cases" / f"{row.case_id}.json").write_text(
                json.dumps(payload, indent=2, sort_keys=True) + "\n")
            writer.writerow([row.case_id, pred.pred_class.label]
                            + [f"{p:.6f}" for p in pred.probs]
                            + [seg_path, panc_path, int(prep.loc_fallback), int(flag)])
    print(f"predictions for {len(rows)} case(s) -> {pred_csv}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def _read_predictions(path: Path) -> dict[str, dict]:
    import csv
    preds = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            preds[rec["case_id"]] = rec
    return preds


def _evaluate_case(row, rec, manifest_root: Path, pred_root: Path, overlay_dir: Path | None):
    true_class = LesionClass10.from_label(row.class10)
    pred_seg = read_label(pred_root / rec["seg10_path"], valid_codes=RELABELED_CODES)
    gt3 = read_label(manifest_root / row.label_path)
    gt3 = resample(gt3, pred_seg.spacing)
    # relabeling with the true class is the identity for normal/PDAC cases
    # (their labels contain no nonPDAC voxels)
    gt10, _ = evaluation.relabel_nonpdac(gt3, true_class)
    panc_pred = read_label(pred_root / rec["pancreas_pred_path"], valid_codes=(0, 1))
    panc_gt = None
    if row.pancreas_path:
        panc_gt = resample(read_label(manifest_root / row.pancreas_path,
                                      valid_codes=(0, 1)), pred_seg.spacing)
    dice, kind = evaluation.case_dice(true_class, pred_seg.data, gt10.data,
                                      panc_pred.data if panc_pred is not None else None,
                                      panc_gt.data if panc_gt is not None else None)
    if overlay_dir is not None:
        img = znormalize(resample(read_volume(manifest_root / row.image_path),
                                  pred_seg.spacing))
        evaluation.overlay_figure(
            img.data[-1], (pred_seg.data >= 1) & (pred_seg.data <= 9),
            gt10.data >= 1, panc_gt.data if panc_gt is not None else None,
            f"{row.case_id}: true {row.class10} / pred {rec['pred_class']}",
            overlay_dir / f"{row.case_id}.png")
    return evaluation.CaseEval(case_id=row.case_id, true_class=row.class10,
                               pred_class=rec["pred_class"], dice=dice, dice_kind=kind,
                               relabel_flag=bool(int(rec.get("relabel_flag", "0"))))


def cmd_evaluate(args) -> int:
    out_dir = _default_out("evaluate", args.out)
    manifest_path = Path(args.manifest)
    pred_path = Path(args.predictions)
    for p in (manifest_path, pred_path):
        if not p.exists():
            raise InputError(f"input not found: {p}")
    rows = read_manifest(manifest_path)
    preds = _read_predictions(pred_path)
    missing = [r.case_id for r in rows if r.case_id not in preds]
    if missing:
        raise CoverageError(f"predictions missing for {len(missing)} case(s): "
                            f"{missing[:10]}{'...' if len(missing) > 10 else ''}")
    overlay_dir = None
    if not args.no_overlays:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(parents=True, exist_ok=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, {"command": "evaluate", "manifest": str(manifest_path),
                              "predictions": str(pred_path),
                              "overlays": not args.no_overlays})
    pred_root = pred_path.parent
    tasks = [(r, preds[r.case_id]) for r in rows]
    if args.jobs > 1:
        import multiprocessing
        with multiprocessing.get_context("fork").Pool(args.jobs) as pool:
            case_rows = pool.starmap(
                _evaluate_case,
                [(r, rec, manifest_path.parent, pred_root, overlay_dir) for r, rec in tasks])
    else:
        case_rows = [_evaluate_case(r, rec, manifest_path.parent, pred_root, overlay_dir)
                     for r, rec in tasks]
    report = evaluation.build_report(case_rows)
    evaluation.write_metrics_json(report, out_dir / "metrics.json")
    evaluation.write_classification_csv(report, out_dir / "classification.csv")
    evaluation.write_dice_csv(report, out_dir / "dice.csv")
    evaluation.write_confusion_csv(report.confusion, out_dir / "confusion.csv")
    evaluation.confusion_figure(report.confusion, out_dir / "confusion.png")
    print(f"balanced accuracy {100 * report.balanced_acc:.1f}%, "
          f"regular {100 * report.regular_acc:.1f}%, "
          f"mean dice {report.dice_average:.3f} -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    out_dir = _default_out("report", args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    import csv
    columns = []
    for item in args.metrics:
        label, _, path = item.rpartition("=")
        path = Path(path)
        if not path.exists():
            raise InputError(f"metrics file not found: {path}")
        label = label or path.parent.name or path.stem
        columns.append((label, json.loads(path.read_text())))
    _write_resolved(out_dir, {"command": "report",
                              "inputs": [l for l, _ in columns]})
    with open(out_dir / "classification.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [l for l, _ in columns])
        for i, name in enumerate(CLASS10_LABELS):
            w.writerow([name] + [_fmt_pct(d["per_class_accuracy"][i]) for _, d in columns])
        w.writerow(["regular_acc"] + [_fmt_pct(d["regular_acc"]) for _, d in columns])
        w.writerow(["balanced_acc"] + [_fmt_pct(d["balanced_acc"]) for _, d in columns])
    with open(out_dir / "dice.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [l for l, _ in columns])
        for i, name in enumerate(CLASS10_LABELS):
            w.writerow([name] + [_fmt_dice(d["dice_mean"][i], d["dice_std"][i])
                                 for _, d in columns])
        w.writerow(["average"] + [f"{d['dice_average']:.3f}" for _, d in columns])
    _summary_figure(columns, out_dir / "balanced_accuracy.png")
    print(f"comparison tables for {len(columns)} run(s) -> {out_dir}")
    return 0


def _fmt_pct(v) -> str:
    return "" if v is None else f"{100.0 * v:.1f}"


def _fmt_dice(m, s) -> str:
    if m is None:
        return ""
    return f"{m:.3f}+/-{s:.3f}"


def _summary_figure(columns, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    labels = [l for l, _ in columns]
    vals = [100 * d["balanced_acc"] for _, d in columns]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(labels), 3.2))
    ax.bar(labels, vals, color="tab:blue")
    ax.set_ylabel("balanced accuracy (%)")
    ax.set_ylim(0, 100)
    for i, v in enumerate(vals):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdpformer",
        description="Dual-path transformer pipeline for joint lesion segmentation "
                    "and meta-aware classification on synthetic phantom volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a phantom dataset")
    g.add_argument("--preset", choices=sorted(phantom.SPEC_PRESETS), default="desk")
    g.add_argument("--spec", help="phantom spec JSON file (overrides --preset)")
    g.add_argument("--out", help="output directory (default $MDPFORMER_OUT/generate)")
    g.add_argument("--n-cases", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="override the spec RNG seed")
    g.add_argument("--jobs", type=int, default=1, help="parallel case generation")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train k-fold models on a dataset manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", help="output directory (default $MDPFORMER_OUT/train)")
    t.add_argument("--model", choices=("mdpformer", "dpformer", "spath_fc", "seg10", "locnet"),
                   default="mdpformer")
    t.add_argument("--profile", choices=sorted(MODEL_PRESETS), default="desk")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--folds", type=int, default=None)
    t.add_argument("--pretrain-epochs", type=int, default=None)
    t.add_argument("--joint-epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--target-spacing", type=float, nargs=3, default=(0.68, 0.68, 3.0))
    t.add_argument("--margin-range", type=int, nargs=2, default=(0, 8))
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="ensemble inference over a manifest")
    i.add_argument("--checkpoints", help="run directory holding fold*/best.pt (or one file)")
    i.add_argument("--checkpoint", action="append", help="explicit checkpoint path (repeatable)")
    i.add_argument("--manifest", required=True)
    i.add_argument("--case-id", help="restrict to a single case")
    i.add_argument("--out", help="output directory (default $MDPFORMER_OUT/infer)")
    i.add_argument("--oracle-loc", action="store_true",
                   help="crop from ground-truth pancreas masks instead of the localizer")
    i.add_argument("--locnet", help="stage-1 localizer checkpoint")
    i.add_argument("--target-spacing", type=float, nargs=3, default=(0.68, 0.68, 3.0))
    i.add_argument("--margin-range", type=int, nargs=2, default=(0, 8))
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="score predictions against a manifest")
    e.add_argument("--predictions", required=True, help="predictions.csv from infer")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="output directory (default $MDPFORMER_OUT/evaluate)")
    e.add_argument("--no-overlays", action="store_true")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge metrics.json files into comparison tables")
    r.add_argument("--metrics", nargs="+", required=True,
                   help="metrics.json paths, optionally label=path")
    r.add_argument("--out", help="output directory (default $MDPFORMER_OUT/report)")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CoverageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COVERAGE_ERROR
    except (InputError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
