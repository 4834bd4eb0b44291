"""Losses, schedules, stratified folds, fold training, checkpoints, ensembling."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .baselines import build_model
from .config import ModelConfig
from .pipeline import (PipelineConfig, PreparedCase, predict_with_models,
                       sample_training_inputs)
from .seeding import derive_seed
from .volumes import ManifestRow


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss is encountered (diagnostic checkpoint saved)."""


# ---------------------------------------------------------------------------
# losses

def dice_loss(seg_logits: torch.Tensor, labels: torch.Tensor,
              eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss: 1 - mean over classes of (2 sum(p g) + eps) / (sum p + sum g + eps).

    ``seg_logits`` is (B, C, ...) and is softmaxed over C; ``labels`` is
    integer (B, ...).  The mean runs over all C classes, background included;
    the value lies in [0, 1].
    """
    n_classes = seg_logits.shape[1]
    probs = torch.softmax(seg_logits, dim=1)
    onehot = F.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def ce_loss(probs: torch.Tensor, targets: torch.Tensor,
            floor: float = 1e-12) -> torch.Tensor:
    """Cross-entropy on probabilities: -log P_z, clamped away from zero."""
    picked = probs.gather(1, targets.view(-1, 1)).clamp_min(floor)
    return -torch.log(picked).mean()


def total_loss(ls: torch.Tensor, lc: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the segmentation and classification losses."""
    return ls + lc


def cosine_lr(epoch: int, total_epochs: int, lr_initial: float) -> float:
    """Cosine decay from lr_initial (epoch 0) to 0 (epoch == total_epochs)."""
    if total_epochs <= 0:
        return lr_initial
    return 0.5 * lr_initial * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))


# ---------------------------------------------------------------------------
# cross-validation folds

def make_folds(manifest, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Class-stratified k-fold partition; returns (train_idx, val_idx) per fold.

    Accepts manifest rows or plain class codes.  Classes with fewer than k
    cases are spread as evenly as possible (with a warning).  Deterministic
    in ``seed``; validation folds partition the index set exactly.
    """
    labels = [int(r.class10_enum) if isinstance(r, ManifestRow) else int(r) for r in manifest]
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    if k > len(labels):
        raise ValueError(f"fold count {k} exceeds case count {len(labels)}")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    val_sets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in sorted(set(labels)):
        idx = [i for i, z in enumerate(labels) if z == cls]
        if len(idx) < k:
            warnings.warn(f"class {cls} has {len(idx)} case(s) < {k} folds; "
                          "distributing as evenly as possible")
        idx = [idx[j] for j in rng.permutation(len(idx))]
        for j, i in enumerate(idx):
            val_sets[(offset + j) % k].append(i)
        offset = (offset + len(idx)) % k
    folds = []
    everything = set(range(len(labels)))
    for val in val_sets:
        val_sorted = sorted(val)
        folds.append((sorted(everything - set(val)), val_sorted))
    return folds


# ---------------------------------------------------------------------------
# checkpoints

def _config_hash(cfg_dict: dict) -> str:
    import hashlib
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, kind: str, model_cfg, state_dict: dict,
                    fold: int, epoch: int, metrics: dict,
                    train_cfg: "TrainConfig | None" = None) -> None:
    cfg_dict = model_cfg.to_dict() if hasattr(model_cfg, "to_dict") \
        else dataclasses.asdict(model_cfg)
    payload = {
        "kind": kind,
        "model_config": cfg_dict,
        "config_hash": _config_hash(cfg_dict),
        "train_config": dataclasses.asdict(train_cfg) if train_cfg else None,
        "fold": fold,
        "epoch": epoch,
        "metrics": metrics,
        "state_dict": {k: v.cpu() for k, v in state_dict.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if _config_hash(ck["model_config"]) != ck["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch (corrupt or edited checkpoint)")
    for name, tensor in ck["state_dict"].items():
        if not torch.isfinite(tensor).all():
            raise ValueError(f"{path}: non-finite weights in {name}")
    if ck["kind"] == "locnet":
        from .locnet import LocalizerConfig
        d = dict(ck["model_config"])
        ck["model_config"] = LocalizerConfig(**d)
    else:
        ck["model_config"] = ModelConfig.from_dict(ck["model_config"])
    return ck


def model_from_checkpoint(ck: dict) -> torch.nn.Module:
    if ck["kind"] == "locnet":
        from .locnet import LocNet
        model = LocNet(ck["model_config"])
    else:
        model = build_model(ck["kind"], ck["model_config"])
    model.load_state_dict(ck["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# fold training

@dataclass
class TrainConfig:
    """Optimization settings; the schedule shape (cosine) is fixed."""

    lr_initial: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 3
    pretrain_epochs: int = 50
    joint_epochs: int = 100
    fold_count: int = 5
    seed: int = 0
    precision: str = "float32"
    eval_every: int = 5
    max_steps: int | None = None     # optional cap on total optimizer steps

    def __post_init__(self):
        if self.fold_count < 2:
            raise ValueError(f"fold_count must be >= 2, got {self.fold_count}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    best_metric: float
    history: list[dict] = field(default_factory=list)


def _seg_targets(kind: str, y3: np.ndarray, class10: int) -> np.ndarray:
    if kind == "seg10":
        return np.where(y3 != 0, class10, 0).astype(np.int64)
    return y3


def _stack_batch(kind: str, cases: list[PreparedCase], model_cfg: ModelConfig,
                 pcfg: PipelineConfig, cfg: TrainConfig, tag: str, dtype):
    xs, ys, zs, metas = [], [], [], []
    for prep in cases:
        seed = derive_seed(cfg.seed, f"crop:{tag}:{prep.case_id}")
        x, y3 = sample_training_inputs(prep, model_cfg.input_dims, pcfg.margin_range, seed)
        xs.append(x)
        ys.append(_seg_targets(kind, y3, prep.class10))
        zs.append(prep.class10)
        metas.append(prep.meta)
    x = torch.from_numpy(np.stack(xs)).to(dtype)
    y = torch.from_numpy(np.stack(ys))
    z = torch.tensor(zs, dtype=torch.long)
    meta = torch.from_numpy(np.stack(metas)).to(dtype)
    return x, y, z, meta


def _validation_balanced_acc(model, kind, val_cases, model_cfg, pcfg) -> float:
    from .evaluation import accuracies, confusion
    if not val_cases:
        return float("nan")
    truths, preds = [], []
    for prep in val_cases:
        out = predict_with_models([model], kind, prep, model_cfg, pcfg)
        truths.append(prep.class10)
        preds.append(out.pred_class.value)
    return accuracies(confusion(truths, preds)).balanced


def train_fold(kind: str, train_cases: list[PreparedCase], val_cases: list[PreparedCase],
               model_cfg: ModelConfig, cfg: TrainConfig, out_dir: str | Path,
               fold_index: int = 0, pcfg: PipelineConfig | None = None) -> TrainResult:
    """Train one fold: segmentation-only pretraining, then joint end-to-end SGD.

    Checkpoints the best-balanced-accuracy-on-validation state and the last
    state.  Deterministic in the config seed.  Raises TrainingDivergedError
    (after writing a diagnostic checkpoint) if the loss goes non-finite.
    """
    if not train_cases:
        raise ValueError("training fold is empty")
    pcfg = pcfg or PipelineConfig()
    out = Path(out_dir) / f"fold{fold_index}"
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(derive_seed(cfg.seed, f"init:{kind}:{fold_index}"))
    model = build_model(kind, model_cfg)
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32
    model = model.to(dtype)

    history: list[dict] = []
    best = {"metric": -float("inf"), "state": None, "epoch": -1}
    step = 0
    log_fh = open(out / "train_log.jsonl", "w")

    def steps_left() -> bool:
        return cfg.max_steps is None or step < cfg.max_steps

    def run_phase(phase: str, epochs: int, params, with_ce: bool):
        nonlocal step
        opt = torch.optim.SGD(params, lr=cfg.lr_initial, momentum=cfg.momentum)
        order_rng = np.random.default_rng(
            derive_seed(cfg.seed, f"order:{kind}:{fold_index}:{phase}"))
        for epoch in range(epochs):
            if not steps_left():
                return
            lr = cosine_lr(epoch, epochs, cfg.lr_initial)
            for g in opt.param_groups:
                g["lr"] = lr
            order = order_rng.permutation(len(train_cases))
            for start in range(0, len(order), cfg.batch_size):
                if not steps_left():
                    break
                batch = [train_cases[i] for i in order[start:start + cfg.batch_size]]
                x, y, z, meta = _stack_batch(kind, batch, model_cfg, pcfg, cfg,
                                             f"{phase}:{epoch}", dtype)
                if kind == "seg10":
                    seg_logits = model(x)
                    ls = dice_loss(seg_logits, y)
                    lc = torch.zeros((), dtype=dtype)
                else:
                    probs, seg_logits = model(x, meta)
                    ls = dice_loss(seg_logits, y)
                    lc = ce_loss(probs, z) if with_ce else torch.zeros((), dtype=dtype)
                loss = total_loss(ls, lc) if with_ce else ls
                if not torch.isfinite(loss):
                    save_checkpoint(out / "diverged.pt", kind, model_cfg,
                                    model.state_dict(), fold_index, epoch,
                                    {"step": step, "phase": phase}, cfg)
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (phase {phase}); "
                        f"diagnostic checkpoint: {out / 'diverged.pt'}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                entry = {"step": step, "epoch": epoch, "phase": phase,
                         "ls": ls.detach().item(), "lc": lc.detach().item(), "lr": lr}
                history.append(entry)
                log_fh.write(json.dumps(entry) + "\n")
                step += 1
            if with_ce and val_cases and (
                    epoch % cfg.eval_every == cfg.eval_every - 1 or epoch == epochs - 1):
                metric = _validation_balanced_acc(model, kind, val_cases, model_cfg, pcfg)
                history.append({"step": step, "epoch": epoch, "phase": phase,
                                "val_balanced_acc": metric})
                if metric >= best["metric"]:
                    best.update(metric=metric,
                                state=copy.deepcopy(model.state_dict()), epoch=epoch)

    try:
        # phase 1: segmentation-path pretraining (classification path untouched)
        if kind in ("mdpformer", "dpformer", "spath_fc") and cfg.pretrain_epochs > 0:
            run_phase("pretrain", cfg.pretrain_epochs, model.spath.parameters(),
                      with_ce=False)
        # phase 2: end-to-end joint objective (seg10 trains Dice-only throughout)
        run_phase("joint", cfg.joint_epochs, model.parameters(),
                  with_ce=kind != "seg10")
    finally:
        log_fh.close()

    if best["state"] is None:
        best.update(metric=float("nan"), state=copy.deepcopy(model.state_dict()))
    last_path = out / "last.pt"
    best_path = out / "best.pt"
    save_checkpoint(last_path, kind, model_cfg, model.state_dict(), fold_index,
                    cfg.joint_epochs, {"val_balanced_acc": best["metric"]}, cfg)
    save_checkpoint(best_path, kind, model_cfg, best["state"], fold_index,
                    best["epoch"], {"val_balanced_acc": best["metric"]}, cfg)
    return TrainResult(best_path=best_path, last_path=last_path,
                       best_metric=best["metric"], history=history)


# ---------------------------------------------------------------------------
# stage-1 localizer training

def train_locnet(cases: list[PreparedCase], loc_cfg, cfg: TrainConfig,
                 out_dir: str | Path) -> Path:
    """Train the binary pancreas localizer on coarse grids with Dice loss."""
    from .locnet import LocNet, coarse_grid
    from .unet3d import check_divisible
    from .volumes import _resize

    if not cases:
        raise ValueError("no cases to train the localizer on")
    torch.manual_seed(derive_seed(cfg.seed, "init:locnet"))
    model = LocNet(loc_cfg)
    factor = 2 ** (loc_cfg.depth - 1)
    xs, ys = [], []
    for prep in cases:
        if prep.pancreas is None:
            raise ValueError(f"{prep.case_id}: localizer training needs pancreas masks")
        x = coarse_grid(prep.volume, loc_cfg)
        dims = tuple(d + (factor - d % factor) % factor for d in x.shape[1:])
        x = np.stack([_resize(c, dims, order=1) for c in x])
        y = _resize(prep.pancreas.data.astype(np.int64), dims, order=0)
        xs.append(x.astype(np.float32))
        ys.append(y)
    check_divisible(xs[0].shape[1:], loc_cfg.depth)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr_initial, momentum=cfg.momentum)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order:locnet"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    step = 0
    with open(out / "locnet_log.jsonl", "w") as log_fh:
        for epoch in range(cfg.joint_epochs):
            lr = cosine_lr(epoch, cfg.joint_epochs, cfg.lr_initial)
            for g in opt.param_groups:
                g["lr"] = lr
            order = order_rng.permutation(len(xs))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = torch.from_numpy(np.stack([xs[i] for i in idx]))
                y = torch.from_numpy(np.stack([ys[i] for i in idx]))
                loss = dice_loss(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite localizer loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                log_fh.write(json.dumps({"step": step, "epoch": epoch,
                                         "ls": loss.detach().item(), "lc": 0.0, "lr": lr}) + "\n")
                step += 1
    path = out / "locnet.pt"
    save_checkpoint(path, "locnet", loc_cfg, model.state_dict(), 0,
                    cfg.joint_epochs, {}, cfg)
    return path


# ---------------------------------------------------------------------------
# ensemble inference

def ensemble_predict(checkpoints: list, prep: PreparedCase,
                     pcfg: PipelineConfig | None = None):
    """Average predictions of checkpointed models over one case.

    Classification probabilities are the arithmetic mean of per-model
    probabilities (renormalized); segmentation is the argmax of mean voxel
    probabilities.  All checkpoints must share the model kind and
    architecture config.
    """
    if not checkpoints:
        raise ValueError("at least one checkpoint is required")
    loaded = [ck if isinstance(ck, dict) else load_checkpoint(ck) for ck in checkpoints]
    kinds = {ck["kind"] for ck in loaded}
    hashes = {ck["config_hash"] for ck in loaded}
    if len(kinds) > 1 or len(hashes) > 1:
        raise ValueError(f"incompatible checkpoints: kinds={sorted(kinds)}, "
                         f"config hashes={sorted(hashes)}")
    models = [model_from_checkpoint(ck) for ck in loaded]
    return predict_with_models(models, loaded[0]["kind"], prep,
                               loaded[0]["model_config"], pcfg or PipelineConfig())
