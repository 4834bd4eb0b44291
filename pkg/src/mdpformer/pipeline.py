"""End-to-end per-case glue: preprocessing, cropping, prediction, assembly.

The two-stage flow is: resample + z-normalize the full volume, locate the
organ (stage-1 network or ground-truth oracle), crop the organ box with
margins, resize to the model input grid, run the model(s), then map the
cropped prediction back onto the full grid and relabel nonPDAC voxels with
the predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .baselines import lesion_size_table, s4c_classify
from .config import ModelConfig
from .locnet import LocNet, localize, oracle_box
from .phantom import CaseRecord
from .taxonomy import LesionClass10, encode_meta
from .volumes import (BINARY_CODES, SEG3_CODES, BoundingBox3D, LabelVolume,
                      ManifestRow, Volume3D, _resize, bbox_of_mask,
                      crop_and_resize, expand_box, read_label, read_volume,
                      resample, znormalize)


@dataclass(frozen=True)
class PipelineConfig:
    """Preprocessing and cropping settings shared by training and inference."""

    target_spacing: tuple[float, float, float] = (0.68, 0.68, 3.0)
    margin_range: tuple[int, int] = (0, 8)

    @property
    def inference_margin(self) -> int:
        return (self.margin_range[0] + self.margin_range[1]) // 2


@dataclass
class PreparedCase:
    """A case after resampling/normalization, ready for cropping."""

    case_id: str
    volume: Volume3D
    label3: LabelVolume | None
    pancreas: LabelVolume | None      # ground truth, when available
    box: BoundingBox3D                # crop box (oracle or localized)
    meta: np.ndarray                  # (2,) encoded gender/age
    class10: int | None
    loc_mask: LabelVolume | None = None   # stage-1 predicted mask
    loc_fallback: bool = False


def prepare_record(record: CaseRecord, pcfg: PipelineConfig) -> PreparedCase:
    """Preprocess an in-memory case, using the ground-truth organ box."""
    vol = znormalize(resample(record.volume, pcfg.target_spacing))
    label3 = resample(record.label3, pcfg.target_spacing)
    pancreas = resample(record.pancreas, pcfg.target_spacing)
    return PreparedCase(case_id=record.case_id, volume=vol, label3=label3,
                        pancreas=pancreas, box=oracle_box(pancreas),
                        meta=np.asarray(record.meta.as_tuple(), dtype=np.float32),
                        class10=int(record.class10))


def load_case_files(row: ManifestRow, root: str | Path):
    root = Path(root)
    volume = read_volume(root / row.image_path)
    label3 = read_label(root / row.label_path, valid_codes=SEG3_CODES)
    pancreas = None
    if row.pancreas_path:
        pancreas = read_label(root / row.pancreas_path, valid_codes=BINARY_CODES)
    return volume, label3, pancreas


def prepare_row(row: ManifestRow, root: str | Path, pcfg: PipelineConfig,
                locnet: LocNet | None = None, oracle_loc: bool = True) -> PreparedCase:
    """Preprocess a manifest case; stage-1 box from the localizer unless oracle."""
    volume, label3, pancreas = load_case_files(row, root)
    vol = znormalize(resample(volume, pcfg.target_spacing))
    label3 = resample(label3, pcfg.target_spacing)
    if pancreas is not None:
        pancreas = resample(pancreas, pcfg.target_spacing)
    meta = encode_meta(row.gender, row.age_years)
    loc_mask, fallback = None, False
    if oracle_loc:
        if pancreas is None:
            raise ValueError(f"{row.case_id}: oracle localization needs a pancreas mask")
        box = oracle_box(pancreas)
        loc_mask = pancreas
    else:
        if locnet is None:
            raise ValueError("localizer network required when oracle_loc is off")
        result = localize(vol, locnet)
        box, loc_mask, fallback = result.box, result.mask, result.fallback
    return PreparedCase(case_id=row.case_id, volume=vol, label3=label3,
                        pancreas=pancreas, box=box,
                        meta=np.asarray(meta.as_tuple(), dtype=np.float32),
                        class10=int(LesionClass10.from_label(row.class10)),
                        loc_mask=loc_mask, loc_fallback=fallback)


def sample_training_inputs(prep: PreparedCase, input_dims: tuple[int, int, int],
                           margin_range: tuple[int, int], seed: int):
    """Random-margin crop of image + 3-class labels, resized to the input grid."""
    x = crop_and_resize(prep.volume, prep.box, margin_range, input_dims, seed)
    y = crop_and_resize(prep.label3, prep.box, margin_range, input_dims, seed)
    return x.data.astype(np.float32), y.data.astype(np.int64)


@dataclass
class CasePrediction:
    case_id: str
    probs: np.ndarray                 # (10,)
    pred_class: LesionClass10
    seg_probs: np.ndarray             # (C_seg, *input_dims), ensemble-averaged
    grown_box: BoundingBox3D


def predict_with_models(models: list[torch.nn.Module], kind: str, prep: PreparedCase,
                        model_cfg: ModelConfig, pcfg: PipelineConfig) -> CasePrediction:
    """Deterministic fixed-margin inference, averaging predictions over models."""
    m = pcfg.inference_margin
    extent = prep.volume.spatial_shape
    grown = expand_box(prep.box, (m,) * 6, extent)
    crop = prep.volume.data[(slice(None),) + grown.slices()]
    x = np.stack([_resize(crop[c].astype(np.float32), model_cfg.input_dims, order=1)
                  for c in range(crop.shape[0])])
    xb = torch.from_numpy(x).unsqueeze(0)
    meta = torch.from_numpy(prep.meta).unsqueeze(0)
    probs_list, seg_list = [], []
    for model in models:
        model.eval()
        with torch.no_grad():
            if kind == "seg10":
                logits = model(xb)
            else:
                p, logits = model(xb, meta)
                probs_list.append(p[0].numpy().astype(np.float64))
            seg_list.append(torch.softmax(logits, dim=1)[0].numpy().astype(np.float64))
    seg_probs = np.mean(seg_list, axis=0)
    if kind == "seg10":
        sizes = lesion_size_table(seg_probs.argmax(axis=0))
        pred = s4c_classify(sizes)
        probs = np.zeros(10)
        probs[pred.value] = 1.0
    else:
        probs = np.mean(probs_list, axis=0)
        probs = probs / probs.sum()
        pred = LesionClass10(int(probs.argmax()))
    return CasePrediction(case_id=prep.case_id, probs=probs, pred_class=pred,
                          seg_probs=seg_probs, grown_box=grown)


def paste_to_full(labels_crop: np.ndarray, grown: BoundingBox3D,
                  extent: tuple[int, int, int]) -> np.ndarray:
    """Nearest-resize a cropped label grid back into a zeroed full-size grid."""
    full = np.zeros(extent, dtype=np.int64)
    full[grown.slices()] = _resize(labels_crop.astype(np.int64), grown.shape, order=0)
    return full
