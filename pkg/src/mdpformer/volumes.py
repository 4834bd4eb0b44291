"""Volume data model, preprocessing operations, and file IO.

Arrays use axis order (C, Y, X, Z) for multi-phase images and (Y, X, Z) for
label volumes.  Spacing is millimeters per voxel along (Y, X, Z).  Files are
NIfTI-1 (written through a small built-in codec so that outputs are
byte-deterministic), with dataset-level metadata in a manifest CSV and
per-case sidecar JSON.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .taxonomy import CLASS10_LABELS, LesionClass10

SEG3_CODES = (0, 1, 2)
CLASS10_CODES = tuple(range(10))
UNASSIGNED_CODE = 10
RELABELED_CODES = tuple(range(11))  # 0..9 classes, 10 = unassigned nonPDAC
BINARY_CODES = (0, 1)


class EmptyForegroundError(ValueError):
    """Raised when a mask contains no foreground voxels (no pancreas found)."""


@dataclass
class Volume3D:
    """Real-valued multi-phase grid of shape (C, Y, X, Z) with physical spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"Volume3D data must be (C, Y, X, Z), got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3D data must be finite")

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass
class LabelVolume:
    """Integer grid of shape (Y, X, Z) whose values live in a declared code set."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    valid_codes: tuple[int, ...] = SEG3_CODES
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"LabelVolume data must be (Y, X, Z), got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"LabelVolume data must be integer, got dtype {self.data.dtype}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        present = np.unique(self.data)
        if not np.isin(present, self.valid_codes).all():
            bad = sorted(set(present.tolist()) - set(self.valid_codes))
            raise ValueError(f"label volume contains codes {bad} outside {self.valid_codes}")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned voxel-index box; bounds are inclusive."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box min must be <= max per axis, got lo={self.lo} hi={self.hi}")
        if any(l < 0 for l in self.lo):
            raise ValueError(f"box min must be >= 0, got {self.lo}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def check_inside(self, extent: tuple[int, int, int]) -> None:
        if any(h >= e for h, e in zip(self.hi, extent)):
            raise ValueError(f"box {self.lo}..{self.hi} lies outside volume extent {extent}")


def central_box(extent: tuple[int, int, int], fraction: float = 0.5) -> BoundingBox3D:
    """Centered box covering ``fraction`` of each axis (fallback crop region)."""
    lo, hi = [], []
    for e in extent:
        half = max(1, int(round(e * fraction))) / 2.0
        c = e / 2.0
        lo.append(max(0, int(np.floor(c - half))))
        hi.append(min(e - 1, int(np.ceil(c + half)) - 1))
    return BoundingBox3D(tuple(lo), tuple(hi))


def _resize(data: np.ndarray, out_shape: tuple[int, ...], order: int) -> np.ndarray:
    """Resize one grid to an exact output shape (order 0 = nearest, 1 = trilinear)."""
    if tuple(data.shape) == tuple(out_shape):
        return data.copy()
    zoom = [o / i for o, i in zip(out_shape, data.shape)]
    out = ndimage.zoom(data, zoom, order=order, grid_mode=True, mode="nearest")
    if tuple(out.shape) != tuple(out_shape):  # guard against rounding drift
        raise AssertionError(f"resize produced {out.shape}, expected {out_shape}")
    return out


def resample(v: Volume3D | LabelVolume,
             target_spacing: tuple[float, float, float]) -> Volume3D | LabelVolume:
    """Resample onto ``target_spacing``; output dims are round(dim * s_in / s_out).

    Images interpolate trilinearly, label volumes nearest-neighbor.  When the
    target equals the input spacing the data is returned bit-exactly.
    """
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be > 0, got {target_spacing}")
    if tuple(target_spacing) == tuple(v.spacing):
        return replace(v, data=v.data.copy())
    in_shape = v.spatial_shape
    out_shape = tuple(max(1, int(round(d * si / so)))
                      for d, si, so in zip(in_shape, v.spacing, target_spacing))
    if isinstance(v, LabelVolume):
        out = _resize(v.data, out_shape, order=0)
        return replace(v, data=out, spacing=tuple(target_spacing))
    out = np.stack([_resize(v.data[c], out_shape, order=1) for c in range(v.num_channels)])
    return replace(v, data=out, spacing=tuple(target_spacing))


def znormalize(v: Volume3D) -> Volume3D:
    """Shift/scale each channel to zero mean, unit (population) variance.

    A constant channel cannot be scaled; it is zeroed instead and a warning
    is emitted.
    """
    if v.data[0].size < 2:
        raise ValueError("znormalize requires at least 2 voxels")
    out = np.empty_like(v.data, dtype=np.float32)
    for c in range(v.num_channels):
        chan = v.data[c].astype(np.float64)
        mean = chan.mean()
        std = chan.std()  # population std (ddof=0)
        if std < 1e-12:
            warnings.warn(f"channel {c} is constant; normalized output set to zeros")
            out[c] = 0.0
        else:
            out[c] = ((chan - mean) / std).astype(np.float32)
    return replace(v, data=out)


def bbox_of_mask(m: LabelVolume, foreground: set[int] | tuple[int, ...]) -> BoundingBox3D:
    """Tightest axis-aligned box containing every foreground voxel."""
    fg = np.isin(m.data, list(foreground))
    if not fg.any():
        raise EmptyForegroundError("mask contains no foreground voxels (no pancreas found)")
    coords = np.nonzero(fg)
    lo = tuple(int(c.min()) for c in coords)
    hi = tuple(int(c.max()) for c in coords)
    return BoundingBox3D(lo, hi)


def expand_box(box: BoundingBox3D, margins: tuple[int, ...],
               extent: tuple[int, int, int]) -> BoundingBox3D:
    """Grow a box by per-face margins (ylo, yhi, xlo, xhi, zlo, zhi), clipped."""
    lo = tuple(max(0, l - m) for l, m in zip(box.lo, margins[0::2]))
    hi = tuple(min(e - 1, h + m) for h, m, e in zip(box.hi, margins[1::2], extent))
    return BoundingBox3D(lo, hi)


def draw_margins(margin_range: tuple[int, int], rng_seed: int) -> tuple[int, ...]:
    """Six independent uniform integer margins, one per box face, in fixed order."""
    lo, hi = margin_range
    if lo > hi or lo < 0:
        raise ValueError(f"invalid margin range {margin_range}")
    rng = np.random.default_rng(rng_seed)
    return tuple(int(m) for m in rng.integers(lo, hi + 1, size=6))


def crop_and_resize(v: Volume3D | LabelVolume, box: BoundingBox3D,
                    margin_range: tuple[int, int], target_dims: tuple[int, int, int],
                    rng_seed: int) -> Volume3D | LabelVolume:
    """Expand the box by random per-face margins, crop, and resize to target dims.

    Image channels use trilinear interpolation; label volumes use nearest
    neighbor, so no new codes appear.  Deterministic in ``rng_seed``.
    """
    if any(d <= 0 for d in target_dims):
        raise ValueError(f"target dims must be positive, got {target_dims}")
    extent = v.spatial_shape
    box.check_inside(extent)
    margins = draw_margins(margin_range, rng_seed)
    grown = expand_box(box, margins, extent)
    sl = grown.slices()
    new_spacing = tuple(s * c / t for s, c, t in zip(v.spacing, grown.shape, target_dims))
    if isinstance(v, LabelVolume):
        crop = v.data[sl]
        return replace(v, data=_resize(crop, target_dims, order=0), spacing=new_spacing)
    crop = v.data[(slice(None),) + sl]
    out = np.stack([_resize(crop[c], target_dims, order=1) for c in range(v.num_channels)])
    return replace(v, data=out, spacing=new_spacing)


# ---------------------------------------------------------------------------
# NIfTI-1 IO (minimal built-in codec; gzip mtime pinned for determinism)

_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.int32): 8,
                np.dtype(np.float32): 16, np.dtype(np.float64): 64}
_NIFTI_DTYPES = {v: k for k, v in _NIFTI_CODES.items()}


def _pack_nifti_header(dims, pixdims, dtype, origin) -> bytes:
    code = _NIFTI_CODES[np.dtype(dtype)]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    pixdim = [1.0] + list(pixdims) + [1.0] * (7 - len(pixdims))
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)   # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)     # scl_slope
    struct.pack_into("<B", hdr, 123, 10)      # xyzt_units: mm | sec
    struct.pack_into("<80s", hdr, 148, b"mdpformer volume")
    struct.pack_into("<2h", hdr, 252, 0, 1)   # qform off, sform on
    sy, sx, sz = pixdims[0], pixdims[1], pixdims[2]
    oy, ox, oz = origin
    struct.pack_into("<4f", hdr, 280, sy, 0.0, 0.0, oy)
    struct.pack_into("<4f", hdr, 296, 0.0, sx, 0.0, ox)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr) + b"\x00\x00\x00\x00"  # no extensions


def _nifti_bytes(arr: np.ndarray, pixdims, origin) -> bytes:
    header = _pack_nifti_header(arr.shape, pixdims, arr.dtype, origin)
    return header + arr.tobytes(order="F")


def write_nifti(path: str | Path, v: Volume3D | LabelVolume) -> None:
    """Write a volume as .nii or .nii.gz (axis convention: file dims = Y,X,Z[,C])."""
    path = Path(path)
    if isinstance(v, LabelVolume):
        arr = v.data.astype(np.uint8 if max(v.valid_codes) < 256 else np.int32)
        pixdims = list(v.spacing)
    else:
        arr = np.moveaxis(v.data.astype(np.float32), 0, -1)  # (Y, X, Z, C)
        pixdims = list(v.spacing) + [1.0]
    raw = _nifti_bytes(arr, pixdims, v.origin)
    if path.name.endswith(".gz"):
        raw = gzip.compress(raw, 9, mtime=0)
    path.write_bytes(raw)


def _read_nifti_array(path: str | Path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if struct.unpack_from("<i", raw, 0)[0] != 348:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    dims = dim[1:1 + ndim]
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    origin = (struct.unpack_from("<f", raw, 292)[0],
              struct.unpack_from("<f", raw, 308)[0],
              struct.unpack_from("<f", raw, 324)[0])
    dtype = _NIFTI_DTYPES[code]
    n = int(np.prod(dims))
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=vox_offset)
    arr = arr.reshape(dims, order="F")
    spacing = tuple(float(p) for p in pixdim[1:4])
    return arr, spacing, origin


def read_volume(path: str | Path) -> Volume3D:
    arr, spacing, origin = _read_nifti_array(path)
    if arr.ndim == 3:
        arr = arr[..., None]
    data = np.ascontiguousarray(np.moveaxis(arr, -1, 0)).astype(np.float32)
    return Volume3D(data=data, spacing=spacing, origin=origin)


def read_label(path: str | Path, valid_codes: tuple[int, ...] = SEG3_CODES) -> LabelVolume:
    arr, spacing, origin = _read_nifti_array(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: label volume must be 3D, got {arr.ndim}D")
    data = np.ascontiguousarray(arr).astype(np.int64)
    return LabelVolume(data=data, spacing=spacing, valid_codes=valid_codes, origin=origin)


# ---------------------------------------------------------------------------
# Dataset manifest and per-case sidecar JSON

MANIFEST_COLUMNS = ("case_id", "image_path", "label_path", "gender", "age_years",
                    "class10", "pancreas_path")


@dataclass
class ManifestRow:
    case_id: str
    image_path: str
    label_path: str
    gender: str
    age_years: float
    class10: str
    pancreas_path: str = ""

    @property
    def class10_enum(self) -> LesionClass10:
        return LesionClass10.from_label(self.class10)


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow([r.case_id, r.image_path, r.label_path, r.gender,
                             f"{r.age_years:.1f}", r.class10, r.pancreas_path])


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["class10"] not in CLASS10_LABELS:
                raise ValueError(f"manifest {path}: unknown class10 {rec['class10']!r}")
            rows.append(ManifestRow(case_id=rec["case_id"], image_path=rec["image_path"],
                                    label_path=rec["label_path"], gender=rec["gender"],
                                    age_years=float(rec["age_years"]), class10=rec["class10"],
                                    pancreas_path=rec.get("pancreas_path", "")))
    return rows


def write_sidecar(path: str | Path, case_id: str, gender: str, age_years: float,
                  class10: str) -> None:
    payload = {"case_id": case_id, "gender": gender, "age_years": age_years,
               "class10": class10}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
