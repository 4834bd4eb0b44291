"""Procedural generator of synthetic multi-phase volumes with organ + lesions.

Each case holds a pancreas-shaped organ (a bent super-ellipsoid around a
jittered medial axis), an optional class-dependent lesion embedded strictly
inside the organ, three phase channels with class-specific contrast offsets,
and patient meta-information sampled from a per-class profile.  Long-tail
class frequencies and meta/class correlation make the benchmark a stand-in
for a clinical cohort while staying fully reproducible from a seed.
"""

from __future__ import annotations

import dataclasses
import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .seeding import derive_seed
from .taxonomy import (GENDER_LABELS, LesionClass10, MetaInfo, encode_meta,
                       map10to3)
from .volumes import (BINARY_CODES, LabelVolume, ManifestRow, Volume3D,
                      write_manifest, write_nifti, write_sidecar)

PHASE_NAMES = ("noncontrast", "arterial", "venous")

# baseline tissue levels per phase (arbitrary units; z-normalized downstream)
_BACKGROUND = (20.0, 24.0, 22.0)
_ORGAN_DELTA = (55.0, 95.0, 75.0)


@dataclass(frozen=True)
class LesionStyle:
    """Geometric/texture recipe for one lesion class."""

    shape: str                               # blob | cyst | tube | diffuse
    size_range_mm: tuple[float, float]
    contrast: tuple[float, float, float]     # per-phase additive offsets
    axis_range: tuple[float, float] = (0.15, 0.85)  # position along organ axis
    rim_offset: float = 0.0                  # cyst rim brightness
    texture: float = 0.0                     # extra intra-lesion texture amplitude

    def __post_init__(self):
        if self.shape not in ("blob", "cyst", "tube", "diffuse"):
            raise ValueError(f"unknown lesion shape {self.shape!r}")


@dataclass(frozen=True)
class MetaProfile:
    """Gender/age distribution for one class (clipped normal age)."""

    male_prob: float
    age_mean: float
    age_sd: float
    age_range: tuple[float, float] = (18.0, 95.0)


@dataclass
class PhantomSpec:
    """Full recipe for a reproducible synthetic dataset."""

    grid_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    class_frequencies: tuple[float, ...]
    meta_profiles: dict[int, MetaProfile]
    lesion_styles: dict[int, LesionStyle]
    noise_sigma: float = 4.0
    rng_seed: int = 0
    organ_exponent: float = 2.5

    def __post_init__(self):
        if len(self.class_frequencies) != 10:
            raise ValueError("class_frequencies must have 10 entries")
        if any(f < 0 for f in self.class_frequencies):
            raise ValueError("class frequencies must be non-negative")
        if abs(sum(self.class_frequencies) - 1.0) > 1e-9:
            raise ValueError(f"class frequencies must sum to 1, got {sum(self.class_frequencies)}")
        missing = [c for c in range(1, 10) if c not in self.lesion_styles]
        if missing:
            raise ValueError(f"lesion_styles must cover lesion classes 1..9, missing {missing}")
        missing = [c for c in range(10) if c not in self.meta_profiles]
        if missing:
            raise ValueError(f"meta_profiles must cover classes 0..9, missing {missing}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["meta_profiles"] = {str(k): dataclasses.asdict(v) for k, v in self.meta_profiles.items()}
        d["lesion_styles"] = {str(k): dataclasses.asdict(v) for k, v in self.lesion_styles.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["grid_dims"] = tuple(d["grid_dims"])
        d["spacing"] = tuple(d["spacing"])
        d["class_frequencies"] = tuple(d["class_frequencies"])
        d["meta_profiles"] = {int(k): MetaProfile(**{**v, "age_range": tuple(v["age_range"])})
                              for k, v in d["meta_profiles"].items()}
        d["lesion_styles"] = {
            int(k): LesionStyle(**{**v,
                                   "size_range_mm": tuple(v["size_range_mm"]),
                                   "contrast": tuple(v["contrast"]),
                                   "axis_range": tuple(v["axis_range"])})
            for k, v in d["lesion_styles"].items()}
        return cls(**d)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# cohort proportions of a long-tail clinical training set
COHORT_COUNTS = (707, 1088, 110, 68, 162, 32, 64, 93, 48, 24)
COHORT_FREQUENCIES = tuple(c / sum(COHORT_COUNTS) for c in COHORT_COUNTS)

_BROAD = MetaProfile(male_prob=0.5, age_mean=55.0, age_sd=15.0, age_range=(25.0, 85.0))
_YOUNG_FEMALE = MetaProfile(male_prob=0.08, age_mean=32.0, age_sd=5.0, age_range=(20.0, 44.0))
_MID_FEMALE = MetaProfile(male_prob=0.10, age_mean=52.0, age_sd=4.0, age_range=(45.0, 60.0))
_OLD_FEMALE = MetaProfile(male_prob=0.10, age_mean=72.0, age_sd=5.0, age_range=(61.0, 85.0))


def default_styles() -> dict[int, LesionStyle]:
    """Distinguishable-but-overlapping lesion recipes for the nine lesion classes."""
    C = LesionClass10
    return {
        C.PDAC.value: LesionStyle("blob", (8, 14), (-25, -45, -40)),
        C.PNET.value: LesionStyle("blob", (7, 13), (20, 75, 45)),
        C.SPT.value: LesionStyle("blob", (10, 18), (10, -20, 35)),
        C.IPMN.value: LesionStyle("tube", (16, 26), (-15, -35, -30)),
        C.MCN.value: LesionStyle("cyst", (10, 16), (-45, -65, -60), rim_offset=30),
        C.CP.value: LesionStyle("diffuse", (18, 28), (-12, -22, -18), texture=16),
        C.SCN.value: LesionStyle("cyst", (9, 15), (-35, -50, -45), rim_offset=25, texture=8),
        C.OTHER_BENIGN.value: LesionStyle("blob", (6, 10), (12, 28, 20), axis_range=(0.08, 0.38)),
        C.OTHER_MALIGNANT.value: LesionStyle("blob", (6, 10), (12, 28, 20), axis_range=(0.62, 0.92)),
    }


def default_profiles() -> dict[int, MetaProfile]:
    C = LesionClass10
    profiles = {c.value: _BROAD for c in LesionClass10}
    profiles[C.MCN.value] = _YOUNG_FEMALE
    profiles[C.SCN.value] = _MID_FEMALE
    profiles[C.SPT.value] = _OLD_FEMALE
    return profiles


def desk_spec(seed: int = 0) -> PhantomSpec:
    """Desk-scale default: 96x96x32 grid at (0.68, 0.68, 3.0) mm."""
    return PhantomSpec(grid_dims=(96, 96, 32), spacing=(0.68, 0.68, 3.0),
                       class_frequencies=COHORT_FREQUENCIES,
                       meta_profiles=default_profiles(),
                       lesion_styles=default_styles(), rng_seed=seed)


def tiny_spec(seed: int = 0) -> PhantomSpec:
    """Small fast grid for experiments and CI-scale training runs."""
    return PhantomSpec(grid_dims=(64, 64, 24), spacing=(1.5, 1.5, 3.0),
                       class_frequencies=COHORT_FREQUENCIES,
                       meta_profiles=default_profiles(),
                       lesion_styles=default_styles(), rng_seed=seed)


def meta_separable_spec(seed: int = 0) -> PhantomSpec:
    """Two classes with identical lesion styles, separable only through meta.

    MCN and SCN share one cyst recipe; their age distributions are disjoint
    (young vs. older), so an image-only classifier is reduced to chance on
    the pair while a meta-aware one is not.
    """
    style = LesionStyle("cyst", (10, 16), (-40, -58, -52), rim_offset=28)
    freqs = [0.0] * 10
    freqs[LesionClass10.MCN.value] = 0.5
    freqs[LesionClass10.SCN.value] = 0.5
    profiles = default_profiles()
    profiles[LesionClass10.MCN.value] = MetaProfile(0.0, 30.0, 4.0, (22.0, 40.0))
    profiles[LesionClass10.SCN.value] = MetaProfile(0.0, 68.0, 4.0, (58.0, 78.0))
    styles = default_styles()
    styles[LesionClass10.MCN.value] = style
    styles[LesionClass10.SCN.value] = style
    return PhantomSpec(grid_dims=(64, 64, 24), spacing=(1.5, 1.5, 3.0),
                       class_frequencies=tuple(freqs), meta_profiles=profiles,
                       lesion_styles=styles, rng_seed=seed)


def longtail_spec(seed: int = 0) -> PhantomSpec:
    """Long-tail benchmark where some classes are separable only by meta or position.

    MCN/SCN/SPT share one cyst recipe and differ only in (female-skewed)
    age; other-benign/other-malignant share one blob recipe and differ only
    in position along the organ axis.  Frequencies are tempered cohort
    proportions so the rarest classes still land a handful of cases in a
    few-hundred-case benchmark.
    """
    tempered = np.sqrt(np.asarray(COHORT_COUNTS, dtype=float))
    freqs = tuple(float(f) for f in tempered / tempered.sum())
    cyst = LesionStyle("cyst", (10, 16), (-40, -58, -52), rim_offset=28)
    styles = default_styles()
    profiles = default_profiles()
    C = LesionClass10
    for c in (C.MCN, C.SCN, C.SPT):
        styles[c.value] = cyst
    profiles[C.MCN.value] = MetaProfile(0.05, 30.0, 4.0, (22.0, 40.0))
    profiles[C.SCN.value] = MetaProfile(0.05, 52.0, 3.0, (45.0, 58.0))
    profiles[C.SPT.value] = MetaProfile(0.05, 72.0, 4.0, (63.0, 82.0))
    blob = LesionStyle("blob", (7, 11), (12, 30, 22))
    styles[C.OTHER_BENIGN.value] = dataclasses.replace(blob, axis_range=(0.08, 0.35))
    styles[C.OTHER_MALIGNANT.value] = dataclasses.replace(blob, axis_range=(0.65, 0.92))
    return PhantomSpec(grid_dims=(64, 64, 24), spacing=(1.5, 1.5, 3.0),
                       class_frequencies=freqs, meta_profiles=profiles,
                       lesion_styles=styles, rng_seed=seed)


SPEC_PRESETS = {"desk": desk_spec, "tiny": tiny_spec,
                "meta-separable": meta_separable_spec, "longtail": longtail_spec}


@dataclass
class CaseRecord:
    """One synthetic patient: volume, labels, class, and meta."""

    case_id: str
    volume: Volume3D
    label3: LabelVolume
    pancreas: LabelVolume
    class10: LesionClass10
    meta: MetaInfo
    gender_label: str
    age_years: float


# ---------------------------------------------------------------------------
# geometry helpers

def _axis_coords(spec: PhantomSpec):
    dims, sp = spec.grid_dims, spec.spacing
    return [(np.arange(d) + 0.5) * s for d, s in zip(dims, sp)]


def _organ_curve(spec: PhantomSpec, rng: np.random.Generator, n_samples: int = 48):
    """Medial-axis samples (mm) and per-sample radii of the organ."""
    ey, ex, ez = [d * s for d, s in zip(spec.grid_dims, spec.spacing)]
    bend = rng.uniform(0.08, 0.18) * rng.choice((-1.0, 1.0))
    lean = rng.uniform(-0.08, 0.08)
    tilt = rng.uniform(-0.12, 0.12)
    phase = rng.uniform(0, 2 * np.pi)
    r0 = 0.145 * min(ey, ex) * rng.uniform(0.9, 1.1)
    t = np.linspace(0.0, 1.0, n_samples)
    xs = ex * (0.14 + 0.72 * t)
    ys = ey * (0.5 + bend * np.sin(np.pi * t) + lean * (t - 0.5))
    zs = ez * (0.5 + tilt * (t - 0.5))
    radii = r0 * (1.05 - 0.45 * t) * (1.0 + 0.08 * np.sin(2 * np.pi * t + phase))
    return np.stack([ys, xs, zs], axis=1), radii, t


def _stamp_ball(mask: np.ndarray, coords, center, radii, exponent: float = 2.0) -> None:
    """OR a (super-)ellipsoid into ``mask``, evaluating only a local window."""
    cy, cx, cz = coords
    windows = []
    for ax_coords, c, r in zip(coords, center, radii):
        idx = np.nonzero(np.abs(ax_coords - c) <= r)[0]
        if idx.size == 0:
            return
        windows.append(slice(idx[0], idx[-1] + 1))
    wy, wx, wz = windows
    dy = np.abs(cy[wy] - center[0])[:, None, None] / radii[0]
    dx = np.abs(cx[wx] - center[1])[None, :, None] / radii[1]
    dz = np.abs(cz[wz] - center[2])[None, None, :] / radii[2]
    inside = dy ** exponent + dx ** exponent + dz ** exponent <= 1.0
    mask[wy, wx, wz] |= inside


def _organ_mask(spec: PhantomSpec, curve: np.ndarray, radii: np.ndarray) -> np.ndarray:
    coords = _axis_coords(spec)
    mask = np.zeros(spec.grid_dims, dtype=bool)
    for center, r in zip(curve, radii):
        # organ is flattened in z
        _stamp_ball(mask, coords, center, (r, r, 0.62 * r), exponent=spec.organ_exponent)
    return mask


def _nearest_organ_voxel(organ: np.ndarray, coords, center) -> tuple[int, int, int]:
    idx = np.argwhere(organ)
    pts = np.stack([coords[a][idx[:, a]] for a in range(3)], axis=1)
    d2 = ((pts - np.asarray(center)) ** 2).sum(axis=1)
    return tuple(int(i) for i in idx[int(np.argmin(d2))])


def _lesion_mask(spec: PhantomSpec, style: LesionStyle, organ: np.ndarray,
                 curve: np.ndarray, radii: np.ndarray, t: np.ndarray,
                 rng: np.random.Generator):
    """Lesion geometry (strictly inside the organ) plus an optional core mask."""
    coords = _axis_coords(spec)
    size = rng.uniform(*style.size_range_mm)
    t0 = rng.uniform(*style.axis_range)
    k = int(np.clip(np.searchsorted(t, t0), 1, len(t) - 2))
    center = curve[k] + rng.uniform(-2.0, 2.0, size=3) * np.array([1.0, 1.0, 0.5])
    mask = np.zeros(spec.grid_dims, dtype=bool)
    core = None
    if style.shape in ("blob", "diffuse"):
        rr = 0.5 * size * rng.uniform(0.85, 1.15, size=3) * np.array([1.0, 1.0, 0.8])
        _stamp_ball(mask, coords, center, rr)
    elif style.shape == "cyst":
        rr = 0.5 * size * rng.uniform(0.9, 1.1, size=3) * np.array([1.0, 1.0, 0.8])
        _stamp_ball(mask, coords, center, rr)
        core = np.zeros(spec.grid_dims, dtype=bool)
        _stamp_ball(core, coords, center, 0.62 * rr)
    elif style.shape == "tube":
        half = 0.5 * size
        r_tube = max(1.8, size / 6.0)
        along = np.nonzero(np.abs((t - t0) * np.linalg.norm(curve[-1] - curve[0])) <= half)[0]
        for j in along:
            _stamp_ball(mask, coords, curve[j] + (center - curve[k]) * 0.3,
                        (r_tube, r_tube, r_tube))
    mask &= organ
    if core is not None:
        core &= mask
    if not mask.any():
        # degenerate draw near the organ boundary: mark the closest organ voxel
        mask[_nearest_organ_voxel(organ, coords, center)] = True
    return mask, core


def _render(spec: PhantomSpec, class10: LesionClass10, rng: np.random.Generator):
    curve, radii, t = _organ_curve(spec, rng)
    organ = _organ_mask(spec, curve, radii)
    dims = spec.grid_dims
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=(2.0, 2.0, 1.0))
    texture *= 8.0 / max(texture.std(), 1e-6)

    label3 = np.zeros(dims, dtype=np.uint8)
    lesion = core = None
    if class10 is not LesionClass10.NORMAL:
        style = spec.lesion_styles[class10.value]
        lesion, core = _lesion_mask(spec, style, organ, curve, radii, t, rng)
        label3[lesion] = map10to3(class10).value

    image = np.empty((3,) + dims, dtype=np.float32)
    for p in range(3):
        img = np.full(dims, _BACKGROUND[p], dtype=np.float32)
        img += organ * (_ORGAN_DELTA[p] + texture)
        if lesion is not None:
            style = spec.lesion_styles[class10.value]
            img[lesion] += style.contrast[p]
            if core is not None:
                img[lesion & ~core] += style.rim_offset - 0.4 * style.contrast[p]
            if style.texture > 0:
                intra = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=1.0)
                img[lesion] += (style.texture * intra / max(intra.std(), 1e-6))[lesion]
        image[p] = img
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape).astype(np.float32)
    return image, label3, organ


def sample_meta(profile: MetaProfile, rng: np.random.Generator) -> tuple[str, float]:
    gender = GENDER_LABELS[int(rng.random() < profile.male_prob)]
    age = float(np.clip(rng.normal(profile.age_mean, profile.age_sd), *profile.age_range))
    return gender, round(age, 1)


def generate_case(spec: PhantomSpec, class10: LesionClass10 | int, case_seed: int,
                  case_id: str | None = None) -> CaseRecord:
    """Render one deterministic case for the given class."""
    class10 = LesionClass10.from_code(int(class10))
    rng = np.random.default_rng(case_seed)
    image, label3, organ = _render(spec, class10, rng)
    gender, age = sample_meta(spec.meta_profiles[class10.value], rng)
    if case_id is None:
        case_id = f"case_{case_seed & 0xFFFFFFFF:08x}"
    record = CaseRecord(
        case_id=case_id,
        volume=Volume3D(image, spec.spacing),
        label3=LabelVolume(label3, spec.spacing),
        pancreas=LabelVolume(organ.astype(np.uint8), spec.spacing, valid_codes=BINARY_CODES),
        class10=class10,
        meta=encode_meta(gender, age),
        gender_label=gender,
        age_years=age,
    )
    has_lesion = bool((record.label3.data != 0).any())
    assert has_lesion == (class10 is not LesionClass10.NORMAL)
    assert not (record.label3.data[~organ] != 0).any(), "lesion escaped the organ"
    return record


def plan_classes(spec: PhantomSpec, n_cases: int) -> list[LesionClass10]:
    """Multinomial class assignment for a dataset (deterministic in the spec seed)."""
    rng = np.random.default_rng(derive_seed(spec.rng_seed, "classes"))
    codes = rng.choice(10, size=n_cases, p=np.asarray(spec.class_frequencies))
    return [LesionClass10(int(c)) for c in codes]


def _case_paths(case_id: str) -> dict[str, str]:
    return {"image": f"images/{case_id}.nii.gz",
            "label": f"labels/{case_id}.nii.gz",
            "pancreas": f"pancreas/{case_id}.nii.gz",
            "sidecar": f"sidecars/{case_id}.json"}


def _write_case(out_dir: Path, record: CaseRecord) -> ManifestRow:
    paths = _case_paths(record.case_id)
    write_nifti(out_dir / paths["image"], record.volume)
    write_nifti(out_dir / paths["label"], record.label3)
    write_nifti(out_dir / paths["pancreas"], record.pancreas)
    write_sidecar(out_dir / paths["sidecar"], record.case_id, record.gender_label,
                  record.age_years, record.class10.label)
    return ManifestRow(case_id=record.case_id, image_path=paths["image"],
                       label_path=paths["label"], gender=record.gender_label,
                       age_years=record.age_years, class10=record.class10.label,
                       pancreas_path=paths["pancreas"])


def _generate_one(args):
    spec, class10, seed, case_id, out_dir = args
    record = generate_case(spec, class10, seed, case_id)
    if out_dir is not None:
        row = _write_case(Path(out_dir), record)
        return None, row
    paths = _case_paths(record.case_id)
    row = ManifestRow(case_id=record.case_id, image_path=paths["image"],
                      label_path=paths["label"], gender=record.gender_label,
                      age_years=record.age_years, class10=record.class10.label,
                      pancreas_path=paths["pancreas"])
    return record, row


def generate_dataset(spec: PhantomSpec, n_cases: int, out_dir: str | Path | None = None,
                     jobs: int = 1):
    """Generate ``n_cases`` cases; write them under ``out_dir`` when given.

    Returns ``(records, manifest_rows)``; records is None for on-disk
    generation (cases are not kept in memory).  Per-case seeds derive from
    the spec seed and the case index, so generation is reproducible
    bit-exactly and embarrassingly parallel.
    """
    if n_cases < 10:
        raise ValueError(f"n_cases must be >= 10, got {n_cases}")
    classes = plan_classes(spec, n_cases)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sub in ("images", "labels", "pancreas", "sidecars"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    tasks = [(spec, classes[i], derive_seed(spec.rng_seed, f"case:{i}"),
              f"case_{i:04d}", out_dir) for i in range(n_cases)]
    if jobs > 1:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            results = pool.map(_generate_one, tasks)
    else:
        results = [_generate_one(t) for t in tasks]
    records = [r for r, _ in results] if out_dir is None else None
    rows = [row for _, row in results]
    if out_dir is not None:
        write_manifest(rows, out_dir / "manifest.csv")
    return records, rows
