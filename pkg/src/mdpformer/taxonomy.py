"""Label spaces for patient-level and voxel-level targets, plus meta encoding.

Two label spaces coexist: the 10-class patient/lesion taxonomy used for
classification, and the grouped 3-class space used for voxel-wise
segmentation (everything that is neither normal nor PDAC collapses into a
single nonPDAC group).  Patient meta-information (gender, age) is encoded
into two scalars.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class LesionClass10(enum.IntEnum):
    """The ten patient/lesion classes, in canonical report order."""

    NORMAL = 0
    PDAC = 1
    PNET = 2
    SPT = 3
    IPMN = 4
    MCN = 5
    CP = 6
    SCN = 7
    OTHER_BENIGN = 8
    OTHER_MALIGNANT = 9

    @property
    def label(self) -> str:
        """Lowercase name used in all JSON/CSV output."""
        return CLASS10_LABELS[self.value]

    @classmethod
    def from_label(cls, label: str) -> "LesionClass10":
        try:
            return cls(CLASS10_LABELS.index(label.strip().lower()))
        except ValueError:
            raise ValueError(f"unknown 10-class label {label!r}; "
                             f"expected one of {CLASS10_LABELS}") from None

    @classmethod
    def from_code(cls, code: int) -> "LesionClass10":
        if not 0 <= int(code) <= 9 or int(code) != code:
            raise ValueError(f"invalid 10-class code {code!r}; valid codes are 0..9")
        return cls(int(code))


class SegClass3(enum.IntEnum):
    """The grouped 3-class voxel label space."""

    NORMAL = 0
    PDAC = 1
    NONPDAC = 2

    @property
    def label(self) -> str:
        return CLASS3_LABELS[self.value]


CLASS10_LABELS = ("normal", "pdac", "pnet", "spt", "ipmn", "mcn", "cp", "scn",
                  "other-benign", "other-malignant")
CLASS3_LABELS = ("normal", "pdac", "nonpdac")

LESION_CLASSES = tuple(c for c in LesionClass10 if c is not LesionClass10.NORMAL)


def map10to3(z: LesionClass10 | int) -> SegClass3:
    """Group the 10-class label into {normal, PDAC, nonPDAC}.

    Preimage sizes are {1, 1, 8}: only ``NORMAL`` maps to normal, only
    ``PDAC`` maps to PDAC, and the remaining eight lesion classes map to
    nonPDAC.
    """
    z = LesionClass10.from_code(int(z))
    if z is LesionClass10.NORMAL:
        return SegClass3.NORMAL
    if z is LesionClass10.PDAC:
        return SegClass3.PDAC
    return SegClass3.NONPDAC


GENDER_LABELS = ("female", "male")


@dataclass(frozen=True)
class MetaInfo:
    """Encoded patient meta-information: binary gender and age / 100."""

    gender: float
    age_normalized: float

    def __post_init__(self):
        if self.gender not in (0.0, 1.0):
            raise ValueError(f"gender must be 0.0 (female) or 1.0 (male), got {self.gender!r}")
        if self.age_normalized < 0:
            raise ValueError(f"age_normalized must be >= 0, got {self.age_normalized!r}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.gender, self.age_normalized)


def encode_meta(gender_label: str, age_years: float) -> MetaInfo:
    """Encode raw gender/age: female -> 0.0, male -> 1.0, age divided by 100.

    Ages above 100 are allowed (normalized value > 1.0); negative ages are
    rejected.
    """
    gender_label = gender_label.strip().lower()
    if gender_label not in GENDER_LABELS:
        raise ValueError(f"gender must be one of {GENDER_LABELS}, got {gender_label!r}")
    if age_years < 0:
        raise ValueError(f"age_years must be >= 0, got {age_years!r}")
    return MetaInfo(gender=float(GENDER_LABELS.index(gender_label)),
                    age_normalized=age_years / 100.0)
