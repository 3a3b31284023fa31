"""Volume data model, raw-volume I/O and geometric primitives.

Arrays are indexed ``[x, y, z]``.  On disk the payload is little-endian
float32 with x varying fastest, preceded by a small ``key=value`` text header
living next to it (``name.hdr`` / ``name.raw``).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, os.PathLike]
Triple = Tuple[float, float, float]

HEADER_SUFFIX = ".hdr"
PAYLOAD_SUFFIX = ".raw"
CHANNELS = ("suv", "icvf", "mask")


class VolumeFormatError(ValueError):
    """Raised when a raw-volume header or payload is malformed."""


def _check_spacing(spacing: Sequence[float]) -> Triple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """3D float32 voxel grid with physical spacing in millimetres."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def checksum(self) -> str:
        return hashlib.sha256(self.data.astype("<f4").tobytes(order="F")).hexdigest()


@dataclass(frozen=True)
class TumorMask:
    """Binary voxel mask sharing the geometry conventions of :class:`ScalarVolume`."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask must be 3D with non-empty dims, got {data.shape}")
        if data.dtype != bool:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def to_volume(self) -> ScalarVolume:
        return ScalarVolume(self.data.astype(np.float32), self.spacing)

    @classmethod
    def from_volume(cls, vol: ScalarVolume) -> "TumorMask":
        return cls(vol.data, vol.spacing)

    def checksum(self) -> str:
        return self.to_volume().checksum()


@dataclass(frozen=True)
class ClinicalRecord:
    age: float
    gender: int  # 0 female, 1 male
    height: float  # metres
    weight: float  # kilograms

    def __post_init__(self):
        if not self.age > 0:
            raise ValueError("age must be positive")
        if self.gender not in (0, 1):
            raise ValueError("gender must be encoded 0 (female) or 1 (male)")
        if not 0.5 < self.height < 2.5:
            raise ValueError("height must lie in (0.5, 2.5) metres")
        if not self.weight > 0:
            raise ValueError("weight must be positive")


@dataclass(frozen=True)
class Study:
    """One patient imaged at one time point."""

    patient_id: str
    timepoint: int
    acquisition_day: int
    suv: ScalarVolume
    icvf: ScalarVolume
    mask: TumorMask

    def __post_init__(self):
        geoms = {(c.dims, c.spacing) for c in (self.suv, self.icvf, self.mask)}
        if len(geoms) != 1:
            raise ValueError("SUV, ICVF and mask channels must share dims and spacing")
        if self.timepoint not in (1, 2, 3):
            raise ValueError("timepoint must be 1, 2 or 3")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.mask.dims

    @property
    def spacing(self) -> Triple:
        return self.mask.spacing


@dataclass(frozen=True)
class LongitudinalCase:
    studies: Tuple[Study, Study, Study]
    clinical: ClinicalRecord

    def __post_init__(self):
        studies = tuple(self.studies)
        if len(studies) != 3:
            raise ValueError("a longitudinal case holds exactly three studies")
        if studies[0].acquisition_day != 0:
            raise ValueError("first acquisition day must be 0")
        if len({s.patient_id for s in studies}) != 1:
            raise ValueError("studies belong to different patients")
        for k, s in enumerate(studies):
            if s.timepoint != k + 1:
                raise ValueError("studies must be ordered by timepoint")
        days = [s.acquisition_day for s in studies]
        if not days[0] < days[1] < days[2]:
            raise ValueError("acquisition days must be strictly increasing")
        object.__setattr__(self, "studies", studies)

    @property
    def patient_id(self) -> str:
        return self.studies[0].patient_id

    @property
    def intervals(self) -> Tuple[int, int]:
        d = [s.acquisition_day for s in self.studies]
        return (d[1] - d[0], d[2] - d[1])


# --------------------------------------------------------------------------
# raw-volume I/O


def _paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_suffix(HEADER_SUFFIX), path.with_suffix(PAYLOAD_SUFFIX)


def save_volume(vol: ScalarVolume, path: PathLike) -> None:
    """Write ``vol`` as ``<stem>.hdr`` + ``<stem>.raw``."""
    hdr, raw = _paths(path)
    lines = [
        "dims=" + " ".join(str(n) for n in vol.dims),
        "spacing=" + " ".join(repr(s) for s in vol.spacing),
        "dtype=f32",
        "order=xyz-x-fastest",
    ]
    hdr.write_text("\n".join(lines) + "\n")
    raw.write_bytes(vol.data.astype("<f4").tobytes(order="F"))


def _parse_header(text: str) -> dict:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"malformed header line: {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing", "dtype", "order"):
        if key not in fields:
            raise VolumeFormatError(f"header missing '{key}'")
    if fields["dtype"] != "f32":
        raise VolumeFormatError(f"unsupported dtype {fields['dtype']!r}")
    if fields["order"] != "xyz-x-fastest":
        raise VolumeFormatError(f"unsupported order {fields['order']!r}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise VolumeFormatError("dims and spacing must have three entries")
    return {"dims": dims, "spacing": spacing}


def load_volume(path: PathLike) -> ScalarVolume:
    """Read a volume written by :func:`save_volume`."""
    hdr, raw = _paths(path)
    if not hdr.exists() or not raw.exists():
        raise FileNotFoundError(f"missing volume files for {path}")
    meta = _parse_header(hdr.read_text())
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    n = int(np.prod(meta["dims"]))
    if payload.size != n or raw.stat().st_size != 4 * n:
        raise VolumeFormatError(
            f"header declares {n} voxels but payload holds {raw.stat().st_size / 4:g}"
        )
    data = payload.reshape(meta["dims"], order="F").astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("payload contains non-finite values")
    return ScalarVolume(data, meta["spacing"])


def load_mask(path: PathLike) -> TumorMask:
    vol = load_volume(path)
    if not np.all((vol.data == 0) | (vol.data == 1)):
        raise VolumeFormatError(f"{path} is not a binary mask")
    return TumorMask.from_volume(vol)


def save_mask(mask: TumorMask, path: PathLike) -> None:
    save_volume(mask.to_volume(), path)


def write_case(case: LongitudinalCase, directory: PathLike) -> Path:
    """Write ``tK_{suv,icvf,mask}`` volumes plus ``clinical.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for study in case.studies:
        prefix = directory / f"t{study.timepoint}"
        save_volume(study.suv, f"{prefix}_suv")
        save_volume(study.icvf, f"{prefix}_icvf")
        save_mask(study.mask, f"{prefix}_mask")
    c = case.clinical
    meta = {
        "patient_id": case.patient_id,
        "age": c.age,
        "gender": c.gender,
        "height_m": c.height,
        "weight_kg": c.weight,
        "acquisition_days": [s.acquisition_day for s in case.studies],
    }
    (directory / "clinical.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory


def read_case(directory: PathLike) -> LongitudinalCase:
    directory = Path(directory)
    meta_path = directory / "clinical.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    clinical = ClinicalRecord(
        age=float(meta["age"]),
        gender=int(meta["gender"]),
        height=float(meta["height_m"]),
        weight=float(meta["weight_kg"]),
    )
    patient_id = str(meta.get("patient_id", directory.name))
    days = [int(d) for d in meta["acquisition_days"]]
    studies = []
    for k, day in enumerate(days, start=1):
        prefix = directory / f"t{k}"
        studies.append(
            Study(
                patient_id=patient_id,
                timepoint=k,
                acquisition_day=day,
                suv=load_volume(f"{prefix}_suv"),
                icvf=load_volume(f"{prefix}_icvf"),
                mask=load_mask(f"{prefix}_mask"),
            )
        )
    return LongitudinalCase(tuple(studies), clinical)


# --------------------------------------------------------------------------
# geometry


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(int)


def centroid(mask: TumorMask) -> np.ndarray:
    """Foreground centroid in voxel index space (float)."""
    idx = np.argwhere(mask.data)
    if idx.size == 0:
        raise ValueError("empty mask has no centroid")
    return idx.mean(axis=0)


def tumor_center(mask: TumorMask) -> Tuple[int, int, int]:
    """Centroid rounded half away from zero per axis."""
    return tuple(int(v) for v in round_half_away(centroid(mask)))


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbour.

    Voxels outside the field of view count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def signed_distance_map(mask: TumorMask) -> np.ndarray:
    """Signed distance (voxel units) from every voxel to the nearest surface voxel.

    Positive inside the tumor, negative outside; surface voxels are +0.
    """
    data = mask.data
    if not data.any() or data.all():
        raise ValueError("signed distance needs both foreground and background voxels")
    surf = surface(data)
    dist = ndimage.distance_transform_edt(~surf)
    return np.where(data, dist, -dist)


def signed_distance_to_surface(mask: TumorMask, center: Sequence[int]) -> float:
    center = tuple(int(c) for c in center)
    if len(center) != 3 or any(not 0 <= c < n for c, n in zip(center, mask.dims)):
        raise IndexError(f"center {center} outside volume {mask.dims}")
    return float(signed_distance_map(mask)[center])


def tumor_volume(mask: TumorMask) -> float:
    """Foreground volume in mm^3."""
    return mask.count * mask.voxel_volume


def translate(data: np.ndarray, offset: Sequence[int], fill=0) -> np.ndarray:
    """Integer shift with out-of-field voxels set to ``fill``."""
    out = np.full_like(data, fill)
    src, dst = [], []
    for d, n in zip(offset, data.shape):
        d = int(d)
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def align_at_tumor_center(moving: Study, reference: Study) -> Study:
    """Translate all channels of ``moving`` so its rounded tumor centroid matches ``reference``'s."""
    offset = np.subtract(tumor_center(reference.mask), tumor_center(moving.mask))
    if not offset.any():
        return moving
    sp = moving.spacing
    return Study(
        patient_id=moving.patient_id,
        timepoint=moving.timepoint,
        acquisition_day=moving.acquisition_day,
        suv=ScalarVolume(translate(moving.suv.data, offset), sp),
        icvf=ScalarVolume(translate(moving.icvf.data, offset), sp),
        mask=TumorMask(translate(moving.mask.data, offset, fill=False), sp),
    )
