"""Channel normalization, three-channel patch extraction and class balancing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .volume import Study, TumorMask, signed_distance_map, tumor_center, tumor_volume

SUV_SCALE = 100.0
SUV_WINDOW = (100.0, 2600.0)
ICVF_SCALE = 100.0
MASK_ON = 255.0


def normalize_suv(raw):
    """Scale SUV by 100, clip to the [100, 2600] window and map linearly onto [0, 255]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("SUV values must be finite")
    if np.any(raw < 0):
        raise ValueError("SUV values must be non-negative")
    lo, hi = SUV_WINDOW
    v = np.clip(SUV_SCALE * raw, lo, hi)
    out = (v - lo) / (hi - lo) * 255.0
    return float(out) if out.ndim == 0 else out


def normalize_icvf(raw):
    """ICVF fraction in [0, 1] times 100."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)) or np.any(raw < 0) or np.any(raw > 1):
        raise ValueError("ICVF values must lie in [0, 1]")
    out = ICVF_SCALE * raw
    return float(out) if out.ndim == 0 else out


def mask_channel(mask):
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be binary")
    out = np.where(mask.astype(bool), MASK_ON, 0.0)
    return float(out) if out.ndim == 0 else out


def channel_stack(study: Study) -> np.ndarray:
    """(3, nx, ny, nz) float32 array of SUV, ICVF and mask channels, normalized."""
    return np.stack([
        normalize_suv(study.suv.data),
        normalize_icvf(study.icvf.data),
        mask_channel(study.mask.data),
    ]).astype(np.float32)


@dataclass(frozen=True)
class PatchConfig:
    size: int = 17
    sampling_halfwidth: int = 15
    balance: bool = True

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError("patch size must be odd and >= 3")
        if self.sampling_halfwidth < 1:
            raise ValueError("sampling_halfwidth must be >= 1")

    @property
    def half(self) -> int:
        return self.size // 2


@dataclass(frozen=True)
class PatchSample:
    channels: np.ndarray  # (3, s, s)
    center: Tuple[int, int, int]
    label: int
    distance: float  # signed distance to the current tumor surface, voxels
    tumor_volume: float  # mm^3, current time point


class PatchSet:
    """Patches centred on a list of voxels of one study, extracted lazily.

    Holds the normalized, zero-padded channel volume and per-centre metadata;
    ``patches()`` materializes the axial ``s x s`` windows as a
    ``(n, 3, s, s)`` float32 array.  Indexing yields :class:`PatchSample`.
    """

    def __init__(self, padded: np.ndarray, half: int, centers: np.ndarray,
                 labels: Optional[np.ndarray], distances: np.ndarray, volume: float):
        self._padded = padded
        self.half = half
        self.centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.distances = np.asarray(distances, dtype=np.float64)
        self.tumor_volume = float(volume)

    @property
    def size(self) -> int:
        return 2 * self.half + 1

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i) -> PatchSample:
        if isinstance(i, slice):
            raise TypeError("use subset() for slicing")
        return PatchSample(
            channels=self.patches([i])[0],
            center=tuple(int(c) for c in self.centers[i]),
            label=-1 if self.labels is None else int(self.labels[i]),
            distance=float(self.distances[i]),
            tumor_volume=self.tumor_volume,
        )

    def __iter__(self) -> Iterator[PatchSample]:
        for i in range(len(self)):
            yield self[i]

    def patches(self, index: Optional[Sequence[int]] = None) -> np.ndarray:
        centers = self.centers if index is None else self.centers[np.asarray(index, dtype=np.int64)]
        s = self.size
        # padded coords: centre + half on the in-plane axes, z unpadded
        x = centers[:, 0][:, None, None] + np.arange(s)[None, :, None]
        y = centers[:, 1][:, None, None] + np.arange(s)[None, None, :]
        z = np.broadcast_to(centers[:, 2][:, None, None], x.shape[:1] + (s, s))
        out = self._padded[:, x, y, z]  # (3, n, s, s)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def batches(self, batch: int = 1024) -> Iterator[np.ndarray]:
        for start in range(0, len(self), batch):
            yield self.patches(np.arange(start, min(start + batch, len(self))))

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index, dtype=np.int64)
        return PatchSet(self._padded, self.half, self.centers[index],
                        None if self.labels is None else self.labels[index],
                        self.distances[index], self.tumor_volume)


def _padded_channels(study: Study, half: int) -> np.ndarray:
    stack = channel_stack(study)
    return np.pad(stack, ((0, 0), (half, half), (half, half), (0, 0)))


def sampling_box(center: Sequence[int], halfwidth: int, dims: Sequence[int]) -> np.ndarray:
    """All voxels within ``+-halfwidth`` of ``center``, ordered by (z, y, x)."""
    lo = np.asarray(center) - halfwidth
    hi = np.asarray(center) + halfwidth
    if np.any(lo < 0) or np.any(hi >= np.asarray(dims)):
        raise ValueError(f"sampling box [{lo.tolist()}, {hi.tolist()}] exceeds volume {tuple(dims)}")
    r = np.arange(-halfwidth, halfwidth + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1) + np.asarray(center)


def patches_at(current: Study, centers: np.ndarray, cfg: PatchConfig,
               next_mask: Optional[TumorMask] = None) -> PatchSet:
    """Patches of ``current`` at arbitrary centres, labelled from ``next_mask`` when given."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    if next_mask is not None and (next_mask.dims != current.dims or next_mask.spacing != current.spacing):
        raise ValueError("current study and next mask are not aligned")
    sd = signed_distance_map(current.mask)
    ix = tuple(centers.T)
    labels = None if next_mask is None else next_mask.data[ix].astype(np.int64)
    return PatchSet(_padded_channels(current, cfg.half), cfg.half, centers, labels,
                    sd[ix], tumor_volume(current.mask))


def extract_patches(current: Study, next_mask: TumorMask, cfg: PatchConfig = PatchConfig()) -> PatchSet:
    """One labelled patch per voxel of the sampling box around the current tumor centroid."""
    centers = sampling_box(tumor_center(current.mask), cfg.sampling_halfwidth, current.dims)
    return patches_at(current, centers, cfg, next_mask)


def balance_indices(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Keep all positives; under-sample negatives uniformly down to the positive count."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("balancing needs at least one sample of each class")
    if neg.size > pos.size:
        neg = np.sort(rng.choice(neg, size=pos.size, replace=False))
    return np.sort(np.concatenate([pos, neg]))


def balance_classes(samples: PatchSet, rng: np.random.Generator) -> PatchSet:
    return samples.subset(balance_indices(samples.labels, rng))


# --------------------------------------------------------------------------
# debug output


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap; ``image[i, j]`` is row i, column j."""
    img = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def dump_patches(samples: PatchSet, out_dir, limit: int = 64) -> int:
    """Write up to ``limit`` patches as one graymap per channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(limit, len(samples))
    names = ("suv", "icvf", "mask")
    for i in range(n):
        sample = samples[i]
        x, y, z = sample.center
        for c, name in enumerate(names):
            # rows follow y so the image reads like an axial slice
            write_pgm(out_dir / f"p{i:05d}_x{x}_y{y}_z{z}_l{sample.label}_{name}.pgm",
                      sample.channels[c].T)
    return n
