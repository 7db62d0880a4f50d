"""Deterministic synthetic segmentation data: one bright ellipse/ellipsoid
target per sample over a darker background, with optional distractor blobs
and additive Gaussian noise.

Every sample is a pure function of (spec, index): all randomness comes from
the counter-based generator keyed by the dataset seed and the sample index,
so datasets regenerate identically everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import pi, prod
from pathlib import Path

import numpy as np

from .fileio import write_tensor
from .rng import SplitMix
from .tensor import ShapeError, Tensor

# Redraw target radii until the continuous foreground fraction clears this,
# so the voxelized mask keeps at least ~1% foreground at any rank.
_MIN_FG_FRACTION = 0.015
_CLUTTER_BLOBS_AT_FULL_DENSITY = 12


@dataclass(frozen=True)
class DatasetSpec:
    rank: int = 2
    extent: tuple[int, ...] | int = 64
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    clutter_level: float = 0.25
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ShapeError(f"rank must be 2 or 3, got {self.rank}")
        ext = self.extent
        if isinstance(ext, int):
            ext = (ext,) * self.rank
        object.__setattr__(self, "extent", tuple(int(e) for e in ext))
        if len(self.extent) != self.rank or any(e < 8 for e in self.extent):
            raise ValueError(f"extent {self.extent} must be {self.rank} axes of at least 8")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ValueError(f"clutter_level must be in [0, 1], got {self.clutter_level}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val


@dataclass(frozen=True)
class Sample:
    image: Tensor  # [1, spatial], intensities in [0, 1]
    mask: Tensor   # [1, spatial], binary


def _rotation_matrix(rng: SplitMix, g: int) -> np.ndarray:
    if g == 2:
        theta = float(rng.uniform_range(0.0, pi, 1)[0])
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, -s], [s, c]])
    angles = rng.uniform_range(0.0, pi, 3)
    mats = []
    for axis, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        m = np.eye(3)
        a, b = [i for i in range(3) if i != axis]
        m[a, a] = c
        m[a, b] = -s
        m[b, a] = s
        m[b, b] = c
        mats.append(m)
    return mats[0] @ mats[1] @ mats[2]


def _ellipsoid_mask(coords: np.ndarray, center, radii, rot: np.ndarray) -> np.ndarray:
    g = coords.shape[0]
    diff = coords - np.asarray(center).reshape((g,) + (1,) * g)
    rotated = np.tensordot(rot, diff, axes=(1, 0))
    q = np.zeros(coords.shape[1:])
    for a in range(g):
        q += (rotated[a] / radii[a]) ** 2
    return q <= 1.0


def _unit_ball_volume(g: int) -> float:
    return pi if g == 2 else 4.0 * pi / 3.0


def gen_sample(spec: DatasetSpec, index: int, dtype=np.float32) -> Sample:
    """Generate sample `index`; bit-identical for identical (spec, index)."""
    if not 0 <= index < spec.n_total:
        raise IndexError(f"index {index} outside dataset of {spec.n_total} samples")
    g = spec.rank
    ext = np.asarray(spec.extent, dtype=np.float64)
    rng = SplitMix(spec.seed, f"sample.{index}")
    coords = np.indices(spec.extent).astype(np.float64)

    center = np.array([rng.uniform_range(0.25 * e, 0.75 * e, 1)[0] for e in ext])
    volume = float(prod(spec.extent))
    for _ in range(64):
        radii = np.array([rng.uniform_range(e / 8.0, e / 4.0, 1)[0] for e in ext])
        if _unit_ball_volume(g) * prod(radii) / volume >= _MIN_FG_FRACTION:
            break
    rot = _rotation_matrix(rng, g)
    bg = float(rng.uniform_range(0.15, 0.35, 1)[0])
    fg = float(rng.uniform_range(0.65, 0.90, 1)[0])
    mask = _ellipsoid_mask(coords, center, radii, rot)
    image = np.full(spec.extent, bg)
    image[mask] = fg

    n_blobs = int(round(spec.clutter_level * _CLUTTER_BLOBS_AT_FULL_DENSITY))
    for _ in range(n_blobs):
        bc = np.array([rng.uniform_range(0.0, e, 1)[0] for e in ext])
        br = np.array([rng.uniform_range(e / 20.0, e / 10.0, 1)[0] for e in ext])
        bi = float(rng.uniform_range(0.50, 0.85, 1)[0])
        blob = _ellipsoid_mask(coords, bc, br, np.eye(g)) & ~mask
        image[blob] = bi

    if spec.noise_sigma > 0.0:
        noise = rng.normal(image.size).reshape(spec.extent)
        image = image + spec.noise_sigma * noise
    image = np.clip(image, 0.0, 1.0)
    return Sample(
        image=Tensor(image[None].astype(dtype)),
        mask=Tensor(mask[None].astype(dtype)),
    )


def write_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write every sample as .dtct pairs plus a manifest; returns its path.

    Manifest lines are `index split path_image path_mask`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(spec.n_total):
        s = gen_sample(spec, i)
        split = "train" if i < spec.n_train else "val"
        img_path = out / f"sample_{i:05d}_image.dtct"
        mask_path = out / f"sample_{i:05d}_mask.dtct"
        write_tensor(img_path, s.image)
        write_tensor(mask_path, s.mask)
        lines.append(f"{i} {split} {img_path.name} {mask_path.name}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest
