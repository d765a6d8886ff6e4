"""Synthetic desk-scale image corpus and reproducible patch sampling.

Images are CHW float64 arrays in [0,1]. The bundled generator produces a
fixed set of texture and cartoon scenes so experiments run without any
external data; directory ingestion for user corpora lives in the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def dihedral_apply(x: np.ndarray, k: int) -> np.ndarray:
    """Element k of the dihedral group on the two trailing axes.

    k in 0..7: k&3 counts quarter-turns, bit 2 adds a horizontal flip.
    """
    if not 0 <= k <= 7:
        raise ConfigError(f"dihedral index {k} outside 0..7")
    out = x
    if k >= 4:
        out = out[..., ::-1]
    return np.rot90(out, k % 4, axes=(-2, -1)).copy()


def dihedral_orbit(x: np.ndarray) -> list[np.ndarray]:
    """All 8 flips/rotations of x (k = 0..7, in index order)."""
    return [dihedral_apply(x, k) for k in range(8)]


def _texture(rng, size, kind):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    if kind == 0:  # smooth two-tone gradient
        a, b = rng.uniform(0.5, 3.0, 2)
        img = 0.5 + 0.3 * np.sin(a * np.pi * xx) * np.cos(b * np.pi * yy)
    elif kind == 1:  # oriented stripes
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(4, 12)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.35 * np.sin(
            freq * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
    elif kind == 2:  # cartoon: flat disks on a plain background
        img = np.full((size, size), rng.uniform(0.1, 0.4))
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0.1, 0.9, 2) * size
            rad = rng.uniform(0.06, 0.22) * size
            level = rng.uniform(0.3, 1.0)
            img[(np.mgrid[0:size, 0:size][0] - cy) ** 2 +
                (np.mgrid[0:size, 0:size][1] - cx) ** 2 <= rad * rad] = level
    else:  # cartoon: axis-aligned rectangles
        img = np.full((size, size), rng.uniform(0.5, 0.9))
        for _ in range(rng.integers(3, 7)):
            y0, x0 = rng.integers(0, size - 8, 2)
            h, w = rng.integers(6, size // 2, 2)
            img[y0:min(y0 + h, size), x0:min(x0 + w, size)] = rng.uniform(
                0.0, 0.6)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_images(count: int = 16, size: int = 96, channels: int = 1,
                          seed: int = 0) -> list[np.ndarray]:
    """Procedurally generated corpus, deterministic in (count, size, seed)."""
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng([seed, count, size])
    images = []
    for i in range(count):
        planes = [_texture(rng, size, (i + c) % 4) for c in range(channels)]
        if channels == 3:
            # correlate the channels so scenes look like tinted photos
            luma = sum(planes) / 3.0
            planes = [np.clip(0.7 * luma + 0.3 * p, 0.0, 1.0) for p in planes]
        images.append(np.stack(planes))
    return images


@dataclass
class Dataset:
    """Ground-truth patch source with seed-reproducible augmentation."""

    images: list
    patch_size: int
    flips: bool = True
    rotations: bool = True

    def __post_init__(self):
        if not self.images:
            raise ConfigError("dataset needs at least one image")
        if self.patch_size < 1:
            raise ConfigError("patch size must be positive")
        for img in self.images:
            if img.ndim != 3:
                raise ConfigError("dataset images must be CHW arrays")
            if img.shape[1] < self.patch_size or \
                    img.shape[2] < self.patch_size:
                raise ConfigError(
                    f"image {img.shape} smaller than patch "
                    f"{self.patch_size}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ConfigError("dataset images must lie in [0,1]")

    @property
    def channels(self) -> int:
        return self.images[0].shape[0]

    def crop(self, rng: np.random.Generator) -> np.ndarray:
        """Un-augmented random patch (the augmentation orbit's base point)."""
        img = self.images[int(rng.integers(len(self.images)))]
        ps = self.patch_size
        top = int(rng.integers(img.shape[1] - ps + 1))
        left = int(rng.integers(img.shape[2] - ps + 1))
        return img[:, top:top + ps, left:left + ps]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Random patch with flip/rotation augmentation.

        Draw order is fixed (image, corner, orbit element) so a caller with
        the same generator state can reproduce the crop and assert orbit
        membership.
        """
        patch = self.crop(rng)
        k = 0
        if self.rotations:
            k = int(rng.integers(4))
        if self.flips and rng.integers(2):
            k += 4
        return dihedral_apply(patch, k)
