"""Weak and strong views with exact geometric bookkeeping.

Only horizontal flips change geometry, so moving masks, points and boxes
between views is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from omniseg.mask_core import PixelBox, PixelPoint

FLIP_PROB = 0.5
GAIN_RANGE = (0.8, 1.2)
NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class GeoTransform:
    flip_h: bool = False


@dataclass(frozen=True)
class PhotoTransform:
    noise_sigma: float = 0.0
    channel_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ValueError(f"noise_sigma must lie in [0, 0.1], got {self.noise_sigma}")
        if not all(0.8 <= g <= 1.2 for g in self.channel_gains):
            raise ValueError(f"channel gains must lie in [0.8, 1.2], got {self.channel_gains}")


def apply_geo(array: np.ndarray, geo: GeoTransform) -> np.ndarray:
    """Apply to an (H, W, ...) array."""
    return array[:, ::-1] if geo.flip_h else array


def weak_augment(image: np.ndarray, rng: np.random.Generator, flip_prob: float = FLIP_PROB):
    geo = GeoTransform(flip_h=bool(rng.random() < flip_prob))
    return apply_geo(image, geo), geo


def apply_photo(image: np.ndarray, photo: PhotoTransform, noise: np.ndarray | None = None) -> np.ndarray:
    out = image * np.asarray(photo.channel_gains)
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def strong_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flip_prob: float = FLIP_PROB,
    gain_range: tuple[float, float] = GAIN_RANGE,
    noise_sigma: float = NOISE_SIGMA,
):
    """Flip, per-channel gain, Gaussian noise, clamp to [0, 1]."""
    geo = GeoTransform(flip_h=bool(rng.random() < flip_prob))
    gains = tuple(float(g) for g in rng.uniform(gain_range[0], gain_range[1], size=3))
    photo = PhotoTransform(noise_sigma=noise_sigma, channel_gains=gains)
    noise = rng.normal(0.0, noise_sigma, size=image.shape) if noise_sigma > 0 else None
    out = apply_photo(apply_geo(image, geo), photo, noise)
    return out, geo, photo


def transfer_mask(m: np.ndarray, src: GeoTransform, dst: GeoTransform) -> np.ndarray:
    """Move a mask from the ``src`` view's frame into the ``dst`` view's frame."""
    return m[:, ::-1] if src.flip_h != dst.flip_h else m


def transform_point(p: PixelPoint, geo: GeoTransform, width: int) -> PixelPoint:
    return PixelPoint(p.row, width - 1 - p.col) if geo.flip_h else p


def transform_box(b: PixelBox, geo: GeoTransform, width: int) -> PixelBox:
    if not geo.flip_h:
        return b
    return PixelBox(b.row0, width - b.col1, b.row1, width - b.col0)


def transform_tokens(tokens: Sequence[int], geo: GeoTransform, swap: dict[int, int]) -> list[int]:
    """Swap left/right words under a horizontal flip so the expression stays true."""
    if not geo.flip_h:
        return list(tokens)
    return [swap.get(t, t) for t in tokens]
