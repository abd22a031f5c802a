"""Mask representations and geometric primitives.

Masks are plain numpy arrays: a probability mask is a float (H, W) array with
values in [0, 1], a bit mask is a bool (H, W) array. Points and boxes are small
frozen dataclasses in pixel coordinates; boxes are half-open.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class PixelPoint:
    row: int
    col: int

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if not (0 <= self.row < h and 0 <= self.col < w):
            raise ValueError(f"point {self} outside {h}x{w} grid")


@dataclass(frozen=True)
class PixelBox:
    """Half-open box ``[row0, row1) x [col0, col1)``."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if self.row0 < 0 or self.col0 < 0 or self.row1 <= self.row0 or self.col1 <= self.col0:
            raise ValueError(f"degenerate or negative box {self}")

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    @property
    def area(self) -> int:
        return self.height * self.width

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if self.row1 > h or self.col1 > w:
            raise ValueError(f"box {self} outside {h}x{w} grid")

    def indicator(self, shape: tuple[int, int]) -> np.ndarray:
        self.check_bounds(shape)
        out = np.zeros(shape, dtype=bool)
        out[self.row0 : self.row1, self.col0 : self.col1] = True
        return out


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    labels: np.ndarray  # int (H, W), 0 = background
    component_count: int
    component_sizes: tuple[int, ...]  # index 0 is the background slot, always 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def as_probmask(values) -> np.ndarray:
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValueError(f"probability mask must be a non-empty 2-D grid, got shape {p.shape}")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ValueError("probability mask values must lie in [0, 1]")
    return p


def as_bitmask(bits) -> np.ndarray:
    m = np.asarray(bits)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"bit mask must be a non-empty 2-D grid, got shape {m.shape}")
    return m.astype(bool, copy=False)


def binarize(p: np.ndarray, threshold: float) -> np.ndarray:
    """Set a bit wherever the probability reaches ``threshold`` (inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(p) >= threshold


def connected_components(m: np.ndarray, connectivity: int = 8) -> ComponentLabeling:
    """Label the foreground components of ``m``.

    Ids are assigned in first-encounter raster order.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    m = as_bitmask(m)
    labels, n = ndimage.label(m, structure=_STRUCTURES[connectivity])
    if n:
        # force raster-order ids regardless of backend ordering
        flat = labels.ravel()
        fg = flat[flat > 0]
        _, first = np.unique(fg, return_index=True)
        order = fg[np.sort(first)]
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order] = np.arange(1, n + 1, dtype=labels.dtype)
        labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    return ComponentLabeling(labels=labels, component_count=int(n), component_sizes=tuple(int(s) for s in sizes))


def extract_component(labeling: ComponentLabeling, component_id: int) -> np.ndarray:
    if not 1 <= component_id <= labeling.component_count:
        raise ValueError(f"component id {component_id} not in 1..{labeling.component_count}")
    return labeling.labels == component_id


def contains_point(m: np.ndarray, p: PixelPoint) -> bool:
    m = as_bitmask(m)
    p.check_bounds(m.shape)
    return bool(m[p.row, p.col])


def box_pixel_count(m: np.ndarray, b: PixelBox) -> int:
    m = as_bitmask(m)
    b.check_bounds(m.shape)
    return int(np.count_nonzero(m[b.row0 : b.row1, b.col0 : b.col1]))


def box_coverage_ratio(m: np.ndarray, b: PixelBox) -> float:
    """Fraction of the box's pixels that are set in ``m``."""
    return box_pixel_count(m, b) / b.area


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks score 1.0."""
    inter, union = intersection_union(a, b)
    return 1.0 if union == 0 else inter / union


def intersection_union(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    a = as_bitmask(a)
    b = as_bitmask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def rle_encode(m: np.ndarray) -> str:
    """Comma-separated alternating run lengths, background first."""
    flat = as_bitmask(m).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return ",".join(str(r) for r in runs)


def rle_decode(s: str, height: int, width: int) -> np.ndarray:
    try:
        runs = [int(tok) for tok in s.split(",")]
    except ValueError as exc:
        raise ValueError(f"malformed run-length string {s!r}") from exc
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != height * width:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)
