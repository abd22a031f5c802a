"""Active pseudo-label refinement.

A teacher's probability mask is binarized, split into connected regions and
checked against the weak label attached to the example. Regions the label
supports are kept, the rest are zeroed; if nothing is supported the example is
skipped. Four alternative filters are provided for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from omniseg.mask_core import (
    PixelBox,
    PixelPoint,
    binarize,
    box_coverage_ratio,
    connected_components,
    contains_point,
)


@dataclass(frozen=True)
class NoneLabel:
    pass


@dataclass(frozen=True)
class PointLabel:
    point: PixelPoint


@dataclass(frozen=True)
class BoxLabel:
    box: PixelBox


OmniLabel = Union[NoneLabel, PointLabel, BoxLabel]


class SkipReason(str, Enum):
    NO_COMPONENT_HITS_POINT = "no_component_hits_point"
    COVERAGE_BELOW_TAU = "coverage_below_tau"
    EMPTY_MASK = "empty_mask"
    DISTANCE_EXCEEDED = "distance_exceeded"
    CONFIDENCE_BELOW_THRESHOLD = "confidence_below_threshold"


@dataclass(frozen=True, eq=False)
class Refined:
    mask: np.ndarray


@dataclass(frozen=True)
class Skip:
    reason: SkipReason


RefinementOutcome = Union[Refined, Skip]

STRATEGIES = ("aplr", "no_filtering", "point_distance", "box_suppress", "avg_confidence")
POINT_STRATEGIES = ("aplr", "no_filtering", "point_distance")
BOX_STRATEGIES = ("aplr", "box_suppress", "avg_confidence")


@dataclass(frozen=True)
class RefinerConfig:
    tau: float = 0.5
    binarize_threshold: float = 0.7
    strategy: str = "aplr"
    distance_delta: float = 0.05
    conf_threshold: float = 0.5
    connectivity: int = 8

    def __post_init__(self):
        for name in ("tau", "binarize_threshold", "conf_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.distance_delta < 0:
            raise ValueError("distance_delta must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


def select_point(m: np.ndarray, p: PixelPoint) -> bool:
    return contains_point(m, p)


def select_box(m: np.ndarray, b: PixelBox, tau: float) -> bool:
    return box_coverage_ratio(m, b) > tau


def _check_label(label: OmniLabel, shape: tuple[int, int]) -> None:
    if isinstance(label, PointLabel):
        label.point.check_bounds(shape)
    elif isinstance(label, BoxLabel):
        label.box.check_bounds(shape)
    elif not isinstance(label, NoneLabel):
        raise TypeError(f"not an omni-label: {label!r}")


def _keep_point_component(m: np.ndarray, p: PixelPoint, connectivity: int) -> np.ndarray | None:
    if not m[p.row, p.col]:
        return None
    labeling = connected_components(m, connectivity)
    return labeling.labels == labeling.labels[p.row, p.col]


def _require(label: OmniLabel, kind: type, strategy: str) -> None:
    if not isinstance(label, kind):
        raise ValueError(f"strategy {strategy!r} needs a {kind.__name__}, got {type(label).__name__}")


def refine(p: np.ndarray, label: OmniLabel, cfg: RefinerConfig) -> RefinementOutcome:
    """Select and prune the teacher's pseudo-mask using the weak label.

    ``cfg.strategy`` picks the filter; ``"aplr"`` is the component-selection
    scheme, the others are the ablation baselines.
    """
    p = np.asarray(p)
    _check_label(label, p.shape)
    if cfg.strategy != "aplr":
        return _BASELINES[cfg.strategy](p, label, cfg)

    m = binarize(p, cfg.binarize_threshold)
    if isinstance(label, NoneLabel):
        return Refined(m)
    if isinstance(label, PointLabel):
        kept = _keep_point_component(m, label.point, cfg.connectivity)
        return Skip(SkipReason.NO_COMPONENT_HITS_POINT) if kept is None else Refined(kept)

    box = label.box
    if not m.any():
        return Skip(SkipReason.EMPTY_MASK)
    if not select_box(m, box, cfg.tau):
        return Skip(SkipReason.COVERAGE_BELOW_TAU)
    labeling = connected_components(m, cfg.connectivity)
    touching = np.unique(labeling.labels[box.row0 : box.row1, box.col0 : box.col1])
    touching = touching[touching > 0]
    return Refined(np.isin(labeling.labels, touching))


def refine_no_filtering(p: np.ndarray, label: PointLabel, cfg: RefinerConfig) -> RefinementOutcome:
    _require(label, PointLabel, "no_filtering")
    m = binarize(p, cfg.binarize_threshold)
    kept = _keep_point_component(m, label.point, cfg.connectivity)
    return Refined(m if kept is None else kept)


def nearest_set_distance(m: np.ndarray, point: PixelPoint) -> float:
    """Euclidean pixel distance from ``point`` to the closest set pixel (inf if none)."""
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        return float("inf")
    return float(np.sqrt(np.min((rows - point.row) ** 2 + (cols - point.col) ** 2)))


def refine_point_distance(p: np.ndarray, label: PointLabel, cfg: RefinerConfig) -> RefinementOutcome:
    _require(label, PointLabel, "point_distance")
    m = binarize(p, cfg.binarize_threshold)
    h, w = m.shape
    dist = nearest_set_distance(m, label.point) / np.hypot(h, w)
    if dist <= cfg.distance_delta:
        return Refined(m)
    return Skip(SkipReason.DISTANCE_EXCEEDED)


def refine_box_suppress(p: np.ndarray, label: BoxLabel, cfg: RefinerConfig) -> RefinementOutcome:
    _require(label, BoxLabel, "box_suppress")
    m = binarize(p, cfg.binarize_threshold)
    return Refined(m & label.box.indicator(m.shape))


def refine_avg_confidence(p: np.ndarray, label: BoxLabel, cfg: RefinerConfig) -> RefinementOutcome:
    _require(label, BoxLabel, "avg_confidence")
    p = np.asarray(p)
    m = binarize(p, cfg.binarize_threshold)
    inside = m & label.box.indicator(m.shape)
    if not inside.any():
        return Skip(SkipReason.CONFIDENCE_BELOW_THRESHOLD)
    if p[inside].mean() >= cfg.conf_threshold:
        return Refined(m)
    return Skip(SkipReason.CONFIDENCE_BELOW_THRESHOLD)


_BASELINES = {
    "no_filtering": refine_no_filtering,
    "point_distance": refine_point_distance,
    "box_suppress": refine_box_suppress,
    "avg_confidence": refine_avg_confidence,
}


def label_kind_for(strategy: str) -> tuple[type, ...]:
    """Omni-label types a strategy accepts."""
    if strategy == "aplr":
        return (NoneLabel, PointLabel, BoxLabel)
    if strategy in ("no_filtering", "point_distance"):
        return (PointLabel,)
    if strategy in ("box_suppress", "avg_confidence"):
        return (BoxLabel,)
    raise ValueError(f"unknown strategy {strategy!r}")
