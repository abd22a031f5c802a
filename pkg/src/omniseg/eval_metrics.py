"""oIoU, mIoU and precision@X over a split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from omniseg.mask_core import binarize, intersection_union
from omniseg.tinyseg import ModelParams, forward_batch

PR_THRESHOLDS = (0.5, 0.7, 0.9)
EVAL_BATCH = 64

Pair = tuple[np.ndarray, np.ndarray]


def _counts(pairs: Sequence[Pair]) -> np.ndarray:
    if len(pairs) == 0:
        raise ValueError("no prediction/ground-truth pairs")
    return np.array([intersection_union(pred, gt) for pred, gt in pairs], dtype=np.int64)


def _ious(counts: np.ndarray) -> np.ndarray:
    inter, union = counts[:, 0], counts[:, 1]
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def oiou(pairs: Sequence[Pair]) -> float:
    """Summed intersections over summed unions."""
    counts = _counts(pairs)
    inter, union = counts.sum(axis=0)
    return 1.0 if union == 0 else float(inter / union)


def miou(pairs: Sequence[Pair]) -> float:
    return float(_ious(_counts(pairs)).mean())


def precision_at(pairs: Sequence[Pair], x: float) -> float:
    """Fraction of pairs whose IoU is strictly above ``x``."""
    return float((_ious(_counts(pairs)) > x).mean())


@dataclass
class EvalReport:
    oiou: float
    miou: float
    n_examples: int
    binarize_threshold_used: float
    pr_at: dict[float, float] = field(default_factory=dict)

    CSV_FIELDS = ("split", "n_examples", "threshold", "miou", "oiou", "pr@0.5", "pr@0.7", "pr@0.9")

    def csv_row(self, split: str = "") -> dict[str, str]:
        row = {
            "split": split,
            "n_examples": str(self.n_examples),
            "threshold": repr(self.binarize_threshold_used),
            "miou": f"{self.miou:.6f}",
            "oiou": f"{self.oiou:.6f}",
        }
        for x in PR_THRESHOLDS:
            row[f"pr@{x}"] = f"{self.pr_at[x]:.6f}"
        return row


def report_from_pairs(pairs: Sequence[Pair], threshold: float = 0.5) -> EvalReport:
    counts = _counts(pairs)
    ious = _ious(counts)
    inter, union = counts.sum(axis=0)
    return EvalReport(
        oiou=1.0 if union == 0 else float(inter / union),
        miou=float(ious.mean()),
        n_examples=len(pairs),
        binarize_threshold_used=threshold,
        pr_at={x: float((ious > x).mean()) for x in PR_THRESHOLDS},
    )


def predict(params: ModelParams, records, batch_size: int = EVAL_BATCH) -> list[np.ndarray]:
    """Student probabilities on the un-augmented images."""
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        images = np.stack([r.image_float for r in chunk])
        probs, _ = forward_batch(images, [r.tokens for r in chunk], params)
        out.extend(probs)
    return out


def evaluate(params: ModelParams, records, binarize_threshold: float = 0.5) -> EvalReport:
    if len(records) == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = predict(params, records)
    pairs = [(binarize(p, binarize_threshold), r.mask) for p, r in zip(probs, records)]
    return report_from_pairs(pairs, binarize_threshold)
