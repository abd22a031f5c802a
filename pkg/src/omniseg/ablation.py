"""Ablation matrix: train and evaluate every (mode, strategy, fraction, seed) cell."""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from omniseg.eval_metrics import evaluate
from omniseg.synthgen import SplitConfig, build_records, split_records
from omniseg.trainer import MODES, ConfigError, TrainConfig, train_loop

log = logging.getLogger(__name__)

FRACTIONS = (0.01, 0.05, 0.10)
ORDER = ("fully", "omni_none", "omni_point", "omni_box")
TABLE_FIELDS = ("kind", "mode", "strategy", "fraction", "seed", "n", "miou", "miou_std", "oiou", "oiou_std", "error")


def desk_config(**overrides) -> TrainConfig:
    """Training settings sized for a single CPU and 3000 steps.

    The library defaults keep the large-scale values (lr 1e-4, batch 64,
    alpha 0.9996), which barely move a tiny model in 3000 steps.
    """
    base = dict(lr=1e-3, batch_size=8, alpha=0.99, burn_in_steps=1000, max_steps=3000, eval_every=1000)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class AblationSpec:
    modes: tuple[str, ...] = ORDER
    fractions: tuple[float, ...] = (0.05,)
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = ("aplr",)
    base: TrainConfig = field(default_factory=desk_config)
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    data_seed: int = 0

    def __post_init__(self):
        if not self.modes or not self.fractions or not self.seeds or not self.strategies:
            raise ConfigError("modes, fractions, seeds and strategies must all be non-empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"fraction {f} outside (0, 1]")

    def cells(self) -> list["Cell"]:
        out = []
        for frac in self.fractions:
            for mode in self.modes:
                strategies = ("aplr",) if mode == "fully" else self.strategies
                for strategy in strategies:
                    for seed in self.seeds:
                        out.append(Cell(mode, strategy, frac, seed))
        return out

    def split_config(self, fraction: float) -> SplitConfig:
        return SplitConfig(self.n_train, self.n_val, self.n_test, fraction, self.data_seed)


@dataclass(frozen=True)
class Cell:
    mode: str
    strategy: str
    fraction: float
    seed: int

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, supervision_mode=self.mode, refine_strategy=self.strategy, seed=self.seed)

    def __str__(self) -> str:
        return f"{self.mode}/{self.strategy}/frac={self.fraction}/seed={self.seed}"


@dataclass
class CellResult:
    cell: Cell
    miou: float = math.nan
    oiou: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@functools.lru_cache(maxsize=4)
def _dataset(split_cfg: SplitConfig) -> dict:
    return split_records(build_records(split_cfg))


def run_cell(cell: Cell, spec: AblationSpec) -> CellResult:
    try:
        data = _dataset(spec.split_config(cell.fraction))
        cfg = cell.train_config(spec.base)
        params, _ = train_loop(data, cfg)
        report = evaluate(params, data["test"])
    except Exception as exc:  # reported per cell, the table is still written
        log.error("cell %s failed: %s", cell, exc)
        return CellResult(cell, error=f"{type(exc).__name__}: {exc}")
    log.info("cell %s  test mIoU %.4f", cell, report.miou)
    return CellResult(cell, report.miou, report.oiou)


def run_ablation(
    spec: AblationSpec,
    parallel: int = 1,
    on_result: Callable[[CellResult], None] | None = None,
) -> list[CellResult]:
    """Run all cells; results come back in ``spec.cells()`` order."""
    cells = spec.cells()
    if parallel <= 1:
        results = []
        for cell in cells:
            results.append(run_cell(cell, spec))
            if on_result:
                on_result(results[-1])
        return results
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        results = list(pool.map(run_cell, cells, [spec] * len(cells)))
    if on_result:
        for r in results:
            on_result(r)
    return results


@dataclass(frozen=True)
class Aggregate:
    mode: str
    strategy: str
    fraction: float
    n: int
    miou: float
    miou_std: float
    oiou: float
    oiou_std: float


def _std(xs: Sequence[float]) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def aggregate(results: Iterable[CellResult]) -> list[Aggregate]:
    """Mean and sample std over seeds for each (mode, strategy, fraction)."""
    groups: dict[tuple, list[CellResult]] = {}
    for r in results:
        if r.ok:
            groups.setdefault((r.cell.mode, r.cell.strategy, r.cell.fraction), []).append(r)
    out = []
    for (mode, strategy, frac), rs in groups.items():
        m = [r.miou for r in rs]
        o = [r.oiou for r in rs]
        out.append(Aggregate(mode, strategy, frac, len(rs), float(np.mean(m)), _std(m), float(np.mean(o)), _std(o)))
    return out


@dataclass(frozen=True)
class OrderingFlag:
    fraction: float
    lower: str
    upper: str
    gap: float
    min_gap: float

    @property
    def holds(self) -> bool:
        return self.gap >= self.min_gap

    def __str__(self) -> str:
        status = "ok" if self.holds else "VIOLATED"
        return f"frac={self.fraction}: {self.lower} < {self.upper}  gap {self.gap:+.2f} pts (need {self.min_gap:.2f})  {status}"


def ordering_flags(aggs: Sequence[Aggregate], min_gap: float = 1.0, strategy: str = "aplr") -> list[OrderingFlag]:
    """Adjacent-pair checks of the expected mode ordering, gaps in mIoU points."""
    flags = []
    for frac in sorted({a.fraction for a in aggs}):
        by_mode = {a.mode: a for a in aggs if a.fraction == frac and a.strategy == strategy}
        present = [m for m in ORDER if m in by_mode]
        for lo, hi in zip(present, present[1:]):
            gap = 100.0 * (by_mode[hi].miou - by_mode[lo].miou)
            flags.append(OrderingFlag(frac, lo, hi, gap, min_gap))
    return flags


def table_rows(results: Sequence[CellResult]) -> list[dict[str, str]]:
    rows = []
    for r in results:
        c = r.cell
        rows.append(
            dict(kind="cell", mode=c.mode, strategy=c.strategy, fraction=repr(c.fraction), seed=str(c.seed), n="1",
                 miou="" if not r.ok else repr(r.miou), miou_std="", oiou="" if not r.ok else repr(r.oiou),
                 oiou_std="", error=r.error)
        )
    for a in aggregate(results):
        rows.append(
            dict(kind="mean", mode=a.mode, strategy=a.strategy, fraction=repr(a.fraction), seed="", n=str(a.n),
                 miou=repr(a.miou), miou_std=repr(a.miou_std), oiou=repr(a.oiou), oiou_std=repr(a.oiou_std), error="")
        )
    return rows


def table_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(table_rows(results))
    return buf.getvalue()


def write_table(results: Sequence[CellResult], path: str | os.PathLike) -> None:
    Path(path).write_text(table_csv(results))


def read_table(path: str | os.PathLike) -> list[dict[str, str]]:
    """Parse an ablation CSV; raises ValueError on empty or malformed input."""
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ValueError(f"{path}: empty ablation table")
    missing = {"kind", "mode", "fraction", "miou"} - set(reader.fieldnames)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: ablation table has no rows")
    for i, row in enumerate(rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise ValueError(f"{path}:{i}: wrong number of fields")
        try:
            float(row["fraction"])
            if row["miou"]:
                float(row["miou"])
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from exc
    return rows


def summary_lines(results: Sequence[CellResult], min_gap: float = 1.0) -> list[str]:
    lines = []
    for a in aggregate(results):
        lines.append(
            f"{a.mode:10s} {a.strategy:14s} frac={a.fraction:<5} mIoU {100 * a.miou:6.2f} ± {100 * a.miou_std:5.2f}  "
            f"oIoU {100 * a.oiou:6.2f} ± {100 * a.oiou_std:5.2f}  (n={a.n})"
        )
    lines.extend(str(f) for f in ordering_flags(aggregate(results), min_gap))
    for r in results:
        if not r.ok:
            lines.append(f"FAILED {r.cell}: {r.error}")
    return lines
