"""Teacher-student omni-supervised training loop.

Each step draws a fully-labeled batch (supervised BCE on the student's strong
view) and, after burn-in, an omni-labeled batch whose targets are the
teacher's refined pseudo-masks. The student takes one Adam step on
``L_sup + lambda * L_omni`` and the teacher follows by EMA.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from omniseg import augment
from omniseg.aplr import (
    BoxLabel,
    NoneLabel,
    OmniLabel,
    PointLabel,
    Refined,
    RefinerConfig,
    label_kind_for,
    refine,
)
from omniseg.eval_metrics import evaluate
from omniseg.synthgen import VOCAB, DatasetRecord
from omniseg.tinyseg import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    batch_loss,
    ema_update,
    forward_batch,
    init_params,
    params_from_dict,
    params_to_dict,
    zeros_like,
)

log = logging.getLogger(__name__)

MODES = ("fully", "omni_none", "omni_point", "omni_box")
STATE_VERSION = 1
METRICS_COLUMNS = ("step", "l_sup", "l_omni", "skip_rate", "val_miou", "val_oiou", "wall_ms")


class ConfigError(ValueError):
    pass


class StateError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    omni_batch_size: int | None = None  # defaults to batch_size
    max_steps: int = 3000
    lam: float = 1.0
    alpha: float = 0.9996
    binarize_threshold_start: float = 0.7
    binarize_threshold_end: float = 0.2
    tau_start: float = 0.5
    tau_end: float = 0.2
    refine_strategy: str = "aplr"
    supervision_mode: str = "fully"
    burn_in_steps: int | None = None  # defaults to 10% of max_steps
    seed: int = 0
    eval_every: int = 500
    distance_delta: float = 0.05
    conf_threshold: float = 0.5
    connectivity: int = 8
    noise_sigma: float = augment.NOISE_SIGMA
    gain_low: float = augment.GAIN_RANGE[0]
    gain_high: float = augment.GAIN_RANGE[1]
    flip_prob: float = augment.FLIP_PROB
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or (self.omni_batch_size is not None and self.omni_batch_size < 1):
            raise ConfigError("batch sizes must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        for name in ("binarize_threshold_start", "binarize_threshold_end", "tau_start", "tau_end", "conf_threshold"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.binarize_threshold_start < self.binarize_threshold_end or self.tau_start < self.tau_end:
            raise ConfigError("threshold schedules must not increase")
        if not 0 <= self.burn_in < self.max_steps:
            raise ConfigError("burn_in_steps must be in [0, max_steps)")
        if self.supervision_mode not in MODES:
            raise ConfigError(f"unknown supervision mode {self.supervision_mode!r}")
        if self.supervision_mode != "fully":
            try:
                kinds = label_kind_for(self.refine_strategy)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if _LABEL_TYPE[self.supervision_mode] not in kinds:
                raise ConfigError(
                    f"strategy {self.refine_strategy!r} cannot refine {self.supervision_mode} labels"
                )
        if not 0.0 <= self.noise_sigma <= 0.1 or not 0.8 <= self.gain_low <= self.gain_high <= 1.2:
            raise ConfigError("augmentation strength outside the supported range")

    @property
    def burn_in(self) -> int:
        return self.max_steps // 10 if self.burn_in_steps is None else self.burn_in_steps

    @property
    def omni_batch(self) -> int:
        return self.batch_size if self.omni_batch_size is None else self.omni_batch_size


_LABEL_TYPE = {"omni_none": NoneLabel, "omni_point": PointLabel, "omni_box": BoxLabel}


def omni_label(record: DatasetRecord, mode: str) -> OmniLabel:
    if mode == "omni_none":
        return NoneLabel()
    if mode == "omni_point":
        return PointLabel(record.point)
    if mode == "omni_box":
        return BoxLabel(record.box)
    raise ConfigError(f"mode {mode!r} carries no omni-label")


def threshold_schedule(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """(binarize threshold, tau) at ``step``: flat through burn-in, then linear to the end values."""
    if not 0 <= step <= cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps}]")
    span = cfg.max_steps - cfg.burn_in
    frac = min(max((step - cfg.burn_in) / span, 0.0), 1.0)
    thr = cfg.binarize_threshold_start + frac * (cfg.binarize_threshold_end - cfg.binarize_threshold_start)
    tau = cfg.tau_start + frac * (cfg.tau_end - cfg.tau_start)
    return thr, tau


@dataclass
class StepRecord:
    step: int
    l_sup: float
    l_omni: float
    l_total: float
    skip_rate: float
    val_miou: float | None = None
    val_oiou: float | None = None
    wall_ms: float = 0.0


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    adam: AdamState
    step: int
    rng: np.random.Generator
    log: list[StepRecord] = field(default_factory=list)


def init_state(cfg: TrainConfig, vocab_size: int = len(VOCAB)) -> TrainState:
    student = init_params(cfg.seed, vocab_size)
    return TrainState(
        student=student,
        teacher=student.copy(),
        adam=AdamState.zeros(student),
        step=0,
        rng=np.random.default_rng([cfg.seed, 1]),
    )


def _strong_views(records: Sequence[DatasetRecord], rng: np.random.Generator, cfg: TrainConfig):
    views = []
    for r in records:
        img, geo, _ = augment.strong_augment(
            r.image_float, rng, cfg.flip_prob, (cfg.gain_low, cfg.gain_high), cfg.noise_sigma
        )
        views.append((img, geo))
    return views


def _tokens_in(record: DatasetRecord, geo: augment.GeoTransform) -> list[int]:
    return augment.transform_tokens(record.tokens, geo, VOCAB.flip_swap())


def supervised_step(
    records: Sequence[DatasetRecord], student: ModelParams, rng: np.random.Generator, cfg: TrainConfig
) -> tuple[float, ModelParams]:
    """Mean BCE of the student's strong views against the ground-truth masks."""
    if any(r.mask is None for r in records):
        raise ValueError("supervised batch contains a record without a full mask")
    views = _strong_views(records, rng, cfg)
    images = np.stack([img for img, _ in views])
    tokens = [_tokens_in(r, geo) for r, (_, geo) in zip(records, views)]
    targets = np.stack([augment.apply_geo(r.mask, geo) for r, (_, geo) in zip(records, views)])
    probs, cache = forward_batch(images, tokens, student)
    return batch_loss(probs, targets), backward(cache, targets, student)


TeacherFn = Callable[[np.ndarray, list, Sequence[DatasetRecord], list], np.ndarray]


def _teacher_probs(teacher: ModelParams) -> TeacherFn:
    def run(images, tokens, records, geos):
        return forward_batch(images, tokens, teacher)[0]

    return run


@dataclass
class OmniStepResult:
    loss: float
    grads: ModelParams
    skip_count: int
    pseudo_masks: list = field(default_factory=list)  # student-frame masks, None where skipped


def omni_step(
    records: Sequence[DatasetRecord],
    student: ModelParams,
    teacher: ModelParams,
    rng: np.random.Generator,
    cfg: TrainConfig,
    step: int,
    teacher_fn: TeacherFn | None = None,
) -> OmniStepResult:
    """Pseudo-label loss on omni-labeled records.

    The teacher sees the weak view; its refined pseudo-mask is moved into the
    student's strong-view frame. Skipped records contribute nothing; the loss
    is the mean over the rest (0 if all are skipped). Student views are drawn
    from ``rng`` first, in the same way as :func:`supervised_step`.
    """
    if cfg.supervision_mode == "fully":
        raise ConfigError("omni_step needs an omni supervision mode")
    strong = _strong_views(records, rng, cfg)
    weak = [augment.weak_augment(r.image_float, rng, cfg.flip_prob) for r in records]
    teacher_fn = teacher_fn or _teacher_probs(teacher)
    weak_geos = [geo for _, geo in weak]
    t_probs = teacher_fn(
        np.stack([img for img, _ in weak]),
        [_tokens_in(r, geo) for r, geo in zip(records, weak_geos)],
        records,
        weak_geos,
    )

    thr, tau = threshold_schedule(step, cfg)
    rcfg = RefinerConfig(
        tau=tau,
        binarize_threshold=thr,
        strategy=cfg.refine_strategy,
        distance_delta=cfg.distance_delta,
        conf_threshold=cfg.conf_threshold,
        connectivity=cfg.connectivity,
    )
    width = records[0].mask.shape[1] if records else 0
    pseudo: list = []
    for rec, prob, wgeo, (_, sgeo) in zip(records, t_probs, weak_geos, strong):
        label = omni_label(rec, cfg.supervision_mode)
        if isinstance(label, PointLabel):
            label = PointLabel(augment.transform_point(label.point, wgeo, width))
        elif isinstance(label, BoxLabel):
            label = BoxLabel(augment.transform_box(label.box, wgeo, width))
        outcome = refine(prob, label, rcfg)
        pseudo.append(augment.transfer_mask(outcome.mask, wgeo, sgeo) if isinstance(outcome, Refined) else None)

    keep = [i for i, m in enumerate(pseudo) if m is not None]
    skipped = len(records) - len(keep)
    if not keep:
        return OmniStepResult(0.0, zeros_like(student), skipped, pseudo)
    images = np.stack([strong[i][0] for i in keep])
    tokens = [_tokens_in(records[i], strong[i][1]) for i in keep]
    targets = np.stack([pseudo[i] for i in keep])
    probs, cache = forward_batch(images, tokens, student)
    return OmniStepResult(batch_loss(probs, targets), backward(cache, targets, student), skipped, pseudo)


def combined_loss(l_sup: float, l_omni: float, lam: float) -> float:
    return l_sup + lam * l_omni


def _add_scaled(a: ModelParams, b: ModelParams, scale: float) -> ModelParams:
    return ModelParams(**{k: v + scale * getattr(b, k) for k, v in a.tensors().items()})


def _check_data(data: dict, cfg: TrainConfig) -> None:
    if not data.get("fully"):
        raise ConfigError("the fully-labeled split is empty")
    if cfg.supervision_mode != "fully" and not data.get("omni"):
        raise ConfigError(f"mode {cfg.supervision_mode} needs a non-empty omni split")


def train_step(state: TrainState, data: dict, cfg: TrainConfig) -> StepRecord:
    """Advance ``state`` by one optimisation step in place."""
    k = state.step
    t0 = time.perf_counter()
    rng = state.rng
    fully = data["fully"]
    batch = [fully[i] for i in rng.integers(len(fully), size=cfg.batch_size)]
    l_sup, grads = supervised_step(batch, state.student, rng, cfg)

    l_omni, skip_rate = 0.0, 0.0
    if cfg.supervision_mode != "fully" and k >= cfg.burn_in:
        omni = data["omni"]
        obatch = [omni[i] for i in rng.integers(len(omni), size=cfg.omni_batch)]
        res = omni_step(obatch, state.student, state.teacher, rng, cfg, k)
        l_omni, skip_rate = res.loss, res.skip_count / len(obatch)
        grads = _add_scaled(grads, res.grads, cfg.lam)

    state.student, state.adam = adam_step(state.student, grads, state.adam, lr=cfg.lr)
    if k < cfg.burn_in:
        state.teacher = state.student.copy()
    else:
        state.teacher = ema_update(state.teacher, state.student, cfg.alpha)
    state.step = k + 1

    rec = StepRecord(
        step=state.step,
        l_sup=l_sup,
        l_omni=l_omni,
        l_total=combined_loss(l_sup, l_omni, cfg.lam),
        skip_rate=skip_rate,
    )
    if data.get("val") and (state.step % cfg.eval_every == 0 or state.step == cfg.max_steps):
        report = evaluate(state.student, data["val"])
        rec.val_miou, rec.val_oiou = report.miou, report.oiou
        log.info("step %d  l_sup %.4f  l_omni %.4f  val mIoU %.4f", state.step, l_sup, l_omni, report.miou)
    if cfg.record_wall_time:
        rec.wall_ms = (time.perf_counter() - t0) * 1000.0
    state.log.append(rec)
    return rec


def train_loop(
    data: dict,
    cfg: TrainConfig,
    state: TrainState | None = None,
    stop_at: int | None = None,
) -> tuple[ModelParams, list[StepRecord]]:
    """Run steps until ``max_steps`` (or ``stop_at``); returns the student and the log.

    ``data`` maps ``"fully"``, ``"omni"`` and optionally ``"val"`` to record
    lists. A passed-in ``state`` is advanced in place, which is how resumed
    runs continue.
    """
    _check_data(data, cfg)
    if state is None:
        state = init_state(cfg)
    end = cfg.max_steps if stop_at is None else min(stop_at, cfg.max_steps)
    while state.step < end:
        train_step(state, data, cfg)
    return state.student, state.log


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(records: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for r in records:
        writer.writerow(
            [r.step, _fmt(r.l_sup), _fmt(r.l_omni), _fmt(r.skip_rate), _fmt(r.val_miou), _fmt(r.val_oiou), _fmt(r.wall_ms)]
        )
    return buf.getvalue()


def write_metrics_csv(records: Sequence[StepRecord], path: str | os.PathLike) -> None:
    Path(path).write_text(metrics_csv(records))


def read_metrics_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise ValueError(f"{path}: not a metrics log")
        return list(reader)


def _adam_to_dict(a: AdamState) -> dict:
    return {"m": params_to_dict(a.m), "v": params_to_dict(a.v), "step": a.step}


def save_state(state: TrainState, cfg: TrainConfig, path: str | os.PathLike) -> None:
    doc = {
        "format_version": STATE_VERSION,
        "config": asdict(cfg),
        "step": state.step,
        "student": params_to_dict(state.student),
        "teacher": params_to_dict(state.teacher),
        "adam": _adam_to_dict(state.adam),
        "rng": state.rng.bit_generator.state,
        "log": [asdict(r) for r in state.log],
    }
    Path(path).write_text(json.dumps(doc))


def load_state(
    path: str | os.PathLike, vocab_size: int | None = None
) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"no training state at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StateError(f"{path}: corrupt state file ({exc})") from exc
    if doc.get("format_version") != STATE_VERSION:
        raise StateError(f"{path}: unsupported state version {doc.get('format_version')!r}")
    try:
        known = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in doc["config"].items() if k in known})
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
        state = TrainState(
            student=params_from_dict(doc["student"], vocab_size),
            teacher=params_from_dict(doc["teacher"], vocab_size),
            adam=AdamState(
                params_from_dict(doc["adam"]["m"], vocab_size),
                params_from_dict(doc["adam"]["v"], vocab_size),
                int(doc["adam"]["step"]),
            ),
            step=int(doc["step"]),
            rng=rng,
            log=[StepRecord(**r) for r in doc["log"]],
        )
    except (KeyError, TypeError) as exc:
        raise StateError(f"{path}: malformed state ({exc})") from exc
    return state, cfg


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
