"""Tiny text-conditioned per-pixel segmenter with hand-derived gradients.

Per pixel the network sees ``f = [r, g, b, row/(H-1), col/(W-1)]`` and the
mean-pooled expression embedding ``e``::

    hidden = relu(W1 f + U1 e + b1)
    prob   = sigmoid(w2 . hidden + b2)

Everything is batched numpy. Adam and the EMA teacher update live here too.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

EMBED_DIM = 16
HIDDEN = 32
N_FEATURES = 5
BCE_EPS = 1e-7
CHECKPOINT_VERSION = 1

TENSOR_NAMES = ("token_embeddings", "W1", "U1", "b1", "w2", "b2")


class NumericError(ArithmeticError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError, ValueError):
    pass


@dataclass
class ModelParams:
    token_embeddings: np.ndarray  # (V, d_t)
    W1: np.ndarray  # (h, 5)
    U1: np.ndarray  # (h, d_t)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: np.ndarray  # () scalar array

    def __post_init__(self):
        # arithmetic on 0-d arrays yields numpy scalars; keep every field an ndarray
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))

    @property
    def vocab_size(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{k: fn(v) for k, v in self.tensors().items()})

    def check(self) -> None:
        v, d = self.token_embeddings.shape
        h = self.W1.shape[0]
        expected = {
            "token_embeddings": (v, d),
            "W1": (h, N_FEATURES),
            "U1": (h, d),
            "b1": (h,),
            "w2": (h,),
            "b2": (),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionMismatchError(f"{name} has shape {got}, expected {shape}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values()))


# Gradients share the parameter layout.
ParamGrads = ModelParams


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def init_params(seed: int, vocab_size: int, embed_dim: int = EMBED_DIM, hidden: int = HIDDEN) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(shape: tuple[int, int]) -> np.ndarray:
        s = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-s, s, size=shape)

    return ModelParams(
        token_embeddings=glorot((vocab_size, embed_dim)),
        W1=glorot((hidden, N_FEATURES)),
        U1=glorot((hidden, embed_dim)),
        b1=np.zeros(hidden),
        # output layer treated as (1, h)
        w2=glorot((1, hidden))[0],
        b2=np.zeros(()),
    )


def embed_text(tokens: Sequence[int], params: ModelParams) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be non-empty")
    if tokens.min() < 0 or tokens.max() >= params.vocab_size:
        raise ValueError(f"token id out of range for vocabulary of {params.vocab_size}")
    return params.token_embeddings[tokens].mean(axis=0)


def pixel_features(images: np.ndarray) -> np.ndarray:
    """(B, H, W, 3) images -> (B, H*W, 5) features with normalised coordinates."""
    b, h, w, _ = images.shape
    rows = np.arange(h) / max(h - 1, 1)
    cols = np.arange(w) / max(w - 1, 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([rr, cc], axis=-1).reshape(1, h * w, 2)
    feats = np.empty((b, h * w, N_FEATURES))
    feats[..., :3] = images.reshape(b, h * w, 3)
    feats[..., 3:] = coords
    return feats


@dataclass
class ForwardCache:
    shape: tuple[int, int, int]  # (B, H, W)
    features: np.ndarray  # (B*P, 5)
    tokens: list[np.ndarray]
    text: np.ndarray  # (B, d_t)
    pre: np.ndarray  # (B, P, h)
    hidden: np.ndarray  # (B, P, h)
    probs: np.ndarray  # (B, H, W)


_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the open interval (0, 1) even where float64 rounds to an endpoint
    return np.clip(out, _TINY, _ONE_MINUS)


def forward_batch(
    images: np.ndarray, token_seqs: Sequence[Sequence[int]], params: ModelParams
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch of (B, H, W, 3) images in [0, 1]."""
    if not params.is_finite():
        raise NumericError("non-finite parameters")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"images must be (B, H, W, 3), got {images.shape}")
    b, h, w, _ = images.shape
    if len(token_seqs) != b:
        raise ValueError("one token sequence per image required")
    toks = [np.asarray(t, dtype=np.int64) for t in token_seqs]
    text = np.stack([embed_text(t, params) for t in toks])
    feats = pixel_features(images).reshape(b * h * w, N_FEATURES)
    bias = text @ params.U1.T + params.b1  # (B, h)
    pre = (feats @ params.W1.T).reshape(b, h * w, -1)
    pre += bias[:, None, :]
    hid = np.maximum(pre, 0.0)
    logits = hid.reshape(b * h * w, -1) @ params.w2 + params.b2
    probs = _sigmoid(logits).reshape(b, h, w)
    cache = ForwardCache((b, h, w), feats, toks, text, pre, hid, probs)
    return probs, cache


def forward(image: np.ndarray, tokens: Sequence[int], params: ModelParams) -> tuple[np.ndarray, ForwardCache]:
    probs, cache = forward_batch(np.asarray(image)[None], [tokens], params)
    return probs[0], cache


def bce_loss(prob: np.ndarray, target: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Mean per-pixel binary cross-entropy on clamped probabilities."""
    prob = np.asarray(prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch {prob.shape} vs {target.shape}")
    pc = np.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -(target * np.log(pc) + (1.0 - target) * np.log1p(-pc))
    if weight is not None:
        per_pixel = per_pixel * np.broadcast_to(weight, per_pixel.shape)
    return float(per_pixel.mean())


def backward(
    cache: ForwardCache,
    targets: np.ndarray,
    params: ModelParams,
    example_weights: np.ndarray | None = None,
) -> ParamGrads:
    """Gradient of the batch loss w.r.t. every parameter tensor.

    The batch loss is ``sum_b example_weights[b] * bce_loss(probs[b], targets[b])``;
    the default weights ``1/B`` give the batch mean.
    """
    b, h, w = cache.shape
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size != b * h * w:
        raise ValueError("targets do not match the cached forward pass")
    if cache.pre.shape[-1] != params.hidden or cache.text.shape[-1] != params.embed_dim:
        raise ValueError("stale cache: parameter dimensions changed since forward")
    if example_weights is None:
        example_weights = np.full(b, 1.0 / b)
    n_pix = h * w

    p = cache.probs.reshape(b, n_pix)
    y = targets.reshape(b, n_pix)
    clipped = (p < BCE_EPS) | (p > 1.0 - BCE_EPS)
    # d(mean bce)/d logit; zero where the clamp is active
    dlogit = np.where(clipped, 0.0, p - y) * (example_weights[:, None] / n_pix)

    g = zeros_like(params)
    g.b2 = np.asarray(dlogit.sum())
    hid2 = cache.hidden.reshape(b * n_pix, -1)
    dflat = dlogit.reshape(b * n_pix)
    g.w2 = dflat @ hid2
    dpre = dflat[:, None] * params.w2
    dpre *= cache.pre.reshape(b * n_pix, -1) > 0
    g.W1 = dpre.T @ cache.features
    dpre = dpre.reshape(b, n_pix, -1)
    dbias = dpre.sum(axis=1)  # (B, h)
    g.b1 = dbias.sum(axis=0)
    g.U1 = dbias.T @ cache.text
    dtext = dbias @ params.U1  # (B, d_t)
    for i, toks in enumerate(cache.tokens):
        np.add.at(g.token_embeddings, toks, dtext[i] / toks.size)
    return g


def batch_loss(probs: np.ndarray, targets: np.ndarray, example_weights: np.ndarray | None = None) -> float:
    b = probs.shape[0]
    if example_weights is None:
        example_weights = np.full(b, 1.0 / b)
    return float(sum(wt * bce_loss(p, t) for wt, p, t in zip(example_weights, probs, targets)))


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_step(
    params: ModelParams,
    grads: ParamGrads,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam; returns new params and state, inputs untouched."""
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name in TENSOR_NAMES:
        g = getattr(grads, name)
        m = beta1 * getattr(state.m, name) + (1.0 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1.0 - beta2) * (g * g)
        new_p[name] = getattr(params, name) - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t)


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Exponential moving average: ``alpha * teacher + (1 - alpha) * student``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = {}
    for name in TENSOR_NAMES:
        t, s = getattr(teacher, name), getattr(student, name)
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher {t.shape} vs student {s.shape}")
        out[name] = alpha * t + (1.0 - alpha) * s
    return ModelParams(**out)


def params_to_dict(params: ModelParams) -> dict:
    return {
        "header": {
            "vocab_size": params.vocab_size,
            "d_t": params.embed_dim,
            "h": params.hidden,
            "format_version": CHECKPOINT_VERSION,
        },
        **{name: getattr(params, name).tolist() for name in TENSOR_NAMES},
    }


def params_from_dict(doc: dict, vocab_size: int | None = None) -> ModelParams:
    try:
        header = doc["header"]
        if header["format_version"] != CHECKPOINT_VERSION:
            raise CorruptCheckpointError(f"unsupported checkpoint version {header['format_version']}")
        tensors = {name: np.asarray(doc[name], dtype=np.float64) for name in TENSOR_NAMES}
        declared = (int(header["vocab_size"]), int(header["d_t"]), int(header["h"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from exc
    params = ModelParams(**tensors)
    params.check()
    if declared != (params.vocab_size, params.embed_dim, params.hidden):
        raise DimensionMismatchError(f"header {declared} disagrees with tensors")
    if vocab_size is not None and params.vocab_size != vocab_size:
        raise DimensionMismatchError(f"checkpoint vocab {params.vocab_size} != expected {vocab_size}")
    return params


def save_params(params: ModelParams, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_params(path: str | os.PathLike, vocab_size: int | None = None) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFoundError(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    return params_from_dict(doc, vocab_size)
