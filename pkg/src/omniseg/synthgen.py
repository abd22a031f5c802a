"""Synthetic referring-segmentation benchmark of colored shapes.

Each record is a 64x64 scene of 2-4 non-overlapping shapes with distinct
colors, a short expression naming one of them, its full mask and the derived
weak labels (centroid point, tight box).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from omniseg.mask_core import PixelBox, PixelPoint, rle_decode, rle_encode

GRID = 64
SHAPES = ("square", "disc", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "purple": (128, 0, 128),
    "cyan": (0, 255, 255),
}
HALVES = ("left", "right", "top", "bottom")
BACKGROUND = (128, 128, 128)
SIZE_RANGE = (6, 14)
MAX_PLACEMENT_TRIES = 1000
FORMAT_VERSION = 1
SPLITS = ("fully", "omni", "val", "test")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...] = (*COLORS, *SHAPES, *HALVES, "object")

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.words.index(word)

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]

    def flip_swap(self) -> dict[int, int]:
        left, right = self.id("left"), self.id("right")
        return {left: right, right: left}


VOCAB = Vocabulary()


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    center: tuple[int, int]
    size: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    height: int = GRID
    width: int = GRID


def shape_mask(obj: ObjectSpec, height: int = GRID, width: int = GRID) -> np.ndarray:
    """Rasterize one shape; pixels falling off the grid are dropped."""
    rr, cc = np.mgrid[0:height, 0:width]
    r0, c0 = obj.center
    s = obj.size
    if obj.shape == "square":
        top, left = r0 - s // 2, c0 - s // 2
        return (rr >= top) & (rr < top + s) & (cc >= left) & (cc < left + s)
    if obj.shape == "disc":
        rad = s / 2.0
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= rad * rad
    if obj.shape == "triangle":
        # apex up, base of width s on the bottom row of an s x s cell
        top, left = r0 - s // 2, c0 - s // 2
        i = rr - top
        half = (i + 1) / 2.0
        inside_rows = (i >= 0) & (i < s)
        return inside_rows & (np.abs(cc + 0.5 - (left + s / 2.0)) <= half)
    raise ValueError(f"unknown shape {obj.shape!r}")


def _fits(obj: ObjectSpec, height: int, width: int) -> bool:
    s = obj.size
    r0, c0 = obj.center
    lo = s // 2 + 1
    hi = s - s // 2 + 1
    return r0 - lo >= 0 and c0 - lo >= 0 and r0 + hi <= height and c0 + hi <= width


def generate_scene(rng: np.random.Generator, height: int = GRID, width: int = GRID) -> SceneSpec:
    n = int(rng.integers(2, 5))
    colors = rng.choice(len(COLORS), size=n, replace=False)
    names = list(COLORS)
    occupied = np.zeros((height, width), dtype=bool)
    objects = []
    for k in range(n):
        for _ in range(MAX_PLACEMENT_TRIES):
            size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
            obj = ObjectSpec(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=names[int(colors[k])],
                center=(int(rng.integers(0, height)), int(rng.integers(0, width))),
                size=size,
            )
            if not _fits(obj, height, width):
                continue
            m = shape_mask(obj, height, width)
            if not (m & occupied).any():
                occupied |= m
                objects.append(obj)
                break
        else:
            raise GenerationError(f"could not place object {k} after {MAX_PLACEMENT_TRIES} tries")
    return SceneSpec(tuple(objects), height, width)


def render(scene: SceneSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return a uint8 (H, W, 3) image and one bool mask per object."""
    image = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    masks = []
    for obj in scene.objects:
        m = shape_mask(obj, scene.height, scene.width)
        image[m] = COLORS[obj.color]
        masks.append(m)
    return image, masks


def centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    return float(rows.mean()), float(cols.mean())


def halves_of(mask: np.ndarray) -> tuple[str, str]:
    h, w = mask.shape
    r, c = centroid(mask)
    return ("left" if c < w / 2 else "right"), ("top" if r < h / 2 else "bottom")


def make_expression(
    scene: SceneSpec, target_index: int, rng: np.random.Generator, vocab: Vocabulary = VOCAB
) -> list[int]:
    obj = scene.objects[target_index]
    if rng.random() < 0.5:
        return vocab.encode([obj.color, obj.shape])
    mask = shape_mask(obj, scene.height, scene.width)
    half = halves_of(mask)[int(rng.integers(2))]
    return vocab.encode([obj.color, "object", half])


def expression_matches(tokens, obj: ObjectSpec, mask: np.ndarray, vocab: Vocabulary = VOCAB) -> bool:
    """Literal reading of an expression against one object."""
    words = vocab.decode(tokens)
    if words[0] != obj.color:
        return False
    if words[1] == "object":
        return words[2] in halves_of(mask)
    return words[1] == obj.shape


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_weak_labels(mask: np.ndarray) -> tuple[PixelPoint, PixelBox]:
    """Centroid point (snapped onto the mask if needed) and tight half-open box."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("cannot derive weak labels from an empty mask")
    pr, pc = round_half_up(rows.mean()), round_half_up(cols.mean())
    if not mask[pr, pc]:
        k = int(np.argmin((rows - pr) ** 2 + (cols - pc) ** 2))
        pr, pc = int(rows[k]), int(cols[k])
    box = PixelBox(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    return PixelPoint(pr, pc), box


@dataclass(eq=False)
class DatasetRecord:
    id: int
    image: np.ndarray  # uint8 (H, W, 3)
    tokens: tuple[int, ...]
    mask: np.ndarray  # bool (H, W)
    point: PixelPoint
    box: PixelBox
    split: str

    @property
    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_b64": base64.b64encode(self.image.tobytes()).decode("ascii"),
            "tokens": list(self.tokens),
            "mask_rle": rle_encode(self.mask),
            "point": [self.point.row, self.point.col],
            "box": [self.box.row0, self.box.col0, self.box.row1, self.box.col1],
            "split": self.split,
        }

    @classmethod
    def from_json(cls, doc: dict, height: int = GRID, width: int = GRID) -> "DatasetRecord":
        image = np.frombuffer(base64.b64decode(doc["image_b64"]), dtype=np.uint8)
        if image.size != height * width * 3:
            raise ValueError(f"record {doc.get('id')}: image has {image.size} bytes")
        if doc["split"] not in SPLITS:
            raise ValueError(f"record {doc.get('id')}: unknown split {doc['split']!r}")
        return cls(
            id=int(doc["id"]),
            image=image.reshape(height, width, 3).copy(),
            tokens=tuple(int(t) for t in doc["tokens"]),
            mask=rle_decode(doc["mask_rle"], height, width),
            point=PixelPoint(*doc["point"]),
            box=PixelBox(*doc["box"]),
            split=doc["split"],
        )


def validate_record(rec: DatasetRecord) -> None:
    """Raise ValueError if the record breaks a dataset invariant."""
    if not rec.mask[rec.point.row, rec.point.col]:
        raise ValueError(f"record {rec.id}: point not inside mask")
    _, tight = derive_weak_labels(rec.mask)
    if tight != rec.box:
        raise ValueError(f"record {rec.id}: box {rec.box} is not tight ({tight})")


def make_record(rng: np.random.Generator, record_id: int, split: str) -> DatasetRecord:
    scene = generate_scene(rng)
    image, masks = render(scene)
    target = int(rng.integers(len(scene.objects)))
    tokens = make_expression(scene, target, rng)
    point, box = derive_weak_labels(masks[target])
    return DatasetRecord(record_id, image, tuple(tokens), masks[target], point, box, split)


@dataclass(frozen=True)
class SplitConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    labeled_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.n_train < 1 or self.n_val < 0 or self.n_test < 0:
            raise ValueError("split sizes must be non-negative and n_train >= 1")
        if self.n_labeled < 1:
            raise ValueError("labeled fraction leaves no fully-labeled records")

    @property
    def n_labeled(self) -> int:
        return round_half_up(self.labeled_fraction * self.n_train)

    @property
    def n_omni(self) -> int:
        return self.n_train - self.n_labeled


_SPLIT_STREAM = {"train": 0, "val": 1, "test": 2}


def build_records(cfg: SplitConfig) -> dict[str, list[DatasetRecord]]:
    """Generate the train/val/test records in memory.

    Scene content depends only on ``(seed, split, index)``, so changing the
    labeled fraction relabels the same training scenes.
    """
    out: dict[str, list[DatasetRecord]] = {}
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for name, n in sizes.items():
        tag = "omni" if name == "train" else name
        out[name] = [
            make_record(np.random.default_rng([cfg.seed, _SPLIT_STREAM[name], i]), i, tag) for i in range(n)
        ]
    order = np.random.default_rng([cfg.seed, 99]).permutation(cfg.n_train)
    for i in order[: cfg.n_labeled]:
        out["train"][int(i)].split = "fully"
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_jsonl(records, path: Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[DatasetRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return records


@dataclass
class Manifest:
    seed: int
    counts: dict[str, int]
    labeled_fraction: float
    vocab: list[str]
    format_version: int
    digests: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def build_dataset(cfg: SplitConfig, out_path: str | os.PathLike) -> Manifest:
    """Write ``train/val/test.jsonl`` and ``manifest.json`` under ``out_path``."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    records = build_records(cfg)
    digests = {}
    for name, recs in records.items():
        path = out / f"{name}.jsonl"
        write_jsonl(recs, path)
        digests[path.name] = _sha256(path)
    manifest = Manifest(
        seed=cfg.seed,
        counts={
            "train": cfg.n_train,
            "fully": cfg.n_labeled,
            "omni": cfg.n_omni,
            "val": cfg.n_val,
            "test": cfg.n_test,
        },
        labeled_fraction=cfg.labeled_fraction,
        vocab=list(VOCAB.words),
        format_version=FORMAT_VERSION,
        digests=digests,
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(path: str | os.PathLike) -> dict[str, list[DatasetRecord]]:
    """Read a directory written by :func:`build_dataset`, split into fully/omni/val/test."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    train = read_jsonl(root / "train.jsonl")
    return {
        "fully": [r for r in train if r.split == "fully"],
        "omni": [r for r in train if r.split == "omni"],
        "val": read_jsonl(root / "val.jsonl"),
        "test": read_jsonl(root / "test.jsonl"),
    }


def split_records(records: dict[str, list[DatasetRecord]]) -> dict[str, list[DatasetRecord]]:
    train = records["train"]
    return {
        "fully": [r for r in train if r.split == "fully"],
        "omni": [r for r in train if r.split == "omni"],
        "val": records["val"],
        "test": records["test"],
    }
