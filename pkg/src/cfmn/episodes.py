"""Datasets, class-disjoint splits and N-way K-shot episode sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ProtocolError
from .imageio import IMAGE_SUFFIXES, read_image, write_image

SPLITS = ("train", "val", "test")

FS_COCO_TRAIN = (
    "toilet", "teddy bear", "bicycle", "skis", "tennis racket", "snowboard", "carrot", "zebra", "keyboard",
    "scissors", "chair", "couch", "boat", "sheep", "donut", "tv", "backpack", "bowl", "microwave", "bench", "book",
    "elephant", "orange", "tie", "bird", "knife", "pizza", "fork", "hair drier", "frisbee", "bottle", "bus", "bear",
    "toothbrush", "spoon", "giraffe", "sink", "cell phone", "refrigerator", "remote", "surfboard", "cow",
    "dining table", "hot dog", "baseball bat", "skateboard", "banana", "person", "train", "truck", "parking meter",
    "suitcase", "cake", "traffic light",
)
FS_COCO_VAL = (
    "sandwich", "kite", "cup", "stop sign", "toaster", "dog", "bed", "vase", "motorcycle", "handbag", "mouse",
)
FS_COCO_TEST = (
    "laptop", "horse", "umbrella", "apple", "clock", "car", "broccoli", "sports ball", "cat", "baseball glove",
    "oven", "potted plant", "wine glass", "airplane", "fire hydrant",
)


def fs_coco_split() -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """The 54/11/15 FS-COCO class split (train, val, test)."""
    return FS_COCO_TRAIN, FS_COCO_VAL, FS_COCO_TEST


@dataclass(frozen=True)
class Item:
    """An image (array ``C x H x W`` or a file path) with its label set."""

    image: np.ndarray | str
    labels: tuple[str, ...]


@dataclass
class DatasetIndex:
    items: list[Item]
    classes: list[str]
    splits: dict[str, list[str]] = field(default_factory=dict)
    multilabel: bool = False

    def __post_init__(self):
        vocab = set(self.classes)
        if len(vocab) != len(self.classes):
            raise ProtocolError("duplicate class names in vocabulary")
        for i, it in enumerate(self.items):
            if not set(it.labels) <= vocab:
                raise ProtocolError(f"item {i} has labels outside the vocabulary: {set(it.labels) - vocab}")
            if not self.multilabel and len(it.labels) != 1:
                raise ProtocolError(f"single-label dataset item {i} has {len(it.labels)} labels")
        names = list(self.splits)
        for s, cls in self.splits.items():
            if not set(cls) <= vocab:
                raise ProtocolError(f"split {s!r} names unknown classes {set(cls) - vocab}")
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                common = set(self.splits[names[a]]) & set(self.splits[names[b]])
                if common:
                    raise ProtocolError(f"splits {names[a]!r} and {names[b]!r} share classes {sorted(common)}")
        self._by_class: dict[str, list[int]] = {c: [] for c in self.classes}
        for i, it in enumerate(self.items):
            for lab in it.labels:
                self._by_class[lab].append(i)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.items)

    def items_of(self, cls: str) -> list[int]:
        return self._by_class[cls]

    def split_classes(self, split: str | None) -> list[str]:
        if split is None:
            return list(self.classes)
        if split not in self.splits:
            raise ProtocolError(f"dataset has no {split!r} split (available: {sorted(self.splits)})")
        return list(self.splits[split])

    def image(self, i: int) -> np.ndarray:
        """Image ``i`` as a float32 ``C x H x W`` array."""
        img = self.items[i].image
        if isinstance(img, (str, Path)):
            if i not in self._cache:
                self._cache[i] = to_chw(read_image(img))
            return self._cache[i]
        return img

    def images(self, ids: Iterable[int]) -> np.ndarray:
        return np.stack([self.image(i) for i in ids])

    def with_splits(self, splits: Mapping[str, Sequence[str]]) -> "DatasetIndex":
        return DatasetIndex(self.items, self.classes, {k: list(v) for k, v in splits.items()}, self.multilabel)

    def restrict(self, split: str) -> "DatasetIndex":
        """Items of one split with labels limited to that split's classes."""
        keep = set(self.split_classes(split))
        items = []
        for it in self.items:
            labels = tuple(l for l in it.labels if l in keep)
            if labels:
                items.append(Item(it.image, labels))
        classes = [c for c in self.classes if c in keep]
        return DatasetIndex(items, classes, {split: classes}, self.multilabel)


def to_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3 and img.shape[2] in (1, 3):
        return np.ascontiguousarray(img.transpose(2, 0, 1))
    return img


def split_by_counts(index: DatasetIndex, n_val: int, n_test: int) -> DatasetIndex:
    """Assign the last ``n_test`` classes to test, the ``n_val`` before them to val, the rest to train."""
    n = len(index.classes)
    if n_val + n_test >= n:
        raise ProtocolError(f"cannot carve {n_val} val + {n_test} test classes from {n}")
    c = index.classes
    return index.with_splits({
        "train": c[: n - n_val - n_test],
        "val": c[n - n_val - n_test : n - n_test],
        "test": c[n - n_test :],
    })


# --------------------------------------------------------------------------- episodes


@dataclass
class Episode:
    """One N-way K-shot task. Supports and queries refer to item ids of the index."""

    classes: list[str]
    support: list[tuple[int, int]]  # (item id, class idx)
    queries: list[int]
    targets: np.ndarray  # Q x N, one-hot or multi-hot
    way: int
    shot: int
    seed: tuple[int, ...] = ()
    support_labels: list[frozenset] = field(default_factory=list)

    @property
    def support_ids(self) -> list[int]:
        return [i for i, _ in self.support]

    def groups(self) -> list[list[int]]:
        """Support positions contributing to each class."""
        if self.support_labels:
            return [[j for j, ls in enumerate(self.support_labels) if c in ls] for c in self.classes]
        return [[j for j, (_, c) in enumerate(self.support) if c == k] for k in range(self.way)]


def episode_rng(base_seed: int, counter: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for episode ``counter`` so sampling order never matters."""
    return np.random.default_rng([int(base_seed), int(stream), int(counter)])


def _as_rng(rng) -> tuple[np.random.Generator, tuple[int, ...]]:
    if isinstance(rng, np.random.Generator):
        return rng, ()
    seed = tuple(int(s) for s in np.atleast_1d(rng))
    return np.random.default_rng(list(seed)), seed


def sample_episode(index: DatasetIndex, n_way: int, k_shot: int, q_per_class: int, rng, split: str | None = None) -> Episode:
    """Draw N classes, then K supports and Q queries per class, all without replacement."""
    rng, seed = _as_rng(rng)
    pool = index.split_classes(split)
    if len(pool) < n_way:
        raise ProtocolError(f"{n_way}-way episode needs {n_way} classes, split has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), n_way, replace=False)]
    support, queries = [], []
    need = k_shot + q_per_class
    for c_idx, cls in enumerate(chosen):
        ids = index.items_of(cls)
        if len(ids) < need:
            raise ProtocolError(f"class {cls!r} has {len(ids)} images, episode needs {k_shot}+{q_per_class}={need}")
        pick = rng.choice(len(ids), need, replace=False)
        support += [(ids[p], c_idx) for p in pick[:k_shot]]
        queries += [(ids[p], c_idx) for p in pick[k_shot:]]
    targets = np.zeros((len(queries), n_way), dtype=np.float32)
    targets[np.arange(len(queries)), [c for _, c in queries]] = 1.0
    return Episode(chosen, support, [i for i, _ in queries], targets, n_way, k_shot, seed)


def sample_multilabel_episode(
    index: DatasetIndex, n_way: int, k_shot: int, q_per_class: int, rng, split: str | None = None
) -> Episode:
    """Multi-label episode.

    Supports for class ``c`` come from images containing ``c`` and keep their
    full label set. Queries come from the remaining images that contain at
    least one sampled class; targets are multi-hot over the sampled classes.
    """
    rng, seed = _as_rng(rng)
    pool = index.split_classes(split)
    if len(pool) < n_way:
        raise ProtocolError(f"{n_way}-way episode needs {n_way} classes, split has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), n_way, replace=False)]
    used: set[int] = set()
    support = []
    for c_idx, cls in enumerate(chosen):
        eligible = [i for i in index.items_of(cls) if i not in used]
        if len(eligible) < k_shot:
            raise ProtocolError(f"class {cls!r} has {len(eligible)} unused images, needs {k_shot} supports")
        for p in rng.choice(len(eligible), k_shot, replace=False):
            support.append((eligible[p], c_idx))
            used.add(eligible[p])
    queries = []
    for cls in chosen:
        eligible = [i for i in index.items_of(cls) if i not in used]
        if len(eligible) < q_per_class:
            raise ProtocolError(f"class {cls!r} has {len(eligible)} images left for {q_per_class} queries")
        for p in rng.choice(len(eligible), q_per_class, replace=False):
            queries.append(eligible[p])
            used.add(eligible[p])
    targets = np.array(
        [[1.0 if c in index.items[q].labels else 0.0 for c in chosen] for q in queries], dtype=np.float32
    ).reshape(len(queries), n_way)
    labels = [frozenset(index.items[i].labels) for i, _ in support]
    return Episode(chosen, support, queries, targets, n_way, k_shot, seed, labels)


# --------------------------------------------------------------------------- loaders


def load_image_folder(root: str | Path, split_file: str | Path | None = None) -> DatasetIndex:
    """``root/<class>/<image>`` layout; splits from ``split_file`` or ``root/splits.json`` if present."""
    root = Path(root)
    if not root.is_dir():
        raise ProtocolError(f"dataset directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    items = []
    for cls in classes:
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                items.append(Item(str(f), (cls,)))
    if not items:
        raise ProtocolError(f"no images found under {root}")
    splits = _read_splits(split_file or (root / "splits.json"))
    return DatasetIndex(items, classes, splits)


def _read_splits(path: str | Path | None) -> dict[str, list[str]]:
    if path is None or not Path(path).exists():
        return {}
    data = json.loads(Path(path).read_text())
    return {k: list(v) for k, v in data.items() if k in SPLITS}


def load_manifest(path: str | Path, split_file: str | Path | None = None) -> DatasetIndex:
    """Multi-label manifest ``{"images": [{"path", "labels"}], "classes": [...]}``.

    Paths are relative to the manifest. Splits come from ``split_file`` or a
    ``"splits"`` key in the manifest.
    """
    path = Path(path)
    data = json.loads(path.read_text())
    base = path.parent
    items = [Item(str(base / rec["path"]), tuple(rec["labels"])) for rec in data["images"]]
    splits = _read_splits(split_file) if split_file else {k: list(v) for k, v in data.get("splits", {}).items()}
    return DatasetIndex(items, list(data["classes"]), splits, multilabel=True)


def load_dataset(path: str | Path, split_file: str | Path | None = None) -> DatasetIndex:
    path = Path(path)
    return load_manifest(path, split_file) if path.is_file() else load_image_folder(path, split_file)


def write_image_folder(index: DatasetIndex, root: str | Path, fmt: str = "pgm") -> None:
    """Write a single-label index in the ``root/<class>/<image>`` layout plus ``splits.json``."""
    root = Path(root)
    counters: dict[str, int] = {}
    for i, it in enumerate(index.items):
        cls = it.labels[0]
        d = root / cls
        d.mkdir(parents=True, exist_ok=True)
        n = counters.get(cls, 0)
        counters[cls] = n + 1
        img = index.image(i)
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        suffix = fmt if img.ndim == 2 or fmt == "png" else "ppm"
        write_image(d / f"{n:04d}.{suffix}", img)
    if index.splits:
        (root / "splits.json").write_text(json.dumps(index.splits, indent=1))
