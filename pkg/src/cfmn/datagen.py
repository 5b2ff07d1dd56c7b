"""Synthetic stroke glyphs, geometric variations and 90 degree class augmentation.

Images are float32 in ``[0, 1]`` with a white (1.0) background and dark
strokes. Geometric work is done on the ink map ``1 - image`` so that empty
regions stay exactly white after interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .episodes import DatasetIndex, Item
from .errors import ProtocolError, ShapeError

CANVAS = 56
KINDS = ("location", "size", "rotation", "all")
SIZE_RANGE = (20, 55)
ROTATION_SIZE = 50
MAX_ANGLE = 45.0
STROKE_WIDTH = 0.045  # half-width in unit-square coordinates


@dataclass(frozen=True)
class GlyphSpec:
    """A class prototype: polylines in the unit square derived from ``seed``."""

    seed: int
    strokes: tuple[np.ndarray, ...]

    @classmethod
    def from_seed(cls, seed: int) -> "GlyphSpec":
        rng = np.random.default_rng([int(seed), 0x61797068])
        strokes = []
        for _ in range(rng.integers(2, 5)):
            if rng.random() < 0.5:
                a, b = rng.uniform(0.15, 0.85, size=(2, 2))
                strokes.append(np.linspace(a, b, 16))
            else:
                centre = rng.uniform(0.35, 0.65, size=2)
                radius = rng.uniform(0.12, 0.3)
                start = rng.uniform(0, 2 * np.pi)
                sweep = rng.uniform(0.6, 1.6) * np.pi
                t = start + sweep * np.linspace(0, 1, 24)
                pts = centre + radius * np.stack([np.sin(t), np.cos(t)], axis=1)
                strokes.append(np.clip(pts, 0.05, 0.95))
        return cls(int(seed), tuple(strokes))

    def render(self, size: int = 28, jitter: np.random.Generator | None = None) -> np.ndarray:
        """``size x size`` image; ``jitter`` applies a small random affine to the strokes."""
        mat, shift = np.eye(2), np.zeros(2)
        if jitter is not None:
            ang = jitter.uniform(-0.15, 0.15)
            sc = jitter.uniform(0.9, 1.1, size=2)
            shear = jitter.uniform(-0.1, 0.1)
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            mat = rot @ np.array([[sc[0], shear], [0.0, sc[1]]])
            shift = jitter.uniform(-0.04, 0.04, size=2)
        ys, xs = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
        pix = np.stack([ys.ravel(), xs.ravel()], axis=1)
        dist = np.full(pix.shape[0], np.inf)
        for pts in self.strokes:
            p = np.clip((pts - 0.5) @ mat.T + 0.5 + shift, 0.1, 0.9)
            dist = np.minimum(dist, _segment_distance(pix, p[:-1], p[1:]))
        # one-pixel linear ramp at the stroke edge
        ink = np.clip((STROKE_WIDTH - dist) * size + 0.5, 0.0, 1.0)
        return (1.0 - ink).reshape(size, size).astype(np.float32)


def _segment_distance(pix: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = np.maximum(np.einsum("sk,sk->s", d, d), 1e-12)
    rel = pix[:, None, :] - a[None]
    t = np.clip(np.einsum("psk,sk->ps", rel, d) / denom, 0.0, 1.0)
    nearest = a[None] + t[..., None] * d[None]
    return np.sqrt(((pix[:, None, :] - nearest) ** 2).sum(-1)).min(axis=1)


def gen_synthetic_glyphs(num_classes: int, per_class: int, size: int = 28, rng=0) -> DatasetIndex:
    """``num_classes`` stroke classes with ``per_class`` jittered renders each."""
    if num_classes < 2:
        raise ProtocolError(f"need at least 2 glyph classes, got {num_classes}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seeds = rng.choice(2**31, size=num_classes, replace=False)
    classes = [f"g{i:04d}" for i in range(num_classes)]
    items = []
    for name, seed in zip(classes, seeds):
        spec = GlyphSpec.from_seed(int(seed))
        for _ in range(per_class):
            items.append(Item(spec.render(size, rng)[None], (name,)))
    return DatasetIndex(items, classes)


# --------------------------------------------------------------------------- variations


def _ink_bbox(ink: np.ndarray) -> tuple[slice, slice] | None:
    rows, cols = np.nonzero(ink.any(axis=1))[0], np.nonzero(ink.any(axis=0))[0]
    if rows.size == 0:
        return None
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _trim(ink: np.ndarray) -> np.ndarray:
    box = _ink_bbox(ink)
    return ink[box] if box is not None else ink[:0, :0]


def _resize(ink: np.ndarray, longer: float) -> np.ndarray:
    """Bilinear resize so the longer side becomes ``longer`` pixels, trimmed to the ink box."""
    h, w = ink.shape
    scale = longer / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    # corner-aligned sampling keeps the outermost ink rows and columns
    ys = np.arange(nh) * ((h - 1) / max(nh - 1, 1))
    xs = np.arange(nw) * ((w - 1) / max(nw - 1, 1))
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    out = map_coordinates(ink.astype(np.float64), grid, order=1, mode="constant", cval=0.0)
    return _trim(np.clip(out, 0.0, 1.0))


def _rotate(ink: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the array centre onto a canvas large enough to hold the result."""
    h, w = ink.shape
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    oh = int(np.ceil(abs(h * c) + abs(w * s) - 1e-9))
    ow = int(np.ceil(abs(h * s) + abs(w * c) - 1e-9))
    y, x = np.meshgrid(np.arange(oh) - (oh - 1) / 2, np.arange(ow) - (ow - 1) / 2, indexing="ij")
    src = np.stack([c * y + s * x + (h - 1) / 2, -s * y + c * x + (w - 1) / 2])
    out = map_coordinates(ink.astype(np.float64), src, order=1, mode="constant", cval=0.0)
    return _trim(np.clip(out, 0.0, 1.0))


def _fit(ink: np.ndarray, canvas: int) -> np.ndarray:
    if max(ink.shape, default=0) > canvas:
        return _resize(ink, canvas)
    return ink


def _place(ink: np.ndarray, canvas: int, offset: tuple[int, int] | None = None) -> np.ndarray:
    h, w = ink.shape
    top, left = offset if offset is not None else ((canvas - h) // 2, (canvas - w) // 2)
    out = np.ones((canvas, canvas), dtype=np.float32)
    out[top : top + h, left : left + w] = (1.0 - ink).astype(np.float32)
    return out


def _random_offset(shape: tuple[int, int], canvas: int, rng: np.random.Generator) -> tuple[int, int]:
    return int(rng.integers(0, canvas - shape[0] + 1)), int(rng.integers(0, canvas - shape[1] + 1))


def make_variation(image: np.ndarray, kind: str, rng, canvas: int = CANVAS, **fixed) -> np.ndarray:
    """One harder-variation image of a white-background glyph.

    ``fixed`` may pin the sampled quantities: ``size`` (longer side of the
    glyph box), ``angle`` (degrees) and ``offset`` (top, left).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown variation kind {kind!r}; expected one of {KINDS}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    plane = img if squeeze else img[0]

    if kind == "location":
        h, w = plane.shape
        top, left = fixed.get("offset") or _random_offset((h, w), canvas, rng)
        out = np.ones((canvas, canvas), dtype=np.float32)
        out[top : top + h, left : left + w] = plane
    else:
        glyph = _trim(1.0 - plane.astype(np.float64))
        if glyph.size == 0:
            out = np.ones((canvas, canvas), dtype=np.float32)
        else:
            if kind == "rotation":
                size = fixed.get("size", ROTATION_SIZE)
            else:
                size = fixed.get("size", int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1)))
            ink = _resize(glyph, size)
            if kind in ("rotation", "all"):
                angle = fixed.get("angle", float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)))
                ink = _fit(_rotate(ink, angle), canvas)
            offset = None
            if kind == "all":
                offset = fixed.get("offset") or _random_offset(ink.shape, canvas, rng)
            out = _place(ink, canvas, offset)
    return out if squeeze else out[None]


def expand_variations(index: DatasetIndex, kind: str, copies: int = 10, seed: int = 0,
                      canvas: int = CANVAS) -> DatasetIndex:
    """``copies`` variations of every image, each from its own (seed, image, copy) stream."""
    items = []
    for i, it in enumerate(index.items):
        src = index.image(i)
        for k in range(copies):
            rng = np.random.default_rng([int(seed), i, k])
            items.append(Item(make_variation(src, kind, rng, canvas), it.labels))
    return DatasetIndex(items, list(index.classes), dict(index.splits), index.multilabel)


def rotate90_augment(index: DatasetIndex) -> DatasetIndex:
    """Each class spawns three new classes rotated by 90, 180 and 270 degrees."""
    if index.multilabel:
        raise ProtocolError("rotation augmentation needs a single-label index")
    names = lambda c: [c] + [f"{c}@rot{90 * k}" for k in (1, 2, 3)]
    classes = [n for c in index.classes for n in names(c)]
    items = []
    for i, it in enumerate(index.items):
        img = index.image(i)
        if img.shape[-1] != img.shape[-2]:
            raise ShapeError(f"rotation augmentation needs square images, item {i} is {img.shape[-2]}x{img.shape[-1]}")
        for k, name in enumerate(names(it.labels[0])):
            items.append(Item(np.ascontiguousarray(np.rot90(img, k, axes=(-2, -1))), (name,)))
    splits = {s: [n for c in cls for n in names(c)] for s, cls in index.splits.items()}
    return DatasetIndex(items, classes, splits)
