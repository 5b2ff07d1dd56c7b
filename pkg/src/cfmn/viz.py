"""Export of last-stage attention correspondences with image overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imageio import write_image
from .matching import AttentionMap, top_k_correspondences
from .model import EXTRACTOR, CFMNConfig, ModelParams, extract_pairs
from .tensor import no_record

# rank colours of the support dots, first to fifth
RANK_COLOURS = ((255, 0, 0), (0, 200, 0), (0, 0, 255), (255, 220, 0), (160, 32, 240))
CROSS_COLOUR = (255, 0, 0)


@dataclass(frozen=True)
class Geometry:
    """Feature position ``i`` is centred on pixel ``start + i * jump`` and sees ``size`` pixels."""

    jump: int
    size: int
    start: float

    def centre(self, idx: int) -> float:
        return self.start + idx * self.jump

    def rect(self, pos: tuple[int, int], height: int, width: int) -> list[int]:
        """Receptive field ``[top, left, bottom, right]`` (inclusive), clipped to the image."""
        half = (self.size - 1) / 2
        cy, cx = self.centre(pos[0]), self.centre(pos[1])
        return [max(0, int(np.floor(cy - half))), max(0, int(np.floor(cx - half))),
                min(height - 1, int(np.ceil(cy + half))), min(width - 1, int(np.ceil(cx + half)))]


def stage_geometry(cfg: CFMNConfig, stage: str) -> Geometry:
    jump, size, start = 1, 1, 0.0
    for name in EXTRACTOR:
        spec = cfg.blocks[name]
        size += (spec.kernel - 1) * jump
        start += ((spec.kernel - 1) / 2 - spec.padding) * jump
        if spec.pool:
            size += jump
            start += 0.5 * jump
            jump *= 2
        if name == stage:
            return Geometry(jump, size, start)
    raise ConfigError(f"{stage!r} is not an extractor stage")


def attention_for_pair(params: ModelParams, cfg: CFMNConfig, query_img, support_img) -> tuple[str, AttentionMap]:
    """Attention of the last matching stage from an eval-mode forward of one pair."""
    if not cfg.matching_stages:
        raise ConfigError("model has no matching stages to visualize")
    stage = cfg.matching_stages[-1]
    with no_record():
        feats = extract_pairs(params, cfg, query_img, support_img, train=False)
    if stage not in feats.attention:
        raise ConfigError(f"stage {stage} does not expose an attention map")
    h = feats.attention[stage].data[0]
    side = int(round(np.sqrt(h.shape[0])))
    return stage, AttentionMap(h, side, side)


def _rgb(img: np.ndarray, scale: int) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a.transpose(1, 2, 0)
    if a.ndim == 2:
        a = a[..., None]
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    a = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)
    return np.repeat(np.repeat(a, scale, 0), scale, 1)


def _draw_rect(canvas, rect, colour, scale):
    t, l, b, r = (v * scale for v in rect)
    b, r = b + scale - 1, r + scale - 1
    canvas[t, l : r + 1] = colour
    canvas[b, l : r + 1] = colour
    canvas[t : b + 1, l] = colour
    canvas[t : b + 1, r] = colour


def _draw_cross(canvas, cy, cx, colour, arm):
    h, w = canvas.shape[:2]
    for d in range(-arm, arm + 1):
        for y, x in ((cy + d, cx + d), (cy + d, cx - d)):
            if 0 <= y < h and 0 <= x < w:
                canvas[y, x] = colour


def _draw_dot(canvas, cy, cx, colour, radius):
    h, w = canvas.shape[:2]
    ys, xs = np.ogrid[:h, :w]
    canvas[(ys - cy) ** 2 + (xs - cx) ** 2 <= radius * radius] = colour


def export_attention(params: ModelParams, cfg: CFMNConfig, query_img, support_img, query_pos: tuple[int, int],
                     k: int = 5, out_dir: str | Path | None = None, scale: int = 4, fmt: str = "ppm") -> dict:
    """Top-k correspondences of the last matching stage plus overlays.

    Returns a JSON-ready record. With ``out_dir`` it also writes
    ``attention.json`` and query/support overlays: a cross on the query
    position, one dot per support position in rank order, and the receptive
    field of every marked position.
    """
    stage, attn = attention_for_pair(params, cfg, query_img, support_img)
    top = top_k_correspondences(attn, tuple(query_pos), k)
    geo = stage_geometry(cfg, stage)
    H = W = cfg.input_size
    record = {
        "stage": stage,
        "grid": [attn.height, attn.width],
        "query_pos": [int(query_pos[0]), int(query_pos[1])],
        "query_rf": geo.rect(tuple(query_pos), H, W),
        "topk": [{"rank": i + 1, "pos": [p[0], p[1]], "weight": w, "rf": geo.rect(p, H, W)}
                 for i, (p, w) in enumerate(top)],
    }
    record["marks"] = [{"image": "query", "kind": "cross", "pos": record["query_pos"]}] + [
        {"image": "support", "kind": "dot", "pos": t["pos"], "rank": t["rank"]} for t in record["topk"]
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        q, s = _rgb(query_img, scale), _rgb(support_img, scale)
        centre = lambda p: (int(geo.centre(p[0]) * scale + scale // 2), int(geo.centre(p[1]) * scale + scale // 2))
        _draw_rect(q, record["query_rf"], CROSS_COLOUR, scale)
        _draw_cross(q, *centre(query_pos), CROSS_COLOUR, max(2, scale))
        for t in reversed(record["topk"]):
            colour = RANK_COLOURS[(t["rank"] - 1) % len(RANK_COLOURS)]
            _draw_rect(s, t["rf"], colour, scale)
            _draw_dot(s, *centre(t["pos"]), colour, max(1, scale // 2 + 1))
        write_image(out / f"query_overlay.{fmt}", q)
        write_image(out / f"support_overlay.{fmt}", s)
        (out / "attention.json").write_text(json.dumps(record, indent=1))
    return record
