"""Synthetic person-detection data at desk scale.

Images are textured backgrounds with 1-3 "person" blobs: a fat rounded
torso, a head ellipse, legs and short arms, drawn in a color that
contrasts with the local background. The blob is designed to fill its
ground-truth box densely (mask/box IoU >= 0.6).
"""

from __future__ import annotations

import numpy as np

from .boxes import BoundingBox
from .data import LabeledDataset, Sample
from .images import clip01
from .rng import generator

DEFAULT_SIZE = 104


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(4, 4, 3))
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    y0 = np.floor(ys).astype(int).clip(0, 2)
    x0 = np.floor(xs).astype(int).clip(0, 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    img = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(0.08, 0.25) * min(h, w)
        blot = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad)))
        img += blot[:, :, None] * rng.uniform(-0.12, 0.12, size=3)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return clip01(img)


def person_mask(h: int, w: int, box: BoundingBox) -> np.ndarray:
    """Rasterize the blob silhouette for a box on an h x w grid."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5 - box.cx * w) / (box.w * w / 2.0)
    v = (yy + 0.5 - box.cy * h) / (box.h * h / 2.0)
    torso = (np.abs(u / 0.80) ** 4 + np.abs((v + 0.18) / 0.50) ** 4) <= 1.0
    head = (u / 0.34) ** 2 + ((v + 0.78) / 0.24) ** 2 <= 1.0
    legs = (np.abs(v - 0.58) <= 0.42) & (((u >= 0.08) & (u <= 0.68)) | ((u <= -0.08) & (u >= -0.68)))
    arms = (np.abs(u) >= 0.80) & (np.abs(u) <= 1.0) & (v >= -0.52) & (v <= 0.05)
    return torso | head | legs | arms


def _pick_color(rng: np.random.Generator, bg_mean: np.ndarray) -> np.ndarray:
    for _ in range(32):
        c = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(c - bg_mean) >= 0.45:
            return c
    return clip01(1.0 - bg_mean)


def generate_synthetic_dataset(
    n: int, seed: int, size: int = DEFAULT_SIZE, split_tag: str = "train"
) -> LabeledDataset:
    """Deterministic dataset of n images; per-image RNG derived from (seed, index)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    samples = []
    for k in range(n):
        rng = generator(seed, "synth", k)
        img = _background(rng, size, size)
        bg_mean = img.mean(axis=(0, 1))
        n_persons = int(rng.integers(1, 4))
        boxes: list[BoundingBox] = []
        for _ in range(n_persons):
            for _ in range(40):
                w = rng.uniform(0.24, 0.40)
                h = min(w * rng.uniform(1.15, 1.45), 0.52)
                cx = rng.uniform(w / 2 + 0.02, 1.0 - w / 2 - 0.02)
                cy = rng.uniform(h / 2 + 0.02, 1.0 - h / 2 - 0.02)
                if all(np.hypot(cx - b.cx, cy - b.cy) >= 0.30 for b in boxes):
                    boxes.append(
                        BoundingBox(round(cx, 6), round(cy, 6), round(w, 6), round(h, 6))
                    )
                    break
        for box in boxes:
            mask = person_mask(size, size, box)
            color = _pick_color(rng, bg_mean)
            texture = rng.normal(0.0, 0.035, size=(size, size, 3))
            img = np.where(mask[:, :, None], clip01(color[None, None, :] + texture), img)
        samples.append(Sample(f"synth-{seed:08x}-{k:05d}", img, boxes))
    return LabeledDataset(samples, split_tag)
