"""Labeled datasets and the plain-text annotation sidecar format.

One row per box: `image_id class_id cx cy w h`, whitespace separated,
floats written with 8 decimals; `#` starts a comment line. Images live as
`<image_id>.png` next to the annotation file's `image_dir`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import images
from .boxes import BoundingBox
from .rng import generator


@dataclass(eq=False)
class Sample:
    image_id: str
    image: np.ndarray
    boxes: list[BoundingBox]


@dataclass(eq=False)
class LabeledDataset:
    samples: list[Sample] = field(default_factory=list)
    split_tag: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]


def datasets_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    if len(a) != len(b) or a.split_tag != b.split_tag:
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.image_id != sb.image_id or sa.boxes != sb.boxes:
            return False
        if sa.image.shape != sb.image.shape or not np.array_equal(sa.image, sb.image):
            return False
    return True


def _parse_row(line: str, lineno: int):
    parts = line.split()
    if len(parts) != 6:
        raise ValueError(f"annotation line {lineno}: expected 6 fields, got {len(parts)}")
    image_id = parts[0]
    try:
        class_id = int(parts[1])
        cx, cy, w, h = (float(v) for v in parts[2:])
    except ValueError as exc:
        raise ValueError(f"annotation line {lineno}: {exc}") from exc
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0):
        raise ValueError(f"annotation line {lineno}: box out of range")
    return image_id, BoundingBox(cx, cy, w, h, class_id=class_id)


def load_dataset(image_dir, annotations, split_tag: str = "train") -> LabeledDataset:
    """Read the annotation file and decode every referenced image."""
    by_image: dict[str, list[BoundingBox]] = {}
    order: list[str] = []
    with open(annotations, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            image_id, box = _parse_row(line, lineno)
            if image_id not in by_image:
                by_image[image_id] = []
                order.append(image_id)
            by_image[image_id].append(box)
    samples = []
    for image_id in order:
        path = os.path.join(image_dir, image_id + ".png")
        if not os.path.exists(path):
            raise FileNotFoundError(f"image file missing for image_id {image_id!r}: {path}")
        img = images.ensure_image(images.load_png(path))
        samples.append(Sample(image_id, img, by_image[image_id]))
    return LabeledDataset(samples, split_tag)


def save_dataset(ds: LabeledDataset, image_dir, annotations) -> None:
    os.makedirs(image_dir, exist_ok=True)
    for s in ds.samples:
        images.save_png(os.path.join(image_dir, s.image_id + ".png"), s.image)
    with open(annotations, "w", encoding="utf-8") as fh:
        fh.write("# image_id class_id cx cy w h\n")
        for s in ds.samples:
            for b in s.boxes:
                fh.write(f"{s.image_id} {b.class_id} {b.cx:.8f} {b.cy:.8f} {b.w:.8f} {b.h:.8f}\n")


def sample_subset(ds: LabeledDataset, m: int, seed: int) -> LabeledDataset:
    """Deterministic no-replacement subset of m samples."""
    n = len(ds)
    if not 1 <= m <= n:
        raise ValueError(f"subset size {m} out of range for dataset of {n}")
    idx = generator(seed, "subset", n).permutation(n)[:m]
    return LabeledDataset([ds.samples[i] for i in idx], ds.split_tag)
