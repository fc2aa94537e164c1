"""Image tensors: HxWx3 float64 arrays with values in [0, 1].

Persistence goes through 8-bit PNG with round-half-even quantization
(numpy's rint), so save/load of an already-quantized image is lossless.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from . import autograd as ag


def ensure_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


def clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) / 255.0


def save_png(path, img01: np.ndarray) -> None:
    Image.fromarray(to_uint8(img01), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def pad_to_square(x, fill: float = 0.0):
    """Pad to NxN, N = max(H, W), content anchored top-left.

    Accepts a plain array or an autograd Var and returns the same kind.
    """
    is_var = isinstance(x, ag.Var)
    data = x.data if is_var else np.asarray(x, dtype=np.float64)
    h, w = data.shape[0], data.shape[1]
    n = max(h, w)
    if h == w:
        return x if is_var else data.copy()
    out = ag.embed(x if is_var else ag.Var(data), n, n, 0, 0, fill)
    return out if is_var else out.data


def resize(x, out_h: int, out_w: int):
    """Differentiable bilinear resize (half-pixel centers)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    is_var = isinstance(x, ag.Var)
    out = ag.resize_bilinear(x if is_var else ag.Var(np.asarray(x, dtype=np.float64)), out_h, out_w)
    return out if is_var else out.data
