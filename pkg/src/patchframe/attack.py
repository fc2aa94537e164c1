"""Person-hiding adversarial patch attacks.

Covers differentiable patch placement under random transforms (scale,
rotation, brightness/contrast/noise, optional TPS cloth warp), the three
patch losses (objectness, total variation, non-printability) and the
published attack variants: adv-patch, adv-tshirt (TPS on), adv-cloak
(per-prior summed objectness, usable with a detector ensemble).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autograd as ag
from . import tps
from .boxes import BoundingBox, PERSON_CLASS
from .data import LabeledDataset
from .images import clip01, ensure_image
from .optim import Adam
from .rng import generator

VARIANTS = ("adv-patch", "adv-tshirt", "adv-cloak")

SCALE_RANGE = (0.5, 1.0)
BRIGHTNESS_RANGE = (-0.1, 0.1)
CONTRAST_RANGE = (0.8, 1.2)
NOISE_RANGE = (-0.1, 0.1)
ROTATION_RANGE = (-20.0, 20.0)
TPS_GRID = 3
TPS_MAX_SHIFT = 0.06  # fraction of the patch side


@dataclass(frozen=True, eq=False)
class TransformSample:
    """One draw of the placement transform parameters."""

    scale: float = 0.75
    brightness: float = 0.0
    contrast: float = 1.0
    noise_amplitude: float = 0.0
    rotation_deg: float = 0.0
    tps_enabled: bool = False
    tps_displacements: np.ndarray | None = None


def canonical_transform() -> TransformSample:
    """Deterministic mid-range sample used when no EOT draw is wanted."""
    return TransformSample()


def sample_transform(rng: np.random.Generator, tps_enabled: bool = False, patch_side: int = 32) -> TransformSample:
    disp = None
    if tps_enabled:
        k = TPS_GRID * TPS_GRID
        disp = rng.uniform(-TPS_MAX_SHIFT, TPS_MAX_SHIFT, size=(k, 2)) * patch_side
    return TransformSample(
        scale=float(rng.uniform(*SCALE_RANGE)),
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        noise_amplitude=float(rng.uniform(*NOISE_RANGE)),
        rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
        tps_enabled=tps_enabled,
        tps_displacements=disp,
    )


def transform_for_image(image_id: str, seed: int, tps: bool = False, patch_side: int = 32) -> TransformSample:
    """Deterministic per-image transform so conditions stay paired across runs."""
    return sample_transform(generator(seed, "image-transform", image_id), tps, patch_side)


@dataclass(eq=False)
class PrintabilityPalette:
    colors: np.ndarray  # (K, 3) in [0, 1]

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.colors.shape[0] == 0:
            raise ValueError("palette must be non-empty")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValueError("palette colors must lie in [0, 1]")


def load_palette(path=None) -> PrintabilityPalette:
    """Load `r g b` triples, one per line; defaults to the bundled 30-color set."""
    if path is None:
        text = resources.files("patchframe").joinpath("assets/palette_30.txt").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    return PrintabilityPalette(np.asarray(rows))


@dataclass(eq=False)
class AdversarialPatch:
    """Square learnable pixel grid, clamped to [0, 1]."""

    values: np.ndarray
    variant: str = "adv-patch"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        s = self.values.shape
        if len(s) != 3 or s[0] != s[1] or s[2] != 3:
            raise ValueError(f"patch must be side x side x 3, got {s}")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()).hexdigest()

    @classmethod
    def gaussian_init(cls, side: int, rng: np.random.Generator, variant: str = "adv-patch"):
        return cls(clip01(rng.normal(0.5, 0.1, size=(side, side, 3))), variant)


@dataclass
class AttackConfig:
    variant: str = "adv-patch"
    steps: int = 200
    lr: float = 0.03
    loss_weights: tuple[float, float, float] = (1.0, 2.5, 0.01)  # (w_obj, w_tv, w_nps)
    patch_scale_factor: float = 0.3
    seed: int = 0
    patch_side: int = 32
    batch_size: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {VARIANTS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be >= 0")

    def as_dict(self) -> dict:
        d = dict(vars(self))
        d["loss_weights"] = list(self.loss_weights)
        return d


# ------------------------------------------------------------------
# compositing
# ------------------------------------------------------------------


def _patch_values_var(p) -> ag.Var:
    if isinstance(p, ag.Var):
        return p
    if isinstance(p, AdversarialPatch):
        return ag.Var(p.values)
    return ag.Var(ensure_image(np.asarray(p, dtype=np.float64)))


def _adjusted_patch(pv: ag.Var, t: TransformSample) -> ag.Var:
    adj = ag.clip(pv * t.contrast + (t.brightness + t.noise_amplitude), 0.0, 1.0)
    if t.tps_enabled and t.tps_displacements is not None:
        adj = tps.warp_patch(adj, t.tps_displacements, TPS_GRID)
    return adj


def _box_geometry(h, w, box: BoundingBox, t: TransformSample, side: int, scale_factor: float):
    """Footprint rows + bilinear taps into the patch for one person box."""
    bw, bh = box.w * w, box.h * h
    s_px = scale_factor * t.scale * min(bw, bh)
    if s_px < 2.0:
        return None
    cx, cy = box.cx * w, box.cy * h
    half = s_px * math.sqrt(2.0) / 2.0 + 1.0
    r0, r1 = max(0, int(math.floor(cy - half))), min(h - 1, int(math.ceil(cy + half)))
    c0, c1 = max(0, int(math.floor(cx - half))), min(w - 1, int(math.ceil(cx + half)))
    if r1 < r0 or c1 < c0:
        return None
    yy, xx = np.mgrid[r0 : r1 + 1, c0 : c1 + 1].astype(np.float64)
    dy = yy + 0.0 - cy
    dx = xx + 0.0 - cx
    th = math.radians(t.rotation_deg)
    # inverse rotation into patch space, then scale to patch pixels
    u = (math.cos(th) * dx + math.sin(th) * dy) * (side / s_px)
    v = (-math.sin(th) * dx + math.cos(th) * dy) * (side / s_px)
    pi = v + (side - 1.0) / 2.0
    pj = u + (side - 1.0) / 2.0
    inside = (pi >= -0.5) & (pi <= side - 0.5) & (pj >= -0.5) & (pj <= side - 0.5)
    if not inside.any():
        return None
    rows = (yy[inside] * w + xx[inside]).astype(np.int64)
    idx, wts = ag._point_taps(pi[inside].ravel(), pj[inside].ravel(), side, side)
    return rows, idx, wts


def patch_footprint(shape_hw, boxes, t: TransformSample, side: int, scale_factor: float = 0.3) -> np.ndarray:
    """Boolean mask of pixels apply_patch may modify."""
    h, w = shape_hw
    mask = np.zeros((h, w), dtype=bool)
    for box in boxes:
        if box.class_id != PERSON_CLASS:
            continue
        geom = _box_geometry(h, w, box, t, side, scale_factor)
        if geom is None:
            continue
        mask.reshape(-1)[geom[0]] = True
    return mask


def apply_patch(x, boxes, p, t: TransformSample, scale_factor: float = 0.3):
    """Composite the transformed patch onto every person box.

    Differentiable w.r.t. patch values and untouched pixels of x; pixels
    outside the patch footprints are returned bit-exactly.
    """
    track = isinstance(x, ag.Var) or isinstance(p, ag.Var)
    xv = x if isinstance(x, ag.Var) else ag.Var(ensure_image(x))
    pv = _patch_values_var(p)
    side = pv.data.shape[0]
    h, w = xv.data.shape[0], xv.data.shape[1]
    person_boxes = [b for b in boxes if b.class_id == PERSON_CLASS]
    if not person_boxes:
        return xv if track else xv.data.copy()
    adj = _adjusted_patch(pv, t)
    flat = ag.reshape(adj, (side * side, 3))
    out = xv
    for box in person_boxes:
        geom = _box_geometry(h, w, box, t, side, scale_factor)
        if geom is None:
            continue
        rows, idx, wts = geom
        vals = ag.gather4(flat, idx, wts)
        out = ag.scatter_rows(out, vals, rows)
    return out if track else out.data


# ------------------------------------------------------------------
# losses
# ------------------------------------------------------------------


def loss_tv(p) -> float | ag.Var:
    """Smoothed isotropic total variation over cells with both neighbors.

    sum_{i,j} sqrt((p[i,j]-p[i+1,j])^2 + (p[i,j]-p[i,j+1])^2 + eps) per
    channel, eps = 1e-8.
    """
    track = isinstance(p, ag.Var)
    pv = _patch_values_var(p)
    if pv.data.shape[0] < 2:
        raise ValueError("TV loss needs a patch of side >= 2")
    a = pv[:-1, :-1, :]
    down = pv[1:, :-1, :]
    right = pv[:-1, 1:, :]
    tv = ag.ssum(ag.sqrt((a - down) ** 2.0 + (a - right) ** 2.0 + 1e-8))
    return tv if track else tv.item()


def loss_nps(p, palette: PrintabilityPalette) -> float | ag.Var:
    """Sum over pixels of the Euclidean distance to the nearest palette color."""
    track = isinstance(p, ag.Var)
    pv = _patch_values_var(p)
    side = pv.data.shape[0]
    flat = ag.reshape(pv, (side * side, 1, 3))
    diff = flat - palette.colors[None, :, :]
    dists = ag.sqrt(ag.ssum(diff * diff, axis=2))
    total = ag.ssum(ag.amin_axis(dists, axis=1))
    return total if track else total.item()


def _field_loss(d, composite: ag.Var, reduce: str) -> ag.Var:
    scores = d.objectness_var(composite)
    if reduce == "max":
        return ag.maximum_scalar(ag.vmax(scores), 0.0)
    return ag.ssum(ag.maximum_scalar(scores, 0.0))


def loss_obj(d, x, boxes, p, t: TransformSample, scale_factor: float = 0.3, reduce: str = "max"):
    """Objectness loss of the patched image.

    A single detector gives the clamped per-image maximum; a detector list
    gives the ensemble form: sum over detectors of per-prior clamped
    scores. Differentiable w.r.t. the patch.
    """
    detectors = d if isinstance(d, (list, tuple)) else None
    if detectors is not None and len(detectors) == 0:
        raise ValueError("detector ensemble must be non-empty")
    track = isinstance(p, ag.Var) or isinstance(x, ag.Var)
    composite = apply_patch(
        x if isinstance(x, ag.Var) else ag.Var(ensure_image(x)),
        boxes,
        p,
        t,
        scale_factor,
    )
    if detectors is None:
        out = _field_loss(d, composite, reduce)
    else:
        total = _field_loss(detectors[0], composite, "sum")
        for det in detectors[1:]:
            total = total + _field_loss(det, composite, "sum")
        out = total
    return out if track else out.item()


# ------------------------------------------------------------------
# optimization
# ------------------------------------------------------------------


def optimize_patch(
    d,
    train: LabeledDataset,
    cfg: AttackConfig,
    frame=None,
    palette: PrintabilityPalette | None = None,
    on_step=None,
) -> AdversarialPatch:
    """Adam-optimize a shared patch over the training images.

    Each step draws a fresh TransformSample and image batch; with `frame`
    given, every forward pass composes patch first, then the frozen frame
    (the adaptive-attack forward ordering).
    """
    from .defense import apply_frame

    if len(train) == 0:
        raise ValueError("training dataset is empty")
    palette = palette or load_palette()
    w_obj, w_tv, w_nps = cfg.loss_weights
    reduce = "sum" if cfg.variant == "adv-cloak" else "max"
    use_tps = cfg.variant == "adv-tshirt"
    values = AdversarialPatch.gaussian_init(cfg.patch_side, generator(cfg.seed, "patch-init"), cfg.variant).values
    adam = Adam({"p": values}, cfg.lr)
    n_px = float(cfg.patch_side * cfg.patch_side)
    n = len(train)
    for step in range(cfg.steps):
        t = sample_transform(generator(cfg.seed, "eot", step), use_tps, cfg.patch_side)
        batch_idx = generator(cfg.seed, "batch", step).choice(n, size=min(cfg.batch_size, n), replace=False)
        pv = ag.Var(values, requires_grad=True)
        terms = []
        for i in batch_idx:
            s = train.samples[int(i)]
            composite = apply_patch(ag.Var(s.image), s.boxes, pv, t, cfg.patch_scale_factor)
            if frame is not None:
                composite = apply_frame(composite, frame)
            if isinstance(d, (list, tuple)):
                if len(d) == 0:
                    raise ValueError("detector ensemble must be non-empty")
                term = _field_loss(d[0], composite, "sum")
                for det in d[1:]:
                    term = term + _field_loss(det, composite, "sum")
            else:
                term = _field_loss(d, composite, reduce)
            terms.append(term)
        loss = ag.smean(ag.stack(terms)) * w_obj
        if w_tv > 0.0:
            loss = loss + loss_tv(pv) * (w_tv / n_px)
        if w_nps > 0.0:
            loss = loss + loss_nps(pv, palette) * (w_nps / n_px)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite attack loss at step {step}")
        loss.backward()
        adam.step({"p": pv.grad})
        np.clip(values, 0.0, 1.0, out=values)
        if on_step is not None:
            on_step(step, t, loss.item())
    return AdversarialPatch(values.copy(), cfg.variant)
