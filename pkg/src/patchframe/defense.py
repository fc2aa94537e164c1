"""White-frame defense: compositing and the two alternating optimizations.

A frame is a learnable border pattern appended strictly outside the image
(the interior carries no learnable values). The single-frame optimizer
alternates patch steps (objectness descent on the frame-composited image)
with frame steps that pull the defended-attacked objectness field back
toward the clean field. The universal optimizer runs the same game over an
image subset with a greedy stopping rule on the empirical defense error.

Thicknesses are spoken in 416-relative units everywhere a config is
involved and converted to working-resolution pixels on first use.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attack import (
    AdversarialPatch,
    AttackConfig,
    TransformSample,
    apply_patch,
    canonical_transform,
    sample_transform,
    transform_for_image,
)
from .data import LabeledDataset
from .images import clip01, ensure_image
from .optim import Adam
from .rng import generator

REFERENCE_SIZE = 416  # thickness units are relative to this input size


def scale_thickness(thickness_416: float, canonical_h: int) -> int:
    """416-relative thickness -> pixels at the working resolution."""
    return max(0, int(round(thickness_416 * canonical_h / REFERENCE_SIZE)))


@dataclass(eq=False)
class WhiteFrame:
    """Border pattern on an (H+2t) x (W+2t) canvas with a zeroed interior."""

    thickness_px: int
    canonical_hw: tuple[int, int]
    pattern: np.ndarray
    universal: bool = False
    thickness_416: float = 0.0
    err_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        h, w = self.canonical_hw
        t = self.thickness_px
        expect = (h + 2 * t, w + 2 * t, 3)
        if self.pattern.shape != expect:
            raise ValueError(f"pattern shape {self.pattern.shape} != {expect}")

    def canvas_hw(self) -> tuple[int, int]:
        h, w = self.canonical_hw
        return h + 2 * self.thickness_px, w + 2 * self.thickness_px

    def interior_rows(self) -> np.ndarray:
        h, w = self.canonical_hw
        t = self.thickness_px
        ch, cw = self.canvas_hw()
        yy, xx = np.mgrid[t : t + h, t : t + w]
        return (yy * cw + xx).ravel()

    def border_mask(self) -> np.ndarray:
        ch, cw = self.canvas_hw()
        m = np.ones((ch, cw), dtype=bool)
        t = self.thickness_px
        if t > 0:
            m[t:-t, t:-t] = False
        else:
            m[:] = False
        return m

    def zero_interior(self) -> None:
        h, w = self.canonical_hw
        t = self.thickness_px
        if t > 0:
            self.pattern[t : t + h, t : t + w] = 0.0
        else:
            self.pattern[:] = 0.0

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.pattern, dtype="<f8").tobytes()).hexdigest()

    @classmethod
    def gaussian_init(
        cls,
        thickness_416: float,
        canonical_hw: tuple[int, int],
        rng: np.random.Generator,
        universal: bool = False,
    ) -> "WhiteFrame":
        t = scale_thickness(thickness_416, canonical_hw[0])
        h, w = canonical_hw
        pattern = clip01(rng.normal(0.5, 0.1, size=(h + 2 * t, w + 2 * t, 3)))
        frame = cls(t, canonical_hw, pattern, universal=universal, thickness_416=thickness_416)
        frame.zero_interior()
        return frame


@dataclass
class DefenseConfig:
    thickness: float = 80.0  # 416-relative
    epochs: int = 10  # T
    patch_steps: int = 30  # T_p
    frame_steps: int = 30  # T_w
    delta: float = 0.5
    lr_frame: float = 0.03
    norm_k: int = 2
    subset_m: int = 32
    seed: int = 0
    sweep_cap: int = 50
    # frame degrees of freedom live on a coarse grid upsampled to the
    # canvas; full-resolution border pixels admit detector-specific
    # high-frequency solutions that do not survive new images, while a
    # printable low-frequency pattern does (0 or 1 disables)
    coarse_stride: int = 8
    # trust region: per-value cap on how far the frame may drift from its
    # initialization; unbounded descent on the field distance finds
    # detector-specific saturated patterns that defend worse than they
    # score (0 disables)
    max_drift: float = 0.15

    def __post_init__(self):
        if min(self.epochs, self.patch_steps, self.frame_steps) < 1:
            raise ValueError("epochs, patch_steps and frame_steps must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.norm_k not in (1, 2):
            raise ValueError("norm_k must be 1 or 2")

    def as_dict(self) -> dict:
        return dict(vars(self))


# ------------------------------------------------------------------
# compositing and the defense loss
# ------------------------------------------------------------------


def apply_frame(x, w: WhiteFrame):
    """Append the border: (H, W) -> (H+2t, W+2t), interior bit-identical to x.

    Differentiable w.r.t. both the frame pattern and the image interior.
    Detector preprocessing (resize / pad-square) is the detector's job.
    """
    track = isinstance(x, ag.Var)
    xv = x if track else ag.Var(ensure_image(x))
    h, wd = xv.data.shape[0], xv.data.shape[1]
    if (h, wd) != tuple(w.canonical_hw):
        raise ValueError(f"image {h}x{wd} does not match frame canonical size {w.canonical_hw}")
    if w.thickness_px == 0:
        return xv if track else xv.data.copy()
    base = ag.Var(w.pattern)
    out = ag.scatter_rows(base, ag.reshape(xv, (h * wd, 3)), w.interior_rows())
    return out if track else out.data


def apply_frame_var(x, pattern_var: ag.Var, frame: WhiteFrame) -> ag.Var:
    """apply_frame with an explicit learnable pattern Var (frame training)."""
    xv = x if isinstance(x, ag.Var) else ag.Var(ensure_image(x))
    h, wd = xv.data.shape[0], xv.data.shape[1]
    if (h, wd) != tuple(frame.canonical_hw):
        raise ValueError(f"image {h}x{wd} does not match frame canonical size {frame.canonical_hw}")
    if frame.thickness_px == 0:
        return xv
    return ag.scatter_rows(pattern_var, ag.reshape(xv, (h * wd, 3)), frame.interior_rows())


def resample_field_to_clean_grid(field: np.ndarray | ag.Var, t_px: int, clean_hw) -> np.ndarray | ag.Var:
    """Sample the framed image's grid field at the cells of the clean grid.

    Cell centers of the clean image map into the framed canvas through the
    border inset; the defended field is bilinearly sampled there. Used for
    reporting (maps compared in clean-grid coordinates).
    """
    track = isinstance(field, ag.Var)
    fv = field if track else ag.Var(np.asarray(field, dtype=np.float64))
    gh, gw = fv.data.shape[0], fv.data.shape[1]
    if t_px == 0:
        return field
    h, w = clean_hw
    uy = (np.arange(gh) + 0.5) / gh
    ux = (np.arange(gw) + 0.5) / gw
    fy = (t_px + uy * h) / (h + 2 * t_px) * gh - 0.5
    fx = (t_px + ux * w) / (w + 2 * t_px) * gw - 0.5
    yy, xx = np.meshgrid(fy, fx, indexing="ij")
    out = ag.sample_points(fv, yy.ravel(), xx.ravel())
    out = ag.reshape(out, (gh, gw, fv.data.shape[2]))
    return out if track else out.data


def _interior_pushforward(f_clean, t_px: int, clean_hw, grid_hw):
    """Clean field sampled at the framed grid's interior cell positions.

    Returns (target, mask): for every defended-grid cell whose center maps
    inside the clean grid, the clean field's value there. A frame that
    leaves interior predictions untouched matches this target exactly, so
    the comparison carries no geometric residual.
    """
    gh, gw = grid_hw
    h, w = clean_hw
    uy = ((np.arange(gh) + 0.5) / gh * (h + 2 * t_px) - t_px) / h
    ux = ((np.arange(gw) + 0.5) / gw * (w + 2 * t_px) - t_px) / w
    gy = uy * gh - 0.5
    gx = ux * gw - 0.5
    my = (gy >= 0.0) & (gy <= gh - 1.0)
    mx = (gx >= 0.0) & (gx <= gw - 1.0)
    yy, xx = np.meshgrid(gy[my], gx[mx], indexing="ij")
    target = ag.sample_points(f_clean, yy.ravel(), xx.ravel())
    mask = np.outer(my, mx)
    return target, mask


def prediction_distance(d, x_def, x_clean, k: int = 2):
    """k-norm between the objectness fields of the two inputs.

    When x_def is larger (framed), the clean field is pushed forward onto
    the framed grid's interior cells and the difference is taken there;
    sizes must differ by the same even margin on both axes. Differentiable
    through x_def.
    """
    if isinstance(d, (list, tuple)):
        raise ValueError("prediction distance is defined for a single detector handle")
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    track = isinstance(x_def, ag.Var) or isinstance(x_clean, ag.Var)
    xd = x_def if isinstance(x_def, ag.Var) else ag.Var(ensure_image(x_def))
    xc = x_clean if isinstance(x_clean, ag.Var) else ag.Var(ensure_image(x_clean))
    hd, wd = xd.data.shape[:2]
    hc, wc = xc.data.shape[:2]
    dh, dw = hd - hc, wd - wc
    if dh != dw or dh < 0 or dh % 2 != 0:
        raise ValueError(f"defended size {hd}x{wd} incompatible with clean size {hc}x{wc}")
    f_def = d.objectness_var(xd)
    f_clean = d.objectness_var(xc)
    if dh == 0:
        diff = f_def - f_clean
    else:
        gh, gw, p = f_def.data.shape
        target, mask = _interior_pushforward(f_clean, dh // 2, (hc, wc), (gh, gw))
        rows = np.flatnonzero(mask.ravel())
        picked = ag.getitem(ag.reshape(f_def, (gh * gw, p)), rows)
        diff = picked - target
    if k == 1:
        out = ag.ssum(ag.vabs(diff))
    else:
        out = ag.sqrt(ag.ssum(diff * diff))
    return out if track else out.item()


def loss_swf(
    d,
    x,
    boxes,
    p,
    w: WhiteFrame,
    k: int = 2,
    transform: TransformSample | None = None,
    scale_factor: float = 0.3,
):
    """Distance between the defended-attacked prediction and the clean one.

    Composition order: patch first, then frame (the threat-model nesting).
    """
    t = transform or canonical_transform()
    composite = apply_frame(apply_patch(x, boxes, p, t, scale_factor), w)
    return prediction_distance(d, composite, x, k)


def defense_error(d, X: LabeledDataset, p, w: WhiteFrame, k: int = 2, transform_for=None, scale_factor: float = 0.3) -> float:
    """Mean per-image defense loss over the subset (empirical Err(X))."""
    if len(X) == 0:
        raise ValueError("defense error needs a non-empty dataset")
    total = 0.0
    for s in X:
        t = transform_for(s) if transform_for is not None else None
        val = loss_swf(d, s.image, s.boxes, p, w, k, transform=t, scale_factor=scale_factor)
        total += val if not isinstance(val, ag.Var) else val.item()
    return total / len(X)


# ------------------------------------------------------------------
# learnable frame degrees of freedom
# ------------------------------------------------------------------


class FrameDof:
    """Frame pattern parameterized on a coarse grid, upsampled to the canvas.

    The materialized full-resolution pattern lives in frame.pattern; the
    optimizer moves the coarse values only.
    """

    def __init__(
        self,
        frame: WhiteFrame,
        stride: int,
        lr: float,
        rng: np.random.Generator | None = None,
        max_drift: float = 0.0,
    ):
        self.frame = frame
        ch, cw = frame.canvas_hw()
        if stride and stride > 1:
            self.shape = (max(2, -(-ch // stride)), max(2, -(-cw // stride)), 3)
        else:
            self.shape = (ch, cw, 3)
        if rng is not None:
            self.values = clip01(rng.normal(0.5, 0.1, size=self.shape))
        else:
            from .images import resize as _resize

            self.values = clip01(_resize(frame.pattern, self.shape[0], self.shape[1]))
        self.max_drift = float(max_drift)
        self.anchor = self.values.copy()
        self.adam = Adam({"w": self.values}, lr)
        self.materialize()

    @classmethod
    def gaussian_init(cls, thickness_416, canonical_hw, rng, lr, stride, universal=False, max_drift=0.0):
        t = scale_thickness(thickness_416, canonical_hw[0])
        h, w = canonical_hw
        frame = WhiteFrame(
            t, canonical_hw, np.zeros((h + 2 * t, w + 2 * t, 3)), universal=universal, thickness_416=thickness_416
        )
        return cls(frame, stride, lr, rng=rng, max_drift=max_drift)

    def pattern_var(self):
        """(dof Var, full-resolution pattern Var) with the graph between them."""
        cv = ag.Var(self.values, requires_grad=True)
        ch, cw = self.frame.canvas_hw()
        if self.shape[:2] != (ch, cw):
            full = ag.clip(ag.resize_bilinear(cv, ch, cw), 0.0, 1.0)
        else:
            full = ag.clip(cv, 0.0, 1.0)
        return cv, full

    def materialize(self):
        ch, cw = self.frame.canvas_hw()
        if self.shape[:2] != (ch, cw):
            from .images import resize as _resize

            self.frame.pattern[:] = clip01(_resize(self.values, ch, cw))
        else:
            self.frame.pattern[:] = clip01(self.values)
        self.frame.zero_interior()

    def step(self, grad):
        self.adam.step({"w": grad})
        if self.max_drift > 0.0:
            np.clip(self.values, self.anchor - self.max_drift, self.anchor + self.max_drift, out=self.values)
        np.clip(self.values, 0.0, 1.0, out=self.values)
        self.materialize()

    def snapshot(self) -> np.ndarray:
        return self.values.copy()

    def restore(self, snap: np.ndarray):
        self.values[:] = snap
        self.materialize()


# ------------------------------------------------------------------
# Algorithm 1: single white frame
# ------------------------------------------------------------------


def _patch_step(d, img, boxes, patch_values, adam_p, frame, t, scale_factor):
    pv = ag.Var(patch_values, requires_grad=True)
    composite = apply_patch(ag.Var(img), boxes, pv, t, scale_factor)
    if frame is not None:
        composite = apply_frame(composite, frame)
    loss = ag.maximum_scalar(ag.vmax(d.objectness_var(composite)), 0.0)
    val = loss.item()
    if not np.isfinite(val):
        raise RuntimeError("non-finite patch loss")
    loss.backward()
    adam_p.step({"p": pv.grad})
    np.clip(patch_values, 0.0, 1.0, out=patch_values)
    return val


def _frame_step(d, img, boxes, patch, dof: FrameDof, k, t, scale_factor):
    cv, full = dof.pattern_var()
    composite = apply_frame_var(apply_patch(ag.Var(img), boxes, patch, t, scale_factor), full, dof.frame)
    loss = prediction_distance(d, composite, ag.Var(img), k)
    val = loss.item()
    if not np.isfinite(val):
        raise RuntimeError("non-finite frame loss")
    loss.backward()
    dof.step(cv.grad)
    return val


def optimize_swf(
    d,
    x,
    boxes,
    cfg: DefenseConfig,
    attack_cfg: AttackConfig | None = None,
    on_step=None,
) -> tuple[WhiteFrame, AdversarialPatch]:
    """Alternating single-image game: T_p patch steps then T_w frame steps per epoch."""
    img = ensure_image(x)
    person_boxes = [b for b in boxes if b.class_id == 0]
    if not person_boxes:
        raise ValueError("single-frame defense needs at least one person box")
    acfg = attack_cfg or AttackConfig(seed=cfg.seed)
    dof = FrameDof.gaussian_init(
        cfg.thickness, img.shape[:2], generator(cfg.seed, "swf-frame-init"), cfg.lr_frame, cfg.coarse_stride,
        max_drift=cfg.max_drift,
    )
    frame = dof.frame
    patch_values = AdversarialPatch.gaussian_init(acfg.patch_side, generator(cfg.seed, "swf-patch-init")).values
    adam_p = Adam({"p": patch_values}, acfg.lr)
    frame_t = canonical_transform()
    for epoch in range(cfg.epochs):
        for i in range(cfg.patch_steps):
            t = sample_transform(generator(cfg.seed, "swf-eot", epoch, i), acfg.variant == "adv-tshirt", acfg.patch_side)
            try:
                val = _patch_step(d, img, boxes, patch_values, adam_p, frame, t, acfg.patch_scale_factor)
            except RuntimeError as exc:
                raise RuntimeError(f"epoch {epoch} patch step {i}: {exc}") from exc
            if on_step is not None:
                on_step("patch", epoch, i, val)
        for i in range(cfg.frame_steps):
            try:
                val = _frame_step(
                    d, img, boxes, AdversarialPatch(patch_values.copy()), dof, cfg.norm_k, frame_t, acfg.patch_scale_factor
                )
            except RuntimeError as exc:
                raise RuntimeError(f"epoch {epoch} frame step {i}: {exc}") from exc
            if on_step is not None:
                on_step("frame", epoch, i, val)
    np.clip(patch_values, 0.0, 1.0, out=patch_values)
    return frame, AdversarialPatch(patch_values.copy())


# ------------------------------------------------------------------
# Algorithm 2: universal white frame
# ------------------------------------------------------------------


def optimize_uwf(
    d,
    train: LabeledDataset,
    cfg: DefenseConfig,
    attack_cfg: AttackConfig | None = None,
    on_step=None,
    record_err=None,
) -> WhiteFrame:
    """Greedy universal-frame optimization over sampled subsets.

    Per epoch a fresh M-image subset is drawn (the optimization walks the
    training distribution), every subset image gets T_p shared-patch
    update steps, then the frame loop sweeps T_w frame steps per image
    while Err(X) >= delta, re-measured after each sweep, keeping the best
    iterate so Err never worsens across the loop. Hitting the sweep cap
    warns and moves on.
    """
    from .data import sample_subset
    from .rng import derive_seed

    if len(train) == 0:
        raise ValueError("training dataset is empty")
    if cfg.subset_m > len(train):
        raise ValueError(f"subset_m={cfg.subset_m} exceeds dataset size {len(train)}")
    hw = train.samples[0].image.shape[:2]
    for s in train:
        if s.image.shape[:2] != hw:
            raise ValueError("universal frame needs images of one canonical size")
    acfg = attack_cfg or AttackConfig(seed=cfg.seed)
    dof = FrameDof.gaussian_init(
        cfg.thickness, hw, generator(cfg.seed, "uwf-frame-init"), cfg.lr_frame, cfg.coarse_stride,
        universal=True, max_drift=cfg.max_drift,
    )
    frame = dof.frame
    patch_values = AdversarialPatch.gaussian_init(acfg.patch_side, generator(cfg.seed, "uwf-patch-init")).values
    adam_p = Adam({"p": patch_values}, acfg.lr)
    use_tps = acfg.variant == "adv-tshirt"

    def keyed_transform(s):
        return transform_for_image(s.image_id, cfg.seed, use_tps, acfg.patch_side)

    def err_now(X):
        return defense_error(
            d, X, AdversarialPatch(patch_values.copy()), frame, cfg.norm_k, keyed_transform, acfg.patch_scale_factor
        )

    if on_step is not None:
        on_step("init", -1, 0, float("nan"))
    trace: list[float] = []
    overall_best = (float("inf"), dof.snapshot())
    for epoch in range(cfg.epochs):
        X = sample_subset(train, cfg.subset_m, derive_seed(cfg.seed, "uwf-subset", epoch))
        for xi, s in enumerate(X):
            for i in range(cfg.patch_steps):
                t = sample_transform(generator(cfg.seed, "uwf-eot", epoch, xi, i), use_tps, acfg.patch_side)
                try:
                    val = _patch_step(d, s.image, s.boxes, patch_values, adam_p, frame, t, acfg.patch_scale_factor)
                except RuntimeError as exc:
                    raise RuntimeError(f"epoch {epoch} image {xi} patch step {i}: {exc}") from exc
                if on_step is not None:
                    on_step("patch", epoch, i, val)
        err = err_now(X)
        entry_err = err
        best_err, best_values = err, dof.snapshot()
        sweeps = 0
        while err >= cfg.delta and sweeps < cfg.sweep_cap:
            for s in X:
                t = keyed_transform(s)
                for i in range(cfg.frame_steps):
                    try:
                        val = _frame_step(
                            d, s.image, s.boxes, AdversarialPatch(patch_values.copy()), dof, cfg.norm_k, t, acfg.patch_scale_factor
                        )
                    except RuntimeError as exc:
                        raise RuntimeError(f"epoch {epoch} frame sweep {sweeps} step {i}: {exc}") from exc
                    if on_step is not None:
                        on_step("frame", epoch, i, val)
            sweeps += 1
            err = err_now(X)
            if err < best_err:
                best_err, best_values = err, dof.snapshot()
        # greedy exit: keep the best iterate so Err never worsens across the loop
        if best_err < err:
            dof.restore(best_values)
            err = best_err
        if record_err is not None and sweeps > 0:
            record_err(epoch, entry_err, err)
        if sweeps >= cfg.sweep_cap and err >= cfg.delta:
            warnings.warn(
                f"uwf epoch {epoch}: frame loop hit the sweep cap ({cfg.sweep_cap}) at Err={err:.4f} >= delta={cfg.delta}"
            )
        trace.append(float(err))
        if err < overall_best[0]:
            overall_best = (err, dof.snapshot())
    # return the greedy winner across epochs (epoch-end Err is the score)
    if overall_best[0] < trace[-1]:
        dof.restore(overall_best[1])
    frame.err_trace = trace
    return frame
