"""Shared test utilities: gradient checking and stub detector handles."""

from __future__ import annotations

import numpy as np

from patchframe import autograd as ag


def finite_diff_grad(f, x: np.ndarray, coords, h: float = 1e-6) -> dict:
    """Central finite differences of scalar f(x) at the given flat coords."""
    out = {}
    flat = x.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradient(f_var, f_plain, x: np.ndarray, n_coords: int = 20, h: float = 1e-6, seed: int = 0):
    """Compare autograd gradients of f_var against finite differences of f_plain.

    f_var(Var) -> Var scalar; f_plain(ndarray) -> float. Returns the worst
    relative error over n_coords random coordinates.
    """
    rng = np.random.default_rng(seed)
    xv = ag.Var(x.copy(), requires_grad=True)
    out = f_var(xv)
    out.backward()
    grad = xv.grad.reshape(-1)
    coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    fd = finite_diff_grad(f_plain, x.copy(), coords, h)
    return max(relative_error(grad[i], fd[i]) for i in coords)


class FieldStub:
    """Detector stub whose objectness field is a fixed grid, input-ignored."""

    kind = "stub"
    grid = 13
    priors_per_cell = 1
    native_size = 104
    preprocess = "resize"
    detection_threshold = 0.5
    nms_iou = 0.45

    def __init__(self, field: np.ndarray):
        self.field = np.asarray(field, dtype=np.float64)

    def objectness_var(self, x):
        return ag.Var(self.field.reshape(self.field.shape[0], self.field.shape[1], -1))


class MeanFieldStub:
    """Field is constant at the input image's mean; differentiable."""

    kind = "stub"
    grid = 13
    priors_per_cell = 1
    native_size = 104
    preprocess = "resize"
    detection_threshold = 0.5
    nms_iou = 0.45

    def __init__(self, grid: int = 13, gain: float = 1.0):
        self.grid = grid
        self.gain = gain

    def objectness_var(self, x):
        xv = x if isinstance(x, ag.Var) else ag.Var(np.asarray(x, dtype=np.float64))
        m = ag.smean(xv) * self.gain
        ones = np.ones((self.grid, self.grid, 1))
        return ag.mul(ag.reshape(m, (1, 1, 1)), ones)


class RawStub:
    """Detector stub with a preset (13, 13, 5) raw logit map."""

    kind = "stub"
    grid = 13
    priors_per_cell = 1
    native_size = 104
    preprocess = "resize"

    def __init__(self, raw: np.ndarray, detection_threshold: float = 0.5, nms_iou: float = 0.45):
        self.raw = np.asarray(raw, dtype=np.float64)
        self.detection_threshold = detection_threshold
        self.nms_iou = nms_iou

    def raw_single(self, x):
        return ag.Var(self.raw)

    def objectness_var(self, x):
        return ag.sigmoid(ag.Var(self.raw[:, :, 4:5]))
