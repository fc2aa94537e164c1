"""Thin plate spline warping for non-rigid patch deformation.

The warp is built backward: given control points c_k and target offsets
d_k, a TPS interpolant is fitted through (c_k + d_k) -> c_k, giving for
every output pixel the source location to sample. Content at a control
point therefore lands exactly on its target, zero displacements give the
identity, and a uniform displacement reduces to a pure translation.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag


def control_grid(k: int = 3) -> np.ndarray:
    """k x k control points in pixel-free normalized [0, 1]^2, (K, 2) as (y, x)."""
    if k < 2:
        raise ValueError("control grid needs at least 2 points per side")
    axis = np.linspace(0.0, 1.0, k)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, with U(0) = 0
    out = np.zeros_like(r2)
    pos = r2 > 0.0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


def tps_fit(points: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the TPS system through (points -> values).

    Returns (w, a): kernel coefficients (K, d) and affine part (3, d).
    Raises on degenerate (collinear or duplicated) control configurations.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    k = points.shape[0]
    if k < 3:
        raise ValueError("TPS needs at least 3 control points")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    kmat = _kernel(d2)
    p = np.concatenate([np.ones((k, 1)), points], axis=1)
    lmat = np.zeros((k + 3, k + 3))
    lmat[:k, :k] = kmat
    lmat[:k, k:] = p
    lmat[k:, :k] = p.T
    rhs = np.zeros((k + 3, values.shape[1]))
    rhs[:k] = values
    if np.linalg.matrix_rank(p) < 3:
        raise ValueError("degenerate TPS control configuration (collinear points)")
    try:
        sol = np.linalg.solve(lmat, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate TPS control configuration") from exc
    return sol[:k], sol[k:]


def tps_eval(points: np.ndarray, w: np.ndarray, a: np.ndarray, query: np.ndarray) -> np.ndarray:
    d2 = np.sum((query[:, None, :] - points[None, :, :]) ** 2, axis=2)
    return _kernel(d2) @ w + np.concatenate([np.ones((query.shape[0], 1)), query], axis=1) @ a


def source_field(side: int, displacements: np.ndarray, grid_k: int = 3) -> np.ndarray:
    """Per-pixel source coordinates (side, side, 2) as float (y, x).

    displacements: (K, 2) target offsets in patch pixels, (dy, dx) per
    control point of the grid_k x grid_k grid.
    """
    displacements = np.asarray(displacements, dtype=np.float64)
    ctrl = control_grid(grid_k) * (side - 1.0)
    if displacements.shape != ctrl.shape:
        raise ValueError(f"displacements must be {ctrl.shape}, got {displacements.shape}")
    moved = ctrl + displacements
    w, a = tps_fit(moved, ctrl - moved)  # offset back to the source
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    query = np.stack([ys.ravel(), xs.ravel()], axis=1)
    offsets = tps_eval(moved, w, a, query)
    return (query + offsets).reshape(side, side, 2)


def warp_patch(patch, displacements: np.ndarray, grid_k: int = 3):
    """Warp a square patch by the TPS field; differentiable w.r.t. pixels."""
    is_var = isinstance(patch, ag.Var)
    pv = patch if is_var else ag.Var(np.asarray(patch, dtype=np.float64))
    side = pv.data.shape[0]
    if pv.data.shape[1] != side:
        raise ValueError("TPS warp expects a square patch")
    src = source_field(side, displacements, grid_k)
    out = ag.sample_points(pv, src[:, :, 0].ravel(), src[:, :, 1].ravel())
    out = ag.reshape(out, (side, side, pv.data.shape[2]))
    return out if is_var else out.data
