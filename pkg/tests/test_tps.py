"""Thin plate spline warp behavior."""

import numpy as np
import pytest

from patchframe.tps import control_grid, source_field, tps_fit, warp_patch


def test_zero_displacement_is_identity():
    rng = np.random.default_rng(0)
    patch = rng.random((24, 24, 3))
    out = warp_patch(patch, np.zeros((9, 2)))
    assert np.allclose(out, patch, atol=1e-6)


def test_uniform_translation_moves_content():
    patch = np.zeros((32, 32, 3))
    patch[12:20, 12:20] = 1.0
    shift = np.full((9, 2), 4.0)  # +4 px down and right
    out = warp_patch(patch, shift)
    assert np.allclose(out[16:24, 16:24], 1.0, atol=1e-6)
    assert out[12:14, 12:14].max() < 1e-6


def test_control_points_map_to_targets():
    # the warp field evaluated at a moved control point must source from
    # the original control point location (within 0.5 px)
    from patchframe.tps import tps_eval

    rng = np.random.default_rng(4)
    side = 32
    disp = rng.uniform(-2.0, 2.0, size=(9, 2))
    ctrl = control_grid(3) * (side - 1.0)
    moved = ctrl + disp
    w, a = tps_fit(moved, ctrl - moved)
    back = tps_eval(moved, w, a, moved) + moved
    assert np.abs(back - ctrl).max() < 0.5


def test_source_field_shape_and_identity_interior():
    src = source_field(20, np.zeros((9, 2)))
    assert src.shape == (20, 20, 2)
    ys, xs = np.mgrid[0:20, 0:20].astype(float)
    assert np.allclose(src[:, :, 0], ys, atol=1e-9)
    assert np.allclose(src[:, :, 1], xs, atol=1e-9)


def test_degenerate_control_points_error():
    pts = np.stack([np.linspace(0, 1, 5), np.linspace(0, 1, 5)], axis=1)  # collinear
    with pytest.raises(ValueError):
        tps_fit(pts, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        tps_fit(pts[:2], np.zeros((2, 2)))


def test_warp_gradient_flows_to_patch():
    from helpers import check_gradient
    from patchframe import autograd as ag

    rng = np.random.default_rng(5)
    patch = rng.random((16, 16, 3))
    disp = rng.uniform(-1.5, 1.5, size=(9, 2))
    proj = rng.random((16, 16, 3))

    def f_var(v):
        return ag.ssum(warp_patch(v, disp) * proj)

    def f_plain(arr):
        return float(np.sum(warp_patch(arr, disp) * proj))

    assert check_gradient(f_var, f_plain, patch, n_coords=12) < 1e-5
