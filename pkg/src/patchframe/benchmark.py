"""Benchmark the numba kernels against the pure-numpy fallback.

Times the hot paths (conv forward/backward at the detector's layer shapes,
bilinear gather/scatter at resize size) plus an end-to-end attack step,
and verifies both backends agree numerically.

    python -m patchframe.benchmark [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np


def _time(fn, repeat: int) -> float:
    fn()  # warm-up / JIT
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1000.0


def run(repeat: int = 20) -> list[tuple[str, float, float]]:
    from . import kernels_numba as knb
    from . import kernels_numpy as knp

    rng = np.random.default_rng(0)
    rows = []

    # detector layer shapes at batch 8
    layer_shapes = [
        ("conv 104x104x3->16 s2", (8, 104, 104, 3), (3, 3, 3, 16), 2, 1, 1),
        ("conv 52x52x16->32 s2", (8, 52, 52, 16), (3, 3, 16, 32), 2, 1, 1),
        ("conv 13x13x32->32 d4", (8, 13, 13, 32), (3, 3, 32, 32), 1, 4, 4),
    ]
    for name, xs, ws, stride, pad, dil in layer_shapes:
        x = rng.random(xs)
        w = rng.standard_normal(ws) * 0.1
        ref = knp.conv2d_forward(x, w, stride, pad, dil)
        gy = rng.random(ref.shape)
        assert np.allclose(ref, knb.conv2d_forward(x, w, stride, pad, dil), atol=1e-10)
        for tag, mod in (("numpy", knp), ("numba", knb)):
            fwd = _time(lambda m=mod: m.conv2d_forward(x, w, stride, pad, dil), repeat)
            bwd = _time(
                lambda m=mod: (
                    m.conv2d_grad_input(gy, w, x.shape, stride, pad, dil),
                    m.conv2d_grad_weights(gy, x, w.shape, stride, pad, dil),
                ),
                repeat,
            )
            rows.append((f"{name} [{tag}]", fwd, bwd))

    # bilinear gather/scatter at frame-resize size (144^2 -> 104^2)
    src = rng.random((144 * 144, 3))
    idx = rng.integers(0, 144 * 144, size=(104 * 104, 4)).astype(np.int64)
    wts = rng.random((104 * 104, 4))
    g = rng.random((104 * 104, 3))
    assert np.allclose(knp.gather4(src, idx, wts), knb.gather4(src, idx, wts), atol=1e-10)
    for tag, mod in (("numpy", knp), ("numba", knb)):
        fwd = _time(lambda m=mod: m.gather4(src, idx, wts), repeat)
        bwd = _time(lambda m=mod: m.gather4_grad(idx, wts, g, src.shape[0]), repeat)
        rows.append((f"gather4 104^2 taps [{tag}]", fwd, bwd))
    return rows


def attack_step_benchmark(repeat: int = 5) -> list[tuple[str, float]]:
    """End-to-end attack step under each backend (fresh subprocess import
    would be needed to switch; here we report the active backend only)."""
    from . import autograd as ag
    from .attack import AttackConfig, optimize_patch
    from .backend import BACKEND_NAME
    from .detector import ToyDetector, _init_params
    from .synth import generate_synthetic_dataset

    det = ToyDetector(_init_params(0))
    ds = generate_synthetic_dataset(8, seed=3)
    cfg = AttackConfig(steps=1, seed=0, batch_size=8)
    optimize_patch(det, ds, cfg)  # warm-up
    t0 = time.perf_counter()
    optimize_patch(det, ds, AttackConfig(steps=repeat, seed=0, batch_size=8))
    per_step = (time.perf_counter() - t0) / repeat * 1000.0
    return [(f"attack step batch=8 [{BACKEND_NAME}]", per_step)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    rows = run(args.repeat)
    print(f"{'kernel':40s} {'fwd ms':>9s} {'bwd ms':>9s}")
    for name, fwd, bwd in rows:
        print(f"{name:40s} {fwd:9.3f} {bwd:9.3f}")
    by_kernel = {}
    for name, fwd, bwd in rows:
        base, tag = name.rsplit(" [", 1)
        by_kernel.setdefault(base, {})[tag.rstrip("]")] = fwd + bwd
    print()
    for base, pair in by_kernel.items():
        if {"numpy", "numba"} <= set(pair):
            print(f"{base:40s} numba speedup x{pair['numpy'] / pair['numba']:.2f}")
    for name, ms in attack_step_benchmark():
        print(f"\n{name}: {ms:.1f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
