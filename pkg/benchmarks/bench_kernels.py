"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel runs once per backend before timing so JIT compilation is not
counted. Outputs are compared across backends and the largest difference is
reported next to the timings.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from semismd import _accel
from semismd.synthrig import default_rig, generate_scene, render_camera


def grid_sample_case(rng, batch=8, channels=3, h=32, w=48):
    image = rng.uniform(size=(batch, channels, h, w)).astype(np.float32)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    coords = np.stack([xs, ys], -1)[None] + rng.normal(0, 2.0, (batch, h, w, 2)).astype(np.float32)
    grad = rng.normal(size=(batch, channels, h, w)).astype(np.float32)
    return image, coords, grad


def kernels(rng):
    image, coords, grad = grid_sample_case(rng)
    rig = default_rig(64, 96)
    scene = generate_scene(3, 40.0)
    intr = rig.cameras[0].intrinsics
    extr = rig.cameras[0].extrinsic
    return {
        "grid_sample forward (8x3x32x48)": lambda: _accel.grid_sample_forward(image, coords),
        "grid_sample backward (8x3x32x48)": lambda: _accel.grid_sample_backward(image, coords, grad),
        "render one camera (64x96 ray cast)": lambda: render_camera(scene, intr, extr).depth,
    }


def _flatten(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64) for o in out if o is not None]
    return [np.asarray(out, dtype=np.float64)]


def max_diff(a, b) -> float:
    worst = 0.0
    for x, y in zip(_flatten(a), _flatten(b)):
        both = np.isfinite(x) & np.isfinite(y)
        if not np.array_equal(np.isfinite(x), np.isfinite(y)):
            return float("inf")
        if both.any():
            worst = max(worst, float(np.abs(x[both] - y[both]).max()))
    return worst


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    backends = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
    previous = _accel.backend()
    try:
        cases = kernels(np.random.default_rng(0))
        print(f"{'kernel':<38}" + "".join(f"{b + ' ms':>12}" for b in backends)
              + ("     speed-up   max |diff|" if len(backends) == 2 else ""))
        for name, fn in cases.items():
            times, outs = [], []
            for b in backends:
                _accel.set_backend(b)
                outs.append(fn())
                times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
            line = f"{name:<38}" + "".join(f"{t:12.3f}" for t in times)
            if len(backends) == 2:
                line += f"{times[0] / times[1]:12.1f}x {max_diff(*outs):12.2e}"
            print(line)
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
