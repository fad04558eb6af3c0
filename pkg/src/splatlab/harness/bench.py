"""Benchmark the compiled kernel backend against the pure-numpy fallback."""

from __future__ import annotations

import time

import numpy as np

from .. import kernels
from ..splat import GaussianCloud, rasterize_backward, rasterize_with_cache
from ..synth import SceneSpec, make_cameras, sample_gt_points


def _timeit(fn, repeats: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_backends(n_gaussians: int = 800, size: int = 64, repeats: int = 5,
                   seed: int = 0):
    """Time rasterize forward/backward and grid NN on every backend."""
    scene = SceneSpec(kind="sphere", extent=1.0, seed=seed)
    pts = sample_gt_points(scene)
    rng = np.random.default_rng(seed)
    cloud = GaussianCloud.from_surface_points(
        pts, n_gaussians, jitter_sigma=0.02, init_scale=0.03,
        init_opacity=0.6, init_color=np.array([0.5, 0.5, 0.5]), rng=rng)
    cam = make_cameras(scene, 2, size, size)[0]
    gc = rng.standard_normal((size, size, 3))
    q = rng.standard_normal((4000, 3))
    r = rng.standard_normal((4000, 3))

    results = {}
    for name in kernels.available_backends():
        kb = kernels.get_backend(name)

        def fwd():
            rasterize_with_cache(cloud, cam, backend=kb)

        out, rc = rasterize_with_cache(cloud, cam, backend=kb)

        def bwd():
            cloud.zero_grad()
            rasterize_backward(rc, d_color=gc)

        results[name] = {
            "rasterize_forward_ms": 1e3 * _timeit(fwd, repeats),
            "rasterize_backward_ms": 1e3 * _timeit(bwd, repeats),
            "grid_nn_ms": 1e3 * _timeit(lambda: kb.grid_min_dists(q, r), repeats),
        }
    return results


def format_results(results: dict) -> str:
    lines = [f"{'backend':<10} {'forward ms':>12} {'backward ms':>12} {'grid NN ms':>12}"]
    for name, row in results.items():
        lines.append(f"{name:<10} {row['rasterize_forward_ms']:>12.2f} "
                     f"{row['rasterize_backward_ms']:>12.2f} "
                     f"{row['grid_nn_ms']:>12.2f}")
    if len(results) > 1 and "cython" in results and "python" in results:
        s = (results["python"]["rasterize_forward_ms"]
             / max(results["cython"]["rasterize_forward_ms"], 1e-9))
        lines.append(f"forward speedup (cython over python): {s:.1f}x")
    return "\n".join(lines)
