"""Compiled backend vs. pure-numpy fallback: identical semantics, speed."""

import numpy as np
import pytest

from splatlab import kernels
from splatlab.harness.bench import bench_backends, format_results

HAVE_CYTHON = "cython" in kernels.available_backends()

pytestmark = pytest.mark.skipif(not HAVE_CYTHON,
                                reason="compiled backend not built")


def _random_splats(rng, m, size):
    means2d = rng.uniform(-3, size + 3, (m, 2))
    a = rng.uniform(0.5, 4.0, m)
    c = rng.uniform(0.5, 4.0, m)
    b = rng.uniform(-0.6, 0.6, m) * np.sqrt(a * c)
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    depths = rng.uniform(0.5, 6.0, m)
    opac = rng.uniform(0.05, 0.98, m)
    colors = rng.uniform(0, 1, (m, 3))
    normals = rng.standard_normal((m, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    radii = np.stack([3 * np.sqrt(a), 3 * np.sqrt(c)], axis=1)
    return means2d, conic, depths, opac, colors, normals, radii


class TestForwardEquivalence:
    @pytest.mark.parametrize("seed,m,size,tile", [(0, 30, 32, 16), (1, 120, 48, 16),
                                                  (2, 50, 33, 8), (3, 5, 16, 32)])
    def test_outputs_match(self, seed, m, size, tile):
        rng = np.random.default_rng(seed)
        args = _random_splats(rng, m, size)
        cy = kernels.get_backend("cython")
        py = kernels.get_backend("python")
        o1 = cy.rasterize_forward(*args, size, size, tile)
        o2 = py.rasterize_forward(*args, size, size, tile)
        names = ("color", "depth", "nacc", "alpha", "final_t", "ncontrib")
        for a, b, name in zip(o1, o2, names):
            np.testing.assert_allclose(
                np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
                rtol=1e-12, atol=1e-13, err_msg=name)

    def test_ncontrib_and_termination_agree(self):
        rng = np.random.default_rng(4)
        # stack nearly-opaque splats to force the transmittance cutoff
        args = list(_random_splats(rng, 40, 16))
        args[3] = np.full(40, 0.9999)
        cy = kernels.get_backend("cython")
        py = kernels.get_backend("python")
        o1 = cy.rasterize_forward(*args, 16, 16, 16)
        o2 = py.rasterize_forward(*args, 16, 16, 16)
        np.testing.assert_array_equal(o1[5], o2[5])
        assert o1[5].max() < 40  # termination actually kicked in


class TestBackwardEquivalence:
    def test_gradients_match(self):
        rng = np.random.default_rng(5)
        size = 24
        args = _random_splats(rng, 60, size)
        gc = rng.standard_normal((size, size, 3))
        gd = rng.standard_normal((size, size))
        gn = rng.standard_normal((size, size, 3))
        ga = rng.standard_normal((size, size))
        cy = kernels.get_backend("cython")
        py = kernels.get_backend("python")
        g1 = cy.rasterize_backward(*args, size, size, gc, gd, gn, ga, 16)
        g2 = py.rasterize_backward(*args, size, size, gc, gd, gn, ga, 16)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


class TestGridEquivalence:
    def test_min_dists_match_bruteforce(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            q = rng.standard_normal((int(rng.integers(5, 200)), 3))
            r = rng.standard_normal((int(rng.integers(5, 200)), 3)) * 2.0
            bf = np.sqrt(((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)).min(1)
            for name in kernels.available_backends():
                got = kernels.get_backend(name).grid_min_dists(q, r)
                np.testing.assert_array_equal(got, bf)

    def test_far_query_points(self):
        rng = np.random.default_rng(7)
        r = rng.standard_normal((50, 3))
        q = np.array([[500.0, -300.0, 200.0], [0.0, 0.0, 0.0]])
        bf = np.sqrt(((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)).min(1)
        for name in kernels.available_backends():
            got = kernels.get_backend(name).grid_min_dists(q, r)
            np.testing.assert_allclose(got, bf, rtol=1e-12)

    def test_coincident_reference_points(self):
        r = np.tile([[1.0, 2.0, 3.0]], (20, 1))
        q = np.array([[1.0, 2.0, 3.0], [2.0, 2.0, 3.0]])
        for name in kernels.available_backends():
            got = kernels.get_backend(name).grid_min_dists(q, r)
            np.testing.assert_allclose(got, [0.0, 1.0], atol=1e-15)


class TestBenchmark:
    def test_bench_smoke_and_report(self):
        results = bench_backends(n_gaussians=80, size=24, repeats=1)
        assert "cython" in results and "python" in results
        for row in results.values():
            assert all(v >= 0 for v in row.values())
        text = format_results(results)
        assert "speedup" in text
