"""Gate and normal-supervision loss tests."""

import numpy as np
import pytest

from splatlab.imgcore import NormalMap, ScalarMap
from splatlab.normalcomp import (GateMask, LossWeights, gate, gradient_loss,
                                 normal_comp_backward, normal_gradient,
                                 normal_loss, total_loss)


def _unit_normals(rng, h, w):
    n = rng.standard_normal((h, w, 3))
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _nm(data, valid=None):
    if valid is None:
        valid = np.ones(data.shape[:2], dtype=bool)
    return NormalMap(data, valid)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.w_illum, w.w_normal, w.w_gradient, w.w_mvs) == (1.0, 0.15, 0.0015, 0.03)
        assert w.lam == 0.2 and w.threshold == 0.1

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(w_normal=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lam=1.2)


class TestGate:
    def test_all_below(self):
        m = gate(ScalarMap(np.zeros((4, 4))), 0.1)
        assert m.count == 0

    def test_exactly_threshold_is_ungated(self):
        m = gate(ScalarMap(np.full((3, 3), 0.1)), 0.1)
        assert m.count == 0

    def test_strict_comparison(self):
        m = gate(ScalarMap(np.array([[0.05, 0.2]])), 0.1)
        np.testing.assert_array_equal(m.bits, [[False, True]])

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        losses = ScalarMap(rng.random((8, 8)))
        counts = [gate(losses, t).count for t in (0.8, 0.5, 0.3, 0.1, 0.0)]
        assert counts == sorted(counts)


class TestNormalLoss:
    def test_identity_zero(self):
        rng = np.random.default_rng(1)
        n = _nm(_unit_normals(rng, 5, 5))
        mask = GateMask(np.ones((5, 5), dtype=bool))
        assert normal_loss(n, n, mask) == 0.0

    def test_empty_mask_zero(self):
        rng = np.random.default_rng(2)
        a = _nm(_unit_normals(rng, 4, 4))
        b = _nm(_unit_normals(rng, 4, 4))
        assert normal_loss(a, b, GateMask(np.zeros((4, 4), dtype=bool))) == 0.0

    def test_single_pixel_axes(self):
        a = np.zeros((1, 2, 3))
        a[0, 0] = (1, 0, 0)
        a[0, 1] = (0, 0, 1)
        b = np.zeros((1, 2, 3))
        b[0, 0] = (0, 1, 0)
        b[0, 1] = (0, 0, 1)
        mask = GateMask(np.array([[True, False]]))
        assert normal_loss(_nm(a), _nm(b), mask) == 2.0

    def test_invalid_gated_pixels_skipped(self):
        rng = np.random.default_rng(3)
        a = _unit_normals(rng, 2, 2)
        b = a.copy()
        b[0, 0] = -a[0, 0]  # would contribute 2*|a| if counted
        valid_b = np.ones((2, 2), dtype=bool)
        valid_b[0, 0] = False
        mask = GateMask(np.ones((2, 2), dtype=bool))
        assert normal_loss(_nm(a), NormalMap(b, valid_b), mask) == 0.0

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        a = _nm(_unit_normals(rng, 6, 6))
        b = _nm(_unit_normals(rng, 6, 6))
        mask = GateMask(rng.random((6, 6)) > 0.5)
        assert normal_loss(a, b, mask) >= 0.0


class TestNormalGradient:
    def test_constant_map(self):
        data = np.tile([0.0, 0.0, 1.0], (4, 4, 1))
        grad, defined = normal_gradient(_nm(data))
        np.testing.assert_array_equal(grad, 0.0)
        assert defined[:, :-1, 0].all() and defined[:-1, :, 1].all()

    def test_single_column_has_no_x_gradient(self):
        data = np.tile([0.0, 0.0, 1.0], (4, 1, 1))
        grad, defined = normal_gradient(_nm(data))
        np.testing.assert_array_equal(grad[:, :, 0, :], 0.0)
        assert not defined[:, :, 0].any()

    def test_two_column_step(self):
        # forward difference of a step registers once, at the left column
        data = np.zeros((3, 2, 3))
        data[:, 0] = (0, 0, 1)
        data[:, 1] = (1, 0, 0)
        grad, defined = normal_gradient(_nm(data))
        np.testing.assert_array_equal(grad[:, 0, 0, 0], 1.0)
        np.testing.assert_array_equal(grad[:, 0, 0, 2], -1.0)
        assert defined[:, 0, 0].all()

    def test_invalid_neighbor_excluded(self):
        rng = np.random.default_rng(5)
        data = _unit_normals(rng, 3, 3)
        valid = np.ones((3, 3), dtype=bool)
        valid[1, 1] = False
        grad, defined = normal_gradient(NormalMap(data, valid))
        assert not defined[1, 0, 0] and not defined[1, 1, 0]
        np.testing.assert_array_equal(grad[1, 0, 0], 0.0)


class TestGradientLoss:
    def test_identity(self):
        rng = np.random.default_rng(6)
        n = _nm(_unit_normals(rng, 6, 6))
        assert gradient_loss(n, n) == 0.0

    def test_two_different_constants(self):
        a = _nm(np.tile([0.0, 0.0, 1.0], (5, 5, 1)))
        b = _nm(np.tile([1.0, 0.0, 0.0], (5, 5, 1)))
        assert gradient_loss(a, b) == 0.0

    def test_step_edge_contribution(self):
        # one 0.5-high step in one component spanning one column boundary
        h, w, k = 6, 8, 3
        base = np.tile([0.0, 0.0, 1.0], (h, w, 1))
        pred = base.copy()
        pred[:, k:, 0] += 0.5
        valid = np.ones((h, w), dtype=bool)
        # brute-force oracle over the definition
        def oracle(p, r):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    for comp in range(3):
                        if j + 1 < w:
                            total += abs((p[i, j + 1, comp] - p[i, j, comp])
                                         - (r[i, j + 1, comp] - r[i, j, comp]))
                        if i + 1 < h:
                            total += abs((p[i + 1, j, comp] - p[i, j, comp])
                                         - (r[i + 1, j, comp] - r[i, j, comp]))
            return total / (h * w)
        expect = oracle(pred, base)
        np.testing.assert_allclose(expect, 0.5 * h / (h * w))
        # array-level form: the step fixture is intentionally non-unit
        from splatlab.normalcomp import _gradient_loss_fwd
        got, _ = _gradient_loss_fwd(pred, valid, base, valid, None)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_offset_invariance(self):
        rng = np.random.default_rng(7)
        a = _unit_normals(rng, 7, 7)
        b = _unit_normals(rng, 7, 7)
        from splatlab.normalcomp import _gradient_loss_fwd
        l1, _ = _gradient_loss_fwd(a, np.ones((7, 7), bool), b, np.ones((7, 7), bool))
        off = rng.standard_normal(3)
        l2, _ = _gradient_loss_fwd(a + off, np.ones((7, 7), bool), b + off,
                                   np.ones((7, 7), bool))
        np.testing.assert_allclose(l1, l2, atol=1e-12)

    def test_optional_mask(self):
        rng = np.random.default_rng(8)
        a = _nm(_unit_normals(rng, 6, 6))
        b = _nm(_unit_normals(rng, 6, 6))
        empty = GateMask(np.zeros((6, 6), dtype=bool))
        assert gradient_loss(a, b, empty) == 0.0
        assert gradient_loss(a, b) > 0.0


class TestTotalLoss:
    def test_unit_illum(self):
        assert total_loss(1.0, 0.0, 0.0, 0.0, LossWeights()) == 1.0

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_exact_weighted_sum(self):
        got = total_loss(0.5, 0.2, 0.1, 0.3, LossWeights())
        expect = 0.5 + 0.15 * 0.2 + 0.0015 * 0.1 + 0.03 * 0.3
        np.testing.assert_allclose(got, expect, rtol=1e-15)
        np.testing.assert_allclose(got, 0.53915, rtol=1e-12)

    def test_linear_in_each_component(self):
        w = LossWeights()
        base = total_loss(0.1, 0.2, 0.3, 0.4, w)
        assert total_loss(0.1 + 1.0, 0.2, 0.3, 0.4, w) == pytest.approx(base + w.w_illum)
        assert total_loss(0.1, 0.2 + 1.0, 0.3, 0.4, w) == pytest.approx(base + w.w_normal)
        assert total_loss(0.1, 0.2, 0.3 + 1.0, 0.4, w) == pytest.approx(base + w.w_gradient)
        assert total_loss(0.1, 0.2, 0.3, 0.4 + 1.0, w) == pytest.approx(base + w.w_mvs)

    def test_rejects_negative_component(self):
        with pytest.raises(ValueError):
            total_loss(-0.1, 0.0, 0.0, 0.0, LossWeights())

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            total_loss(np.nan, 0.0, 0.0, 0.0, LossWeights())


class TestBackward:
    def test_identical_maps_zero_gradient(self):
        rng = np.random.default_rng(9)
        n = _nm(_unit_normals(rng, 5, 5))
        mask = GateMask(np.ones((5, 5), dtype=bool))
        g = normal_comp_backward(n, n, mask)
        np.testing.assert_array_equal(g, 0.0)

    def test_gradient_zero_at_ungated_pixels(self):
        rng = np.random.default_rng(10)
        a = _nm(_unit_normals(rng, 6, 6))
        b = _nm(_unit_normals(rng, 6, 6))
        bits = np.zeros((6, 6), dtype=bool)
        bits[2, 3] = True
        g = normal_comp_backward(a, b, GateMask(bits), d_normal=1.0, d_gradient=0.0)
        assert np.any(g[2, 3] != 0.0)
        g[2, 3] = 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_finite_difference(self):
        rng = np.random.default_rng(11)
        from splatlab.normalcomp import (_gradient_loss_bwd, _gradient_loss_fwd,
                                         _normal_loss_bwd, _normal_loss_fwd)
        pred = _unit_normals(rng, 8, 8)
        ref = _unit_normals(rng, 8, 8)
        pv = rng.random((8, 8)) > 0.1
        rv = rng.random((8, 8)) > 0.1
        bits = rng.random((8, 8)) > 0.4
        _, _, _, nc = _normal_loss_fwd(pred, pv, ref, rv, bits)
        _, gc = _gradient_loss_fwd(pred, pv, ref, rv, None)
        g = _normal_loss_bwd(nc, 0.15) + _gradient_loss_bwd(gc, 0.0015)

        def loss():
            ln = _normal_loss_fwd(pred, pv, ref, rv, bits)[0]
            lg = _gradient_loss_fwd(pred, pv, ref, rv, None)[0]
            return 0.15 * ln + 0.0015 * lg

        eps = 1e-4
        flat, gf = pred.reshape(-1), g.reshape(-1)
        for i in np.argsort(np.abs(gf))[-12:]:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss()
            flat[i] = orig - eps
            lm = loss()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - gf[i]) <= 1e-3 * max(abs(fd), abs(gf[i]), 1e-8)
