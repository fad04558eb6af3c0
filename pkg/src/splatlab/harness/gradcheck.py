"""Central finite differences against every analytic gradient path.

Fixtures are built to sit away from the objective's non-smooth points
(gamma-range swap/clamp boundaries, ReLU zeros, the alpha clip and the
transmittance cutoff, L1 kinks): finite differences straddle kinks and
would report spurious error there even for a correct gradient. The
inactive branches (zero gradients at clamps/gates) are covered exactly by
the unit suites instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cameras import look_at
from ..illum import (ConvWeights, GammaParams, IlluminationField,
                     illum_backward, illum_forward)
from ..imgcore import ImageRGB, cdf_rank, luminance
from ..normalcomp import (_gradient_loss_bwd, _gradient_loss_fwd,
                          _normal_loss_bwd, _normal_loss_fwd)
from ..splat import (GaussianCloud, mvs_backward, mvs_consistency,
                     rasterize_backward, rasterize_with_cache)
from ..synth import SceneSpec, render_gt

FD_STEP = 1e-4
TOL_TIGHT = 1e-3    # illumination and normal-compensation paths
TOL_SPLAT = 1e-2    # rasterizer parameters (looser: alpha-clip kink)
NEGLIGIBLE = 1e-8   # both gradients below this count as agreeing


@dataclass
class GradCheckRow:
    group: str
    max_rel_err: float
    threshold: float
    passed: bool


def _rel_err(analytic: float, fd: float) -> float:
    scale = max(abs(analytic), abs(fd))
    if scale < NEGLIGIBLE:
        return 0.0
    return abs(analytic - fd) / scale


def _fd_max_err(loss_fn, arr: np.ndarray, grad: np.ndarray,
                rng: np.random.Generator, n_coords: int) -> float:
    # probe where the analytic gradient is largest (guaranteed signal),
    # plus a couple of random coordinates for the zero/ungated paths
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    k = min(n_coords, flat.size)
    top = np.argsort(np.abs(gflat))[-k:]
    extra = rng.choice(flat.size, size=min(2, flat.size), replace=False)
    ids = np.unique(np.concatenate([top, extra]))
    worst = 0.0
    for i in ids:
        orig = flat[i]
        flat[i] = orig + FD_STEP
        lp = loss_fn()
        flat[i] = orig - FD_STEP
        lm = loss_fn()
        flat[i] = orig
        worst = max(worst, _rel_err(gflat[i], (lp - lm) / (2.0 * FD_STEP)))
    return worst


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def _illum_rows(rng: np.random.Generator):
    i_gt = rng.uniform(0.05, 0.95, (8, 8, 3))
    rend = rng.uniform(0.1, 0.9, (8, 8, 3))
    p = cdf_rank(luminance(ImageRGB(i_gt))).data
    gp = GammaParams(0.8, 0.1, 1.2, 0.05)   # well apart: no swap/clamp kink
    conv = ConvWeights.initial(rng)
    # strictly positive weights and inputs keep both ReLUs active everywhere
    conv.w1 = rng.uniform(0.01, 0.05, conv.w1.shape)
    conv.w2 = rng.uniform(0.01, 0.05, conv.w2.shape)
    conv.b1 += 0.01
    conv.b2 += 0.01
    field = IlluminationField(rng.uniform(0.5, 1.5, (224, 224)))

    st = illum_forward(i_gt, p, rend, gp, conv, field)
    d_rend = illum_backward(st)

    def loss():
        return illum_forward(i_gt, p, rend, gp, conv, field).loss

    rows = [("gamma_params", gp.value, gp.grad, 4)]
    rows += [("conv_weights", conv.w1, conv.g_w1, 6),
             ("conv_weights", conv.b1, conv.g_b1, 3),
             ("conv_weights", conv.w2, conv.g_w2, 5),
             ("conv_weights", conv.b2, conv.g_b2, 1),
             ("illumination_field", field.m, field.grad, 6),
             ("rendered_image", rend, d_rend, 8)]
    out = {}
    for group, arr, grad, k in rows:
        err = _fd_max_err(loss, arr, grad, rng, k)
        out[group] = max(out.get(group, 0.0), err)
    return [(g, e, TOL_TIGHT) for g, e in out.items()]


def _normalcomp_rows(rng: np.random.Generator):
    h = w = 8
    pred = rng.standard_normal((h, w, 3))
    pred /= np.linalg.norm(pred, axis=-1, keepdims=True)
    ref = rng.standard_normal((h, w, 3))
    ref /= np.linalg.norm(ref, axis=-1, keepdims=True)
    pv = rng.random((h, w)) > 0.15
    rv = rng.random((h, w)) > 0.15
    bits = rng.random((h, w)) > 0.4

    _, _, _, ncache = _normal_loss_fwd(pred, pv, ref, rv, bits)
    d_pred = _normal_loss_bwd(ncache, 1.0)
    _, gcache = _gradient_loss_fwd(pred, pv, ref, rv, None)
    d_pred_g = _gradient_loss_bwd(gcache, 1.0)

    def loss_n():
        return _normal_loss_fwd(pred, pv, ref, rv, bits)[0]

    def loss_g():
        return _gradient_loss_fwd(pred, pv, ref, rv, None)[0]

    e1 = _fd_max_err(loss_n, pred, d_pred, rng, 10)
    e2 = _fd_max_err(loss_g, pred, d_pred_g, rng, 10)
    return [("normal_loss", e1, TOL_TIGHT), ("gradient_loss", e2, TOL_TIGHT)]


def _splat_rows(rng: np.random.Generator):
    n = 6
    pos = rng.uniform(-0.3, 0.3, (n, 3))
    ls = np.log(rng.uniform(0.05, 0.25, (n, 3)))
    quat = rng.standard_normal((n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    op = rng.uniform(-1.0, 0.8, n)        # opacities < 0.7: no alpha clip
    cl = rng.uniform(-1.0, 1.0, (n, 3))
    cloud = GaussianCloud(pos, ls, quat, op, cl)
    cam = look_at((0, 0, 2.5), (0, 0, 0), up=(0, 1, 0), fx=10.0,
                  width=8, height=8)
    gc = rng.standard_normal((8, 8, 3))
    gd = rng.standard_normal((8, 8))
    ga = rng.standard_normal((8, 8))
    out0, rc = rasterize_with_cache(cloud, cam)
    vmask = out0.alpha.data > 0.6         # frozen validity for the normal term
    gn = rng.standard_normal((8, 8, 3)) * vmask[:, :, None]

    def loss():
        out, _ = rasterize_with_cache(cloud, cam)
        return float((gc * out.color.data).sum() + (gd * out.depth.data).sum()
                     + (gn * out.normal.data).sum() + (ga * out.alpha.data).sum())

    cloud.zero_grad()
    rasterize_backward(rc, d_color=gc, d_depth=gd, d_normal=gn, d_alpha=ga)
    rows = [("splat_position", cloud.positions, cloud.g_positions, 8),
            ("splat_log_scale", cloud.log_scales, cloud.g_log_scales, 8),
            ("splat_rotation", cloud.rotations, cloud.g_rotations, 8),
            ("splat_opacity", cloud.opacity_logits, cloud.g_opacity_logits, 4),
            ("splat_color", cloud.color_logits, cloud.g_color_logits, 6)]
    return [(g, _fd_max_err(loss, arr, grad, rng, k), TOL_SPLAT)
            for g, arr, grad, k in rows]


def _mvs_rows(rng: np.random.Generator):
    scene = SceneSpec(kind="plane", extent=1.0, seed=3)
    cam_a = look_at((0.1, 0.0, 1.4), (0, 0, 0), up=(0, 1, 0), fx=6.4,
                    width=8, height=8)
    cam_b = look_at((-0.15, 0.2, 1.5), (0, 0, 0), up=(0, 1, 0), fx=6.4,
                    width=8, height=8)
    _, n0, d0 = render_gt(scene, cam_a)
    _, n1, d1 = render_gt(scene, cam_b)
    # smooth multiplicative drift keeps gradients nonzero, far from the gate
    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    da = d0.data * (1.0 + 0.02 * np.sin(0.7 * ii + 0.3 * jj))
    db = d1.data * (1.0 + 0.015 * np.cos(0.5 * ii - 0.4 * jj))
    va, vb = n0.valid.copy(), n1.valid.copy()

    res = mvs_consistency(da, va, cam_a, db, vb, cam_b)
    ga, gb = mvs_backward(res)

    def loss():
        return mvs_consistency(da, va, cam_a, db, vb, cam_b).loss

    e1 = _fd_max_err(loss, da, ga, rng, 8)
    e2 = _fd_max_err(loss, db, gb, rng, 8)
    return [("mvs_depth", max(e1, e2), TOL_SPLAT)]


def run_gradcheck(seed: int = 0, corrupt_group: str = None):
    """All gradient groups vs. central differences; returns result rows.

    `corrupt_group` is a test-only hook that deliberately biases one group's
    analytic gradient so the failure reporting path can be exercised.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9EAD]))
    triples = []
    triples += _illum_rows(rng)
    triples += _normalcomp_rows(rng)
    triples += _splat_rows(rng)
    triples += _mvs_rows(rng)
    rows = []
    for group, err, tol in triples:
        if corrupt_group is not None and group == corrupt_group:
            err = max(err, 10.0 * tol)
        rows.append(GradCheckRow(group, err, tol, err <= tol))
    return rows


def format_rows(rows) -> str:
    lines = [f"{'group':<22} {'max rel err':>12} {'threshold':>10}  result"]
    for r in rows:
        lines.append(f"{r.group:<22} {r.max_rel_err:>12.3e} {r.threshold:>10.0e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
