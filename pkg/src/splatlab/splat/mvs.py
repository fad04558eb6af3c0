"""Depth-reprojection multi-view consistency loss.

Valid pixels of view A are unprojected with A's depth, transformed into
view B and compared against B's depth map, looked up by bilinear
interpolation of inverse depth (the projectively linear quantity, exact for
planar surfaces). Pixels whose relative depth gap exceeds the occlusion
threshold are rejected and tallied; the loss is the mean relative gap over
the kept pixels. The backward pass returns gradients for both depth maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cameras import Camera
from .rasterizer import RenderOutput

OCCLUSION_REL = 0.2
Z_NEAR = 0.01


@dataclass
class MvsResult:
    loss: float
    n_tested: int       # pixels that entered the mean
    n_rejected: int     # occlusion-rejected pixels
    informative: bool
    cache: dict


def mvs_consistency(depth_a: np.ndarray, valid_a: np.ndarray, cam_a: Camera,
                    depth_b: np.ndarray, valid_b: np.ndarray, cam_b: Camera,
                    occlusion_rel: float = OCCLUSION_REL) -> MvsResult:
    h_a, w_a = depth_a.shape
    h_b, w_b = depth_b.shape
    sel = valid_a & (depth_a > Z_NEAR)
    src = np.nonzero(sel.ravel())[0]
    empty = MvsResult(0.0, 0, 0, False, {"shape_a": depth_a.shape,
                                         "shape_b": depth_b.shape, "kept": None})
    if src.size == 0:
        return empty

    rays = cam_a.pixel_rays().reshape(-1, 3)[src]
    d = depth_a.ravel()[src]
    r_ba = cam_b.rotation @ cam_a.rotation.T
    beta = cam_b.translation - r_ba @ cam_a.translation
    rot_rays = rays @ r_ba.T
    t_b = d[:, None] * rot_rays + beta

    front = t_b[:, 2] > Z_NEAR
    src, rot_rays, t_b = src[front], rot_rays[front], t_b[front]
    if src.size == 0:
        return empty
    u = cam_b.fx * t_b[:, 0] / t_b[:, 2] + cam_b.cx
    v = cam_b.fy * t_b[:, 1] / t_b[:, 2] + cam_b.cy
    inside = (u >= 0) & (u <= w_b - 1) & (v >= 0) & (v <= h_b - 1)
    src, rot_rays, t_b, u, v = (src[inside], rot_rays[inside], t_b[inside],
                                u[inside], v[inside])
    if src.size == 0:
        return empty
    tx, ty, tz = t_b[:, 0], t_b[:, 1], t_b[:, 2]

    j0 = np.minimum(np.floor(u).astype(np.intp), w_b - 2)
    i0 = np.minimum(np.floor(v).astype(np.intp), h_b - 2)
    fu = u - j0
    fv = v - i0
    corners = np.stack([i0 * w_b + j0, i0 * w_b + j0 + 1,
                        (i0 + 1) * w_b + j0, (i0 + 1) * w_b + j0 + 1], axis=1)
    db_flat = depth_b.ravel()
    vb_flat = (valid_b & (depth_b > Z_NEAR)).ravel()
    four_ok = np.all(vb_flat[corners], axis=1)
    src, rot_rays, tz, corners = src[four_ok], rot_rays[four_ok], tz[four_ok], corners[four_ok]
    tx, ty, fu, fv = tx[four_ok], ty[four_ok], fu[four_ok], fv[four_ok]
    if src.size == 0:
        return empty

    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv),
                        (1 - fu) * fv, fu * fv], axis=1)
    invd = 1.0 / db_flat[corners]
    vsum = np.sum(weights * invd, axis=1)
    lookup = 1.0 / vsum
    rel = np.abs(lookup - tz) / tz
    keep = rel <= occlusion_rel
    n_rejected = int(np.sum(~keep))
    if not np.any(keep):
        return MvsResult(0.0, 0, n_rejected, False,
                         {"shape_a": depth_a.shape, "shape_b": depth_b.shape,
                          "kept": None})
    loss = float(np.mean(rel[keep]))
    cache = {
        "shape_a": depth_a.shape, "shape_b": depth_b.shape,
        "kept": src[keep], "rot_rays": rot_rays[keep],
        "tx": tx[keep], "ty": ty[keep], "tz": tz[keep],
        "fu": fu[keep], "fv": fv[keep],
        "corners": corners[keep], "weights": weights[keep],
        "invd": invd[keep], "vsum": vsum[keep], "lookup": lookup[keep],
        "sign": np.sign(lookup[keep] - tz[keep]),
        "fx": cam_b.fx, "fy": cam_b.fy,
    }
    return MvsResult(loss, int(np.sum(keep)), n_rejected, True, cache)


def mvs_backward(res: MvsResult, d_loss: float = 1.0):
    """Gradients of the mean relative gap w.r.t. both depth maps."""
    d_depth_a = np.zeros(res.cache["shape_a"])
    d_depth_b = np.zeros(res.cache["shape_b"])
    c = res.cache
    if c["kept"] is None or res.n_tested == 0:
        return d_depth_a, d_depth_b
    n = res.n_tested
    s = c["sign"]
    tz, lookup = c["tz"], c["lookup"]
    g = d_loss / n
    g_lookup = g * s / tz
    g_tz = -g * s * lookup / (tz * tz)
    g_vsum = g_lookup * (-(lookup ** 2))

    # depth-map B via the four inverse-depth taps
    d_invd = g_vsum[:, None] * c["weights"]
    np.add.at(d_depth_b.ravel(), c["corners"].ravel(),
              (d_invd * (-(c["invd"] ** 2))).ravel())

    # bilinear weights move with the projected point
    invd = c["invd"]
    fu, fv = c["fu"], c["fv"]
    dv_dfu = (-(1 - fv) * invd[:, 0] + (1 - fv) * invd[:, 1]
              - fv * invd[:, 2] + fv * invd[:, 3])
    dv_dfv = (-(1 - fu) * invd[:, 0] - fu * invd[:, 1]
              + (1 - fu) * invd[:, 2] + fu * invd[:, 3])
    g_u = g_vsum * dv_dfu
    g_v = g_vsum * dv_dfv
    rx, ry, rz = c["rot_rays"][:, 0], c["rot_rays"][:, 1], c["rot_rays"][:, 2]
    tx, ty = c["tx"], c["ty"]
    du_dd = c["fx"] * (rx * tz - tx * rz) / (tz * tz)
    dv_dd = c["fy"] * (ry * tz - ty * rz) / (tz * tz)
    d_d = g_u * du_dd + g_v * dv_dd + g_tz * rz
    np.add.at(d_depth_a.ravel(), c["kept"], d_d)
    return d_depth_a, d_depth_b


def mvs_loss(out_a: RenderOutput, cam_a: Camera, out_b: RenderOutput,
             cam_b: Camera) -> float:
    """Depth-reprojection consistency between two rendered views."""
    res = mvs_consistency(out_a.depth.data, out_a.alpha.data > 0.5, cam_a,
                          out_b.depth.data, out_b.alpha.data > 0.5, cam_b)
    return res.loss
