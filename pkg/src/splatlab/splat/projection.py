"""Perspective (EWA) projection of anisotropic Gaussians with full backward.

World covariance R S S^T R^T is pushed through the camera rotation and the
perspective Jacobian at the mean; the 2x2 screen covariance is regularized
by +0.3 px^2 on the diagonal. Rendered normals use the shortest-axis
convention, flipped toward the camera, reported in a frame whose +z points
at the viewer.
"""

from __future__ import annotations

import numpy as np

from ..cameras import Camera
from .cloud import Gaussian, GaussianCloud

Z_NEAR = 0.01
COV_REG = 0.3
BBOX_SIGMA = 3.0


# ---------------------------------------------------------------------------
# quaternion (w, x, y, z) to rotation matrix, with gradient
# ---------------------------------------------------------------------------

def quat_to_rot(q: np.ndarray):
    """Rotation matrices for (N, 4) quaternions (normalized internally)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = np.empty((len(q), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot, qn, norm


def quat_rot_backward(qn: np.ndarray, norm: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """dL/dq given dL/dR, including the normalization Jacobian."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    d_qn = np.stack([dw, dx, dy, dz], axis=1)
    # through qn = q / |q|
    return (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# cloud projection
# ---------------------------------------------------------------------------

class ProjCache:
    __slots__ = ("cam", "sorted_idx", "means2d", "conic", "depths", "radii",
                 "normals", "t", "jac", "m3", "w2", "rot_w", "scales", "quats",
                 "cov_a", "cov_b", "cov_c", "axis", "sign", "n_visible")


def project_cloud(cloud: GaussianCloud, cam: Camera) -> ProjCache:
    """Project every splat; behind-camera splats are culled (excluded)."""
    rc = cam.rotation
    t_all = cloud.positions @ rc.T + cam.translation
    visible = t_all[:, 2] > Z_NEAR
    vis_idx = np.nonzero(visible)[0]
    pc = ProjCache()
    pc.cam = cam
    if vis_idx.size == 0:
        pc.sorted_idx = vis_idx
        pc.n_visible = 0
        return pc
    order = np.argsort(t_all[vis_idx, 2], kind="stable")
    idx = vis_idx[order]
    pc.sorted_idx = idx
    pc.n_visible = idx.size

    t = t_all[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    pc.t = t
    pc.depths = tz.copy()
    pc.means2d = np.stack([cam.fx * tx / tz + cam.cx,
                           cam.fy * ty / tz + cam.cy], axis=1)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / (tz * tz)
    pc.jac = jac

    quats = cloud.rotations[idx]
    rot_w, qn, qnorm = quat_to_rot(quats)
    pc.rot_w = rot_w
    pc.quats = (qn, qnorm)
    scales = np.exp(cloud.log_scales[idx])
    pc.scales = scales
    m3 = np.einsum("ab,nbc->nac", rc, rot_w) * scales[:, None, :]
    pc.m3 = m3
    w2 = np.einsum("nij,njk->nik", jac, m3)
    pc.w2 = w2
    cov_a = np.sum(w2[:, 0] * w2[:, 0], axis=1) + COV_REG
    cov_b = np.sum(w2[:, 0] * w2[:, 1], axis=1)
    cov_c = np.sum(w2[:, 1] * w2[:, 1], axis=1) + COV_REG
    pc.cov_a, pc.cov_b, pc.cov_c = cov_a, cov_b, cov_c
    det = cov_a * cov_c - cov_b * cov_b
    pc.conic = np.stack([cov_c / det, -cov_b / det, cov_a / det], axis=1)
    pc.radii = np.stack([BBOX_SIGMA * np.sqrt(cov_a),
                         BBOX_SIGMA * np.sqrt(cov_c)], axis=1)

    # shortest-axis normal, flipped toward the camera, +z-at-viewer frame
    axis = np.argmin(cloud.log_scales[idx], axis=1)
    pc.axis = axis
    nw = np.take_along_axis(rot_w, axis[:, None, None], axis=2)[:, :, 0]
    to_cam = cam.center[None, :] - cloud.positions[idx]
    sign = np.where(np.sum(nw * to_cam, axis=1) >= 0.0, 1.0, -1.0)
    pc.sign = sign
    pc.normals = -sign[:, None] * (nw @ rc.T)
    return pc


def project_backward(pc: ProjCache, cloud: GaussianCloud,
                     d_means2d, d_conic, d_depths, d_normals) -> None:
    """Chain screen-space gradients back to positions, scales and rotations."""
    if pc.n_visible == 0:
        return
    cam = pc.cam
    rc = cam.rotation
    idx = pc.sorted_idx
    t = pc.t
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    # conic -> covariance entries (inverse-matrix chain)
    ka, kb, kc = pc.conic[:, 0], pc.conic[:, 1], pc.conic[:, 2]
    gk = np.empty((idx.size, 2, 2))
    gk[:, 0, 0] = d_conic[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * d_conic[:, 1]
    gk[:, 1, 1] = d_conic[:, 2]
    kmat = np.empty((idx.size, 2, 2))
    kmat[:, 0, 0] = ka
    kmat[:, 0, 1] = kmat[:, 1, 0] = kb
    kmat[:, 1, 1] = kc
    gcov = -np.einsum("nij,njk,nkl->nil", kmat, gk, kmat)

    d_w2 = 2.0 * np.einsum("nij,njk->nik", gcov, pc.w2)
    d_jac = np.einsum("nij,nkj->nik", d_w2, pc.m3)
    d_m3 = np.einsum("nji,njk->nik", pc.jac, d_w2)

    d_rcrw = d_m3 * pc.scales[:, None, :]
    rcrw = np.einsum("ab,nbc->nac", rc, pc.rot_w)
    d_scales = np.einsum("nik,nik->nk", d_m3, rcrw)
    d_log_scales = d_scales * pc.scales
    d_rot_w = np.einsum("ba,nbc->nac", rc, d_rcrw)

    # normal channel: n = -sign * rc @ rot_w[:, axis]
    d_nw = -pc.sign[:, None] * (d_normals @ rc)
    np.put_along_axis(
        d_rot_w, pc.axis[:, None, None],
        np.take_along_axis(d_rot_w, pc.axis[:, None, None], axis=2) + d_nw[:, :, None],
        axis=2)

    qn, qnorm = pc.quats
    d_quats = quat_rot_backward(qn, qnorm, d_rot_w)

    # Jacobian entries and pinhole projection -> camera-space point
    fx, fy = cam.fx, cam.fy
    tz2 = tz * tz
    d_t = np.zeros_like(t)
    d_t[:, 0] += d_jac[:, 0, 2] * (-fx / tz2)
    d_t[:, 1] += d_jac[:, 1, 2] * (-fy / tz2)
    d_t[:, 2] += (d_jac[:, 0, 0] * (-fx / tz2) + d_jac[:, 1, 1] * (-fy / tz2)
                  + d_jac[:, 0, 2] * (2 * fx * tx / (tz2 * tz))
                  + d_jac[:, 1, 2] * (2 * fy * ty / (tz2 * tz)))
    d_t[:, 0] += d_means2d[:, 0] * fx / tz
    d_t[:, 1] += d_means2d[:, 1] * fy / tz
    d_t[:, 2] += (-d_means2d[:, 0] * fx * tx - d_means2d[:, 1] * fy * ty) / tz2
    d_t[:, 2] += d_depths

    np.add.at(cloud.g_positions, idx, d_t @ rc)
    np.add.at(cloud.g_log_scales, idx, d_log_scales)
    np.add.at(cloud.g_rotations, idx, d_quats)


# ---------------------------------------------------------------------------
# single-splat operations
# ---------------------------------------------------------------------------

def project(g: Gaussian, cam: Camera):
    """(mean2d, cov2d, depth) for one splat, or None when behind the camera."""
    pc = project_cloud(GaussianCloud.from_single(g), cam)
    if pc.n_visible == 0:
        return None
    cov = np.array([[pc.cov_a[0], pc.cov_b[0]], [pc.cov_b[0], pc.cov_c[0]]])
    return pc.means2d[0].copy(), cov, float(pc.depths[0])


def gaussian_normal(g: Gaussian, cam: Camera) -> np.ndarray:
    """Camera-facing unit normal of the flattest axis, +z toward the viewer."""
    rot_w, _, _ = quat_to_rot(g.rotation[None])
    axis = int(np.argmin(g.log_scale))
    nw = rot_w[0][:, axis]
    sign = 1.0 if float(nw @ (cam.center - g.position)) >= 0.0 else -1.0
    return -sign * (cam.rotation @ nw)
