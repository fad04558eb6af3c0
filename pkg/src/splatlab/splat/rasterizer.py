"""Rendering glue: projection + compositing kernel + output buffers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..cameras import Camera
from ..imgcore import ImageRGB, NormalMap, ScalarMap
from .cloud import GaussianCloud
from .projection import ProjCache, project_backward, project_cloud

DEFAULT_TILE = 16
NORMAL_EPS = 1e-12


@dataclass(frozen=True)
class RenderOutput:
    color: ImageRGB
    depth: ScalarMap
    normal: NormalMap
    alpha: ScalarMap


class RenderCache:
    __slots__ = ("pc", "cloud", "cam", "tile", "opac", "colors", "nacc",
                 "alpha", "nacc_norm", "valid", "backend")


def rasterize_with_cache(cloud: GaussianCloud, cam: Camera, tile: int = DEFAULT_TILE,
                         backend=None):
    """Render color/depth/normal/alpha and keep what the backward needs."""
    if len(cloud) == 0:
        raise ValueError("cannot rasterize an empty cloud")
    if backend is None or isinstance(backend, str):
        kb = kernels.get_backend(backend)
    else:
        kb = backend
    pc = project_cloud(cloud, cam)
    h, w = cam.height, cam.width
    rc = RenderCache()
    rc.pc, rc.cloud, rc.cam, rc.tile, rc.backend = pc, cloud, cam, tile, kb
    idx = pc.sorted_idx
    if pc.n_visible > 0:
        rc.opac = cloud.opacities()[idx]
        rc.colors = cloud.colors()[idx]
        color, depth, nacc, alpha, _final_t, _ncontrib = kb.rasterize_forward(
            pc.means2d, pc.conic, pc.depths, rc.opac, rc.colors, pc.normals,
            pc.radii, h, w, tile)
    else:
        rc.opac = np.zeros(0)
        rc.colors = np.zeros((0, 3))
        color = np.zeros((h, w, 3))
        depth = np.zeros((h, w))
        nacc = np.zeros((h, w, 3))
        alpha = np.zeros((h, w))
    rc.nacc = nacc
    rc.alpha = alpha
    nacc_norm = np.linalg.norm(nacc, axis=-1)
    valid = (alpha > 0.5) & (nacc_norm > NORMAL_EPS)
    rc.nacc_norm = nacc_norm
    rc.valid = valid
    ndata = np.zeros_like(nacc)
    ndata[valid] = nacc[valid] / nacc_norm[valid][:, None]
    out = RenderOutput(
        color=ImageRGB(color),
        depth=ScalarMap(depth),
        normal=NormalMap(ndata, valid),
        alpha=ScalarMap(alpha),
    )
    return out, rc


def rasterize(cloud: GaussianCloud, cam: Camera, tile: int = DEFAULT_TILE) -> RenderOutput:
    out, _ = rasterize_with_cache(cloud, cam, tile)
    return out


def rasterize_backward(rc: RenderCache, d_color=None, d_depth=None,
                       d_normal=None, d_alpha=None) -> None:
    """Accumulate dL/d(cloud parameters) from output-buffer gradients.

    d_normal is the gradient w.r.t. the renormalized unit-normal map; it is
    pulled back through the normalization before entering the compositing
    kernel. Pixels outside the validity mask contribute nothing.
    """
    pc = rc.pc
    if pc.n_visible == 0:
        return
    cam, cloud = rc.cam, rc.cloud
    h, w = cam.height, cam.width
    zimg = np.zeros((h, w))
    zimg3 = np.zeros((h, w, 3))
    d_color = zimg3 if d_color is None else d_color
    d_depth = zimg if d_depth is None else d_depth
    d_alpha = zimg if d_alpha is None else d_alpha
    d_nacc = np.zeros((h, w, 3))
    if d_normal is not None:
        v = rc.valid
        n_hat = rc.nacc[v] / rc.nacc_norm[v][:, None]
        g = d_normal[v]
        d_nacc[v] = (g - n_hat * np.sum(n_hat * g, axis=1, keepdims=True)) \
            / rc.nacc_norm[v][:, None]

    d_means2d, d_conic, d_depths, d_opac, d_colors, d_normals = \
        rc.backend.rasterize_backward(
            pc.means2d, pc.conic, pc.depths, rc.opac, rc.colors, pc.normals,
            pc.radii, h, w,
            np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
            np.ascontiguousarray(d_nacc), np.ascontiguousarray(d_alpha), rc.tile)

    # decode chains for opacity and color logits
    idx = pc.sorted_idx
    op = rc.opac
    np.add.at(cloud.g_opacity_logits, idx, d_opac * op * (1.0 - op))
    col = rc.colors
    np.add.at(cloud.g_color_logits, idx, d_colors * col * (1.0 - col))
    project_backward(pc, cloud, d_means2d, d_conic, d_depths, d_normals)
