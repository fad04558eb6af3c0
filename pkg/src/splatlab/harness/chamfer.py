"""Chamfer distance (exact grid-accelerated NN) and Gaussian point sampling."""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..splat.cloud import GaussianCloud
from ..splat.projection import quat_to_rot


def chamfer(p: np.ndarray, q: np.ndarray, backend=None) -> float:
    """0.5 * (mean_p min_q ||p-q|| + mean_q min_p ||p-q||), exact."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    kb = kernels.get_backend(backend)
    d_pq = kb.grid_min_dists(p, q)
    d_qp = kb.grid_min_dists(q, p)
    return 0.5 * (float(d_pq.mean()) + float(d_qp.mean()))


def sample_points(cloud: GaussianCloud, n: int, seed: int = 0) -> np.ndarray:
    """Draw n points from the opaque splats (opacity > 0.5).

    Each point is its splat's mean plus a draw from the splat's own
    covariance, truncated at one Mahalanobis sigma. Deterministic per seed.
    """
    opaque = np.nonzero(cloud.opacities() > 0.5)[0]
    if opaque.size == 0:
        raise ValueError("no opaque splats (opacity > 0.5) to sample from")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17]))
    pick = opaque[rng.integers(0, opaque.size, size=n)]
    # rejection-sample unit-ball offsets (|u| <= 1), deterministic under seed
    u = np.empty((n, 3))
    need = np.arange(n)
    while need.size:
        cand = rng.standard_normal((need.size, 3))
        ok = np.sum(cand * cand, axis=1) <= 1.0
        u[need[ok]] = cand[ok]
        need = need[~ok]
    rot, _, _ = quat_to_rot(cloud.rotations[pick])
    scaled = np.exp(cloud.log_scales[pick]) * u
    return cloud.positions[pick] + np.einsum("nij,nj->ni", rot, scaled)
