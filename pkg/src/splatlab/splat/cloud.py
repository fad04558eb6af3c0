"""Anisotropic Gaussian primitives stored as structure-of-arrays."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

GAU_MAGIC = b"GSI3GAU1"

LOG_SCALE_MIN = np.log(1e-4)
LOG_SCALE_MAX = np.log(1e2)
OPACITY_LOGIT_CLAMP = 10.0


@dataclass
class Gaussian:
    """A single primitive; convenience view used by the one-splat operations."""

    position: np.ndarray       # (3,)
    log_scale: np.ndarray      # (3,) log of per-axis std-dev
    rotation: np.ndarray       # (4,) quaternion (w, x, y, z)
    opacity_logit: float
    color_logit: np.ndarray    # (3,)


class GaussianCloud:
    """All primitives plus their gradient slots."""

    def __init__(self, positions, log_scales, rotations, opacity_logits, color_logits):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        self.color_logits = np.ascontiguousarray(color_logits, dtype=np.float64)
        n = len(self.positions)
        if (self.log_scales.shape != (n, 3) or self.rotations.shape != (n, 4)
                or self.opacity_logits.shape != (n,) or self.color_logits.shape != (n, 3)):
            raise ValueError("inconsistent cloud array shapes")
        self.g_positions = np.zeros_like(self.positions)
        self.g_log_scales = np.zeros_like(self.log_scales)
        self.g_rotations = np.zeros_like(self.rotations)
        self.g_opacity_logits = np.zeros_like(self.opacity_logits)
        self.g_color_logits = np.zeros_like(self.color_logits)

    def __len__(self) -> int:
        return len(self.positions)

    def zero_grad(self):
        for g in (self.g_positions, self.g_log_scales, self.g_rotations,
                  self.g_opacity_logits, self.g_color_logits):
            g[:] = 0.0

    # decoded attributes ---------------------------------------------------
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return expit(self.color_logits)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), float(self.opacity_logits[i]),
                        self.color_logits[i].copy())

    def project_constraints(self):
        """Domain projections applied after each optimizer step."""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.maximum(norms, 1e-12, out=norms)
        self.rotations /= norms
        np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scales)
        np.clip(self.opacity_logits, -OPACITY_LOGIT_CLAMP, OPACITY_LOGIT_CLAMP,
                out=self.opacity_logits)

    @classmethod
    def from_single(cls, g: Gaussian) -> "GaussianCloud":
        return cls(g.position[None], g.log_scale[None], g.rotation[None],
                   np.array([g.opacity_logit]), g.color_logit[None])

    @classmethod
    def from_surface_points(cls, points: np.ndarray, count: int, jitter_sigma: float,
                            init_scale: float, init_opacity: float, init_color,
                            rng: np.random.Generator) -> "GaussianCloud":
        """Seed `count` isotropic splats at jittered surface samples."""
        if len(points) == 0:
            raise ValueError("need surface points to seed the cloud")
        pick = rng.integers(0, len(points), size=count)
        pos = points[pick] + jitter_sigma * rng.standard_normal((count, 3))
        ls = np.full((count, 3), np.log(init_scale))
        quat = rng.standard_normal((count, 4))
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
        op = np.full(count, float(logit(np.clip(init_opacity, 1e-6, 1 - 1e-6))))
        col = np.asarray(init_color, dtype=np.float64)
        if col.ndim == 1:
            col = np.tile(col, (count, 1))
        cl = logit(np.clip(col, 1e-6, 1 - 1e-6))
        return cls(pos, ls, quat, op, cl)


# ---------------------------------------------------------------------------
# checkpoint and point-cloud export
# ---------------------------------------------------------------------------

def save_cloud(cloud: GaussianCloud, path) -> None:
    """Versioned binary record, little-endian float32 arrays."""
    with open(path, "wb") as f:
        f.write(GAU_MAGIC)
        f.write(struct.pack("<II", 1, len(cloud)))
        for arr in (cloud.positions, cloud.log_scales, cloud.rotations,
                    cloud.opacity_logits, cloud.color_logits):
            f.write(arr.astype("<f4").tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != GAU_MAGIC:
            raise ValueError(f"not a cloud checkpoint (magic {magic!r})")
        version, n = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"unsupported cloud checkpoint version {version}")

        def arr(shape):
            count = int(np.prod(shape))
            raw = f.read(4 * count)
            if len(raw) < 4 * count:
                raise ValueError("truncated cloud checkpoint")
            return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

        return GaussianCloud(arr((n, 3)), arr((n, 3)), arr((n, 4)), arr((n,)),
                             arr((n, 3)))


def export_ply(points: np.ndarray, path) -> None:
    """ASCII PLY point export for external viewers."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for p in points:
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
