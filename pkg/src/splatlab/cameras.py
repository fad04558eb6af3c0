"""Pinhole cameras (OpenCV-style: x right, y down, z forward, z > 0 in front)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("camera needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal within 1e-6")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera coordinates."""
        return pts @ self.rotation.T + self.translation

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions through all pixel centers, z = 1.

        With this normalization the ray parameter of an intersection equals
        the camera-space depth of the hit point.
        """
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy,
                         np.ones_like(j, dtype=np.float64)], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0), fx=None, fy=None,
            width=64, height=64) -> Camera:
    """Camera at `eye` whose optical axis passes through `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("up direction is parallel to the viewing direction")
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    if fx is None:
        fx = 0.8 * width
    if fy is None:
        fy = fx
    return Camera(fx=float(fx), fy=float(fy), cx=width / 2.0, cy=height / 2.0,
                  rotation=rot, translation=-rot @ eye, width=width, height=height)
