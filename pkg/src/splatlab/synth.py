"""Synthetic ground truth: analytic scenes, Lambertian renders, exact normals.

Scenes are ray-traced analytically per pixel, which makes the rendered
normal and depth maps exact oracles. The reference-normal provider exposes
those normals behind the same interface a learned normal predictor would
implement, with an optional angular-noise knob for robustness tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, look_at
from .imgcore import ImageRGB, NormalMap, ScalarMap


@dataclass
class TextureSpec:
    mode: str = "checker"            # checker | stripe | flat
    scale: float = 0.22              # world-space period of the pattern
    albedo_a: tuple = (0.82, 0.72, 0.60)
    albedo_b: tuple = (0.28, 0.38, 0.52)


@dataclass
class SceneSpec:
    kind: str = "sphere"             # sphere | plane | box
    extent: float = 1.0              # overall object size in world units
    center: tuple = (0.0, 0.0, 0.0)
    texture: TextureSpec = field(default_factory=TextureSpec)
    light_dir: tuple = (0.45, 0.35, 0.85)   # scaled to DIFFUSE_GAIN inside
    ambient: float = 0.3
    n_gt_points: int = 16384
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sphere", "plane", "box"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)


DIFFUSE_GAIN = 0.65


def _light_vector(scene: SceneSpec) -> np.ndarray:
    l = np.asarray(scene.light_dir, dtype=np.float64)
    return DIFFUSE_GAIN * l / np.linalg.norm(l)


def _albedo(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    tex = scene.texture
    a = np.asarray(tex.albedo_a)
    b = np.asarray(tex.albedo_b)
    if tex.mode == "flat":
        return np.broadcast_to(a, pts.shape).copy()
    rel = (pts - scene.centroid) / tex.scale
    if tex.mode == "stripe":
        parity = np.floor(rel[..., 0]).astype(np.int64) & 1
    else:
        cells = np.floor(rel).astype(np.int64)
        parity = (cells[..., 0] + cells[..., 1] + cells[..., 2]) & 1
    return np.where(parity[..., None] == 0, a, b)


# ---------------------------------------------------------------------------
# analytic ray casting
# ---------------------------------------------------------------------------

def _intersect(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Smallest positive ray parameter and outward surface normal per ray.

    `dirs` need not be normalized; the returned parameter is in units of the
    direction vector (camera-space depth when dir_z == 1 in camera coords).
    """
    c = scene.centroid
    flat = dirs.reshape(-1, 3)
    t = np.full(flat.shape[0], np.inf)
    normal = np.zeros((flat.shape[0], 3))
    if scene.kind == "sphere":
        r = scene.extent / 2.0
        oc = origin - c
        aa = np.sum(flat * flat, axis=1)
        bb = 2.0 * flat @ oc
        cc = oc @ oc - r * r
        disc = bb * bb - 4.0 * aa * cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-bb - sq) / (2.0 * aa)
        t1 = (-bb + sq) / (2.0 * aa)
        tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        tt = np.where(ok, tt, np.inf)
        t = tt
        hit = np.isfinite(t)
        pts = origin + flat[hit] * t[hit][:, None]
        normal[hit] = (pts - c) / r
    elif scene.kind == "plane":
        half = scene.extent / 2.0
        dz = flat[:, 2]
        safe = np.abs(dz) > 1e-12
        tt = np.where(safe, (c[2] - origin[2]) / np.where(safe, dz, 1.0), np.inf)
        pts = origin + flat * tt[:, None]
        on = (safe & (tt > 1e-9)
              & (np.abs(pts[:, 0] - c[0]) <= half)
              & (np.abs(pts[:, 1] - c[1]) <= half))
        t = np.where(on, tt, np.inf)
        normal[on] = (0.0, 0.0, 1.0)
    else:  # box
        half = scene.extent / 2.0
        lo, hi = c - half, c + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / flat
            t_lo = (lo - origin) * inv
            t_hi = (hi - origin) * inv
        t_near = np.minimum(t_lo, t_hi)
        t_far = np.maximum(t_lo, t_hi)
        # parallel rays miss unless inside the slab
        par = np.abs(flat) < 1e-12
        inside = (origin >= lo) & (origin <= hi)
        t_near = np.where(par, np.where(inside, -np.inf, np.inf), t_near)
        t_far = np.where(par, np.where(inside, np.inf, -np.inf), t_far)
        enter_axis = np.argmax(t_near, axis=1)
        t_enter = np.max(t_near, axis=1)
        t_exit = np.min(t_far, axis=1)
        on = (t_enter <= t_exit) & (t_enter > 1e-9)
        t = np.where(on, t_enter, np.inf)
        ax = enter_axis[on]
        sgn = -np.sign(flat[on, ax])
        nrm = np.zeros((int(on.sum()), 3))
        nrm[np.arange(len(ax)), ax] = sgn
        normal[on] = nrm
    return t.reshape(dirs.shape[:-1]), normal.reshape(dirs.shape)


def render_gt(scene: SceneSpec, cam: Camera):
    """Analytic Lambertian render: (ImageRGB, NormalMap, depth ScalarMap).

    The normal map holds exact camera-space normals (+z toward the viewer);
    background pixels are invalid and carry zero depth.
    """
    rays_cam = cam.pixel_rays()
    rays_world = rays_cam @ cam.rotation  # R^T per ray
    origin = cam.center
    t, n_world = _intersect(scene, origin, rays_world)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)  # dir_z == 1 in camera space => t is depth

    pts = origin + rays_world * depth[..., None]
    albedo = _albedo(scene, pts)
    lvec = _light_vector(scene)
    shade = scene.ambient + np.maximum(0.0, n_world @ lvec)
    color = np.clip(albedo * shade[..., None], 0.0, 1.0)
    color[~hit] = 0.0

    n_cam = -(n_world @ cam.rotation.T)
    n_cam[~hit] = 0.0
    return ImageRGB(color), NormalMap(n_cam, hit), ScalarMap(depth)


def sample_gt_points(scene: SceneSpec) -> np.ndarray:
    """Dense surface samples used both to seed splats and to judge them."""
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0x517F]))
    n = scene.n_gt_points
    c = scene.centroid
    if scene.kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + (scene.extent / 2.0) * v
    if scene.kind == "plane":
        half = scene.extent / 2.0
        xy = rng.uniform(-half, half, size=(n, 2))
        return c + np.column_stack([xy, np.zeros(n)])
    half = scene.extent / 2.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [o for o in range(3) if o != a]
        pts[m, a] = sign[m] * half
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return c + pts


def make_cameras(scene: SceneSpec, n_views: int, width: int = 64,
                 height: int = 64):
    """Evenly spaced views at radius 3*extent, all looking at the centroid.

    Plane and box scenes use a single elevated ring; sphere scenes alternate
    between two elevations so the cameras sample a hemisphere.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views for multi-view losses")
    radius = 3.0 * scene.extent
    c = scene.centroid
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        if scene.kind == "sphere":
            el = np.deg2rad(15.0 if i % 2 == 0 else 45.0)
        else:
            el = np.deg2rad(30.0)
        eye = c + radius * np.array([np.cos(az) * np.cos(el),
                                     np.sin(az) * np.cos(el),
                                     np.sin(el)])
        cams.append(look_at(eye, c, up=(0.0, 0.0, 1.0),
                            fx=0.8 * width, width=width, height=height))
    return cams


# ---------------------------------------------------------------------------
# illumination perturbation recipe
# ---------------------------------------------------------------------------

@dataclass
class PerturbSpec:
    brightness_lo: float = 0.5
    brightness_hi: float = 1.5
    contrast_lo: float = 0.5
    contrast_hi: float = 1.5
    gamma_choices: tuple = (0.1, 0.8)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.brightness_lo <= self.brightness_hi):
            raise ValueError("bad brightness range")
        if not (0 < self.contrast_lo <= self.contrast_hi):
            raise ValueError("bad contrast range")
        if any(g <= 0 for g in self.gamma_choices):
            raise ValueError("gamma choices must be positive")


def perturb_draws(spec: PerturbSpec, view_index: int):
    """Deterministic (brightness, contrast, gamma) draws for one view."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 0xD0A3, view_index]))
    beta = spec.brightness_lo + (spec.brightness_hi - spec.brightness_lo) * rng.random()
    kappa = spec.contrast_lo + (spec.contrast_hi - spec.contrast_lo) * rng.random()
    gamma = spec.gamma_choices[rng.integers(0, len(spec.gamma_choices))]
    return float(beta), float(kappa), float(gamma)


def apply_perturbation(img: ImageRGB, beta: float, kappa: float,
                       gamma: float) -> ImageRGB:
    """brightness -> mid-gray-pivot contrast -> gamma, clamped to [0, 1]."""
    out = np.clip(kappa * (beta * img.data - 0.5) + 0.5, 0.0, 1.0) ** gamma
    return ImageRGB(out)


def perturb(img: ImageRGB, spec: PerturbSpec, view_index: int) -> ImageRGB:
    beta, kappa, gamma = perturb_draws(spec, view_index)
    return apply_perturbation(img, beta, kappa, gamma)


# ---------------------------------------------------------------------------
# reference-normal provider (oracle stand-in for a learned predictor)
# ---------------------------------------------------------------------------

class ReferenceNormalProvider:
    """Serves per-view reference normals with per-pixel validity.

    noise_sigma > 0 perturbs each normal by roughly that many radians
    (Gaussian in the tangent, renormalized); 0 serves the exact oracle.
    """

    def __init__(self, scene: SceneSpec, noise_sigma: float = 0.0, seed: int = 0):
        self.scene = scene
        self.noise_sigma = float(noise_sigma)
        self.seed = seed

    def reference_normals(self, cam: Camera, view_index: int = 0) -> NormalMap:
        _, normals, _ = render_gt(self.scene, cam)
        if self.noise_sigma == 0.0:
            return normals
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 0x5EED, view_index]))
        noisy = normals.data + self.noise_sigma * rng.standard_normal(normals.data.shape)
        norms = np.linalg.norm(noisy, axis=-1, keepdims=True)
        np.maximum(norms, 1e-12, out=norms)
        noisy /= norms
        noisy[~normals.valid] = 0.0
        return NormalMap(noisy, normals.valid)


def reference_normals(scene: SceneSpec, cam: Camera) -> NormalMap:
    """Exact oracle normals for one view (provider shortcut)."""
    return ReferenceNormalProvider(scene).reference_normals(cam)
