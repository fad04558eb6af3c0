"""Adaptive two-stage illumination adjustment with analytic gradients.

Coarse stage: a learnable per-view gamma range is interpolated by each
pixel's brightness percentile rank and applied to the training image.
Fine stage: a two-layer conv net refines the rendered image into a 224x224
feature map that is fused with a learnable per-view illumination grid and
multiplied back onto the render. The two results are compared by a weighted
L1/SSIM loss whose per-pixel map also drives the normal-supervision gate.

Every learnable quantity (gamma parameters, conv weights, illumination
grid) gets exact reverse-mode gradients; the rank map is a sorting
statistic and is held constant during differentiation.
"""

from __future__ import annotations

import struct

import numpy as np

from .imgcore import ImageRGB, ScalarMap, _ssim_backward, _ssim_forward

GAMMA_CLAMP_LO = 0.05
GAMMA_CLAMP_HI = 20.0
GAMMA_BASE_EPS = 1e-6
FIELD_SIZE = 224          # conv feature map / illumination grid resolution
DEFAULT_LAMBDA = 0.2

ILLUM_MAGIC = b"GSI3ILL1"


class GammaParams:
    """Learnable (a, b, c, d) defining the per-view gamma range."""

    def __init__(self, a=1.0, b=0.0, c=1.0, d=0.0):
        self.value = np.array([a, b, c, d], dtype=np.float64)
        self.grad = np.zeros(4)

    a = property(lambda self: float(self.value[0]))
    b = property(lambda self: float(self.value[1]))
    c = property(lambda self: float(self.value[2]))
    d = property(lambda self: float(self.value[3]))

    def zero_grad(self):
        self.grad[:] = 0.0


class ConvWeights:
    """Two-layer refinement net: 3x3 conv 3->64, ReLU, 3x3 conv 64->1, ReLU."""

    def __init__(self, w1, b1, w2, b2):
        self.w1 = np.asarray(w1, dtype=np.float64)   # (3, 3, 3, 64)  ky,kx,cin,cout
        self.b1 = np.asarray(b1, dtype=np.float64)   # (64,)
        self.w2 = np.asarray(w2, dtype=np.float64)   # (3, 3, 64)     ky,kx,cin
        self.b2 = np.asarray(b2, dtype=np.float64)   # (1,)
        if self.w1.shape != (3, 3, 3, 64) or self.b1.shape != (64,):
            raise ValueError("layer1 must be 3x3, 3->64 with 64 biases")
        if self.w2.shape != (3, 3, 64) or self.b2.shape != (1,):
            raise ValueError("layer2 must be 3x3, 64->1 with 1 bias")
        self.g_w1 = np.zeros_like(self.w1)
        self.g_b1 = np.zeros_like(self.b1)
        self.g_w2 = np.zeros_like(self.w2)
        self.g_b2 = np.zeros_like(self.b2)

    @classmethod
    def initial(cls, rng: np.random.Generator) -> "ConvWeights":
        w1 = rng.uniform(-0.05, 0.05, size=(3, 3, 3, 64))
        w2 = rng.uniform(-0.05, 0.05, size=(3, 3, 64))
        return cls(w1, np.zeros(64), w2, np.zeros(1))

    def zero_grad(self):
        self.g_w1[:] = 0.0
        self.g_b1[:] = 0.0
        self.g_w2[:] = 0.0
        self.g_b2[:] = 0.0


class IlluminationField:
    """Learnable positive 224x224 gain grid, one per training view."""

    def __init__(self, m=None):
        if m is None:
            m = np.ones((FIELD_SIZE, FIELD_SIZE))
        self.m = np.asarray(m, dtype=np.float64)
        if self.m.shape != (FIELD_SIZE, FIELD_SIZE):
            raise ValueError(f"illumination grid must be {FIELD_SIZE}x{FIELD_SIZE}")
        if not np.all(self.m > 0):
            raise ValueError("illumination grid entries must be positive")
        self.grad = np.zeros_like(self.m)

    def zero_grad(self):
        self.grad[:] = 0.0


# ---------------------------------------------------------------------------
# coarse stage: learnable gamma range applied by brightness rank
# ---------------------------------------------------------------------------

def _gamma_range_fwd(gp: GammaParams):
    a, b, c, d = gp.value
    raw_lo = a * np.exp(b)
    raw_hi = c * np.exp(d)
    lo = float(np.clip(raw_lo, GAMMA_CLAMP_LO, GAMMA_CLAMP_HI))
    hi = float(np.clip(raw_hi, GAMMA_CLAMP_LO, GAMMA_CLAMP_HI))
    swapped = lo > hi
    if swapped:
        lo, hi = hi, lo
    cache = {
        "lo_active": GAMMA_CLAMP_LO < raw_lo < GAMMA_CLAMP_HI,
        "hi_active": GAMMA_CLAMP_LO < raw_hi < GAMMA_CLAMP_HI,
        "swapped": swapped,
        "raw_lo": raw_lo,
        "raw_hi": raw_hi,
        "exp_b": np.exp(b),
        "exp_d": np.exp(d),
        "a": a,
        "c": c,
    }
    return lo, hi, cache


def _gamma_range_bwd(cache, d_gmin: float, d_gmax: float) -> np.ndarray:
    if cache["swapped"]:
        d_lo, d_hi = d_gmax, d_gmin
    else:
        d_lo, d_hi = d_gmin, d_gmax
    g = np.zeros(4)
    if cache["lo_active"]:
        g[0] = d_lo * cache["exp_b"]
        g[1] = d_lo * cache["raw_lo"]
    if cache["hi_active"]:
        g[2] = d_hi * cache["exp_d"]
        g[3] = d_hi * cache["raw_hi"]
    return g


def gamma_range(gp: GammaParams):
    """(gamma_min, gamma_max) = clamp(a*e^b), clamp(c*e^d), sorted by swap."""
    lo, hi, _ = _gamma_range_fwd(gp)
    return lo, hi


def gamma_of_rank(gmin: float, gmax: float, p):
    """Linear interpolation of the gamma range by percentile rank p."""
    return gmin + np.asarray(p) * (gmax - gmin)


def apply_gamma(i_gt: ImageRGB, p: ScalarMap, gp: GammaParams) -> ImageRGB:
    """Raise each channel to the rank-interpolated gamma of its pixel."""
    gmin, gmax, _ = _gamma_range_fwd(gp)
    gamma = gamma_of_rank(gmin, gmax, p.data)
    base = np.clip(i_gt.data, GAMMA_BASE_EPS, 1.0)
    return ImageRGB(base ** gamma[..., None])


# ---------------------------------------------------------------------------
# bilinear resize as an explicit linear operator (exact adjoint)
# ---------------------------------------------------------------------------

_resize_cache: dict = {}


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) bilinear interpolation matrix, half-pixel centers."""
    key = (src, dst)
    if key not in _resize_cache:
        pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, src - 1)
        f = pos - i0
        r = np.zeros((dst, src))
        np.add.at(r, (np.arange(dst), i0), 1.0 - f)
        np.add.at(r, (np.arange(dst), i1), f)
        _resize_cache[key] = r
    return _resize_cache[key]


def _apply_separable(x: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    """y[i,j(,c)] = sum_{a,b} my[i,a] mx[j,b] x[a,b(,c)] via two GEMMs."""
    t = np.tensordot(my, x, (1, 0))
    if x.ndim == 2:
        return t @ mx.T
    u = np.tensordot(t, mx, (1, 1))          # (dh, C, dw)
    return np.ascontiguousarray(u.transpose(0, 2, 1))


def resize_bilinear(x: np.ndarray, dst_h: int, dst_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array."""
    return _apply_separable(x, _resize_matrix(x.shape[0], dst_h),
                            _resize_matrix(x.shape[1], dst_w))


def resize_bilinear_adjoint(g: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Exact adjoint of :func:`resize_bilinear` for gradients."""
    return _apply_separable(g, _resize_matrix(src_h, g.shape[0]).T,
                            _resize_matrix(src_w, g.shape[1]).T)


# ---------------------------------------------------------------------------
# fine stage: two-layer conv refinement of the rendered image
# ---------------------------------------------------------------------------

_TAP_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


class _ConvScratch:
    """Preallocated work buffers; the conv stack is memory-bound and runs
    every iteration, so allocations are hoisted out of the hot path and the
    tap-patch layout is kept channel-major so every copy is contiguous. One
    scratch per ConvWeights instance; forward state stays valid until the
    next forward on the same instance."""

    def __init__(self):
        n = FIELD_SIZE
        self.xpad = np.zeros((3, n + 2, n + 2))       # channel-first, zero border
        self.patches = np.empty((27, n * n))          # tap-major rows
        self.z1 = np.empty((n * n, 64))               # becomes a1 in place
        self.mask1 = np.empty((n * n, 64), dtype=bool)
        self.q = np.empty((9, n * n))                 # tap-major rows
        self.qpad = np.zeros((9, n + 2, n + 2))
        self.z2 = np.empty((n, n))
        self.mask2 = np.empty((n, n), dtype=bool)
        self.da1 = np.empty((n * n, 64))
        self.dxpad = np.empty((3, n + 2, n + 2))


def _scratch(w: ConvWeights) -> _ConvScratch:
    s = getattr(w, "_scratch", None)
    if s is None:
        s = _ConvScratch()
        w._scratch = s
    return s


def _conv_stack_fwd(small: np.ndarray, w: ConvWeights):
    """small (224,224,3) -> relu(conv2(relu(conv1(small)))) as (224,224)."""
    n = FIELD_SIZE
    s = _scratch(w)
    for c in range(3):
        s.xpad[c, 1:-1, 1:-1] = small[:, :, c]
    pv = s.patches.reshape(9, 3, n, n)
    for t, (dy, dx) in enumerate(_TAP_OFFSETS):
        np.copyto(pv[t], s.xpad[:, dy:dy + n, dx:dx + n])
    # rows of `patches` are (tap, channel), matching w1's (ky, kx, cin) layout
    w1m = np.ascontiguousarray(w.w1.reshape(27, 64))
    np.dot(s.patches.T, w1m, out=s.z1)
    s.z1 += w.b1
    np.greater(s.z1, 0.0, out=s.mask1)
    np.maximum(s.z1, 0.0, out=s.z1)               # a1, in place
    taps = np.ascontiguousarray(w.w2.reshape(9, 64))
    np.dot(taps, s.z1.T, out=s.q)
    qv = s.q.reshape(9, n, n)
    np.copyto(s.qpad[:, 1:-1, 1:-1], qv)
    s.z2[:] = w.b2[0]
    for t, (dy, dx) in enumerate(_TAP_OFFSETS):
        s.z2 += s.qpad[t, dy:dy + n, dx:dx + n]
    np.greater(s.z2, 0.0, out=s.mask2)
    f2 = s.z2 * s.mask2
    cache = {"scratch": s, "w1m": w1m, "taps": taps}
    return f2, cache


def _conv_stack_bwd(cache, w: ConvWeights, d_f2: np.ndarray):
    """Accumulates weight gradients on `w`; returns gradient w.r.t. `small`."""
    n = FIELD_SIZE
    s = cache["scratch"]
    dz2 = d_f2 * s.mask2
    w.g_b2[0] += dz2.sum()
    s.qpad[:] = 0.0  # the forward left its taps here
    for t, (dy, dx) in enumerate(_TAP_OFFSETS):
        s.qpad[t, dy:dy + n, dx:dx + n] = dz2
    np.copyto(s.q.reshape(9, n, n), s.qpad[:, 1:-1, 1:-1])
    # restore the zero border for the next forward (which rewrites the interior)
    s.qpad[:, 0, :] = 0.0
    s.qpad[:, -1, :] = 0.0
    s.qpad[:, :, 0] = 0.0
    s.qpad[:, :, -1] = 0.0
    w.g_w2 += (s.q @ s.z1).reshape(3, 3, 64)          # s.z1 holds a1
    np.dot(s.q.T, cache["taps"], out=s.da1)
    s.da1 *= s.mask1
    w.g_b1 += s.da1.sum(axis=0)
    w.g_w1 += (s.patches @ s.da1).reshape(3, 3, 3, 64)
    np.dot(cache["w1m"], s.da1.T, out=s.patches)      # dpatches, reuses buffer
    s.dxpad[:] = 0.0
    pv = s.patches.reshape(9, 3, n, n)
    for t, (dy, dx) in enumerate(_TAP_OFFSETS):
        s.dxpad[:, dy:dy + n, dx:dx + n] += pv[t]
    return np.ascontiguousarray(s.dxpad[:, 1:-1, 1:-1].transpose(1, 2, 0))


def refine_features(i_rendered: ImageRGB, w: ConvWeights) -> ScalarMap:
    """Resize the render to 224x224 and run the two-layer refinement net."""
    small = resize_bilinear(i_rendered.data, FIELD_SIZE, FIELD_SIZE)
    f2, _ = _conv_stack_fwd(small, w)
    return ScalarMap(f2)


def fuse(field: IlluminationField, f2: ScalarMap) -> ScalarMap:
    """Elementwise product of the illumination grid with the conv features."""
    if f2.data.shape != field.m.shape:
        raise ValueError("fuse: feature map shape mismatch")
    return ScalarMap(field.m * f2.data)


def modulate(f_map: ScalarMap, i_rendered: ImageRGB) -> ImageRGB:
    """Upsample the fused map to the render's resolution and multiply in."""
    up = resize_bilinear(f_map.data, i_rendered.height, i_rendered.width)
    return ImageRGB(up[..., None] * i_rendered.data)


# ---------------------------------------------------------------------------
# weighted L1 / SSIM photometric loss (per-pixel map feeds the normal gate)
# ---------------------------------------------------------------------------

def _photometric_fwd(a: np.ndarray, b: np.ndarray, lam: float):
    l1 = np.mean(np.abs(a - b), axis=-1)
    ssim, ssim_cache = _ssim_forward(a, b)
    per_pixel = (1.0 - lam) * l1 + lam * (1.0 - ssim)
    scalar = float(per_pixel.mean())
    cache = {"a": a, "b": b, "lam": lam, "ssim_cache": ssim_cache}
    return scalar, per_pixel, cache


def _photometric_bwd(cache, d_scalar: float):
    a, b, lam = cache["a"], cache["b"], cache["lam"]
    dpp = np.full(a.shape[:2], d_scalar / (a.shape[0] * a.shape[1]))
    d_l1 = (1.0 - lam) * dpp
    d_a = np.sign(a - b) * (d_l1 / 3.0)[..., None]
    d_b = -d_a
    sa, sb = _ssim_backward(cache["ssim_cache"], -lam * dpp)
    return d_a + sa, d_b + sb


def illum_loss(i_map: ImageRGB, i_gm: ImageRGB, lam: float = DEFAULT_LAMBDA):
    """(1-lam)*L1 + lam*(1-SSIM); returns (scalar mean, per-pixel map)."""
    if i_map.data.shape != i_gm.data.shape:
        raise ValueError("illum_loss: image dimensions differ")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    scalar, per_pixel, _ = _photometric_fwd(i_map.data, i_gm.data, lam)
    return scalar, ScalarMap(per_pixel)


# ---------------------------------------------------------------------------
# full forward / backward pipeline over one view
# ---------------------------------------------------------------------------

class IllumState:
    """Recorded intermediates of one illumination forward pass."""

    __slots__ = ("gt_base", "p", "gamma_map", "i_gm", "small", "conv_cache",
                 "f2", "fmap", "up", "rendered", "i_map", "pcache",
                 "range_cache", "gp", "conv", "field", "loss", "per_pixel")


def illum_forward(i_gt: np.ndarray, p_rank: np.ndarray, i_rendered: np.ndarray,
                  gp: GammaParams, conv: ConvWeights, field: IlluminationField,
                  lam: float = DEFAULT_LAMBDA) -> IllumState:
    """Runs the two-stage adjustment and loss; all arrays are (H, W[, 3])."""
    st = IllumState()
    st.gp, st.conv, st.field, st.p = gp, conv, field, p_rank
    gmin, gmax, st.range_cache = _gamma_range_fwd(gp)
    st.gamma_map = gamma_of_rank(gmin, gmax, p_rank)
    st.gt_base = np.clip(i_gt, GAMMA_BASE_EPS, 1.0)
    st.i_gm = st.gt_base ** st.gamma_map[..., None]
    st.rendered = i_rendered
    st.small = resize_bilinear(i_rendered, FIELD_SIZE, FIELD_SIZE)
    st.f2, st.conv_cache = _conv_stack_fwd(st.small, conv)
    st.fmap = field.m * st.f2
    st.up = resize_bilinear(st.fmap, i_rendered.shape[0], i_rendered.shape[1])
    st.i_map = st.up[..., None] * i_rendered
    st.loss, st.per_pixel, st.pcache = _photometric_fwd(st.i_map, st.i_gm, lam)
    return st


def illum_backward(state: IllumState, d_loss: float = 1.0) -> np.ndarray:
    """Accumulates gradients on the learnables; returns dL/d(rendered image)."""
    st = state
    d_imap, d_igm = _photometric_bwd(st.pcache, d_loss)
    # modulation path
    d_up = np.sum(d_imap * st.rendered, axis=-1)
    d_rendered = d_imap * st.up[..., None]
    d_fmap = resize_bilinear_adjoint(d_up, FIELD_SIZE, FIELD_SIZE)
    st.field.grad += d_fmap * st.f2
    d_f2 = d_fmap * st.field.m
    d_small = _conv_stack_bwd(st.conv_cache, st.conv, d_f2)
    d_rendered += resize_bilinear_adjoint(
        d_small, st.rendered.shape[0], st.rendered.shape[1])
    # gamma path (gradient flows through the mapped target image)
    d_gamma = np.sum(d_igm * st.i_gm * np.log(st.gt_base), axis=-1)
    d_gmin = float(np.sum(d_gamma * (1.0 - st.p)))
    d_gmax = float(np.sum(d_gamma * st.p))
    st.gp.grad += _gamma_range_bwd(st.range_cache, d_gmin, d_gmax)
    return d_rendered


# ---------------------------------------------------------------------------
# checkpoint record: per-view gamma + grid, shared conv weights
# ---------------------------------------------------------------------------

def save_illum_state(path, gammas, fields, conv: ConvWeights) -> None:
    """Flat little-endian float32 record with a versioned magic header."""
    if len(gammas) != len(fields):
        raise ValueError("per-view gamma/grid count mismatch")
    with open(path, "wb") as f:
        f.write(ILLUM_MAGIC)
        f.write(struct.pack("<II", 1, len(gammas)))
        for arr in (conv.w1, conv.b1, conv.w2, conv.b2):
            f.write(arr.astype("<f4").tobytes())
        for gp, fld in zip(gammas, fields):
            f.write(gp.value.astype("<f4").tobytes())
            f.write(fld.m.astype("<f4").tobytes())


def load_illum_state(path):
    """Inverse of :func:`save_illum_state`; returns (gammas, fields, conv)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != ILLUM_MAGIC:
            raise ValueError(f"not an illumination checkpoint (magic {magic!r})")
        version, n_views = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"unsupported illumination checkpoint version {version}")

        def arr(shape):
            count = int(np.prod(shape))
            raw = f.read(4 * count)
            if len(raw) < 4 * count:
                raise ValueError("truncated illumination checkpoint")
            return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

        conv = ConvWeights(arr((3, 3, 3, 64)), arr((64,)), arr((3, 3, 64)), arr((1,)))
        gammas, fields = [], []
        for _ in range(n_views):
            v = arr((4,))
            gammas.append(GammaParams(*v))
            fields.append(IlluminationField(arr((FIELD_SIZE, FIELD_SIZE))))
    return gammas, fields, conv
