"""Dense pixel buffers and the image-space primitives built on them.

Buffers are immutable after construction (the backing arrays are frozen), so
they can be shared freely between views, losses and threads. All per-pixel
reductions used here are means, keeping loss magnitudes independent of the
image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

# BT.601 luma weights; "brightness" everywhere in this package means this luma.
LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_PAD = SSIM_WINDOW // 2


class ImageIOError(Exception):
    """Base class for image file I/O failures."""


class UnsupportedImageFormat(ImageIOError):
    """Magic number / encoding the reader does not handle."""


class MalformedImageHeader(ImageIOError):
    """Header present but unparsable or inconsistent."""


class TruncatedImagePayload(ImageIOError):
    """Header promised more pixel data than the file contains."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageRGB:
    """RGB raster, shape (height, width, 3), nominal range [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"ImageRGB needs (H, W, 3) data, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageRGB data must be finite")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ScalarMap:
    """Single-channel raster, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"ScalarMap needs (H, W) data, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ScalarMap data must be finite")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit 3-vectors plus a validity mask for background pixels."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        msk = np.asarray(self.valid, dtype=bool)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"NormalMap needs (H, W, 3) data, got {arr.shape}")
        if msk.shape != arr.shape[:2]:
            raise ValueError("validity mask shape mismatch")
        if not np.all(np.isfinite(arr)):
            raise ValueError("NormalMap data must be finite")
        norms = np.linalg.norm(arr[msk], axis=-1)
        if norms.size and np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("valid normals must be unit length within 1e-4")
        object.__setattr__(self, "data", _frozen(arr))
        msk = np.ascontiguousarray(msk)
        msk.flags.writeable = False
        object.__setattr__(self, "valid", msk)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# luminance and CDF rank
# ---------------------------------------------------------------------------

def luminance(img: ImageRGB) -> ScalarMap:
    """BT.601 luma of an RGB image."""
    d = img.data
    return ScalarMap(LUMA_R * d[..., 0] + LUMA_G * d[..., 1] + LUMA_B * d[..., 2])


def cdf_rank(lum: ScalarMap) -> ScalarMap:
    """Midpoint percentile rank of each pixel within the whole map.

    p = (count_less + 0.5 * count_equal) / N, so ties are symmetric, a
    constant map ranks to 0.5 everywhere and the mean rank is exactly 0.5.
    The rank is a sorting statistic and is treated as a constant during
    differentiation.
    """
    flat = lum.data.ravel()
    n = flat.size
    # average rank in 1..N equals count_less + (count_equal + 1) / 2
    p = (rankdata(flat, method="average") - 0.5) / n
    return ScalarMap(p.reshape(lum.data.shape))


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, reflection padding) with analytic adjoint
# ---------------------------------------------------------------------------

def _gauss_taps() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - _PAD
    g = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


_TAPS = _gauss_taps()
_pad_idx_cache: dict = {}


def _pad_index(h: int, w: int) -> np.ndarray:
    key = (h, w)
    if key not in _pad_idx_cache:
        idx = np.arange(h * w, dtype=np.intp).reshape(h, w)
        _pad_idx_cache[key] = np.pad(idx, _PAD, mode="reflect")
    return _pad_idx_cache[key]


def _filter(x: np.ndarray, pad_idx: np.ndarray) -> np.ndarray:
    """Gaussian window mean with reflection-padded borders."""
    xp = x.ravel()[pad_idx]
    t = ndimage.correlate1d(xp, _TAPS, axis=0, mode="constant")[_PAD:-_PAD, :]
    return ndimage.correlate1d(t, _TAPS, axis=1, mode="constant")[:, _PAD:-_PAD]


def _filter_adjoint(g: np.ndarray, pad_idx: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`_filter` (full correlation + pad fold-back)."""
    h, w = g.shape
    gp = np.zeros((h + 2 * _PAD, w + 2 * _PAD))
    gp[_PAD:-_PAD, _PAD:-_PAD] = g
    t = ndimage.correlate1d(gp, _TAPS, axis=0, mode="constant")
    t = ndimage.correlate1d(t, _TAPS, axis=1, mode="constant")
    out = np.zeros(h * w)
    np.add.at(out, pad_idx.ravel(), t.ravel())
    return out.reshape(h, w)


class _SsimCache:
    __slots__ = ("a", "b", "mu_a", "mu_b", "s_aa", "s_bb", "s_ab",
                 "num1", "num2", "den1", "den2", "pad_idx")


def _ssim_forward(a: np.ndarray, b: np.ndarray):
    """Per-pixel SSIM averaged over channels; returns (map, cache)."""
    h, w = a.shape[:2]
    if h < _PAD + 1 or w < _PAD + 1:
        raise ValueError("image too small for the 11x11 SSIM window")
    pad_idx = _pad_index(h, w)
    c = _SsimCache()
    c.a, c.b, c.pad_idx = a, b, pad_idx
    c.mu_a = [_filter(a[..., k], pad_idx) for k in range(3)]
    c.mu_b = [_filter(b[..., k], pad_idx) for k in range(3)]
    c.s_aa = [_filter(a[..., k] * a[..., k], pad_idx) - c.mu_a[k] ** 2 for k in range(3)]
    c.s_bb = [_filter(b[..., k] * b[..., k], pad_idx) - c.mu_b[k] ** 2 for k in range(3)]
    c.s_ab = [_filter(a[..., k] * b[..., k], pad_idx) - c.mu_a[k] * c.mu_b[k] for k in range(3)]
    c.num1 = [2.0 * c.mu_a[k] * c.mu_b[k] + SSIM_C1 for k in range(3)]
    c.num2 = [2.0 * c.s_ab[k] + SSIM_C2 for k in range(3)]
    c.den1 = [c.mu_a[k] ** 2 + c.mu_b[k] ** 2 + SSIM_C1 for k in range(3)]
    c.den2 = [c.s_aa[k] + c.s_bb[k] + SSIM_C2 for k in range(3)]
    out = np.zeros((h, w))
    for k in range(3):
        out += (c.num1[k] * c.num2[k]) / (c.den1[k] * c.den2[k])
    return out / 3.0, c


def _ssim_backward(cache: _SsimCache, d_map: np.ndarray):
    """Gradients of sum(d_map * ssim_map) w.r.t. both input images."""
    c = cache
    d_a = np.zeros_like(c.a)
    d_b = np.zeros_like(c.b)
    for k in range(3):
        g = d_map / 3.0
        den = c.den1[k] * c.den2[k]
        ssim_k = (c.num1[k] * c.num2[k]) / den
        d_num1 = g * c.num2[k] / den
        d_num2 = g * c.num1[k] / den
        d_den1 = -g * ssim_k / c.den1[k]
        d_den2 = -g * ssim_k / c.den2[k]
        # windowed-statistic gradients
        d_mu_a = (2.0 * c.mu_b[k] * d_num1 + 2.0 * c.mu_a[k] * d_den1
                  - 2.0 * c.mu_a[k] * d_den2 - c.mu_b[k] * 2.0 * d_num2)
        d_mu_b = (2.0 * c.mu_a[k] * d_num1 + 2.0 * c.mu_b[k] * d_den1
                  - 2.0 * c.mu_b[k] * d_den2 - c.mu_a[k] * 2.0 * d_num2)
        d_faa = d_den2            # gradient w.r.t. filter(a*a)
        d_fbb = d_den2
        d_fab = 2.0 * d_num2
        a_k, b_k = c.a[..., k], c.b[..., k]
        d_a[..., k] += (_filter_adjoint(d_mu_a, c.pad_idx)
                        + 2.0 * a_k * _filter_adjoint(d_faa, c.pad_idx)
                        + b_k * _filter_adjoint(d_fab, c.pad_idx))
        d_b[..., k] += (_filter_adjoint(d_mu_b, c.pad_idx)
                        + 2.0 * b_k * _filter_adjoint(d_fbb, c.pad_idx)
                        + a_k * _filter_adjoint(d_fab, c.pad_idx))
    return d_a, d_b


def ssim_map(a: ImageRGB, b: ImageRGB) -> ScalarMap:
    """Per-pixel SSIM between two images (channel-averaged)."""
    if a.data.shape != b.data.shape:
        raise ValueError("ssim_map: image dimensions differ")
    out, _ = _ssim_forward(a.data, b.data)
    return ScalarMap(out)


def l1_map(a: ImageRGB, b: ImageRGB) -> ScalarMap:
    """Per-pixel mean absolute difference over channels."""
    if a.data.shape != b.data.shape:
        raise ValueError("l1_map: image dimensions differ")
    return ScalarMap(np.mean(np.abs(a.data - b.data), axis=-1))


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit) and PFM (little-endian float32) file I/O
# ---------------------------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise MalformedImageHeader("unexpected end of header")
    return buf[start:pos], pos


def write_ppm(img: ImageRGB, path) -> None:
    """8-bit binary PPM; values mapped by round(255 * clamp(v, 0, 1))."""
    q = np.rint(255.0 * np.clip(img.data, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(q.tobytes())


def read_ppm(path) -> ImageRGB:
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise UnsupportedImageFormat(f"not a binary PPM (magic {magic!r})")
    try:
        wtok, pos = _read_token(buf, pos)
        htok, pos = _read_token(buf, pos)
        mtok, pos = _read_token(buf, pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except (MalformedImageHeader, ValueError) as e:
        raise MalformedImageHeader(f"bad PPM header: {e}") from e
    if w < 1 or h < 1:
        raise MalformedImageHeader("non-positive PPM dimensions")
    if maxval != 255:
        raise UnsupportedImageFormat("only 8-bit PPM (maxval 255) is supported")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise TruncatedImagePayload(f"PPM payload has {len(payload)} of {need} bytes")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return ImageRGB(data.astype(np.float64) / 255.0)


def _write_pfm_array(arr: np.ndarray, path) -> None:
    color = arr.ndim == 3
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(b"%d %d\n" % (w, h))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(arr[::-1].astype("<f4").tobytes())  # bottom-up row order


def write_pfm(img: ImageRGB, path) -> None:
    """Lossless float32 dump (PFM, scale -1.0, bottom-up rows)."""
    _write_pfm_array(img.data, path)


def write_pfm_scalar(m: ScalarMap, path) -> None:
    _write_pfm_array(m.data, path)


def read_pfm(path):
    """Read a PFM file; returns ImageRGB for 'PF', ScalarMap for 'Pf'."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"PF", b"Pf"):
        raise UnsupportedImageFormat(f"not a PFM file (magic {magic!r})")
    try:
        wtok, pos = _read_token(buf, pos)
        htok, pos = _read_token(buf, pos)
        stok, pos = _read_token(buf, pos)
        w, h, scale = int(wtok), int(htok), float(stok)
    except (MalformedImageHeader, ValueError) as e:
        raise MalformedImageHeader(f"bad PFM header: {e}") from e
    if w < 1 or h < 1 or scale == 0.0:
        raise MalformedImageHeader("bad PFM dimensions or scale")
    pos += 1
    channels = 3 if magic == b"PF" else 1
    need = w * h * channels * 4
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise TruncatedImagePayload(f"PFM payload has {len(payload)} of {need} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    data = data.reshape(h, w, channels)[::-1]
    if channels == 3:
        return ImageRGB(data)
    return ScalarMap(data[..., 0])


def write_image(img: ImageRGB, path) -> None:
    """Dispatch on suffix: .ppm for display output, .pfm for lossless."""
    p = str(path)
    if p.endswith(".ppm"):
        write_ppm(img, path)
    elif p.endswith(".pfm"):
        write_pfm(img, path)
    else:
        raise UnsupportedImageFormat(f"unknown image suffix for {p!r}")


def read_image(path) -> ImageRGB:
    """Dispatch on magic number (P6 or PF)."""
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P6":
        return read_ppm(path)
    if magic == b"PF":
        img = read_pfm(path)
        if not isinstance(img, ImageRGB):
            raise UnsupportedImageFormat("grayscale PFM is not an RGB image")
        return img
    raise UnsupportedImageFormat(f"unrecognized magic {magic!r}")
