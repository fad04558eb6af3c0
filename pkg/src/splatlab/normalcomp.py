"""Threshold-gated normal supervision against a reference-normal provider.

Pixels whose per-pixel photometric loss exceeds a threshold T are supervised
toward reference normals (here: the synthetic oracle) with an L1 penalty; a
separate ungated term penalizes the forward-difference spatial gradients of
the normal field. Both are means over pixels so the weights are resolution
independent. Subgradient convention for L1 is sign(x) with 0 at x = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import NormalMap, ScalarMap


@dataclass
class LossWeights:
    """Balance and gate hyperparameters of the total training objective."""

    lam: float = 0.2           # SSIM share inside the photometric loss
    threshold: float = 0.1     # per-pixel gate on the photometric map
    w_illum: float = 1.0
    w_normal: float = 0.15
    w_gradient: float = 0.0015
    w_mvs: float = 0.03
    gate_gradient: bool = False  # literal reading: gradient term ungated

    def __post_init__(self):
        vals = (self.threshold, self.w_illum, self.w_normal, self.w_gradient, self.w_mvs)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights and threshold must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


@dataclass(frozen=True)
class GateMask:
    """Per-pixel boolean mask: True where reference-normal supervision is on."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if b.ndim != 2:
            raise ValueError("GateMask needs a (H, W) boolean array")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    @property
    def count(self) -> int:
        return int(self.bits.sum())


def gate(per_pixel_loss: ScalarMap, threshold: float) -> GateMask:
    """Strictly-greater threshold test; a pixel at exactly T stays ungated."""
    return GateMask(per_pixel_loss.data > threshold)


# ---------------------------------------------------------------------------
# gated L1 normal loss
# ---------------------------------------------------------------------------

def _normal_loss_fwd(pred: np.ndarray, pred_valid: np.ndarray,
                     ref: np.ndarray, ref_valid: np.ndarray, bits: np.ndarray):
    both = pred_valid & ref_valid
    used = bits & both
    skipped = int(np.sum(bits & ~both))
    count = int(used.sum())
    if count == 0:
        return 0.0, 0, skipped, {"used": used, "count": 0}
    diff = pred - ref
    loss = float(np.sum(np.abs(diff[used])) / count)
    return loss, count, skipped, {"used": used, "count": count, "diff": diff}


def _normal_loss_bwd(cache, d_loss: float) -> np.ndarray:
    if cache["count"] == 0:
        h, w = cache["used"].shape
        return np.zeros((h, w, 3))
    s = np.sign(cache["diff"]) * cache["used"][..., None]
    return s * (d_loss / cache["count"])


def normal_loss(n_pred: NormalMap, n_ref: NormalMap, mask: GateMask) -> float:
    """Mean L1 normal difference over gated, mutually valid pixels."""
    if n_pred.data.shape != n_ref.data.shape:
        raise ValueError("normal_loss: dimensions differ")
    loss, _, _, _ = _normal_loss_fwd(
        n_pred.data, n_pred.valid, n_ref.data, n_ref.valid, mask.bits)
    return loss


# ---------------------------------------------------------------------------
# forward-difference normal gradients and their L1 consistency loss
# ---------------------------------------------------------------------------

def _forward_diff(d: np.ndarray, v: np.ndarray):
    h, w = v.shape
    grad = np.zeros((h, w, 2, 3))
    defined = np.zeros((h, w, 2), dtype=bool)
    grad[:, :-1, 0, :] = d[:, 1:] - d[:, :-1]
    defined[:, :-1, 0] = v[:, 1:] & v[:, :-1]
    grad[:-1, :, 1, :] = d[1:] - d[:-1]
    defined[:-1, :, 1] = v[1:] & v[:-1]
    grad *= defined[..., None]
    return grad, defined


def normal_gradient(n: NormalMap):
    """Forward differences per channel.

    Returns (grad, defined) with grad shaped (H, W, 2, 3) -- x-difference then
    y-difference -- and defined (H, W, 2) marking sites where both samples of
    the stencil are valid; everything else is zero and excluded.
    """
    return _forward_diff(n.data, n.valid)


def _gradient_loss_fwd(pred: np.ndarray, pred_valid: np.ndarray,
                       ref: np.ndarray, ref_valid: np.ndarray,
                       bits=None):
    gp, dp = _forward_diff(pred, pred_valid)
    gr, dr = _forward_diff(ref, ref_valid)
    mutual = pred_valid & ref_valid
    if bits is not None:
        mutual = mutual & bits
    count = int(mutual.sum())
    if count == 0:
        return 0.0, {"count": 0, "shape": pred.shape}
    both = dp & dr
    diff = (gp - gr) * both[..., None]
    loss = float(np.sum(np.abs(diff) * mutual[:, :, None, None]) / count)
    cache = {"count": count, "sign": np.sign(diff) * mutual[:, :, None, None],
             "shape": pred.shape}
    return loss, cache


def _gradient_loss_bwd(cache, d_loss: float) -> np.ndarray:
    if cache["count"] == 0:
        return np.zeros(cache["shape"])
    s = cache["sign"] * (d_loss / cache["count"])
    d_pred = np.zeros(cache["shape"])
    sx = s[:, :, 0, :]
    d_pred[:, 1:] += sx[:, :-1]
    d_pred[:, :-1] -= sx[:, :-1]
    sy = s[:, :, 1, :]
    d_pred[1:] += sy[:-1]
    d_pred[:-1] -= sy[:-1]
    return d_pred


def gradient_loss(n_pred: NormalMap, n_ref: NormalMap, mask: GateMask = None) -> float:
    """Mean L1 difference of the normal gradients over mutually valid pixels.

    Ungated by default; pass a mask to restrict it to the gated pixels.
    """
    if n_pred.data.shape != n_ref.data.shape:
        raise ValueError("gradient_loss: dimensions differ")
    bits = mask.bits if mask is not None else None
    loss, _ = _gradient_loss_fwd(
        n_pred.data, n_pred.valid, n_ref.data, n_ref.valid, bits)
    return loss


def total_loss(l_illum: float, l_normal: float, l_gradient: float,
               l_mvs: float, w: LossWeights) -> float:
    """Weighted sum of the four loss components."""
    comps = (l_illum, l_normal, l_gradient, l_mvs)
    if any(not np.isfinite(c) for c in comps):
        raise ValueError("loss components must be finite")
    if any(c < 0 for c in comps):
        raise ValueError("loss components must be non-negative")
    return (w.w_illum * l_illum + w.w_normal * l_normal
            + w.w_gradient * l_gradient + w.w_mvs * l_mvs)


def normal_comp_backward(n_pred: NormalMap, n_ref: NormalMap, mask: GateMask,
                         d_normal: float = 1.0, d_gradient: float = 1.0,
                         gate_gradient: bool = False) -> np.ndarray:
    """dL/d(predicted normal map) for the gated L1 and gradient terms."""
    if n_pred.data.shape != n_ref.data.shape:
        raise ValueError("normal_comp_backward: dimensions differ")
    _, _, _, ncache = _normal_loss_fwd(
        n_pred.data, n_pred.valid, n_ref.data, n_ref.valid, mask.bits)
    bits = mask.bits if gate_gradient else None
    _, gcache = _gradient_loss_fwd(
        n_pred.data, n_pred.valid, n_ref.data, n_ref.valid, bits)
    return _normal_loss_bwd(ncache, d_normal) + _gradient_loss_bwd(gcache, d_gradient)
