"""Monotone rational-quadratic splines with identity tails.

A spline is described by K+1 knots ``(knots_x[k], knots_y[k])`` strictly
increasing on [-B, B] and a positive derivative at every knot.  On the k-th
bin, with s = (y_{k+1}-y_k)/(x_{k+1}-x_k) and xi = (x-x_k)/(x_{k+1}-x_k),

    f(x) = y_k + (y_{k+1}-y_k) [s xi^2 + d_k xi(1-xi)]
                 / [s + (d_{k+1} + d_k - 2s) xi(1-xi)],

which interpolates the knots with the prescribed derivatives and is strictly
increasing whenever all derivatives are positive.  Outside [-B, B] the map is
the identity; boundary derivatives are fixed to 1 so the transform is C^1 on
the whole line.

All functions accept scalars, 1-D batches, or traced tensors from
:mod:`mfcflow.autodiff`; parameter arrays may carry a leading batch dimension
(one parameter set per input row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import val

# Decoder constants: bins never collapse below MIN_BIN_FRACTION of the box,
# derivatives never fall below MIN_DERIVATIVE, and the softplus offset makes
# all-zero raw parameters decode to the identity map.
MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-4
IDENTITY_OFFSET = math.log(math.e - 1.0)


class DecodeError(ValueError):
    """Raised for non-finite raw parameters or an invalid bin count."""


@dataclass(frozen=True)
class SplineParams:
    """Decoded knots and knot derivatives of one monotone spline.

    Arrays have shape (K+1,) for a single spline or (N, K+1) for a batch of
    per-sample splines.
    """

    knots_x: object
    knots_y: object
    derivs: object
    tail_bound: float

    @property
    def n_bins(self):
        return np.shape(val(self.knots_x))[-1] - 1


def identity_params(n_bins=5, tail_bound=8.0):
    """Spline params of the exact identity map on [-B, B]."""
    knots = np.linspace(-tail_bound, tail_bound, n_bins + 1)
    return SplineParams(knots, knots.copy(), np.ones(n_bins + 1), tail_bound)


def validate_params(p):
    """Check the spline-parameter invariants, raising ValueError on failure."""
    kx, ky, dv = (np.atleast_2d(val(a)) for a in (p.knots_x, p.knots_y, p.derivs))
    B = p.tail_bound
    if B <= 0:
        raise ValueError("tail bound must be positive")
    if kx.shape != ky.shape or kx.shape != dv.shape or kx.shape[-1] < 2:
        raise ValueError("knot/derivative arrays must share shape (..., K+1), K >= 1")
    if not (np.all(kx[:, 0] == -B) and np.all(kx[:, -1] == B)
            and np.all(ky[:, 0] == -B) and np.all(ky[:, -1] == B)):
        raise ValueError("knots must span [-B, B] exactly")
    min_size = MIN_BIN_FRACTION * 2 * B
    if not (np.all(np.diff(kx, axis=-1) >= min_size - 1e-12)
            and np.all(np.diff(ky, axis=-1) >= min_size - 1e-12)):
        raise ValueError("bin widths/heights below the configured minimum")
    if not np.all(dv > 0):
        raise ValueError("knot derivatives must be positive")
    if not (np.all(dv[:, 0] == 1.0) and np.all(dv[:, -1] == 1.0)):
        raise ValueError("boundary derivatives must equal 1")


def _normalized_bins(seg, tail_bound):
    """softmax(seg) * 2B, floored at the minimum bin size and renormalized.

    The floor-and-renormalize step is an exact water-filling: clamped bins sit
    at the minimum while the free bins are rescaled to restore the total 2B,
    iterated until no new bin falls below the floor.  When no bin clamps this
    reduces to softmax(seg) * 2B exactly.
    """
    total = 2.0 * tail_bound
    min_size = MIN_BIN_FRACTION * total
    n_bins = np.shape(val(seg))[-1]

    w = ad.softmax(seg, axis=-1) * total
    raw = val(w)
    if raw.min() >= min_size:
        return w  # softmax output already sums to 2B; no clamping needed

    free = np.ones_like(raw, dtype=bool)
    for _ in range(n_bins):
        n_clamped = (~free).sum(axis=-1, keepdims=True)
        denom = np.where(free, raw, 0.0).sum(axis=-1, keepdims=True)
        alpha = (total - min_size * n_clamped) / denom
        scaled = np.where(free, raw * alpha, min_size)
        newly = free & (scaled < min_size)
        if not newly.any():
            break
        free &= ~newly

    # One traced expression using the fixed clamp pattern found above.
    n_clamped = (~free).sum(axis=-1, keepdims=True)
    denom = ad.tsum(ad.where(free, w, 0.0), axis=-1, keepdims=True)
    alpha = (total - min_size * n_clamped) / denom
    return ad.where(free, w * alpha, min_size)


def decode_theta(raw, tail_bound=8.0, n_bins=5):
    """Decode a raw conditioner output of length 3K-1 into spline parameters.

    The first K entries set bin widths via softmax, the next K set bin heights,
    and the final K-1 set the internal knot derivatives via a softplus with the
    identity offset.  ``raw`` may be shaped (3K-1,) or (N, 3K-1).
    """
    if n_bins < 1:
        raise DecodeError(f"bin count must be >= 1, got {n_bins}")
    if tail_bound <= 0:
        raise DecodeError(f"tail bound must be positive, got {tail_bound}")
    rv = val(raw)
    if np.shape(rv)[-1] != 3 * n_bins - 1:
        raise DecodeError(f"raw parameter length {np.shape(rv)[-1]} != 3K-1 = {3 * n_bins - 1}")
    if not np.all(np.isfinite(rv)):
        raise DecodeError("raw spline parameters contain non-finite entries")

    single = np.ndim(rv) == 1
    if single:
        raw = raw.reshape((1, -1)) if isinstance(raw, ad.Tensor) else np.asarray(rv, float)[None, :]

    K, B = n_bins, tail_bound
    widths = _normalized_bins(raw[:, :K], B)
    heights = _normalized_bins(raw[:, K:2 * K], B)

    n = np.shape(val(widths))[0]
    edge = np.full((n, 1), float(B))
    # Interior knots by cumulative sum; endpoints pinned to +/-B exactly.
    knots_x = ad.concatenate([-edge, ad.cumsum(widths, axis=-1)[:, :K - 1] - B, edge], axis=1)
    knots_y = ad.concatenate([-edge, ad.cumsum(heights, axis=-1)[:, :K - 1] - B, edge], axis=1)

    ones = np.ones((n, 1))
    if K > 1:
        inner = ad.maximum(ad.softplus(raw[:, 2 * K:] + IDENTITY_OFFSET), MIN_DERIVATIVE)
        derivs = ad.concatenate([ones, inner, ones], axis=1)
    else:
        derivs = ad.concatenate([ones, ones], axis=1)

    if single and not isinstance(raw, ad.Tensor):
        return SplineParams(val(knots_x)[0], val(knots_y)[0], val(derivs)[0], B)
    return SplineParams(knots_x, knots_y, derivs, B)


def _bin_index(knots, x):
    """Index of the bin containing each x (data-level, clipped to [0, K-1])."""
    kv = np.atleast_2d(val(knots))
    K = kv.shape[-1] - 1
    idx = (kv[:, :-1] <= np.asarray(x).reshape(-1, 1)).sum(axis=1) - 1
    return np.clip(idx, 0, K - 1)


def _as_rows(p, n):
    """Broadcast single-spline parameter arrays to n rows."""
    def rows(a):
        av = val(a)
        if np.ndim(av) == 1:
            if isinstance(a, ad.Tensor):
                a = a.reshape((1, -1))
                av = val(a)
            else:
                a = av[None, :]
            return a, True
        return a, False

    kx, bx = rows(p.knots_x)
    ky, _ = rows(p.knots_y)
    dv, _ = rows(p.derivs)
    if bx and np.shape(val(kx))[0] == 1 and n > 1:
        # plain-numpy broadcast; traced params are always built per-row
        kx, ky, dv = (np.broadcast_to(val(a), (n, val(a).shape[-1])) for a in (kx, ky, dv))
    return kx, ky, dv


def _gather_bin(kx, ky, dv, idx):
    if isinstance(kx, ad.Tensor) or isinstance(ky, ad.Tensor) or isinstance(dv, ad.Tensor):
        xl = ad.gather_rows(kx, idx)
        xr = ad.gather_rows(kx, idx + 1)
        yl = ad.gather_rows(ky, idx)
        yr = ad.gather_rows(ky, idx + 1)
        dl = ad.gather_rows(dv, idx)
        dr = ad.gather_rows(dv, idx + 1)
    else:
        r = np.arange(len(idx))
        xl, xr = kx[r, idx], kx[r, idx + 1]
        yl, yr = ky[r, idx], ky[r, idx + 1]
        dl, dr = dv[r, idx], dv[r, idx + 1]
    return xl, xr, yl, yr, dl, dr


def _deriv_from_xi(s, dl, dr, xi):
    """dy/dx of the bin map at normalized position xi (always > 0)."""
    omx = 1.0 - xi
    denom = s + (dr + dl - 2.0 * s) * xi * omx
    num = (s * s) * (dr * xi * xi + 2.0 * s * xi * omx + dl * omx * omx)
    return num / (denom * denom)


def spline_forward(p, x):
    """Evaluate the spline and log dy/dx at ``x``; identity outside [-B, B]."""
    squeeze = np.ndim(val(x)) == 0
    xv = np.atleast_1d(np.asarray(val(x), dtype=np.float64))
    if not np.all(np.isfinite(xv)):
        raise ValueError("spline input contains non-finite entries")
    x = x if isinstance(x, ad.Tensor) else xv
    n = xv.shape[0]

    B = p.tail_bound
    inside = np.abs(xv) <= B
    kx, ky, dv = _as_rows(p, n)
    idx = _bin_index(kx, np.where(inside, xv, 0.0))
    xl, xr, yl, yr, dl, dr = _gather_bin(kx, ky, dv, idx)

    width = xr - xl
    s = (yr - yl) / width
    x_in = ad.where(inside, x, 0.0)
    xi = (x_in - xl) / width
    omx = 1.0 - xi

    denom = s + (dr + dl - 2.0 * s) * xi * omx
    y_bin = yl + (yr - yl) * (s * xi * xi + dl * xi * omx) / denom
    dydx = _deriv_from_xi(s, dl, dr, xi)

    y = ad.where(inside, y_bin, x)
    logabsdet = ad.where(inside, ad.log(dydx), 0.0)
    if squeeze and not isinstance(y, ad.Tensor):
        return float(y[0]), float(logabsdet[0])
    return y, logabsdet


def spline_inverse(p, y):
    """Invert the spline at ``y``; returns (x, log dx/dy).

    Within a bin the normalized position solves a quadratic a xi^2 + b xi + c;
    the root in [0, 1] is taken in the cancellation-free form
    2c / (-b - sqrt(b^2 - 4ac)), which also degrades gracefully to the linear
    case a = 0.
    """
    squeeze = np.ndim(val(y)) == 0
    yv = np.atleast_1d(np.asarray(val(y), dtype=np.float64))
    if not np.all(np.isfinite(yv)):
        raise ValueError("spline input contains non-finite entries")
    y = y if isinstance(y, ad.Tensor) else yv
    n = yv.shape[0]

    B = p.tail_bound
    inside = np.abs(yv) <= B
    kx, ky, dv = _as_rows(p, n)
    idx = _bin_index(ky, np.where(inside, yv, 0.0))
    xl, xr, yl, yr, dl, dr = _gather_bin(kx, ky, dv, idx)

    width = xr - xl
    height = yr - yl
    s = height / width
    y_in = ad.where(inside, y, 0.0)
    u = y_in - yl
    coef = dr + dl - 2.0 * s

    a = height * (s - dl) + u * coef
    b = height * dl - u * coef
    c = -s * u

    disc = ad.maximum(b * b - 4.0 * a * c, 0.0)
    root_den = -b - ad.sqrt(disc)
    # u = 0 gives c = 0 and root_den = -2b < 0; guard only the exact corner
    # xi = 0 where both vanish.
    root_den = ad.where(np.abs(val(root_den)) < 1e-300, -1e-300, root_den)
    xi = 2.0 * c / root_den

    # one Newton step on the bin map tightens the root to machine precision
    omx = 1.0 - xi
    den = s + coef * xi * omx
    resid = height * (s * xi * xi + dl * xi * omx) / den - u
    xi = xi - resid / (_deriv_from_xi(s, dl, dr, xi) * width)

    x_bin = xl + xi * width
    dydx = _deriv_from_xi(s, dl, dr, xi)

    x = ad.where(inside, x_bin, y)
    logabsdet = ad.where(inside, -ad.log(dydx), 0.0)
    if squeeze and not isinstance(x, ad.Tensor):
        return float(x[0]), float(logabsdet[0])
    return x, logabsdet
