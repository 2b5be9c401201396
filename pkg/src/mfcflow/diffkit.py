"""Parameter gradients and central-difference velocity/score estimators.

The flow's velocity field and the score of its pushed-forward density are
estimated with central differences in t and x respectively.  Both estimators
are plain flow evaluations, so they stay differentiable with respect to the
trainable parameters and can sit inside training losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import grad, val  # re-exported: gradient engine entry point
from .conditioner import unpack_params
from .flow import gaussian_log_pdf, transform

__all__ = ["grad", "velocity_fd", "score_fd"]


def _velocity(arch, nets, z, t_rows, dt):
    """(f(z, t + dt/2) - f(z, t - dt/2)) / dt on a row batch."""
    n = np.shape(val(z))[0]
    z2 = ad.concatenate([z, z], axis=0) if isinstance(z, ad.Tensor) else np.concatenate([val(z), val(z)], axis=0)
    t2 = np.concatenate([t_rows + dt / 2.0, t_rows - dt / 2.0])
    x2, _ = transform(arch, nets, z2, t2)
    return (x2[:n] - x2[n:]) / dt


def _log_density(arch, nets, x, t_rows):
    z, logdet_inv = transform(arch, nets, x, t_rows, inverse=True)
    return gaussian_log_pdf(z) + logdet_inv


def _score(arch, nets, x, t_rows, dx):
    """Central-difference gradient of log p at the rows of ``x``."""
    n, d = np.shape(val(x))
    blocks = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = dx / 2.0
        blocks.append(x + e)
        blocks.append(x - e)
    stack = ad.concatenate(blocks, axis=0)
    lp = _log_density(arch, nets, stack, np.tile(t_rows, 2 * d))
    cols = [(lp[2 * i * n:(2 * i + 1) * n] - lp[(2 * i + 1) * n:(2 * i + 2) * n]) / dx
            for i in range(d)]
    return ad.column_stack(cols)


def _expand_time(t, n):
    tv = np.asarray(val(t), dtype=float)
    return np.full(n, float(tv)) if tv.ndim == 0 else tv


def velocity_fd(model, z, t, dt=1e-3, params=None):
    """Central-difference time derivative of the push-forward map at (z, t).

    Times t +/- dt/2 may fall outside [0, T]; conditioners accept any real
    time.  ``z`` is (d,) or (N, d).
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    single = np.ndim(val(z)) == 1
    zb = np.atleast_2d(np.asarray(val(z), dtype=float))
    nets = unpack_params(model.arch, model.params if params is None else params)
    v = _velocity(model.arch, nets, zb, _expand_time(t, zb.shape[0]), dt)
    if single and not isinstance(v, ad.Tensor):
        return v[0]
    return v


def score_fd(model, x, t, dx=1e-3, params=None):
    """Central-difference spatial gradient of log p(., t) at the rows of ``x``.

    Costs 2d log-density evaluations, independent of how the density is
    parametrized.  ``x`` is (d,) or (N, d).
    """
    if dx <= 0:
        raise ValueError(f"space step must be positive, got {dx}")
    single = np.ndim(val(x)) == 1
    if single:
        x = x.reshape((1, -1)) if isinstance(x, ad.Tensor) else np.asarray(val(x), float)[None, :]
    nets = unpack_params(model.arch, model.params if params is None else params)
    s = _score(model.arch, nets, x, _expand_time(t, np.shape(val(x))[0]), dx)
    if single and not isinstance(s, ad.Tensor):
        return s[0]
    return s
