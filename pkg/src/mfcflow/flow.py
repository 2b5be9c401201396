"""Time-conditioned invertible flow built from autoregressive spline layers.

The map f(., t) composes autoregressive layers with alternating coupling
orders.  At step k of a layer, a conditioner network reads the k
already-transformed coordinates (and t) and emits the spline that transforms
the next coordinate, so the layer's Jacobian is triangular and the log
determinant is the sum of the per-coordinate spline log derivatives.

Densities follow the change of variables through the inverse map:
log p(x, t) = log q(z) + logdet of the inverse at x, with q standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import splines
from .autodiff import val
from .conditioner import (Architecture, index_map, init_model_params,
                          load_params, mlp_forward, save_params, unpack_params)


@dataclass
class FlowModel:
    """Architecture plus the current flat parameter vector."""

    arch: Architecture
    params: np.ndarray

    @property
    def dim(self):
        return self.arch.dim

    def copy(self):
        return FlowModel(self.arch, self.params.copy())


def build_model(arch=None, seed=0, **arch_kwargs):
    arch = arch or Architecture(**arch_kwargs)
    return FlowModel(arch, init_model_params(arch, seed))


def save_model(model, path_prefix):
    save_params(path_prefix, model.arch, model.params)


def load_model(path_prefix):
    arch, params = load_params(path_prefix)
    return FlowModel(arch, params)


def _time_column(t, n, time_scale):
    tv = np.asarray(val(t), dtype=float)
    if tv.ndim == 0:
        tv = np.full(n, float(tv))
    if tv.shape != (n,):
        raise ValueError(f"time array shape {tv.shape} does not match batch {n}")
    return (tv / time_scale).reshape(n, 1)


def _conditioner_input(cols, order, step, t_col):
    if step == 0:
        return t_col
    prefix = [cols[order[j]] for j in range(step)]
    return ad.column_stack(prefix + [t_col])


def _ar_layer(arch, nets, order, cols, t_col, inverse):
    """Transform the coordinate columns of one layer; returns (cols, logdet).

    The conditioner at step k always reads the *transformed* values of the k
    prefix coordinates: on the forward pass those are the freshly written
    columns, on the inverse pass they are the given inputs (later steps never
    touch earlier coordinates, so the prefix is known up front).
    """
    logdet = 0.0
    out = list(cols)
    cond_cols = out if not inverse else list(cols)
    for step, coord in enumerate(order):
        inp = _conditioner_input(cond_cols, order, step, t_col)
        theta = mlp_forward(nets[step], inp)
        p = splines.decode_theta(theta, arch.tail_bound, arch.n_bins)
        if inverse:
            new, ld = splines.spline_inverse(p, out[coord])
        else:
            new, ld = splines.spline_forward(p, out[coord])
        out[coord] = new
        logdet = logdet + ld
    return out, logdet


def ar_layer_forward(model, layer, x, t, params=None):
    """Apply one autoregressive layer; returns (y, logdet)."""
    return _apply(model, x, t, params, layers=[layer], inverse=False)


def transform(arch, nets, x, t, inverse=False, layers=None):
    """Apply (part of) the flow given pre-unpacked conditioner nets.

    ``x`` is (N, dim), ``t`` scalar or (N,); returns (output, logdet) with
    logdet shaped (N,).  Loss code calls this directly so the parameter vector
    is sliced into nets only once per evaluation.
    """
    xv = np.asarray(val(x), dtype=np.float64)
    if not np.all(np.isfinite(xv)):
        raise ValueError("flow input contains non-finite entries")
    if xv.shape[1] != arch.dim:
        raise ValueError(f"input dimension {xv.shape[1]} != flow dimension {arch.dim}")
    n = xv.shape[0]
    t_col = _time_column(t, n, arch.time_scale)

    if isinstance(x, ad.Tensor):
        cols = [x[:, i] for i in range(arch.dim)]
    else:
        cols = [xv[:, i] for i in range(arch.dim)]

    layer_ids = list(range(arch.n_layers)) if layers is None else list(layers)
    if inverse:
        layer_ids = layer_ids[::-1]
    logdet = 0.0
    for lid in layer_ids:
        cols, ld = _ar_layer(arch, nets[lid], arch.layer_order(lid), cols, t_col, inverse)
        logdet = logdet + ld
    return ad.column_stack(cols), logdet


def _apply(model, x, t, params, layers=None, inverse=False):
    arch = model.arch
    single = np.ndim(val(x)) == 1
    if single:
        x = x.reshape((1, -1)) if isinstance(x, ad.Tensor) else np.asarray(val(x), float)[None, :]

    p = model.params if params is None else params
    nets = unpack_params(arch, p)
    out, logdet = transform(arch, nets, x, t, inverse=inverse, layers=layers)
    if single and not isinstance(out, ad.Tensor):
        return out[0], float(val(logdet)[0] if np.ndim(val(logdet)) else val(logdet))
    return out, logdet


def flow_forward(model, z, t, params=None):
    """Push latent points through the flow; returns (x, log|det df/dz|)."""
    return _apply(model, z, t, params, inverse=False)


def flow_inverse(model, x, t, params=None):
    """Pull points back to latent space; returns (z, log|det df^-1/dx|)."""
    return _apply(model, x, t, params, inverse=True)


def gaussian_log_pdf(z):
    """Standard-normal log density, summed over the last axis."""
    zv = val(z)
    d = np.shape(zv)[-1]
    sq = ad.tsum(z * z, axis=-1) if isinstance(z, ad.Tensor) else np.sum(zv * zv, axis=-1)
    return -0.5 * sq - 0.5 * d * math.log(2.0 * math.pi)


def log_density(model, x, t, params=None):
    """log p(x, t) of the pushed-forward reference measure."""
    single = np.ndim(val(x)) == 1
    z, logdet_inv = flow_inverse(model, x, t, params)
    out = gaussian_log_pdf(z) + logdet_inv
    if single and not isinstance(out, ad.Tensor):
        return float(out[0]) if np.ndim(out) else float(out)
    return out


def sample(model, t, n, rng, params=None):
    """Draw n samples from p(., t) by pushing standard-normal latents."""
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    z = rng.standard_normal((n, model.arch.dim))
    x, _ = flow_forward(model, z, t, params)
    return val(x)
