"""Conditioning networks and the flat trainable-parameter vector.

Each coordinate of each autoregressive layer owns a small fully-connected
network mapping (transformed prefix coordinates, t) to the 3K-1 raw spline
parameters.  All weights live in one flat float64 vector with a fixed index
map, so optimizers, gradients, and checkpoints all speak the same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Architecture:
    """Static shape of the flow: layers, conditioner widths, spline box."""

    dim: int = 2
    n_layers: int = 2
    hidden: tuple = (16, 16)
    n_bins: int = 5
    tail_bound: float = 8.0
    time_scale: float = 1.0  # conditioners see t / time_scale

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 1 or self.n_bins < 1:
            raise ValueError("dim, n_layers and n_bins must all be >= 1")
        if self.tail_bound <= 0 or self.time_scale <= 0:
            raise ValueError("tail_bound and time_scale must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def theta_dim(self):
        return 3 * self.n_bins - 1

    def layer_order(self, layer):
        """Coupling order of one layer; consecutive layers are reversed."""
        order = list(range(self.dim))
        return tuple(order if layer % 2 == 0 else order[::-1])

    def conditioner_shapes(self, position):
        """(W, b) shapes of the conditioner at a given step in the order."""
        dims = [position + 1, *self.hidden, self.theta_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def to_dict(self):
        return {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "n_bins": self.n_bins,
            "tail_bound": self.tail_bound,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(dim=d["dim"], n_layers=d["n_layers"], hidden=tuple(d["hidden"]),
                   n_bins=d["n_bins"], tail_bound=d["tail_bound"],
                   time_scale=d["time_scale"])


@lru_cache(maxsize=64)
def index_map(arch):
    """Stable (layer, position, name, offset, shape) layout of the flat vector."""
    entries = []
    offset = 0
    for layer in range(arch.n_layers):
        for pos in range(arch.dim):
            for i, (fan_in, fan_out) in enumerate(arch.conditioner_shapes(pos)):
                for name, shape in ((f"w{i}", (fan_in, fan_out)), (f"b{i}", (fan_out,))):
                    size = int(np.prod(shape))
                    entries.append({"layer": layer, "position": pos, "name": name,
                                    "offset": offset, "shape": list(shape)})
                    offset += size
    return entries, offset


def param_count(arch):
    return index_map(arch)[1]


def init_model_params(arch, seed=0):
    """Flat parameter vector with identity-map initialization.

    Hidden affine layers draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the
    final affine layer of every conditioner is zeroed so each spline decodes
    to the identity.
    """
    rng = np.random.default_rng(seed)
    entries, total = index_map(arch)
    params = np.zeros(total)
    n_affine = len(arch.hidden) + 1
    for e in entries:
        idx = int(e["name"][1:])
        if idx == n_affine - 1:
            continue  # zero final layer
        shape = tuple(e["shape"])
        fan_in = shape[0] if e["name"].startswith("w") else _fan_in_for_bias(arch, e)
        bound = 1.0 / np.sqrt(fan_in)
        size = int(np.prod(shape))
        params[e["offset"]:e["offset"] + size] = rng.uniform(-bound, bound, size)
    return params


def _fan_in_for_bias(arch, entry):
    shapes = arch.conditioner_shapes(entry["position"])
    return shapes[int(entry["name"][1:])][0]


def unpack_params(arch, params):
    """Per-conditioner [(W, b), ...] views of the flat vector.

    ``params`` may be a plain ndarray or a traced Tensor; slices stay traced.
    Returns nets[layer][position] = list of (W, b) in evaluation order.
    """
    entries, total = index_map(arch)
    if np.shape(ad.val(params))[0] != total:
        raise ValueError(f"parameter vector has length {np.shape(ad.val(params))[0]}, expected {total}")
    nets = [[[] for _ in range(arch.dim)] for _ in range(arch.n_layers)]
    it = iter(entries)
    for e in it:
        if not e["name"].startswith("w"):
            continue
        shape = tuple(e["shape"])
        size = int(np.prod(shape))
        w = params[e["offset"]:e["offset"] + size].reshape(shape)
        be = next(it)
        b = params[be["offset"]:be["offset"] + be["shape"][0]]
        nets[e["layer"]][e["position"]].append((w, b))
    return nets


def mlp_forward(net, inp):
    """tanh MLP: affine-tanh pairs through the hidden stack, affine output."""
    h = inp
    for w, b in net[:-1]:
        h = ad.tanh(ad.affine(h, w, b))
    w, b = net[-1]
    return ad.affine(h, w, b)


def conditioner_forward(net, x_prefix, t, time_scale=1.0):
    """Raw spline parameters for one conditioner.

    ``x_prefix`` holds the already-transformed prefix coordinates, shaped (k,)
    for one input or (N, k) for a batch; the conditioner input is
    (x_prefix, t / time_scale) with ``t`` scalar or per-row.
    """
    xv = np.asarray(ad.val(x_prefix), dtype=float)
    single = xv.ndim <= 1
    mat = xv.reshape(1, -1) if single else xv
    expected = np.shape(ad.val(net[0][0]))[0] - 1
    if mat.shape[1] != expected:
        raise ValueError(f"prefix has {mat.shape[1]} coordinates, conditioner expects {expected}")

    n = mat.shape[0]
    t_col = np.broadcast_to(np.asarray(ad.val(t), dtype=float).reshape(-1, 1), (n, 1))
    if isinstance(x_prefix, ad.Tensor) and not single:
        inp = ad.concatenate([x_prefix, t_col / time_scale], axis=1)
    else:
        inp = np.concatenate([mat, t_col / time_scale], axis=1)
    out = mlp_forward(net, inp)
    if single and not isinstance(out, ad.Tensor):
        return out[0]
    return out


def save_params(path_prefix, arch, params):
    """Write <prefix>.bin (flat little-endian float64) and <prefix>.json sidecar."""
    entries, total = index_map(arch)
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (total,):
        raise ValueError(f"parameter vector shape {params.shape} != ({total},)")
    with open(f"{path_prefix}.bin", "wb") as fh:
        fh.write(params.astype("<f8").tobytes())
    sidecar = {"format": "mfcflow-params-v1", "count": total,
               "architecture": arch.to_dict(), "index_map": entries}
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_params(path_prefix):
    """Inverse of :func:`save_params`; returns (arch, params)."""
    with open(f"{path_prefix}.json") as fh:
        sidecar = json.load(fh)
    arch = Architecture.from_dict(sidecar["architecture"])
    raw = np.fromfile(f"{path_prefix}.bin", dtype="<f8")
    if raw.shape[0] != sidecar["count"] or raw.shape[0] != param_count(arch):
        raise ValueError("checkpoint length does not match its architecture")
    return arch, raw.astype(np.float64)
