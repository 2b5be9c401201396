"""Problem instances and Monte Carlo loss estimators.

Three families of control problems over densities are supported, all solved
by the same flow model:

* optimal transport between two fixed distributions on t in [0, 1]
  (kinetic energy plus endpoint cross-entropy penalties),
* Wasserstein proximal problems: kinetic energy of the score-corrected
  velocity plus a terminal potential, starting from a fixed distribution,
* flow matching for a Fokker-Planck equation with prescribed drift and
  diffusion, where velocity minus drift plus scaled score must vanish.

Every estimator draws fresh times t ~ U[0, T] and latent points per call and
is bit-reproducible given the RNG state.  Cross-entropy penalties sample the
*target* distribution and evaluate the model's log density there (the
model-independent entropy term is dropped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import val
from .conditioner import unpack_params
from .diffkit import _score, _velocity
from .flow import gaussian_log_pdf, transform


# -- distributions ------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_log_norm",
                           -0.5 * mean.size * math.log(2.0 * math.pi)
                           - np.log(np.diag(chol)).sum())

    @property
    def dim(self):
        return self.mean.size

    def log_pdf(self, x):
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = solve_triangular(self._chol, (x - self.mean).T, lower=True).T
        out = self._log_norm - 0.5 * np.sum(u * u, axis=1)
        return float(out[0]) if single else out

    def sample(self, rng, n):
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussians with weights on the simplex."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        comps = tuple(self.components)
        if len(comps) != w.size or w.size == 0:
            raise ValueError("need one weight per mixture component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("mixture components must share a dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self):
        return self.components[0].dim

    def log_pdf(self, x):
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        logs = np.stack([np.atleast_1d(c.log_pdf(x)) for c in self.components], axis=1)
        out = logsumexp(logs + np.log(self.weights), axis=1)
        return float(out[0]) if single else out

    def sample(self, rng, n):
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j, comp in enumerate(self.components):
            m = idx == j
            if m.any():
                out[m] = comp.sample(rng, int(m.sum()))
        return out


Distribution = Union[Gaussian, GaussianMixture]


def standard_gaussian(dim):
    return Gaussian(np.zeros(dim), np.eye(dim))


def ring_of_gaussians(centers, cov_scale=1.0):
    """Equal-weight mixture with unit (scaled) covariance at each center."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    comps = tuple(Gaussian(c, cov_scale * np.eye(centers.shape[1])) for c in centers)
    return GaussianMixture(np.full(len(comps), 1.0 / len(comps)), comps)


# -- potentials and drifts ----------------------------------------------------


@dataclass(frozen=True)
class QuadraticPotential:
    """V(x) = |x|^2 / 2."""

    def __call__(self, x):
        return 0.5 * ad.tsum(x * x, axis=-1) if isinstance(x, ad.Tensor) else 0.5 * np.sum(val(x) * val(x), axis=-1)


@dataclass(frozen=True)
class DoubleWellPotential:
    """V(x) = ((x1-a)^2 + (x2+a)^2)((x1+a)^2 + (x2-a)^2) / 4, minima at (+/-a, -/+a)."""

    a: float = 1.0

    def __call__(self, x):
        x1, x2 = _columns(x, 2)
        a = self.a
        left = (x1 - a) ** 2 + (x2 + a) ** 2
        right = (x1 + a) ** 2 + (x2 - a) ** 2
        return left * right * 0.25


Potential = Union[QuadraticPotential, DoubleWellPotential]


@dataclass(frozen=True)
class OUDrift:
    """Linear mean-reverting drift b(x) = -a x."""

    a: float = 1.0

    def __call__(self, x):
        return -self.a * x


@dataclass(frozen=True)
class RingDrift:
    """Non-gradient drift whose invariant density rides the circle |x| = 2.

    The potential U(x) = (|x|^2 - 4)^2 / 4 + (x2 + 1)^2 concentrates mass on
    the lower arc of the circle; the drift is -grad U rotated by a Hamiltonian
    perturbation of size delta, which preserves exp(-U) as invariant measure
    (for unit diffusion) while breaking detailed balance.
    """

    delta: float = 0.5

    def __call__(self, x):
        x1, x2 = _columns(x, 2)
        r = x1 * x1 + x2 * x2 - 4.0
        v1 = -((x1 + self.delta * x2) * r + 2.0 * self.delta * (x2 + 1.0))
        v2 = -((x2 - self.delta * x1) * r + 2.0 * (x2 + 1.0))
        return ad.column_stack([v1, v2]) if isinstance(x, ad.Tensor) else np.stack([val(v1), val(v2)], axis=-1)

    def potential(self, x):
        """U with exp(-U) the (unnormalized) invariant density."""
        x1, x2 = _columns(x, 2)
        return 0.25 * (x1 * x1 + x2 * x2 - 4.0) ** 2 + (x2 + 1.0) ** 2

    def grad_potential(self, x):
        x1, x2 = _columns(x, 2)
        r = x1 * x1 + x2 * x2 - 4.0
        return np.stack([val(x1) * val(r), val(x2) * val(r) + 2.0 * (val(x2) + 1.0)], axis=-1)


DriftField = Union[OUDrift, RingDrift]


def _columns(x, d):
    xv = val(x)
    if np.shape(xv)[-1] != d:
        raise ValueError(f"expected {d}-dimensional points, got shape {np.shape(xv)}")
    if isinstance(x, ad.Tensor):
        return tuple(x[..., i] if x.ndim == 1 else x[:, i] for i in range(d))
    xv = np.asarray(xv, dtype=float)
    return tuple(xv[..., i] for i in range(d))


def potential_eval(potential, x):
    """Evaluate a terminal potential at one point or a batch."""
    return potential(x)


def drift_eval(drift, x):
    """Evaluate a drift field at one point or a batch."""
    return drift(x)


# -- problem specifications ---------------------------------------------------


@dataclass(frozen=True)
class OTProblem:
    """Transport p0 to p1 over t in [0, 1] at minimal kinetic energy."""

    p0: Distribution
    p1: Distribution

    horizon: float = 1.0

    def __post_init__(self):
        if self.horizon != 1.0:
            raise ValueError("optimal transport runs on the fixed horizon [0, 1]")
        if self.p0.dim != self.p1.dim:
            raise ValueError("endpoint distributions must share a dimension")

    @property
    def dim(self):
        return self.p0.dim


@dataclass(frozen=True)
class RWPOProblem:
    """Regularized Wasserstein proximal problem: kinetic + terminal potential.

    ``beta`` is the inverse diffusion coefficient of the density constraint;
    the default initial distribution N(0, 2(T+1)/beta I) matches the
    closed-form solution for the quadratic potential.
    """

    potential: Potential
    beta: float = 1.0
    horizon: float = 1.0
    p0: Optional[Distribution] = None
    dim_default: int = 2

    def __post_init__(self):
        if self.beta <= 0 or self.horizon <= 0:
            raise ValueError("beta and horizon must be positive")
        if self.p0 is None:
            var = 2.0 * (self.horizon + 1.0) / self.beta
            object.__setattr__(self, "p0", Gaussian(np.zeros(self.dim_default),
                                                    var * np.eye(self.dim_default)))

    @property
    def dim(self):
        return self.p0.dim


@dataclass(frozen=True)
class FokkerPlanckProblem:
    """Match the flow to the Fokker-Planck evolution dp/dt = -div(p b) + gamma lap(p).

    ``reference`` optionally supplies the analytic density (x, t) -> p for
    error reporting.
    """

    p0: Distribution
    drift: DriftField
    gamma: float = 1.0
    horizon: float = 1.0
    reference: Optional[Callable] = None

    def __post_init__(self):
        if self.gamma <= 0 or self.horizon <= 0:
            raise ValueError("gamma and horizon must be positive")

    @property
    def dim(self):
        return self.p0.dim


ProblemSpec = Union[OTProblem, RWPOProblem, FokkerPlanckProblem]


# -- losses -------------------------------------------------------------------


def _parts(total, kinetic, penalty, terminal):
    return {"loss": float(val(total)), "kinetic": float(val(kinetic)),
            "penalty": float(val(penalty)), "terminal": float(val(terminal))}


def _draw_kinetic_batch(spec, cfg, rng, dim):
    times = rng.uniform(0.0, spec.horizon, cfg.n_time)
    z = rng.standard_normal((cfg.n_time * cfg.n_latent, dim))
    return np.repeat(times, cfg.n_latent), z


def _cross_entropy(arch, nets, x, t):
    """-mean log p_model at fixed target samples: the KL penalty up to a constant."""
    zb, logdet_inv = transform(arch, nets, x, np.full(x.shape[0], float(t)), inverse=True)
    return -ad.tmean(gaussian_log_pdf(zb) + logdet_inv)


def ot_loss(model, spec, cfg, rng, params=None):
    """Kinetic energy plus endpoint cross-entropy penalties; returns (loss, parts)."""
    arch = model.arch
    nets = unpack_params(arch, model.params if params is None else params)
    t_rows, z = _draw_kinetic_batch(spec, cfg, rng, arch.dim)

    v = _velocity(arch, nets, z, t_rows, cfg.dt_velocity)
    kinetic = 0.5 * ad.tmean(ad.tsum(v * v, axis=-1)) * spec.horizon

    x0 = spec.p0.sample(rng, cfg.n_boundary)
    x1 = spec.p1.sample(rng, cfg.n_boundary)
    xb = np.concatenate([x0, x1], axis=0)
    tb = np.concatenate([np.zeros(cfg.n_boundary), np.full(cfg.n_boundary, spec.horizon)])
    zb, logdet_inv = transform(arch, nets, xb, tb, inverse=True)
    lp = gaussian_log_pdf(zb) + logdet_inv
    penalty = cfg.penalty_weight * -(ad.tmean(lp[:cfg.n_boundary]) + ad.tmean(lp[cfg.n_boundary:]))

    total = kinetic + penalty
    return total, _parts(total, kinetic, penalty, 0.0)


def rwpo_loss(model, spec, cfg, rng, params=None):
    """Score-corrected kinetic energy + initial penalty + terminal potential."""
    arch = model.arch
    nets = unpack_params(arch, model.params if params is None else params)
    T = spec.horizon
    t_rows, z = _draw_kinetic_batch(spec, cfg, rng, arch.dim)

    v = _velocity(arch, nets, z, t_rows, cfg.dt_velocity)
    x, _ = transform(arch, nets, z, t_rows)
    s = _score(arch, nets, x, t_rows, cfg.dx_score)
    resid = v + s * (1.0 / spec.beta)
    kinetic = 0.5 * T * ad.tmean(ad.tsum(resid * resid, axis=-1))

    x0 = spec.p0.sample(rng, cfg.n_boundary)
    penalty = cfg.penalty_weight * _cross_entropy(arch, nets, x0, 0.0)

    z1 = rng.standard_normal((cfg.n_terminal, arch.dim))
    x1, _ = transform(arch, nets, z1, np.full(cfg.n_terminal, T))
    terminal = ad.tmean(spec.potential(x1))

    total = kinetic + penalty + terminal
    return total, _parts(total, kinetic, penalty, terminal)


def fp_match_loss(model, spec, cfg, rng, params=None):
    """Squared Fokker-Planck residual of the flow plus the initial penalty."""
    arch = model.arch
    nets = unpack_params(arch, model.params if params is None else params)
    t_rows, z = _draw_kinetic_batch(spec, cfg, rng, arch.dim)

    v = _velocity(arch, nets, z, t_rows, cfg.dt_velocity)
    x, _ = transform(arch, nets, z, t_rows)
    s = _score(arch, nets, x, t_rows, cfg.dx_score)
    resid = v - spec.drift(x) + spec.gamma * s
    match = ad.tmean(ad.tsum(resid * resid, axis=-1))

    x0 = spec.p0.sample(rng, cfg.n_boundary)
    penalty = cfg.penalty_weight * _cross_entropy(arch, nets, x0, 0.0)

    total = match + penalty
    return total, _parts(total, match, penalty, 0.0)


def loss_for(spec):
    """Loss estimator matching the problem family of ``spec``."""
    if isinstance(spec, OTProblem):
        return ot_loss
    if isinstance(spec, RWPOProblem):
        return rwpo_loss
    if isinstance(spec, FokkerPlanckProblem):
        return fp_match_loss
    raise TypeError(f"unknown problem specification {type(spec).__name__}")


# -- objective evaluation -----------------------------------------------------


@dataclass(frozen=True)
class ObjectiveEstimate:
    value: float
    stderr: float

    def __iter__(self):
        return iter((self.value, self.stderr))


def objective_eval(model, spec, n_eval=100_000, rng=None, n_time=100,
                   dt=None, dx=1e-3):
    """Monte Carlo estimate of the control objective itself (no penalties).

    Uses ``n_time`` stratified time points with ``n_eval`` latent samples in
    total; for proximal problems the terminal potential expectation is added
    from an independent batch.  Returns the estimate with its standard error.
    """
    if n_eval < 1000:
        raise ValueError(f"need at least 1000 evaluation samples, got {n_eval}")
    rng = np.random.default_rng(0) if rng is None else rng
    arch = model.arch
    nets = unpack_params(arch, model.params)
    T = spec.horizon
    dt = 1e-3 * T if dt is None else dt

    n_per = max(1, int(np.ceil(n_eval / n_time)))
    strata = (np.arange(n_time) + rng.uniform(0.0, 1.0, n_time)) / n_time * T

    values = []
    chunk = max(1, int(20_000 // n_per))
    for lo in range(0, n_time, chunk):
        ts = strata[lo:lo + chunk]
        t_rows = np.repeat(ts, n_per)
        z = rng.standard_normal((ts.size * n_per, arch.dim))
        v = _velocity(arch, nets, z, t_rows, dt)
        if isinstance(spec, OTProblem):
            values.append(0.5 * np.sum(v * v, axis=-1) * T)
        elif isinstance(spec, RWPOProblem):
            x, _ = transform(arch, nets, z, t_rows)
            s = _score(arch, nets, x, t_rows, dx)
            resid = v + s / spec.beta
            values.append(0.5 * np.sum(resid * resid, axis=-1) * T)
        else:
            x, _ = transform(arch, nets, z, t_rows)
            s = _score(arch, nets, x, t_rows, dx)
            resid = v - spec.drift(x) + spec.gamma * s
            values.append(np.sum(resid * resid, axis=-1))
    values = np.concatenate(values)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(values.size))

    if isinstance(spec, RWPOProblem):
        z1 = rng.standard_normal((min(n_eval, 100_000), arch.dim))
        x1, _ = transform(arch, nets, z1, np.full(len(z1), T))
        tv = np.asarray(spec.potential(x1))
        mean += float(tv.mean())
        se = math.hypot(se, float(tv.std(ddof=1) / math.sqrt(tv.size)))
    return ObjectiveEstimate(mean, se)
