"""Independent reference solutions and brute-force checkers.

Everything here is computed without touching the flow's own machinery:
closed forms for Gaussian transport and the quadratic proximal problem,
kernel-formula quadrature for general terminal potentials, exact
Ornstein-Uhlenbeck moments (plus an Euler-Maruyama cross-check), exact
small-n transport via the assignment problem, and grid metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .flow import log_density


class AccuracyError(RuntimeError):
    """Quadrature box too small for the requested integrand."""


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor-product quadrature over the box [-L, L]^d."""

    half_width: float = 8.0
    nodes: int = 256
    rule: str = "trapezoid"

    def __post_init__(self):
        if self.half_width <= 0:
            raise ValueError("quadrature half-width must be positive")
        if self.nodes < 16:
            raise ValueError("need at least 16 quadrature nodes per axis")
        if self.rule not in ("trapezoid", "gauss-legendre"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")

    def axis(self):
        L, n = self.half_width, self.nodes
        if self.rule == "trapezoid":
            x = np.linspace(-L, L, n)
            w = np.full(n, 2.0 * L / (n - 1))
            w[0] *= 0.5
            w[-1] *= 0.5
            return x, w
        x, w = np.polynomial.legendre.leggauss(n)
        return x * L, w * L

    def grid(self, d):
        """Nodes (n^d, d) and weights (n^d,) of the tensor rule."""
        x, w = self.axis()
        if d == 1:
            return x[:, None], w
        axes = np.meshgrid(*([x] * d), indexing="ij")
        nodes = np.stack([a.ravel() for a in axes], axis=1)
        weights = np.ones(nodes.shape[0])
        for i in range(d):
            weights *= np.meshgrid(*([w] * d), indexing="ij")[i].ravel()
        return nodes, weights

    def shell_mask(self, nodes):
        """Points in the outermost 5% band of the box, for truncation checks."""
        return np.any(np.abs(nodes) > 0.95 * self.half_width, axis=1)


# -- Gaussian optimal transport ----------------------------------------------


def _sym_sqrt(mat):
    vals, vecs = np.linalg.eigh(np.asarray(mat, dtype=float))
    if np.any(vals <= 0):
        raise ValueError("matrix is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_ot_map(mean0, cov0, mean1, cov1):
    """Affine optimal map x -> A(x - mean0) + mean1 between two Gaussians.

    A = cov0^{-1/2} (cov0^{1/2} cov1 cov0^{1/2})^{1/2} cov0^{-1/2}, returned
    as (A, shift) with shift = mean1 - A mean0.
    """
    mean0 = np.asarray(mean0, dtype=float)
    mean1 = np.asarray(mean1, dtype=float)
    r0 = _sym_sqrt(cov0)
    r0_inv = np.linalg.inv(r0)
    mid = _sym_sqrt(r0 @ np.asarray(cov1, dtype=float) @ r0)
    a = r0_inv @ mid @ r0_inv
    return a, mean1 - a @ mean0


def gaussian_w2sq(mean0, cov0, mean1, cov1):
    """Squared 2-Wasserstein distance between two Gaussians (closed form)."""
    mean0 = np.asarray(mean0, dtype=float)
    mean1 = np.asarray(mean1, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    _sym_sqrt(cov0), _sym_sqrt(cov1)  # SPD validation
    r0 = _sym_sqrt(cov0)
    cross = _sym_sqrt(r0 @ cov1 @ r0)
    return float(np.sum((mean0 - mean1) ** 2) + np.trace(cov0 + cov1 - 2.0 * cross))


def discrete_ot_cost(samples_a, samples_b):
    """Exact empirical transport cost (half mean squared distance) by assignment.

    Solves the linear assignment problem on the pairwise squared-distance
    matrix; intended as a small-n oracle (n <= 512).
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape != b.shape:
        raise ValueError("sample sets must have identical shapes")
    if a.shape[0] > 512:
        raise ValueError("assignment oracle is limited to 512 samples")
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(sq)
    return 0.5 * float(sq[rows, cols].sum()) / a.shape[0]


# -- quadratic proximal problem: closed forms ----------------------------------


def rwpo_quadratic_cost(d, beta, horizon):
    """Exact objective of the proximal problem with V(x) = |x|^2/2:
    (d / beta) (log(T + 1) + 1)."""
    if beta <= 0 or horizon < 0:
        raise ValueError("beta must be positive and the horizon nonnegative")
    return d / beta * (math.log(horizon + 1.0) + 1.0)


def rwpo_true_density(x, t, beta, horizon):
    """Optimal density: centered Gaussian, per-coordinate variance 2(T-t+1)/beta."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    s = horizon - t + 1.0
    out = (4.0 * math.pi * s / beta) ** (-0.5 * d) * np.exp(-beta * np.sum(x * x, axis=1) / (4.0 * s))
    return out if out.size > 1 else float(out[0])


def rwpo_true_phi(x, t, beta, horizon):
    """Value function of the quadratic proximal problem (gradient = optimal velocity)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    s = horizon - t + 1.0
    out = d / beta * math.log(1.0 / s) - np.sum(x * x, axis=1) / (2.0 * s)
    return out if out.size > 1 else float(out[0])


# -- kernel-formula solutions for general potentials ---------------------------


def kernel_phi(x, t, beta, horizon, potential, quad, check=True):
    """Value function via the heat-kernel formula,

        phi(x, t) = (2/beta) log( (4 pi (T-t)/beta)^{-d/2}
                     int exp(-(beta/2)(V(y) + |x-y|^2 / (2(T-t)))) dy ),

    with the inner integral by tensor quadrature under log-sum-exp.  Raises
    AccuracyError when more than 1e-8 of the integrand mass sits in the
    outermost 5% of the box (enlarge the box in that case).
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    tau = horizon - t
    if tau <= 0:
        raise ValueError("kernel formula needs t < horizon")
    nodes, weights = quad.grid(d)
    log_w = np.log(weights)
    shell = quad.shell_mask(nodes)
    v_nodes = np.asarray(potential(nodes), dtype=float)

    out = np.empty(x.shape[0])
    worst = 0.0
    chunk = max(1, int(4_000_000 // nodes.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo:lo + chunk]
        sq = ((xs[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
        g = -(beta / 2.0) * (v_nodes[None, :] + sq / (2.0 * tau)) + log_w[None, :]
        total = logsumexp(g, axis=1)
        if check:
            tail = logsumexp(g[:, shell], axis=1) if shell.any() else np.full(len(xs), -np.inf)
            worst = max(worst, float(np.exp(tail - total).max()))
        out[lo:lo + chunk] = total
    if check and worst > 1e-8:
        raise AccuracyError(
            f"{worst:.2e} of the kernel integrand mass lies in the outer 5% shell; enlarge the box")
    phi = (2.0 / beta) * (out - 0.5 * d * math.log(4.0 * math.pi * tau / beta))
    return float(phi[0]) if single else phi


def kernel_optimal_cost(p0, potential, beta, horizon, quad, gh_nodes=40):
    """Optimal proximal cost -E_{p0}[phi(., 0)] by Gauss-Hermite over a Gaussian p0.

    Tensor Gauss-Hermite nodes with relative weight below 1e-12 are dropped;
    their contribution is bounded by 1e-12 * max|phi| on the node set.
    """
    mean = np.asarray(p0.mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(p0.cov, dtype=float))
    d = mean.size
    xs, ws = np.polynomial.hermite.hermgauss(gh_nodes)
    if d == 1:
        pts, wt = xs[:, None], ws
    else:
        grids = np.meshgrid(*([xs] * d), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        wt = np.ones(pts.shape[0])
        for i in range(d):
            wt *= np.meshgrid(*([ws] * d), indexing="ij")[i].ravel()
    wt = wt / math.pi ** (d / 2.0)
    keep = wt > 1e-12
    pts, wt = pts[keep], wt[keep]
    x_nodes = mean + math.sqrt(2.0) * pts @ chol.T
    # enforce box coverage only where the outer weight is material; the far
    # nodes contribute < 1e-6 * max|phi| in total and may overhang the box
    major = wt > 1e-6
    phi0 = np.empty(len(wt))
    phi0[major] = kernel_phi(x_nodes[major], 0.0, beta, horizon, potential, quad)
    if (~major).any():
        phi0[~major] = kernel_phi(x_nodes[~major], 0.0, beta, horizon, potential,
                                  quad, check=False)
    return -float(np.sum(wt * phi0) / np.sum(wt))


# -- Ornstein-Uhlenbeck -------------------------------------------------------


def ou_variance(t, a, gamma, var0):
    """Per-coordinate variance of the OU process dx = -a x dt + sqrt(2 gamma) dW."""
    if a <= 0:
        raise ValueError("OU drift rate must be positive")
    return gamma / a + (var0 - gamma / a) * math.exp(-2.0 * a * t)


def ou_second_moment(t, a, gamma, m0, d):
    """E|x_t|^2 for an isotropic centered start with E|x_0|^2 = m0.

    Per coordinate the variance obeys ds/dt = 2(gamma - a s); in d dimensions
    the total second moment is d times the per-coordinate solution.
    """
    return d * ou_variance(t, a, gamma, m0 / d)


def ou_density(x, t, a, gamma, var0):
    """Density of the OU process started from N(0, var0 I)."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    s = ou_variance(t, a, gamma, var0)
    out = (2.0 * math.pi * s) ** (-0.5 * d) * np.exp(-np.sum(x * x, axis=1) / (2.0 * s))
    return float(out[0]) if single else out


def ou_em_second_moment(a, gamma, var0, d, t_final, n_paths=100_000, dt=1e-3, rng=None):
    """Euler-Maruyama estimate of E|x_t|^2 with standard error."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = math.sqrt(var0) * rng.standard_normal((n_paths, d))
    n_steps = int(round(t_final / dt))
    scale = math.sqrt(2.0 * gamma * dt)
    for _ in range(n_steps):
        x += -a * x * dt + scale * rng.standard_normal(x.shape)
    sq = np.sum(x * x, axis=1)
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n_paths))


# -- stationarity of the ring drift -------------------------------------------


def stationarity_residual(drift, gamma, x):
    """div(pi v) - gamma lap(pi) at x, for pi = exp(-U) and the ring drift.

    All derivatives are analytic.  The Hamiltonian part of the drift is
    divergence-free against pi, so the residual vanishes identically exactly
    when gamma = 1.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    x1, x2 = x
    delta = drift.delta
    rho = x1 * x1 + x2 * x2
    r = rho - 4.0

    u = 0.25 * r * r + (x2 + 1.0) ** 2
    grad_u = np.array([x1 * r, x2 * r + 2.0 * (x2 + 1.0)])
    lap_u = 4.0 * rho - 6.0
    v = np.asarray(drift(x[None, :]))[0]
    # divergence of v from its explicit components (the delta terms cancel)
    div_v = -(r + 2.0 * x1 * (x1 + delta * x2)) - (r + 2.0 * x2 * (x2 - delta * x1) + 2.0)

    pi = math.exp(-u)
    div_pi_v = pi * (div_v - float(grad_u @ v))
    lap_pi = pi * (float(grad_u @ grad_u) - lap_u)
    return div_pi_v - gamma * lap_pi


# -- grid metrics -------------------------------------------------------------


def density_grid(half_width, n_per_axis):
    """Uniform (n^2, 2) grid on [-L, L]^2 including endpoints."""
    axis = np.linspace(-half_width, half_width, n_per_axis)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([g1.ravel(), g2.ravel()], axis=1)


def rmse_on_grid(model, true_density, half_width, n_per_axis, t, chunk=50_000):
    """Root-mean-square density error on a uniform 2-D grid at time ``t``.

    ``true_density`` maps an (N, 2) array to densities; it must be a
    normalizable density on the box (validated by trapezoid mass).
    """
    if model.arch.dim != 2:
        raise ValueError("grid RMSE is defined for 2-D models")
    pts = density_grid(half_width, n_per_axis)
    p_true = np.asarray(true_density(pts), dtype=float)
    if not np.all(np.isfinite(p_true)) or np.any(p_true < 0):
        raise ValueError("true density must be finite and nonnegative")
    cell = (2.0 * half_width / (n_per_axis - 1)) ** 2
    mass = float(p_true.sum() * cell)
    if not 0.0 < mass < 1.5:
        raise ValueError(f"true density integrates to {mass:.3g} on the box; not a normalized density")

    sq_err = 0.0
    for lo in range(0, pts.shape[0], chunk):
        xs = pts[lo:lo + chunk]
        p_model = np.exp(log_density(model, xs, t))
        sq_err += float(np.sum((p_model - p_true[lo:lo + chunk]) ** 2))
    return math.sqrt(sq_err / pts.shape[0])


# -- matching benchmarks -------------------------------------------------------


def reference_objective(spec, quad=None):
    """Benchmark value for ``spec``'s objective, or None when no oracle applies.

    Returns (value, label).  Gaussian transport uses the closed form; the
    quadratic proximal problem started from its matched Gaussian uses the
    exact cost; other proximal problems fall back to kernel quadrature.
    """
    from .problems import (Gaussian, OTProblem, QuadraticPotential, RWPOProblem)

    if isinstance(spec, OTProblem):
        if isinstance(spec.p0, Gaussian) and isinstance(spec.p1, Gaussian):
            w2 = gaussian_w2sq(spec.p0.mean, spec.p0.cov, spec.p1.mean, spec.p1.cov)
            return 0.5 * w2, "half squared W2 (Gaussian closed form)"
        return None
    if isinstance(spec, RWPOProblem):
        d = spec.dim
        if isinstance(spec.potential, QuadraticPotential) and isinstance(spec.p0, Gaussian):
            var = 2.0 * (spec.horizon + 1.0) / spec.beta
            if (np.allclose(spec.p0.mean, 0.0)
                    and np.allclose(spec.p0.cov, var * np.eye(d), rtol=1e-10, atol=1e-12)):
                return rwpo_quadratic_cost(d, spec.beta, spec.horizon), "exact proximal cost"
        if isinstance(spec.p0, Gaussian):
            if quad is None:
                quad = QuadratureSpec(half_width=6.0, nodes=256) \
                    if not isinstance(spec.potential, QuadraticPotential) \
                    else QuadratureSpec(half_width=18.0, nodes=448)
            cost = kernel_optimal_cost(spec.p0, spec.potential, spec.beta, spec.horizon, quad)
            return cost, "kernel-quadrature proximal cost"
        return None
    return None
