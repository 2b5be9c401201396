"""Property suites: randomized invariant checks runnable from the CLI.

Four suites cover the numerical core (splines, flow, gradients, oracles).
Each check returns (name, passed, detail); the suites are deterministic for a
fixed seed and sized to run in minutes on a laptop CPU.  The pytest
acceptance module drives the same functions.
"""

from __future__ import annotations

import math
import time
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import splines
from .conditioner import Architecture, init_model_params
from .diffkit import score_fd, velocity_fd
from .flow import FlowModel, build_model, flow_forward, flow_inverse, log_density
from .oracles import (QuadratureSpec, discrete_ot_cost, gaussian_w2sq,
                      kernel_optimal_cost, ou_em_second_moment,
                      ou_second_moment, rwpo_quadratic_cost,
                      stationarity_residual)
from .problems import (FokkerPlanckProblem, Gaussian, OTProblem, OUDrift,
                       QuadraticPotential, RWPOProblem, RingDrift,
                       fp_match_loss, ot_loss, rwpo_loss, standard_gaussian)
from .trainer import tune_allocator


def _random_spline_params(rng, n, n_bins=5, tail_bound=8.0, scale=2.0):
    raw = scale * rng.standard_normal((n, 3 * n_bins - 1))
    return splines.decode_theta(raw, tail_bound, n_bins)


def _random_model(rng, dim=2, hidden=(8, 8), n_bins=5, scale=0.5, final_scale=None):
    """Identity-initialized model with noise on every layer.

    ``final_scale`` controls the spline-emitting output layers separately;
    large values there produce near-degenerate bins and needle-like densities.
    """
    from .conditioner import index_map

    arch = Architecture(dim=dim, hidden=hidden, n_bins=n_bins)
    params = init_model_params(arch, seed=int(rng.integers(2 ** 31)))
    noise = scale * rng.standard_normal(params.shape)
    if final_scale is not None:
        entries, _ = index_map(arch)
        last = len(arch.hidden)
        for e in entries:
            if int(e["name"][1:]) == last:
                size = int(np.prod(e["shape"]))
                sl = slice(e["offset"], e["offset"] + size)
                noise[sl] *= final_scale / scale
    return FlowModel(arch, params + noise)


# -- spline suite --------------------------------------------------------------


def spline_suite(seed=0, n_cases=10_000):
    rng = np.random.default_rng(seed)
    checks = []
    B = 8.0

    started = time.perf_counter()
    # raw parameters at the scale conditioners actually emit; much larger
    # scales create near-flat bins whose inverses are limited by float64
    # rounding of y rather than by the algorithm
    p = _random_spline_params(rng, n_cases, tail_bound=B, scale=1.0)
    x = rng.uniform(-1.5 * B, 1.5 * B, n_cases)
    y, ld_f = splines.spline_forward(p, x)
    x_back, ld_i = splines.spline_inverse(p, y)
    elapsed = time.perf_counter() - started
    err = np.abs(x_back - x).max()
    checks.append((f"roundtrip |inv(fwd(x)) - x| over {n_cases} cases",
                   err <= 1e-10, f"max {err:.2e} in {elapsed:.2f}s"))
    checks.append(("roundtrip runtime < 5 s", elapsed < 5.0, f"{elapsed:.2f}s"))

    ld_sum = np.abs(ld_f + ld_i).max()
    checks.append(("forward and inverse logabsdet cancel", ld_sum <= 1e-10, f"max {ld_sum:.2e}"))

    # monotonicity: paired evaluations under the same parameters
    pm = _random_spline_params(rng, 2000, tail_bound=B)
    x1 = rng.uniform(-1.5 * B, 1.5 * B, 2000)
    x2 = x1 + rng.uniform(1e-6, 4.0, 2000)
    y1, _ = splines.spline_forward(pm, x1)
    y2, _ = splines.spline_forward(pm, x2)
    checks.append(("monotonicity y(x1) < y(x2) for x1 < x2", bool(np.all(y1 < y2)),
                   f"min gap {(y2 - y1).min():.2e}"))

    # log-derivative agrees with a central finite-difference slope
    pf = _random_spline_params(rng, 4000, tail_bound=B, scale=1.0)
    xs = rng.uniform(-0.95 * B, 0.95 * B, 4000)
    kx = np.asarray(ad.val(pf.knots_x))
    dist = np.abs(kx - xs[:, None]).min(axis=1)
    keep = dist >= 1e-4
    h = 1e-6
    yp, _ = splines.spline_forward(pf, xs + h / 2)
    ym, _ = splines.spline_forward(pf, xs - h / 2)
    _, ld = splines.spline_forward(pf, xs)
    rel = np.abs((yp - ym) / h / np.exp(ld) - 1.0)[keep]
    checks.append(("logabsdet matches finite-difference slope (rel 1e-5)",
                   rel.max() <= 1e-5, f"max rel {rel.max():.2e} on {keep.sum()} pts"))

    # continuity of value and derivative across knots
    pc = _random_spline_params(rng, 500, tail_bound=B)
    kx = np.asarray(ad.val(pc.knots_x))
    inner = kx[:, 1:-1]
    cols = np.asarray([np.random.default_rng(seed + 1 + j).integers(inner.shape[1])
                       for j in range(inner.shape[0])])
    knots = inner[np.arange(inner.shape[0]), cols]
    below = np.nextafter(knots, -np.inf)
    y_at, ld_at = splines.spline_forward(pc, knots)
    y_bl, ld_bl = splines.spline_forward(pc, below)
    val_jump = np.abs(y_at - y_bl).max()
    der_jump = np.abs(np.exp(ld_at) - np.exp(ld_bl)).max()
    checks.append(("value continuity at knots (1e-12)", val_jump <= 1e-12, f"max {val_jump:.2e}"))
    checks.append(("derivative continuity at knots (1e-9)", der_jump <= 1e-9, f"max {der_jump:.2e}"))

    # tails are the identity
    xt = np.array([B + 2.0, -B - 1.0, 3 * B])
    pt = _random_spline_params(rng, 3, tail_bound=B)
    yt, ldt = splines.spline_forward(pt, xt)
    checks.append(("identity tails", bool(np.all(yt == xt) and np.all(ldt == 0.0)), ""))
    return checks


# -- flow suite ----------------------------------------------------------------


def _fd_jacobian(model, z, t, h):
    d = len(z)
    jac = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h / 2
        xp, _ = flow_forward(model, z + e, t)
        xm, _ = flow_forward(model, z - e, t)
        jac[:, i] = (xp - xm) / h
    return jac


def _fd_jacobian_logdet(model, z, t, h=2e-5):
    # Richardson-extrapolated central differences: O(h^4) truncation
    jac = (4.0 * _fd_jacobian(model, z, t, h) - _fd_jacobian(model, z, t, 2 * h)) / 3.0
    sign, logabs = np.linalg.slogdet(jac)
    return logabs if sign > 0 else np.nan


def flow_suite(seed=0, n_models=200, n_norm_models=20):
    rng = np.random.default_rng(seed)
    checks = []

    started = time.perf_counter()
    worst = 0.0
    for k in range(n_models):
        d = 2 if k % 2 == 0 else 3
        m = _random_model(rng, dim=d)
        z = rng.uniform(-4.0, 4.0, d)
        t = rng.uniform(0.0, 1.0)
        _, ld = flow_forward(m, z, t)
        ld_fd = _fd_jacobian_logdet(m, z, t)
        worst = max(worst, abs(ld - ld_fd) / max(abs(ld_fd), 1e-8))
    elapsed = time.perf_counter() - started
    checks.append((f"logdet vs finite-difference Jacobian over {n_models} models (rel 1e-5)",
                   worst <= 1e-5, f"max rel {worst:.2e} in {elapsed:.1f}s"))
    checks.append(("jacobian check runtime < 30 s", elapsed < 30.0, f"{elapsed:.1f}s"))

    # bijectivity and logdet antisymmetry
    worst_rt, worst_ld = 0.0, 0.0
    for _ in range(20):
        m = _random_model(rng)
        B = m.arch.tail_bound
        z = rng.uniform(-1.5 * B, 1.5 * B, (200, 2))
        t = rng.uniform(0.0, 1.0)
        x, ld_f = flow_forward(m, z, t)
        z2, ld_i = flow_inverse(m, x, t)
        worst_rt = max(worst_rt, np.abs(z2 - z).max())
        worst_ld = max(worst_ld, np.abs(ld_f + ld_i).max())
    checks.append(("flow roundtrip (1e-8)", worst_rt <= 1e-8, f"max {worst_rt:.2e}"))
    checks.append(("forward/inverse logdet antisymmetry (1e-9)", worst_ld <= 1e-9, f"max {worst_ld:.2e}"))

    # density normalization by quadrature
    started = time.perf_counter()
    worst_mass = 0.0
    axis = np.linspace(-12.0, 12.0, 400)
    wts = np.full(400, axis[1] - axis[0])
    wts[0] *= 0.5
    wts[-1] *= 0.5
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
    w2d = (wts[:, None] * wts[None, :]).ravel()
    for _ in range(n_norm_models):
        # gentle output layers: harder perturbations concentrate the density
        # into spikes narrower than the stated grid resolution
        m = _random_model(rng, scale=0.5, final_scale=0.1)
        t = rng.uniform(0.0, 1.0)
        dens = np.exp(log_density(m, pts, t))
        worst_mass = max(worst_mass, abs(float(dens @ w2d) - 1.0))
    elapsed = time.perf_counter() - started
    checks.append((f"density normalization over {n_norm_models} models (1e-3)",
                   worst_mass <= 1e-3, f"max |mass-1| {worst_mass:.2e} in {elapsed:.1f}s"))
    checks.append(("normalization runtime < 2 min", elapsed < 120.0, f"{elapsed:.1f}s"))
    return checks


# -- gradient suite --------------------------------------------------------------


def _tiny_cfg(penalty=3.0):
    return SimpleNamespace(n_time=2, n_latent=4, n_boundary=8, n_terminal=4,
                           dt_velocity=1e-3, dx_score=1e-3, penalty_weight=penalty)


def _grad_fd_rel_error(loss_fn, params, h=1e-5):
    _, g = ad.grad(loss_fn, params)
    fd = np.zeros_like(params)
    for i in range(len(params)):
        pp = params.copy()
        pp[i] += h / 2
        pm = params.copy()
        pm[i] -= h / 2
        # plain-ndarray parameters take the tape-free evaluation path
        fd[i] = (float(ad.val(loss_fn(pp))) - float(ad.val(loss_fn(pm)))) / h
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def diffkit_suite(seed=0, n_instances=50):
    tune_allocator()
    rng = np.random.default_rng(seed)
    checks = []
    # small model so the full-vector finite-difference sweep stays affordable
    arch = Architecture(dim=2, hidden=(3,), n_bins=2)
    g2 = standard_gaussian(2)
    families = {
        "ot": (OTProblem(g2, Gaussian([1.0, -0.5], 0.8 * np.eye(2))), ot_loss),
        "rwpo": (RWPOProblem(QuadraticPotential(), beta=1.0, horizon=1.0), rwpo_loss),
        "fokker_planck": (FokkerPlanckProblem(g2, OUDrift(1.0), gamma=0.5, horizon=1.0), fp_match_loss),
    }

    started = time.perf_counter()
    for name, (spec, loss) in families.items():
        worst = 0.0
        for k in range(n_instances):
            params = init_model_params(arch, seed=1000 + k)
            params += 0.4 * rng.standard_normal(params.shape)
            model = FlowModel(arch, params)
            loss_seed = int(rng.integers(2 ** 31))

            def loss_fn(p, model=model, spec=spec, loss=loss, loss_seed=loss_seed):
                return loss(model, spec, _tiny_cfg(), np.random.default_rng(loss_seed), params=p)[0]

            worst = max(worst, _grad_fd_rel_error(loss_fn, params))
        checks.append((f"{name} gradients vs central differences over {n_instances} instances (rel 1e-4)",
                       worst <= 1e-4, f"max rel {worst:.2e}"))
    elapsed = time.perf_counter() - started
    checks.append(("gradient checks runtime < 5 min", elapsed < 300.0, f"{elapsed:.1f}s"))

    # second-order convergence of the difference estimators; time-dependence
    # is smooth so the velocity converges pointwise, while the score jumps on
    # the knot-image surfaces, so its order is read off the per-point median
    model = _random_model(rng, dim=2, hidden=(8, 8), scale=0.8)
    z = rng.uniform(-2.0, 2.0, (64, 2))
    hs = np.array([0.2, 0.1, 0.05])
    v_ref = velocity_fd(model, z, 0.5, dt=1e-5)
    errs = [np.linalg.norm(velocity_fd(model, z, 0.5, dt=h) - v_ref) for h in hs]
    slope_v = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    checks.append(("velocity difference estimator is second order",
                   1.8 <= slope_v <= 2.2, f"slope {slope_v:.3f}"))

    x = rng.uniform(-2.0, 2.0, (256, 2))
    hs_s = np.array([0.04, 0.02, 0.01])
    s_ref = score_fd(model, x, 0.5, dx=1e-4)
    errs = [np.median(np.abs(score_fd(model, x, 0.5, dx=h) - s_ref).max(axis=1)) for h in hs_s]
    slope_s = float(np.polyfit(np.log(hs_s), np.log(errs), 1)[0])
    checks.append(("score difference estimator is second order",
                   1.8 <= slope_s <= 2.2, f"slope {slope_s:.3f}"))

    # determinism of the gradient for a fixed closure
    spec, loss = families["ot"]
    params = init_model_params(arch, seed=7)

    def fixed_loss(p):
        return loss(FlowModel(arch, params), spec, _tiny_cfg(), np.random.default_rng(5), params=p)[0]

    v1, g1 = ad.grad(fixed_loss, params)
    v2, g2_ = ad.grad(fixed_loss, params)
    checks.append(("grad is deterministic", v1 == v2 and np.array_equal(g1, g2_), ""))
    return checks


# -- oracle suite ----------------------------------------------------------------


def oracle_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []

    started = time.perf_counter()
    worst = 0.0
    for d in (1, 2):
        for beta in (0.5, 1.0):
            for horizon in (1.0, 2.0):
                var = 2.0 * (horizon + 1.0) / beta
                p0 = Gaussian(np.zeros(d), var * np.eye(d))
                quad = QuadratureSpec(half_width=18.0, nodes=448 if d == 2 else 2048)
                got = kernel_optimal_cost(p0, QuadraticPotential(), beta, horizon, quad)
                want = rwpo_quadratic_cost(d, beta, horizon)
                worst = max(worst, abs(got - want))
    checks.append(("kernel cost vs exact proximal cost on 8 cases (1e-3)",
                   worst <= 1e-3, f"max abs diff {worst:.2e}"))

    # closed-form W2 vs assignment-based empirical cost
    fails = []
    for trial in range(3):
        mean0 = rng.uniform(-3, 3, 2)
        mean1 = rng.uniform(-3, 3, 2)
        a_ = rng.uniform(-0.8, 0.8, (2, 2))
        cov0 = a_ @ a_.T + 0.5 * np.eye(2)
        cov1 = np.eye(2)
        g0, g1 = Gaussian(mean0, cov0), Gaussian(mean1, cov1)
        want = 0.5 * gaussian_w2sq(mean0, cov0, mean1, cov1)
        costs = [discrete_ot_cost(g0.sample(rng, 256), g1.sample(rng, 256)) for _ in range(8)]
        mean_cost = float(np.mean(costs))
        se = float(np.std(costs, ddof=1) / math.sqrt(len(costs)))
        # empirical transport cost is biased high at finite n; allow the bias
        ok = want - 3 * se <= mean_cost <= want + 3 * se + 0.25 * max(1.0, want) ** 0.5
        if not ok:
            fails.append(f"trial {trial}: {mean_cost:.3f} vs {want:.3f} (se {se:.3f})")
    checks.append(("closed-form W2 vs assignment cost (3 SE)", not fails, "; ".join(fails)))

    # stationarity residual of the ring drift
    drift = RingDrift(0.5)
    pts = [np.array([0.3, 1.2]), np.array([2.0, 0.0]), np.array([-1.5, -0.7]), np.array([0.0, -2.0])]
    res1 = max(abs(stationarity_residual(drift, 1.0, x)) for x in pts)
    res2 = max(abs(stationarity_residual(drift, 2.0, x)) for x in pts)
    checks.append(("ring drift stationarity residual at unit diffusion (1e-10)",
                   res1 <= 1e-10, f"max {res1:.2e}"))
    checks.append(("residual is nonzero away from unit diffusion", res2 > 1e-3, f"max {res2:.2e}"))

    # OU second moment vs Euler-Maruyama
    want = ou_second_moment(1.0, 1.0, 0.5, 8.0, 2)
    got, se = ou_em_second_moment(1.0, 0.5, 4.0, 2, 1.0, n_paths=100_000, dt=1e-3,
                                  rng=np.random.default_rng(seed + 9))
    # EM with step dt has O(dt) bias; 3 SE plus that margin
    ok = abs(got - want) <= 3 * se + 4.0 * 1e-3 * want
    checks.append(("OU second moment vs Euler-Maruyama (3 SE)", ok,
                   f"analytic {want:.4f}, EM {got:.4f} +- {se:.4f}"))
    elapsed = time.perf_counter() - started
    checks.append(("oracle suite runtime < 5 min", elapsed < 300.0, f"{elapsed:.1f}s"))
    return checks


SUITES = {
    "spline": spline_suite,
    "flow": flow_suite,
    "diffkit": diffkit_suite,
    "oracles": oracle_suite,
}


def run_suites(names=None, seed=0, out=print):
    """Run the requested suites; returns True when everything passed."""
    names = list(SUITES) if not names else list(names)
    all_ok = True
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; available: {', '.join(SUITES)}")
        out(f"== {name} suite ==")
        for check, ok, detail in SUITES[name](seed=seed):
            all_ok &= ok
            mark = "PASS" if ok else "FAIL"
            out(f"[{mark}] {check}" + (f" ({detail})" if detail else ""))
    return all_ok
