import math

import numpy as np
import pytest

from mfcflow.conditioner import Architecture
from mfcflow.flow import build_model
from mfcflow.oracles import (AccuracyError, QuadratureSpec, discrete_ot_cost,
                             gaussian_ot_map, gaussian_w2sq, kernel_optimal_cost,
                             kernel_phi, ou_density, ou_em_second_moment,
                             ou_second_moment, reference_objective,
                             rmse_on_grid, rwpo_quadratic_cost,
                             rwpo_true_density, rwpo_true_phi,
                             stationarity_residual)
from mfcflow.problems import (DoubleWellPotential, Gaussian, OTProblem,
                              QuadraticPotential, RWPOProblem, RingDrift,
                              standard_gaussian)


# -- Gaussian transport ---------------------------------------------------------


def test_gaussian_ot_map_identity_covariances():
    a, shift = gaussian_ot_map([0.0, 0.0], np.eye(2), [3.0, -1.0], np.eye(2))
    assert np.allclose(a, np.eye(2))
    assert np.allclose(shift, [3.0, -1.0])


def test_gaussian_ot_map_scalar_case():
    a, _ = gaussian_ot_map([0.0, 0.0], 4.0 * np.eye(2), [0.0, 0.0], np.eye(2))
    assert np.allclose(a, 0.5 * np.eye(2))


def test_gaussian_ot_map_defining_property():
    cov0 = np.array([[5.0, 1.0], [1.0, 0.5]])
    a, _ = gaussian_ot_map([0.0, 0.0], cov0, [0.0, 0.0], np.eye(2))
    assert np.abs(a @ cov0 @ a.T - np.eye(2)).max() <= 1e-10
    vals = np.linalg.eigvalsh(a)
    assert np.all(vals > 0)  # map is SPD


def test_gaussian_ot_map_rejects_non_spd():
    with pytest.raises(ValueError):
        gaussian_ot_map([0.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]), [0.0, 0.0], np.eye(2))


def test_gaussian_w2sq_benchmark_values():
    # separated isotropic Gaussians: cost is the squared mean distance
    assert 0.5 * gaussian_w2sq([-3, -3], np.eye(2), [3, 3], np.eye(2)) == pytest.approx(36.000)
    # anisotropic shrink: half-value 0.125
    assert 0.5 * gaussian_w2sq([0, 0], np.diag([1.0, 0.25]), [0, 0], np.eye(2)) == pytest.approx(0.125)
    assert gaussian_w2sq([1, 2], np.eye(2), [1, 2], np.eye(2)) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_w2sq_random_pairs_defining_property():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a_ = rng.uniform(-1, 1, (2, 2))
        cov0 = a_ @ a_.T + 0.3 * np.eye(2)
        a, _ = gaussian_ot_map([0, 0], cov0, [0, 0], np.eye(2))
        assert np.abs(a @ cov0 @ a.T - np.eye(2)).max() <= 1e-10


def test_discrete_ot_exact_cases():
    xs = np.random.default_rng(1).standard_normal((64, 2))
    assert discrete_ot_cost(xs, xs) == pytest.approx(0.0, abs=1e-12)
    # 1-D transport is the sorted pairing
    a = np.array([[3.0], [1.0], [2.0]])
    b = np.array([[10.0], [30.0], [20.0]])
    expected = 0.5 * np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2)
    assert discrete_ot_cost(a, b) == pytest.approx(expected)
    with pytest.raises(ValueError):
        discrete_ot_cost(np.zeros((600, 2)), np.zeros((600, 2)))


def test_discrete_ot_near_gaussian_benchmark():
    rng = np.random.default_rng(2)
    g0 = Gaussian([-3.0, -3.0], np.eye(2))
    g1 = Gaussian([3.0, 3.0], np.eye(2))
    cost = discrete_ot_cost(g0.sample(rng, 256), g1.sample(rng, 256))
    assert abs(cost - 36.0) / 36.0 <= 0.15


# -- quadratic proximal closed forms ---------------------------------------------


def test_rwpo_quadratic_cost_values():
    assert rwpo_quadratic_cost(2, 1.0, 1.0) == pytest.approx(3.386, abs=5e-4)
    assert rwpo_quadratic_cost(2, 0.5, 2.0) == pytest.approx(8.394, abs=5e-4)
    assert rwpo_quadratic_cost(3, 2.0, 0.0) == pytest.approx(1.5)  # log 1 = 0


def test_rwpo_true_density_terminal_variance_and_mass():
    beta, horizon = 1.0, 1.0
    # at t = T the per-coordinate variance is 2/beta
    want = 1.0 / (2 * math.pi * 2.0)
    assert rwpo_true_density(np.zeros(2), horizon, beta, horizon) == pytest.approx(want)
    # integrates to one at arbitrary t
    axis = np.linspace(-14, 14, 561)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
    h = axis[1] - axis[0]
    mass = rwpo_true_density(pts, 0.4, beta, horizon).sum() * h * h
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_rwpo_true_phi_gradient_is_optimal_velocity():
    beta, horizon = 1.0, 1.0
    x = np.array([0.7, -1.3])
    t = 0.25
    h = 1e-6
    grad = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h / 2
        grad[i] = (rwpo_true_phi(x + e, t, beta, horizon)
                   - rwpo_true_phi(x - e, t, beta, horizon)) / h
    assert np.allclose(grad, -x / (horizon - t + 1.0), atol=1e-8)


# -- kernel quadrature ------------------------------------------------------------


def test_kernel_cost_cross_validates_closed_form():
    quad = QuadratureSpec(half_width=18.0, nodes=448)
    p0 = Gaussian(np.zeros(2), 4.0 * np.eye(2))
    got = kernel_optimal_cost(p0, QuadraticPotential(), 1.0, 1.0, quad)
    assert got == pytest.approx(rwpo_quadratic_cost(2, 1.0, 1.0), abs=1e-3)


def test_kernel_phi_quadrature_self_convergence():
    p0_var = 0.8
    x = np.array([[0.3, -0.2], [1.0, 1.0]])
    v1 = kernel_phi(x, 0.0, 5.0, 2.0, DoubleWellPotential(1.0), QuadratureSpec(6.0, 256))
    v2 = kernel_phi(x, 0.0, 5.0, 2.0, DoubleWellPotential(1.0), QuadratureSpec(6.0, 512))
    assert np.abs(v1 - v2).max() < 1e-6


def test_kernel_phi_truncation_guard():
    with pytest.raises(AccuracyError):
        kernel_phi(np.array([[30.0, 0.0]]), 0.0, 1.0, 1.0, QuadraticPotential(),
                   QuadratureSpec(4.0, 64))


def test_kernel_double_well_regression_baseline():
    # frozen quadrature value for the double-well proximal cost; regression
    # anchor for the training benchmark
    quad = QuadratureSpec(half_width=6.0, nodes=256)
    p0 = Gaussian(np.zeros(2), 0.8 * np.eye(2))
    got = kernel_optimal_cost(p0, DoubleWellPotential(1.0), 5.0, 2.0, quad)
    finer = kernel_optimal_cost(p0, DoubleWellPotential(1.0), 5.0, 2.0,
                                QuadratureSpec(half_width=6.0, nodes=512))
    assert got == pytest.approx(finer, abs=1e-6)
    assert got == pytest.approx(0.7819696, abs=1e-5)


# -- Ornstein-Uhlenbeck ------------------------------------------------------------


def test_ou_second_moment_limits():
    assert ou_second_moment(0.0, 1.0, 0.5, 8.0, 2) == pytest.approx(8.0)
    assert ou_second_moment(50.0, 1.0, 0.5, 8.0, 2) == pytest.approx(1.0, abs=1e-8)
    assert ou_second_moment(1.0, 1.0, 0.5, 8.0, 2) == pytest.approx(
        2 * (0.5 + 3.5 * math.exp(-2.0)))
    with pytest.raises(ValueError):
        ou_second_moment(1.0, -1.0, 0.5, 8.0, 2)


def test_ou_against_euler_maruyama():
    want = ou_second_moment(1.0, 1.0, 0.5, 8.0, 2)
    got, se = ou_em_second_moment(1.0, 0.5, 4.0, 2, 1.0, n_paths=60_000,
                                  rng=np.random.default_rng(4))
    assert abs(got - want) <= 3 * se + 4e-3 * want


def test_ou_density_normalization_and_score():
    axis = np.linspace(-10, 10, 801)
    h = axis[1] - axis[0]
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
    dens = ou_density(pts, 0.7, 1.0, 0.5, 4.0)
    assert dens.sum() * h * h == pytest.approx(1.0, abs=1e-6)
    # analytic score of the Gaussian solution: -x / var(t)
    from mfcflow.oracles import ou_variance
    var = ou_variance(0.7, 1.0, 0.5, 4.0)
    x = np.array([0.9, -0.4])
    eps = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = eps / 2
        fd = (math.log(ou_density(x + e, 0.7, 1.0, 0.5, 4.0))
              - math.log(ou_density(x - e, 0.7, 1.0, 0.5, 4.0))) / eps
        assert fd == pytest.approx(-x[i] / var, abs=1e-6)


# -- stationarity and grid metrics -------------------------------------------------


def test_stationarity_residual_cases():
    drift = RingDrift(0.8)
    for x in ([0.4, 1.1], [1.9, -0.3], [-2.2, 0.6]):
        assert abs(stationarity_residual(drift, 1.0, np.array(x))) <= 1e-10
    no_rotation = RingDrift(0.0)
    assert abs(stationarity_residual(no_rotation, 1.0, np.array([0.5, 0.5]))) <= 1e-12
    assert abs(stationarity_residual(drift, 2.0, np.array([1.5, 0.5]))) > 1e-4


def test_rmse_on_grid_identity_against_standard_normal():
    m = build_model(Architecture(), seed=0)

    def true_density(x):
        return np.exp(-0.5 * np.sum(x * x, axis=1)) / (2 * math.pi)

    rmse = rmse_on_grid(m, true_density, 5.0, 100, 0.5)
    assert rmse <= 1e-12


def test_rmse_on_grid_refinement_stability():
    m = build_model(Architecture(), seed=0)

    def shifted(x):
        d = x - np.array([0.2, -0.1])
        return np.exp(-0.5 * np.sum(d * d, axis=1)) / (2 * math.pi)

    full = rmse_on_grid(m, shifted, 5.0, 200, 0.3)
    half = rmse_on_grid(m, shifted, 5.0, 100, 0.3)
    assert abs(full - half) / full < 0.05


def test_rmse_rejects_unnormalized_density():
    m = build_model(Architecture(), seed=0)
    with pytest.raises(ValueError):
        rmse_on_grid(m, lambda x: np.ones(len(x)), 5.0, 50, 0.0)


def test_reference_objective_dispatch():
    ot = OTProblem(Gaussian([-3, -3], np.eye(2)), Gaussian([3, 3], np.eye(2)))
    value, label = reference_objective(ot)
    assert value == pytest.approx(36.0)
    rwpo = RWPOProblem(QuadraticPotential(), beta=1.0, horizon=1.0)
    value, label = reference_objective(rwpo)
    assert value == pytest.approx(3.386294, abs=1e-5)
    from mfcflow.problems import ring_of_gaussians
    mix = OTProblem(ring_of_gaussians([[5.0, 0.0], [-5.0, 0.0]]), standard_gaussian(2))
    assert reference_objective(mix) is None
