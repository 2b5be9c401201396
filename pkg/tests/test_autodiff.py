import numpy as np
import pytest

from mfcflow import autodiff as ad


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h / 2
        xm = x.copy()
        xm.flat[i] -= h / 2
        g.flat[i] = (f(xp) - f(xm)) / h
    return g


def check_against_fd(build, x, rel=1e-6):
    val, g = ad.grad(build, x)
    fd = fd_grad(lambda v: float(ad.val(build(ad.Tensor(v)))), x)
    assert np.linalg.norm(g - fd) <= rel * max(np.linalg.norm(fd), 1e-12)
    return val, g


def test_quadratic_gradient_is_identity():
    x = np.array([1.0, -2.0, 3.0])
    val, g = ad.grad(lambda p: 0.5 * ad.tsum(p * p), x)
    assert val == pytest.approx(7.0)
    assert np.allclose(g, x)


def test_constant_coordinate_has_zero_gradient():
    x = np.array([1.0, 2.0, 5.0])
    _, g = ad.grad(lambda p: ad.tsum(p[:2] * p[:2]), x)
    assert g[2] == 0.0


def test_elementwise_chain():
    x = np.array([0.3, -0.7, 1.2, 0.05])

    def build(p):
        return ad.tsum(ad.tanh(ad.exp(p) + ad.softplus(p * 2.0)) * ad.log(p * p + 1.0))

    check_against_fd(build, x)


def test_matmul_affine_broadcast():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(12)

    def build(p):
        w = p[:6].reshape((2, 3))
        b = p[6:9]
        inp = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]]).T  # (2, 3)? no: keep (3,2)
        h = ad.affine(np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]]), w, b)
        return ad.tsum(ad.tanh(h)) + ad.tsum(p[9:] * p[9:])

    check_against_fd(build, x)


def test_where_maximum_minimum_subgradients():
    x = np.array([0.5, -0.5, 2.0, -2.0])

    def build(p):
        a = ad.maximum(p, 0.1)
        b = ad.minimum(p * 2.0, 1.0)
        return ad.tsum(ad.where(np.array([True, False, True, False]), a, b))

    check_against_fd(build, x)


def test_gather_cumsum_concat():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10)

    def build(p):
        m = p.reshape((2, 5))
        c = ad.cumsum(m, axis=1)
        picked = ad.gather_rows(c, np.array([1, 3]))
        joined = ad.concatenate([c[:, :2], c[:, 3:]], axis=1)
        return ad.tsum(picked) + ad.tsum(joined * joined)

    check_against_fd(build, x)


def test_softmax_rows_sum_to_one_and_derivative():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8)

    def build(p):
        s = ad.softmax(p.reshape((2, 4)), axis=-1)
        return ad.tsum(s * np.arange(4.0))

    val, _ = check_against_fd(build, x)
    s = ad.softmax(x.reshape(2, 4), axis=-1)
    assert np.allclose(s.sum(axis=1), 1.0)


def test_value_matches_plain_evaluation_bitwise():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(6)

    def compute(p):
        return ad.tsum(ad.exp(p) * ad.tanh(p)) / 3.0

    plain = float(compute(x))
    traced, _ = ad.grad(compute, x)
    assert traced == plain  # identical operation sequence, bit for bit


def test_grad_requires_scalar_and_dependence():
    x = np.ones(3)
    with pytest.raises(ad.GradientError):
        ad.grad(lambda p: p * 2.0, x)  # non-scalar
    with pytest.raises(ad.GradientError):
        ad.grad(lambda p: 7.0, x)  # no dependence


def test_gradient_error_names_failing_primitive():
    x = np.array([-1.0])
    with np.errstate(invalid="ignore"):
        with pytest.raises(ad.GradientError, match="log"):
            ad.grad(lambda p: ad.tsum(ad.log(p)), x)


def test_second_use_accumulates():
    x = np.array([2.0])
    _, g = ad.grad(lambda p: ad.tsum(p * p) + ad.tsum(3.0 * p), x)
    assert g[0] == pytest.approx(2 * 2.0 + 3.0)


def test_numpy_left_operand_dispatches_to_tensor():
    x = np.array([1.0, 2.0])

    def build(p):
        a = np.array([3.0, 4.0]) * p        # ndarray.__mul__ must defer
        b = np.array([1.0, 1.0]) - p
        c = np.array([[1.0, 0.0], [1.0, 1.0]]) @ p.reshape((2, 1))
        return ad.tsum(a) + ad.tsum(b) + ad.tsum(c)

    check_against_fd(build, x)
