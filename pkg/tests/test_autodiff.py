import numpy as np
import pytest
import scipy.linalg

from blockbnn import autodiff as ad


def fd_gradient(fn, x0, h=1e-6):
    """Central finite differences of a scalar function of one matrix."""
    g = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def scalar(fn_build, x0):
    def run(x):
        tape = ad.Tape()
        leaf = tape.leaf(x)
        return float(fn_build(leaf).value[0, 0])
    tape = ad.Tape()
    leaf = tape.leaf(x0)
    out = fn_build(leaf)
    (grad,) = tape.gradient(out, [leaf])
    return grad, fd_gradient(run, x0)


def test_matmul_identity():
    a = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(ad.matmul(np.eye(2), a), a)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                want[i, j] += a[i, k] * b[k, j]
    assert np.allclose(ad.matmul(a, b), want, atol=1e-14)


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (rng.uniform(-2, 2, size=(4, 4)) for _ in range(3))
        lhs = ad.matmul(ad.matmul(a, b), c)
        rhs = ad.matmul(a, ad.matmul(b, c))
        assert np.abs(lhs - rhs).max() <= 1e-10


def test_relu_values_and_dead_gradient():
    assert np.array_equal(ad.relu(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    tape = ad.Tape()
    x = tape.leaf(np.array([[-1.0]]))
    out = ad.relu(x)
    (g,) = tape.gradient(out, [x])
    assert g[0, 0] == 0.0


def test_quadratic_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([[1.0], [2.0]]))
    out = ad.total_sum(ad.square(x))
    (g,) = tape.gradient(out, [x])
    assert np.array_equal(g, [[2.0], [4.0]])


@pytest.mark.parametrize("kind", ["relu", "tanh", "erf", "sigmoid", "identity"])
def test_elementwise_gradients_match_fd(kind):
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-2, 2, size=(3, 4))
    if kind == "relu":  # keep clear of the kink
        x0[np.abs(x0) < 1e-3] += 0.5
    g, fd = scalar(lambda v: ad.total_sum(ad.elementwise(v, kind)), x0)
    assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("build", [
    lambda v: ad.total_sum(ad.matmul(v, v)),
    lambda v: ad.total_sum(ad.mul(v, v)),
    lambda v: ad.total_sum(ad.exp(ad.scale(v, 0.3))),
    lambda v: ad.total_sum(ad.log(ad.add(ad.square(v), np.full((4, 4), 1.0)))),
    lambda v: ad.total_sum(ad.sqrt(ad.add(ad.square(v), np.full((4, 4), 0.1)))),
    lambda v: ad.total_sum(ad.log_sum_exp(v)),
    lambda v: ad.total_sum(ad.row_sum(ad.tanh(v))),
    lambda v: ad.total_sum(ad.select_cols(v, [2, 0])),
    lambda v: ad.total_sum(ad.concat_cols([v, ad.square(v)])),
    lambda v: ad.total_sum(ad.sub(ad.transpose(v), np.ones((4, 4)))),
    lambda v: ad.logabsdet(ad.add(v, 4.0 * np.eye(4))),
])
def test_composite_gradients_match_fd(build):
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-2, 2, size=(4, 4))
    g, fd = scalar(build, x0)
    assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


def test_rbf_gram_gradient_and_values():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 2))
    z = rng.normal(size=(4, 2))
    vals = ad.rbf_gram(x0, z, lengthscale=0.7)
    want = np.exp(-((x0[:, None, :] - z[None, :, :]) ** 2).sum(-1) / (2 * 0.7 ** 2))
    assert np.allclose(vals, want, atol=1e-12)
    w = rng.normal(size=(3, 4))
    g, fd = scalar(lambda v: ad.total_sum(ad.mul(ad.rbf_gram(v, z, 0.7), w)), x0)
    assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


def test_broadcast_add_mul():
    a = np.ones((3, 2))
    row = np.array([[1.0, 2.0]])
    assert np.array_equal(ad.add(a, row), [[2, 3]] * 3)
    g, fd = scalar(lambda v: ad.total_sum(ad.mul(ad.add(v, row),
                                                 np.array([[2.0]]))),
                   np.random.default_rng(0).normal(size=(3, 2)))
    assert np.abs(g - fd).max() <= 1e-6


def test_gradient_requires_scalar_output():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.square(x)
    with pytest.raises(ad.ShapeMismatch):
        tape.gradient(y, [x])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeMismatch) as err:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(err.value)


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        ad.add(t1.leaf(np.ones((1, 1))), t2.leaf(np.ones((1, 1))))


def test_unvisited_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = tape.leaf(np.ones((2, 2)))
    out = ad.total_sum(x)
    gx, gy = tape.gradient(out, [x, y])
    assert np.array_equal(gx, np.ones((2, 2)))
    assert np.array_equal(gy, np.zeros((2, 2)))


class TestInverseSqrt:
    def test_identity(self):
        assert np.allclose(ad.inverse_sqrt_spd(np.eye(3)), np.eye(3), atol=1e-12)

    def test_diagonal_scaling(self):
        assert np.allclose(ad.inverse_sqrt_spd(4.0 * np.eye(3)), 0.5 * np.eye(3),
                           atol=1e-12)

    def test_random_spd_contract_and_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 5))
        k = a @ a.T + 0.1 * np.eye(5)
        m = ad.inverse_sqrt_spd(k)
        assert np.abs(m @ k @ m.T - np.eye(5)).max() <= 1e-8
        assert np.allclose(m, m.T, atol=1e-10)

    def test_matches_schur_sqrtm_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(6, 6))
        k = a @ a.T + 0.2 * np.eye(6)
        want = np.linalg.inv(scipy.linalg.sqrtm(k).real)
        assert np.allclose(ad.inverse_sqrt_spd(k), want, atol=1e-8)

    def test_condition_1e6(self):
        rng = np.random.default_rng(9)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        w = np.geomspace(1.0, 1e-6, 6)
        k = (q * w) @ q.T
        m = ad.inverse_sqrt_spd(k)
        assert np.abs(m @ k @ m.T - np.eye(6)).max() <= 1e-8

    def test_sqrt_spd_squares_back(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(4, 4))
        k = a @ a.T + 0.3 * np.eye(4)
        s = ad.sqrt_spd(k)
        assert np.allclose(s @ s, k, atol=1e-10)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ValueError):
            ad.inverse_sqrt_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_jitter_rescues_semidefinite(self):
        k = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank deficient
        m = ad.inverse_sqrt_spd(k, jitter=1e-10)
        jittered = k + 1e-10 * np.eye(2)
        assert np.abs(m @ jittered @ m.T - np.eye(2)).max() <= 1e-6

    def test_escalation_eventually_fails(self):
        k = np.array([[1.0, 0.0], [0.0, -5.0]])
        with pytest.raises(ad.FactorizationError):
            ad.inverse_sqrt_spd(k)


def test_nonfinite_detection():
    with pytest.raises(ad.NonFiniteValue):
        ad.exp(np.full((1, 1), 1e4))
