import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from metacal.numerics import (
    DomainError,
    SingularMatrixError,
    Tape,
    cholesky_factor,
    cholesky_with_jitter,
    erf,
    finite_diff_grad,
    gaussian_cdf,
    relative_error,
    solve_spd,
)
from metacal.numerics import tape as nx


def quad_erf(x):
    val, _ = integrate.quad(lambda t: 2.0 / math.sqrt(math.pi) * math.exp(-t * t), 0.0, x,
                            epsabs=1e-13, epsrel=1e-13)
    return val


def random_spd(rng, n, shift=None):
    a = rng.normal(size=(n, n))
    return a @ a.T + (n if shift is None else shift) * np.eye(n)


# erf / gaussian_cdf

def test_erf_origin_and_oddness():
    assert erf(0.0) == 0.0
    assert erf(-0.7) == -erf(0.7)


def test_erf_matches_quadrature():
    assert abs(erf(1.0) - quad_erf(1.0)) < 1e-12
    assert abs(erf(1.0) - 0.8427007929497149) < 1e-12
    for x in np.linspace(-3, 3, 13):
        assert abs(erf(x) - quad_erf(x)) < 1e-12


@given(st.floats(-6, 6), st.floats(-6, 6))
def test_erf_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert erf(lo) <= erf(hi)
    assert -1.0 <= erf(lo) <= 1.0


def test_gaussian_cdf_values():
    assert gaussian_cdf(0.3, 0.3, 2.0) == 0.5
    v = 0.7
    assert abs(gaussian_cdf(1.2 + 10 * math.sqrt(v), 1.2, v) - 1.0) < 1e-12
    density, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -np.inf, 1.0)
    assert abs(gaussian_cdf(1.0, 0.0, 1.0) - density) < 1e-12
    assert abs(gaussian_cdf(1.0, 0.0, 1.0) - 0.841344746068543) < 1e-12


def test_gaussian_cdf_rejects_nonpositive_variance():
    with pytest.raises(DomainError):
        gaussian_cdf(0.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        gaussian_cdf(0.0, 0.0, np.array([1.0, -1.0]))


def test_erf_tape_derivative_is_closed_form():
    tape = Tape()
    x = tape.variable(np.array([-1.3, 0.0, 0.4, 2.0]))
    (g,) = tape.backward(nx.sum(nx.erf(x)), [x])
    np.testing.assert_allclose(g, 2 / np.sqrt(np.pi) * np.exp(-x.value**2), rtol=1e-15, atol=0)


# cholesky / solve

def test_cholesky_small_cases():
    np.testing.assert_array_equal(cholesky_factor(np.eye(3)), np.eye(3))
    l = cholesky_factor(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(l, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], atol=1e-15)
    np.testing.assert_allclose(l @ l.T, [[4.0, 2.0], [2.0, 3.0]], atol=1e-15)
    assert cholesky_factor(np.array([[2.5]]))[0, 0] == math.sqrt(2.5)


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64])
def test_cholesky_reconstruction(n):
    rng = np.random.default_rng(n)
    k = random_spd(rng, n)
    l = cholesky_factor(k)
    assert np.all(np.triu(l, 1) == 0)
    assert np.linalg.norm(l @ l.T - k) / np.linalg.norm(k) < 1e-10


def test_cholesky_names_bad_pivot():
    k = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
    with pytest.raises(SingularMatrixError) as info:
        cholesky_factor(k)
    assert info.value.pivot == 2
    assert "index 2" in str(info.value)


def test_jitter_rescues_semidefinite_matrix():
    v = np.ones((3, 1))
    k = v @ v.T  # rank one
    used, jitter = cholesky_with_jitter(k)
    assert jitter > 0
    assert jitter <= 1e-8 * 1.0 * 2**6
    cholesky_factor(used)


def test_jitter_gives_up_on_indefinite_matrix():
    with pytest.raises(SingularMatrixError):
        cholesky_with_jitter(np.diag([1.0, -1.0]))


def test_jitter_not_applied_when_unneeded():
    k = np.array([[2.0, 0.5], [0.5, 1.0]])
    used, jitter = cholesky_with_jitter(k)
    assert jitter == 0.0 and used is k


def test_solve_spd_small_cases():
    b = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(solve_spd(np.eye(3), b), b)
    np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 8.0])), [1.0, 2.0], rtol=1e-15)


def test_solve_spd_residual():
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = random_spd(rng, 5, shift=0.5)
        b = rng.normal(size=5)
        x = solve_spd(k, b)
        assert np.linalg.norm(k @ x - b) / np.linalg.norm(b) < 1e-8


def test_solve_spd_batched_matrix_rhs():
    rng = np.random.default_rng(4)
    k = np.stack([random_spd(rng, 4) for _ in range(3)])
    b = rng.normal(size=(3, 4, 2))
    x = solve_spd(k, b)
    np.testing.assert_allclose(k @ x, b, atol=1e-12)


# finite differences

def test_finite_diff_grad_basics():
    g = finite_diff_grad(lambda t: t[0] ** 2, [3.0], 1e-5)
    assert abs(g[0] - 6.0) < 1e-6
    np.testing.assert_array_equal(finite_diff_grad(lambda t: 4.2, np.ones(4)), np.zeros(4))


# tape gradients, one primitive at a time

def _check(fn, *shapes, rng=None, positive=False, tol=1e-4):
    rng = rng or np.random.default_rng(0)
    vals = [rng.uniform(0.5, 2.0, size=s) if positive else rng.normal(size=s) for s in shapes]
    sizes = [v.size for v in vals]
    theta = np.concatenate([v.ravel() for v in vals])

    def unpack(t):
        out, i = [], 0
        for s, n in zip(shapes, sizes):
            out.append(t[i:i + n].reshape(s))
            i += n
        return out

    def scalar(t):
        return float(np.sum(fn(*unpack(t)) * weights))

    weights = rng.normal(size=np.shape(fn(*vals)))
    tape = Tape()
    leaves = [tape.variable(v) for v in vals]
    out = nx.sum(fn(*leaves) * weights)
    grads = tape.backward(out, leaves)
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = finite_diff_grad(scalar, theta, 1e-5)
    assert relative_error(analytic, numeric).max() < tol


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 2), (2,)], False),
    "sub": (lambda a, b: a - b, [(3, 2), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(3, 2), (3, 2)], False),
    "div": (lambda a, b: a / b, [(4,), (4,)], True),
    "neg": (lambda a: -a, [(3,)], False),
    "exp": (nx.exp, [(5,)], False),
    "log": (nx.log, [(5,)], True),
    "sqrt": (nx.sqrt, [(5,)], True),
    "tanh": (nx.tanh, [(5,)], False),
    "abs": (nx.absolute, [(5,)], True),
    "square": (nx.square, [(5,)], False),
    "power": (lambda a: a ** 1.5, [(4,)], True),
    "softplus": (nx.softplus, [(5,)], False),
    "logistic": (nx.logistic, [(5,)], False),
    "erf": (nx.erf, [(5,)], False),
    "sum_axis": (lambda a: nx.sum(a, axis=1), [(3, 4)], False),
    "mean_keep": (lambda a: nx.mean(a, axis=-1, keepdims=True), [(3, 4)], False),
    "reshape": (lambda a: nx.reshape(a, (4, 3)), [(3, 4)], False),
    "expand_dims": (lambda a: nx.expand_dims(a, 1), [(3, 4)], False),
    "swap_last": (nx.swap_last, [(2, 3, 4)], False),
    "getitem": (lambda a: a[..., 1:3], [(2, 4)], False),
    "concat": (lambda a, b: nx.concatenate([a, b], axis=-1), [(2, 3), (2, 2)], False),
    "take_along": (lambda a: nx.take_along_axis(a, np.array([[2, 0, 1], [1, 2, 0]]), -1), [(2, 3)], False),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)], False),
    "gaussian_cdf": (lambda y, m, v: gaussian_cdf(y, m, v), [(4,), (4,), (4,)], True),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    fn, shapes, positive = PRIMITIVES[name]
    _check(fn, *shapes, rng=np.random.default_rng(seed), positive=positive)


@pytest.mark.parametrize("seed", [0, 1])
def test_cholesky_and_solve_gradients(seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(2, 4, 3))

    def build(m):
        return m @ nx.swap_last(m) + 4.0 * np.eye(4)

    _check(lambda m: cholesky_factor(build(m)), (2, 4, 4), rng=rng)
    _check(lambda m: solve_spd(build(m), b), (2, 4, 4), rng=rng)
    _check(lambda m, c: solve_spd(build(m), c), (4, 4), (4,), rng=rng)


def test_tape_replay_is_bitwise():
    rng = np.random.default_rng(7)
    tape = Tape()
    a = tape.variable(rng.normal(size=(3, 3)))
    k = a @ nx.swap_last(a) + 3.0 * np.eye(3)
    out = nx.sum(nx.tanh(solve_spd(k, np.ones(3))) * nx.erf(nx.sum(a, axis=0)))
    values = tape.replay()
    assert len(values) == len(tape)
    assert values[out.index].tobytes() == out.value.tobytes()


def test_every_reachable_leaf_gets_gradient():
    tape = Tape()
    a, b, unused = tape.variable(1.5), tape.variable(-0.5), tape.variable(2.0)
    out = a * b + nx.exp(a)
    grads = tape.backward(out)
    assert grads[a] == pytest.approx(-0.5 + math.exp(1.5))
    assert grads[b] == pytest.approx(1.5)
    assert grads[unused] == 0.0


def test_backward_requires_scalar():
    tape = Tape()
    a = tape.variable(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(a * 2.0)


def test_plain_arrays_bypass_tape():
    out = nx.tanh(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_randomized_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    _check(lambda a, b: nx.tanh(a @ b) * nx.erf(a[..., :1]), (3, 2), (2, 2), rng=rng)
