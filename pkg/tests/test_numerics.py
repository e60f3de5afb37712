import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from apcde.core import finite_diff_gradient, gradient_of, logdet_lu, logsumexp, lu_factor, ops
from apcde.core.tape import PRIMITIVES, Tape
from apcde.errors import ArgumentError, NumericalError, SingularMatrixError


def cofactor_det(a):
    """Laplace expansion along the first row; exponential cost, tiny matrices only."""
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += (-1) ** j * a[0, j] * cofactor_det(minor)
    return total


# -- logsumexp ----------------------------------------------------------------

def test_logsumexp_two_zeros():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("a", [-1e300, -3.5, 0.0, 7.25, 1e300])
def test_logsumexp_single_term(a):
    assert logsumexp([a]) == a


def test_logsumexp_naive_oracle():
    v = np.random.default_rng(0).normal(size=7)
    naive = math.log(sum(math.exp(t) for t in v))
    assert abs(logsumexp(v) - naive) < 1e-12


def test_logsumexp_no_overflow():
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))


def test_logsumexp_empty_raises():
    with pytest.raises(ArgumentError):
        logsumexp([])


def test_logsumexp_axis_and_keepdims():
    v = np.random.default_rng(1).normal(size=(3, 4))
    row = logsumexp(v, axis=1)
    assert row.shape == (3,)
    assert logsumexp(v, axis=1, keepdims=True).shape == (3, 1)
    np.testing.assert_allclose(row, np.log(np.exp(v).sum(axis=1)), rtol=1e-14)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(-1e3, 1e3))
def test_logsumexp_shift_equivariance(v, c):
    lhs = logsumexp(v + c)
    rhs = logsumexp(v) + c
    assert abs(lhs - rhs) <= 4 * np.spacing(max(abs(lhs), abs(rhs), 1.0)) + 1e-12


# -- LU / log-determinant -----------------------------------------------------

def test_logdet_identity():
    assert logdet_lu(np.eye(3)) == (0.0, 1.0)


def test_logdet_diag():
    ld, sign = logdet_lu(np.diag([2.0, 3.0]))
    assert ld == pytest.approx(math.log(6), abs=1e-15)
    assert sign == 1.0


def test_logdet_matches_cofactor_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.normal(size=(5, 5))
        det = cofactor_det(a)
        ld, sign = logdet_lu(a)
        assert sign * math.exp(ld) == pytest.approx(det, rel=1e-9)


def test_lu_reconstructs_permuted_matrix():
    a = np.random.default_rng(3).normal(size=(6, 6))
    lu, perm, _ = lu_factor(a)
    lower = np.tril(lu, -1) + np.eye(6)
    upper = np.triu(lu)
    np.testing.assert_allclose(lower @ upper, a[perm], atol=1e-12)


def test_logdet_negative_sign():
    ld, sign = logdet_lu(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert (ld, sign) == (0.0, -1.0)


def test_singular_raises():
    with pytest.raises(SingularMatrixError):
        logdet_lu(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError):
        logdet_lu(np.zeros((3, 3)))


def test_logdet_non_square_raises():
    with pytest.raises(ArgumentError):
        logdet_lu(np.ones((2, 3)))


def test_logdet_product_rule():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.normal(size=(4, 4)) + 3 * np.eye(4)
        b = rng.normal(size=(4, 4)) + 3 * np.eye(4)
        assert logdet_lu(a @ b)[0] == pytest.approx(logdet_lu(a)[0] + logdet_lu(b)[0], abs=1e-9)


# -- finite differences -------------------------------------------------------

def test_fd_square():
    g = finite_diff_gradient(lambda p: float(p["x"] ** 2), {"x": np.array(3.0)})
    assert abs(g["x"] - 6.0) < 1e-9


def test_fd_constant():
    g = finite_diff_gradient(lambda p: 4.2, {"a": np.ones((2, 3)), "b": np.zeros(4)})
    assert all(np.all(v == 0) for v in g.values())


def test_fd_std_normal():
    from apcde.base import log_std_normal

    g = finite_diff_gradient(lambda p: float(log_std_normal(p["z"][None])[0]), {"z": np.array([1.0, -1.0])})
    np.testing.assert_allclose(g["z"], [-1.0, 1.0], atol=1e-8)


def test_fd_nonfinite_raises():
    with pytest.raises(NumericalError):
        finite_diff_gradient(lambda p: math.log(p["x"]) if p["x"] > 0 else float("nan"), {"x": np.array(0.0)})


# -- tape ---------------------------------------------------------------------

def test_square_gradient():
    t = Tape()
    x = t.param("x", 3.0)
    assert gradient_of(t, x * x)["x"] == pytest.approx(6.0)


def test_logsumexp_gradient_is_softmax():
    v0 = np.array([0.3, -1.2, 2.0, 0.0])
    t = Tape()
    v = t.param("v", v0)
    g = gradient_of(t, ops.logsumexp(v))["v"]
    np.testing.assert_allclose(g, np.exp(v0) / np.exp(v0).sum(), rtol=1e-14)


def test_nonscalar_loss_rejected():
    t = Tape()
    v = t.param("v", np.ones(3))
    with pytest.raises(ArgumentError):
        gradient_of(t, ops.mul(v, 2.0))


def test_unused_param_gets_zero_gradient():
    t = Tape()
    a = t.param("a", np.ones((2, 2)))
    t.param("b", np.ones(5))
    g = gradient_of(t, ops.sum(a))
    assert g["b"].shape == (5,) and np.all(g["b"] == 0)
    assert g["a"].shape == (2, 2)


def test_param_registration_idempotent():
    t = Tape()
    a = t.param("a", 2.0)
    b = t.param("a", 99.0)
    assert a.index == b.index and float(b.value) == 2.0


def test_replay_reproduces_forward():
    rng = np.random.default_rng(5)
    t = Tape()
    w = t.param("w", rng.normal(size=(3, 4)))
    b = t.param("b", rng.normal(size=3))
    x = rng.normal(size=(5, 4))
    out = ops.logsumexp(ops.tanh(ops.affine(x, w, b)), axis=1)
    loss = ops.sum(ops.exp(out))
    values = t.replay()
    assert np.array_equal(values[loss.index], loss.value)
    assert np.array_equal(values[out.index], out.value)


def test_no_tape_returns_arrays():
    out = ops.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)


def test_mixed_tapes_rejected():
    a = Tape().param("a", 1.0)
    b = Tape().param("b", 1.0)
    with pytest.raises(ArgumentError):
        ops.add(a, b)


# every primitive against central differences on 100 random instances

def _well_conditioned(rng, n):
    return rng.normal(size=(n, n)) + n * np.eye(n)


CASES = {
    "add": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=4)}, lambda p: ops.add(p["a"], p["b"])),
    "sub": (lambda r: {"a": r.normal(size=(3, 1)), "b": r.normal(size=(3, 4))}, lambda p: ops.sub(p["a"], p["b"])),
    "neg": (lambda r: {"a": r.normal(size=5)}, lambda p: ops.neg(p["a"])),
    "mul": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(1, 3))}, lambda p: ops.mul(p["a"], p["b"])),
    "matmul": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))},
               lambda p: ops.matmul(p["a"], p["b"])),
    "affine": (lambda r: {"x": r.normal(size=(3, 4)), "w": r.normal(size=(2, 4)), "b": r.normal(size=2)},
               lambda p: ops.affine(p["x"], p["w"], p["b"])),
    "tanh": (lambda r: {"a": r.normal(size=6)}, lambda p: ops.tanh(p["a"])),
    "exp": (lambda r: {"a": r.normal(size=6)}, lambda p: ops.exp(p["a"])),
    "log": (lambda r: {"a": r.uniform(0.5, 3.0, size=6)}, lambda p: ops.log(p["a"])),
    "sum": (lambda r: {"a": r.normal(size=(3, 4))}, lambda p: ops.sum(p["a"], axis=0)),
    "logsumexp": (lambda r: {"a": r.normal(size=(3, 5))}, lambda p: ops.logsumexp(p["a"], axis=1)),
    "logmeanexp": (lambda r: {"a": r.normal(size=(6, 3))}, lambda p: ops.logmeanexp(p["a"], axis=0)),
    "take": (lambda r: {"a": r.normal(size=(3, 5))}, lambda p: ops.take(p["a"], [4, 0, 0, 2], axis=1)),
    "concat": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 1))},
               lambda p: ops.concat([p["a"], p["b"]], axis=1)),
    "reshape": (lambda r: {"a": r.normal(size=(2, 6))}, lambda p: ops.reshape(p["a"], (3, 4))),
    "transpose": (lambda r: {"a": r.normal(size=(2, 5))}, lambda p: ops.transpose(p["a"])),
    "logdet": (lambda r: {"a": _well_conditioned(r, 3)}, lambda p: ops.logdet(p["a"])),
    "inv": (lambda r: {"a": _well_conditioned(r, 3)}, lambda p: ops.inv(p["a"])),
}


def test_every_primitive_has_a_case():
    assert set(PRIMITIVES) == set(CASES)


def _check_case(fn, params, weights):
    def scalar(p, tape=None):
        out = fn(p)
        return ops.sum(ops.mul(out, weights))

    t = Tape()
    bound = {k: t.param(k, v) for k, v in params.items()}
    grads = gradient_of(t, scalar(bound))
    fd = finite_diff_gradient(lambda p: float(ops.value(scalar(p))), params, step=1e-5)
    for k in params:
        err = np.abs(grads[k] - fd[k])
        assert np.all(err <= 1e-4 * np.maximum(np.abs(fd[k]), 1.0)), (k, grads[k], fd[k])


@pytest.mark.parametrize("kind", sorted(CASES))
def test_primitive_gradient_vs_finite_differences(kind):
    make, fn = CASES[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(100):
        params = make(rng)
        weights = rng.normal(size=np.shape(ops.value(fn(params))))
        _check_case(fn, params, weights)


def test_var_operators_record_on_tape():
    t = Tape()
    a = t.param("a", np.array([[1.0, 2.0]]))
    loss = ops.sum((a * 3.0 - 1.0) @ np.ones((2, 2)) + 2.0)
    np.testing.assert_allclose(gradient_of(t, loss)["a"], [[6.0, 6.0]])
    kinds = [k for k, _, _ in t.records]
    assert kinds[:2] == ["mul", "sub"]
    assert all(k in PRIMITIVES for k in kinds)
