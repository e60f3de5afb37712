"""Plain (non-differentiable) numerical kernels: stable log-sum-exp,
partial-pivot LU with log-determinant, and a central finite-difference
gradient used as a test oracle.
"""
from __future__ import annotations

from typing import Callable, Dict, Mapping, Tuple

import numpy as np

from ..errors import ArgumentError, NumericalError, SingularMatrixError

SINGULAR_RTOL = 1e-12


def logsumexp(v, axis=None, keepdims=False):
    """log(sum(exp(v))) evaluated with a max shift.

    With ``axis=None`` the whole array is reduced and a Python float is
    returned.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ArgumentError("logsumexp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None and not keepdims:
        return float(out.reshape(()))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def lu_factor(a) -> Tuple[np.ndarray, np.ndarray, int]:
    """Doolittle LU with partial (row) pivoting.

    Returns ``(lu, perm, n_swaps)`` where ``lu`` packs the unit-lower factor
    below the diagonal and the upper factor on and above it, and
    ``a[perm] == L @ U``.

    Raises SingularMatrixError when a pivot falls below 1e-12 times the
    largest row norm of ``a``.
    """
    lu = np.array(a, dtype=np.float64, copy=True)
    if lu.ndim != 2 or lu.shape[0] != lu.shape[1]:
        raise ArgumentError(f"LU needs a square matrix, got shape {lu.shape}")
    n = lu.shape[0]
    perm = np.arange(n)
    scale = np.max(np.linalg.norm(lu, axis=1)) if n else 0.0
    tol = SINGULAR_RTOL * scale
    swaps = 0
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= tol or scale == 0.0:
            raise SingularMatrixError(
                f"matrix is numerically singular (pivot {k}: |{lu[p, k]:.3e}| <= {tol:.3e})")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            swaps += 1
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm, swaps


def logdet_lu(a) -> Tuple[float, float]:
    """``(log|det a|, sign(det a))`` from the LU factorization."""
    lu, _, swaps = lu_factor(a)
    diag = np.diagonal(lu)
    sign = (-1.0) ** swaps * float(np.prod(np.sign(diag)))
    return float(np.sum(np.log(np.abs(diag)))), sign


def finite_diff_gradient(f: Callable[[Mapping[str, np.ndarray]], float],
                         params: Mapping[str, np.ndarray],
                         step: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences of a scalar function of named array parameters.

    ``f`` receives a dict of (perturbed copies of) the parameters.
    """
    if not step > 0:
        raise ArgumentError("finite-difference step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def _eval():
        val = float(f(work))
        if not np.isfinite(val):
            raise NumericalError("objective is non-finite at a finite-difference probe")
        return val

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _eval()
            flat[i] = orig - step
            lo = _eval()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
