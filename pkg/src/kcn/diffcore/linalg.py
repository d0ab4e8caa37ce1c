"""Cholesky factorization and triangular solves with reverse-mode rules."""
from __future__ import annotations

import numpy as np
from scipy.linalg import lapack, solve_triangular as _solve_tri

from .tensor import ShapeError, Tensor, as_tensor, make_result


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed; ``minor`` is the 1-based order of the first non-positive leading minor."""

    def __init__(self, minor: int, jitter: float = 0.0):
        self.minor = minor
        self.jitter = jitter
        extra = f" (after jitter {jitter:g})" if jitter else ""
        super().__init__(f"cholesky: matrix is not positive definite; leading minor {minor} "
                         f"is not positive{extra}")


def _potrf(a: np.ndarray) -> np.ndarray:
    potrf = lapack.spotrf if a.dtype == np.float32 else lapack.dpotrf
    factor, info = potrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise ValueError(f"cholesky: invalid argument {-info} passed to LAPACK")
    return factor


def _phi(x: np.ndarray) -> np.ndarray:
    """Lower triangle with the diagonal halved."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == a``.

    Only the lower triangle of ``a`` is read.  The gradient is returned in
    symmetrized form, so it is exact for symmetric perturbations of ``a``.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky: expected a square matrix, got {a.shape}")
    L = _potrf(a.data)

    def _bw(g):
        P = _phi(L.T @ g)
        tmp = _solve_tri(L, P.T, lower=True, trans="T").T  # P @ inv(L)
        ga = _solve_tri(L, tmp, lower=True, trans="T")       # inv(L).T @ P @ inv(L)
        return (0.5 * (ga + ga.T),)
    return make_result(L, (a,), _bw, "cholesky")


def solve_triangular(a, b, lower: bool = True, trans: bool = False) -> Tensor:
    """Solve ``op(a) @ x = b`` for triangular ``a``; ``op`` is transpose when ``trans``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"solve_triangular: expected a square matrix, got {a.shape}")
    if b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve_triangular: right-hand side {b.shape} does not match {a.shape}")
    if np.any(np.diag(a.data) == 0):
        raise np.linalg.LinAlgError("solve_triangular: singular triangular matrix")
    x = _solve_tri(a.data, b.data, lower=lower, trans="T" if trans else "N")
    mask = np.tril if lower else np.triu

    def _bw(g):
        gb = _solve_tri(a.data, g, lower=lower, trans="N" if trans else "T")
        ga = None
        if a.requires_grad:
            outer = np.outer(gb, x) if x.ndim == 1 else gb @ x.T
            ga = mask(-(outer.T if trans else outer))
        return ga, gb
    return make_result(x, (a, b), _bw, "solve_triangular")


def jittered_cholesky(a, start: float = 1e-6, limit: float = 1e-2):
    """Cholesky of ``a + jitter * I``, doubling jitter from ``start`` until it succeeds.

    Returns ``(L, jitter)``.  Raises :class:`NotPositiveDefiniteError` once the
    jitter would exceed ``limit``.
    """
    a = as_tensor(a)
    eye = np.eye(a.shape[0], dtype=a.dtype)
    jitter = start
    while True:
        try:
            return cholesky(a + Tensor(jitter * eye)), jitter
        except NotPositiveDefiniteError as exc:
            if jitter * 2 > limit:
                raise NotPositiveDefiniteError(exc.minor, jitter) from None
            jitter *= 2
