"""Dense SPD kernels: Cholesky factorisation and solves, with tape support.

Both functions accept stacks of matrices (leading batch axes).
"""

from __future__ import annotations

import numpy as np

from . import tape as nx

Array = np.ndarray


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky hit a non-positive pivot."""

    def __init__(self, pivot: int, batch_index: tuple[int, ...] = ()):
        self.pivot = pivot
        self.batch_index = batch_index
        where = f" in matrix {batch_index}" if batch_index else ""
        super().__init__(f"non-positive pivot at index {pivot}{where}")


def _locate_bad_pivot(k: Array) -> tuple[int, tuple[int, ...]]:
    batch_shape = k.shape[:-2]
    for idx in np.ndindex(*batch_shape):
        a = np.array(k[idx], dtype=np.float64)
        n = a.shape[0]
        for j in range(n):
            d = a[j, j] - a[j, :j] @ a[j, :j]
            if not d > 0:
                return j, idx
            a[j, j] = np.sqrt(d)
            a[j + 1:, j] = (a[j + 1:, j] - a[j + 1:, :j] @ a[j, :j]) / a[j, j]
    return 0, ()


def _cholesky(k: Array) -> Array:
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        pivot, idx = _locate_bad_pivot(k)
        raise SingularMatrixError(pivot, idx) from None


def _phi(x: Array) -> Array:
    # lower triangle with halved diagonal
    out = np.tril(x)
    d = np.einsum("...ii->...i", out)
    d *= 0.5
    return out


def _tri_solve(l: Array, b: Array, *, transpose: bool = False) -> Array:
    # numpy has no batched triangular solve; the general solver is exact enough
    # at the sizes used here (N <= 64).
    return np.linalg.solve(np.swapaxes(l, -1, -2) if transpose else l, b)


def _cholesky_vjp(g, l, k):
    # symmetric adjoint: S = L^-T Phi(L^T G) L^-1, dK = (S + S^T) / 2
    p = _phi(np.swapaxes(l, -1, -2) @ g)
    s = _tri_solve(l, np.swapaxes(_tri_solve(l, p, transpose=True), -1, -2), transpose=True)
    return (0.5 * (s + np.swapaxes(s, -1, -2)),)


def cholesky_factor(k):
    """Lower-triangular ``L`` with ``L @ L.T == K``.

    No jitter is added here; callers decide on a jitter policy (see
    :func:`cholesky_with_jitter`).
    """
    return nx._primitive(_cholesky, _cholesky_vjp)(k)


def _solve_spd(k, b):
    l = _cholesky(k)
    return _tri_solve(l, _tri_solve(l, b), transpose=True)


def _solve_spd_vjp(g, x, k, b):
    gb = _solve_spd(k, g)
    return -gb @ np.swapaxes(x, -1, -2), gb


def solve_spd(k, b):
    """Solve ``K x = b`` for symmetric positive definite ``K``.

    ``b`` may be a vector (``K.shape[:-1]``) or a matrix of right-hand sides.
    The backward pass uses the adjoint identities ``db = K^-1 g`` and
    ``dK = -db x^T``.
    """
    vector = nx.value_of(b).ndim == nx.value_of(k).ndim - 1
    if vector:
        b = nx.expand_dims(b, -1)
    x = nx._primitive(_solve_spd, _solve_spd_vjp)(k, b)
    if vector:
        x = nx.reshape(x, nx.value_of(x).shape[:-1])
    return x


def diagonal_jitter(k: Array, attempt: int) -> float:
    """Jitter for retry ``attempt`` (1-based): ``1e-8 * mean(diag) * 2**(attempt-1)``."""
    d = np.einsum("...ii->...i", np.asarray(k))
    return 1e-8 * float(np.mean(d)) * 2.0 ** (attempt - 1)


def cholesky_with_jitter(k, max_doublings: int = 6):
    """Add diagonal jitter until ``k`` factorises.

    Returns ``(k_used, jitter)``; ``k_used`` is ``k`` itself when no jitter was
    needed.  Raises :class:`SingularMatrixError` once the jitter has been
    doubled ``max_doublings`` times without success.
    """
    kv = nx.value_of(k)
    try:
        _cholesky(kv)
        return k, 0.0
    except SingularMatrixError as err:
        last = err
    eye = np.eye(kv.shape[-1])
    for attempt in range(1, max_doublings + 2):
        j = diagonal_jitter(kv, attempt)
        try:
            _cholesky(kv + j * eye)
            return k + j * eye, j
        except SingularMatrixError as err:
            last = err
    raise last
