"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The jitted path is used whenever numba imports cleanly, unless the
environment variable ``OTDRO_NUMBA`` is set to ``0``, ``false`` or ``off``.
``BACKEND`` reports which path won. Both implementations stay importable
(``*_np`` / ``*_nb``) so the test suite can assert parity and the benchmark
in ``benchmarks/bench_kernels.py`` can time them against each other.

All kernels take a feature matrix ``X`` (n x d, float64), index vectors into
its rows, and a symmetric metric matrix ``L`` (d x d).
"""
from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "pair_sq_dists",
    "triplet_margins",
    "relative_loss_grad",
    "sum_pair_outers",
]


def _pair_sq_dists_np(X, I, J, L):
    D = X[I] - X[J]
    return np.einsum("md,de,me->m", D, L, D)


def _triplet_margins_np(X, I, J, K, L):
    Dij = X[I] - X[J]
    Dik = X[I] - X[K]
    sq_ij = np.einsum("md,de,me->m", Dij, L, Dij)
    sq_ik = np.einsum("md,de,me->m", Dik, L, Dik)
    return sq_ij - sq_ik + 1.0


def _relative_loss_grad_np(X, I, J, K, L):
    Dij = X[I] - X[J]
    Dik = X[I] - X[K]
    sq_ij = np.einsum("md,de,me->m", Dij, L, Dij)
    sq_ik = np.einsum("md,de,me->m", Dik, L, Dik)
    margins = sq_ij - sq_ik + 1.0
    act = margins > 0.0
    loss = float(margins[act].sum())
    A, B = Dij[act], Dik[act]
    G = A.T @ A - B.T @ B
    return loss, G


def _sum_pair_outers_np(X, I, J):
    D = X[I] - X[J]
    return D.T @ D


_USE_NUMBA = os.environ.get("OTDRO_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "off",
)
BACKEND = "numpy"

if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        njit = None
    if njit is not None:
        BACKEND = "numba"

        @njit(cache=True)
        def _pair_sq_dists_nb(X, I, J, L):
            m = I.shape[0]
            d = X.shape[1]
            out = np.empty(m)
            for t in range(m):
                i, j = I[t], J[t]
                acc = 0.0
                for p in range(d):
                    dp = X[i, p] - X[j, p]
                    row = 0.0
                    for q in range(d):
                        row += L[p, q] * (X[i, q] - X[j, q])
                    acc += dp * row
                out[t] = acc
            return out

        @njit(cache=True)
        def _triplet_margins_nb(X, I, J, K, L):
            m = I.shape[0]
            d = X.shape[1]
            out = np.empty(m)
            for t in range(m):
                i, j, k = I[t], J[t], K[t]
                sq_ij = 0.0
                sq_ik = 0.0
                for p in range(d):
                    rj = 0.0
                    rk = 0.0
                    for q in range(d):
                        rj += L[p, q] * (X[i, q] - X[j, q])
                        rk += L[p, q] * (X[i, q] - X[k, q])
                    sq_ij += (X[i, p] - X[j, p]) * rj
                    sq_ik += (X[i, p] - X[k, p]) * rk
                out[t] = sq_ij - sq_ik + 1.0
            return out

        @njit(cache=True)
        def _relative_loss_grad_nb(X, I, J, K, L):
            m = I.shape[0]
            d = X.shape[1]
            G = np.zeros((d, d))
            dij = np.empty(d)
            dik = np.empty(d)
            loss = 0.0
            for t in range(m):
                i, j, k = I[t], J[t], K[t]
                for p in range(d):
                    dij[p] = X[i, p] - X[j, p]
                    dik[p] = X[i, p] - X[k, p]
                sq_ij = 0.0
                sq_ik = 0.0
                for p in range(d):
                    rj = 0.0
                    rk = 0.0
                    for q in range(d):
                        rj += L[p, q] * dij[q]
                        rk += L[p, q] * dik[q]
                    sq_ij += dij[p] * rj
                    sq_ik += dik[p] * rk
                margin = sq_ij - sq_ik + 1.0
                if margin > 0.0:
                    loss += margin
                    for p in range(d):
                        for q in range(d):
                            G[p, q] += dij[p] * dij[q] - dik[p] * dik[q]
            return loss, G

        @njit(cache=True)
        def _sum_pair_outers_nb(X, I, J):
            m = I.shape[0]
            d = X.shape[1]
            G = np.zeros((d, d))
            for t in range(m):
                i, j = I[t], J[t]
                for p in range(d):
                    dp = X[i, p] - X[j, p]
                    for q in range(d):
                        G[p, q] += dp * (X[i, q] - X[j, q])
            return G


def _prep(X, L, *idx):
    X = np.ascontiguousarray(X, dtype=np.float64)
    L = np.ascontiguousarray(L, dtype=np.float64)
    idx = tuple(np.ascontiguousarray(a, dtype=np.int64) for a in idx)
    return (X, L) + idx


def pair_sq_dists(X, I, J, L):
    """Squared Mahalanobis distances (x_i - x_j)^T L (x_i - x_j) per pair."""
    X, L, I, J = _prep(X, L, I, J)
    if BACKEND == "numba":
        return _pair_sq_dists_nb(X, I, J, L)
    return _pair_sq_dists_np(X, I, J, L)


def triplet_margins(X, I, J, K, L):
    """Unclipped hinge margins d2(i,j) - d2(i,k) + 1 per triplet."""
    X, L, I, J, K = _prep(X, L, I, J, K)
    if BACKEND == "numba":
        return _triplet_margins_nb(X, I, J, K, L)
    return _triplet_margins_np(X, I, J, K, L)


def relative_loss_grad(X, I, J, K, L):
    """Hinge-loss sum and its subgradient over the triplets with margin > 0.

    Returns ``(loss, G)`` where G accumulates the outer-product difference
    (x_i-x_j)(x_i-x_j)^T - (x_i-x_k)(x_i-x_k)^T of each active triplet.
    """
    X, L, I, J, K = _prep(X, L, I, J, K)
    if BACKEND == "numba":
        return _relative_loss_grad_nb(X, I, J, K, L)
    return _relative_loss_grad_np(X, I, J, K, L)


def sum_pair_outers(X, I, J):
    """Sum of (x_i - x_j)(x_i - x_j)^T over the index pairs."""
    X, _, I, J = _prep(X, np.empty((0, 0)), I, J)
    if BACKEND == "numba":
        return _sum_pair_outers_nb(X, I, J)
    return _sum_pair_outers_np(X, I, J)
