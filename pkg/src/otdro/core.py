"""Numeric foundations: labeled datasets, standardization, Mahalanobis
quadratic forms, the label-preserving transport cost, and PSD projection.

All types are immutable after construction (arrays are marked read-only) and
every operation here is a pure function, so values can be shared freely
across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

PSD_EIG_TOL = 1e-9      # eigenvalues in [-PSD_EIG_TOL, 0] count as zero
SCALE_FLOOR = 1e-12     # population stds below this mark a constant column
METRIC_ASYM_TOL = 1e-9  # stored matrices more asymmetric than this are rejected


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class InfeasibleProblem(RuntimeError):
    """The optimization problem has no feasible point."""


class LabeledSample(NamedTuple):
    x: np.ndarray
    y: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus labels in {-1, +1}; rows carry uniform weight."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).ravel()
        if X.shape[0] == 0:
            raise DataError("dataset is empty")
        if X.shape[0] != y.shape[0]:
            raise DataError(
                f"feature rows ({X.shape[0]}) and labels ({y.shape[0]}) disagree"
            )
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite entries")
        if not np.all(np.isin(y, (-1, 1))):
            raise DataError("labels must be -1 or +1")
        X = X.copy()
        y = y.copy()
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.X[i], int(self.y[i]))

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class Standardizer:
    """Affine per-column map fitted by :func:`standardize`; replayable on new data."""

    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        means = _readonly(np.asarray(self.means, dtype=np.float64).ravel())
        scales = _readonly(np.asarray(self.scales, dtype=np.float64).ravel())
        if np.any(scales <= 0):
            raise DataError("standardizer scales must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)

    def apply_features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.means.shape[0]:
            raise DataError("dimension mismatch in standardizer replay")
        return (X - self.means) / self.scales

    def apply(self, data: LabeledDataset) -> LabeledDataset:
        return LabeledDataset(self.apply_features(data.X), data.y)


def standardize(data: LabeledDataset) -> tuple[LabeledDataset, Standardizer]:
    """Center each predictor column and scale it to unit population std.

    Constant columns (population std below ``SCALE_FLOOR``) are centered but
    left unscaled.
    """
    means = data.X.mean(axis=0)
    stds = data.X.std(axis=0)
    scales = np.where(stds < SCALE_FLOOR, 1.0, stds)
    scaler = Standardizer(means, scales)
    return scaler.apply(data), scaler


def symmetrize(A: np.ndarray) -> np.ndarray:
    """Exactly symmetric part (A + A^T) / 2."""
    A = np.asarray(A, dtype=np.float64)
    return (A + A.T) / 2.0


def _check_dims(L: np.ndarray, diff: np.ndarray):
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DataError("metric matrix must be square")
    if diff.shape[0] != L.shape[0]:
        raise DataError(
            f"vector dimension {diff.shape[0]} does not match metric dimension {L.shape[0]}"
        )


def mahalanobis_sq(L: np.ndarray, x, x2) -> float:
    """(x - x2)^T L (x - x2), clamped at zero against eigensolver noise."""
    diff = np.asarray(x, dtype=np.float64).ravel() - np.asarray(
        x2, dtype=np.float64
    ).ravel()
    L = np.asarray(L, dtype=np.float64)
    _check_dims(L, diff)
    val = float(diff @ L @ diff)
    return val if val > 0.0 else 0.0


def cost_c_lambda(L: np.ndarray, u: LabeledSample, v: LabeledSample) -> float:
    """Transport cost: squared Mahalanobis distance when the labels agree,
    +inf otherwise (the response may never be perturbed)."""
    if u.y != v.y:
        return math.inf
    return mahalanobis_sq(L, u.x, v.x)


def project_psd(S: np.ndarray) -> np.ndarray:
    """Frobenius-nearest positive semidefinite matrix.

    Eigendecomposes the symmetric part, clips negative eigenvalues at zero
    and reassembles. Idempotent; an already-PSD input is returned unchanged.
    """
    S = symmetrize(S)
    if not np.all(np.isfinite(S)):
        raise DataError("cannot project a matrix with non-finite entries")
    w, V = np.linalg.eigh(S)
    if w.size == 0 or w[0] >= 0.0:
        return S
    w = np.maximum(w, 0.0)
    return symmetrize((V * w) @ V.T)


def min_eigenvalue(L: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(L))[0])


def is_psd(L: np.ndarray, tol: float = PSD_EIG_TOL) -> bool:
    return min_eigenvalue(L) >= -tol


def save_metric_file(path, L: np.ndarray) -> None:
    """Plain-text metric matrix: first line d, then d rows of d entries
    printed with 17 significant digits for exact round-trips."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DataError("metric matrix must be square")
    d = L.shape[0]
    lines = [str(d)]
    for row in L:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_metric_file(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    if not tokens:
        raise DataError(f"metric file {path} is empty")
    try:
        d = int(tokens[0])
        vals = [float(t) for t in tokens[1:]]
    except ValueError as exc:
        raise DataError(f"metric file {path} is not numeric: {exc}") from None
    if d <= 0 or len(vals) != d * d:
        raise DataError(
            f"metric file {path} declares d={d} but carries {len(vals)} entries"
        )
    A = np.asarray(vals, dtype=np.float64).reshape(d, d)
    if not np.all(np.isfinite(A)):
        raise DataError(f"metric file {path} contains non-finite entries")
    if np.max(np.abs(A - A.T)) > METRIC_ASYM_TOL:
        raise DataError(f"metric file {path} is asymmetric beyond {METRIC_ASYM_TOL}")
    return symmetrize(A)
