"""Similarity/dissimilarity pair sets, relative triplets, and the
alpha-level active subsets the robust learners maximize over.

Pairs and triplets are generated once from k nearest neighbors under plain
Euclidean distance on standardized features (no metric exists yet at that
point). Neighbor ties and selection ties always break by ascending index so
every construction is deterministic for a fixed input order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DataError, LabeledDataset

MUST_LINK = "M"
CANNOT_LINK = "N"

_BUDGET_EPS = 1e-9  # guards floor/ceil of alpha * count against fp noise


@dataclass(frozen=True)
class PairSet:
    """Index pairs into a dataset; kind is ``"M"`` (close) or ``"N"`` (far)."""

    pairs: np.ndarray
    kind: str

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.kind not in (MUST_LINK, CANNOT_LINK):
            raise DataError(f"unknown pair-set kind {self.kind!r}")
        if pairs.shape[0] and np.any(pairs[:, 0] == pairs[:, 1]):
            raise DataError("pair set contains a self pair")
        key = np.sort(pairs, axis=1)
        if pairs.shape[0] != len({(int(i), int(j)) for i, j in key}):
            raise DataError("pair set contains duplicate unordered pairs")
        pairs = pairs.copy()
        pairs.flags.writeable = False
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return self.pairs.shape[0]


@dataclass(frozen=True)
class TripletSet:
    """Index triples (i, j, k): j should sit closer to i than k does."""

    triplets: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        for a, b in ((0, 1), (0, 2), (1, 2)):
            if t.shape[0] and np.any(t[:, a] == t[:, b]):
                raise DataError("triplet set contains a repeated index")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "triplets", t)

    def __len__(self) -> int:
        return self.triplets.shape[0]


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise DataError(f"robust level alpha must lie in (0, 1], got {alpha}")
    return alpha


def budget_floor(x: float) -> int:
    return int(math.floor(x + _BUDGET_EPS))


def budget_ceil(x: float) -> int:
    return int(math.ceil(x - _BUDGET_EPS))


def _knn_indices(X: np.ndarray, k: int) -> np.ndarray:
    """Row i holds the k nearest neighbors of i (Euclidean), ties by index."""
    n = X.shape[0]
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")
    return order[:, :k]


def _check_knn_args(data: LabeledDataset, k: int):
    if data.n < 2:
        raise DataError("need at least two points to build constraints")
    if not 1 <= k < data.n:
        raise DataError(f"k must satisfy 1 <= k < n, got k={k}, n={data.n}")


def build_pair_sets(data: LabeledDataset, k: int) -> tuple[PairSet, PairSet]:
    """k-NN generation of the must-link set M (same label) and cannot-link
    set N (different label), deduplicated as unordered pairs."""
    _check_knn_args(data, k)
    nn = _knn_indices(data.X, k)
    m_pairs, n_pairs = [], []
    seen = set()
    for i in range(data.n):
        for j in nn[i]:
            j = int(j)
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            if data.y[i] == data.y[j]:
                m_pairs.append((i, j))
            else:
                n_pairs.append((i, j))
    return (
        PairSet(np.asarray(m_pairs, dtype=np.int64).reshape(-1, 2), MUST_LINK),
        PairSet(np.asarray(n_pairs, dtype=np.int64).reshape(-1, 2), CANNOT_LINK),
    )


def build_triplets(data: LabeledDataset, k: int) -> TripletSet:
    """Relative constraints (i, j, k'): j is a same-label k-NN of i and k' a
    different-label k-NN of i."""
    _check_knn_args(data, k)
    nn = _knn_indices(data.X, k)
    triplets = []
    for i in range(data.n):
        same = [int(j) for j in nn[i] if data.y[j] == data.y[i]]
        diff = [int(j) for j in nn[i] if data.y[j] != data.y[i]]
        for j in same:
            for kk in diff:
                triplets.append((i, j, kk))
    return TripletSet(np.asarray(triplets, dtype=np.int64).reshape(-1, 3))


def triplet_hinges(L: np.ndarray, R: TripletSet, data: LabeledDataset) -> np.ndarray:
    """Clipped hinge values (d2(i,j) - d2(i,k) + 1)+ for every triplet."""
    t = R.triplets
    margins = kernels.triplet_margins(data.X, t[:, 0], t[:, 1], t[:, 2], L)
    return np.maximum(margins, 0.0)


def pair_sq_dists(L: np.ndarray, P: PairSet, data: LabeledDataset) -> np.ndarray:
    p = P.pairs
    return kernels.pair_sq_dists(data.X, p[:, 0], p[:, 1], L)


def _top_positions(values: np.ndarray, count: int, largest: bool) -> np.ndarray:
    """Positions of the `count` largest (or smallest) values; ties break by
    ascending position. Returned sorted ascending."""
    key = -values if largest else values
    order = np.argsort(key, kind="stable")
    return np.sort(order[:count])


def select_top_relative(
    L: np.ndarray, R: TripletSet, data: LabeledDataset, alpha: float
) -> TripletSet:
    """The floor(alpha * |R|) triplets (at least one) with the largest hinge
    values at L; ties break by ascending triplet index."""
    alpha = check_alpha(alpha)
    if len(R) == 0:
        raise DataError("relative constraint set is empty")
    b = max(1, budget_floor(alpha * len(R)))
    hinges = triplet_hinges(L, R, data)
    pos = _top_positions(hinges, b, largest=True)
    return TripletSet(R.triplets[pos])


def select_pairs_absolute(
    L: np.ndarray,
    M: PairSet,
    N: PairSet,
    data: LabeledDataset,
    alpha: float,
) -> tuple[PairSet, PairSet]:
    """Active pair subsets at level alpha: the floor(alpha*|M|) largest
    distances within M (at least one) and the ceil(alpha*|N|) smallest
    within N."""
    alpha = check_alpha(alpha)
    if len(M) == 0 or len(N) == 0:
        raise DataError("pair constraint sets must be nonempty")
    b_m = max(1, budget_floor(alpha * len(M)))
    b_n = budget_ceil(alpha * len(N))
    pos_m = _top_positions(pair_sq_dists(L, M, data), b_m, largest=True)
    pos_n = _top_positions(pair_sq_dists(L, N, data), b_n, largest=False)
    return (
        PairSet(M.pairs[pos_m], MUST_LINK),
        PairSet(N.pairs[pos_n], CANNOT_LINK),
    )


def export_constraints(path, M: PairSet = None, N: PairSet = None, R: TripletSet = None):
    """Audit/replay CSV with columns i,j,k,kind (k empty for pairs)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "kind"])
        for ps in (M, N):
            if ps is None:
                continue
            for i, j in ps.pairs:
                w.writerow([int(i), int(j), "", ps.kind])
        if R is not None:
            for i, j, k in R.triplets:
                w.writerow([int(i), int(j), int(k), "R"])


def load_constraints(path) -> dict:
    """Reads an export back into {"M": PairSet, "N": PairSet, "R": TripletSet}."""
    rows = {"M": [], "N": [], "R": []}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"i", "j", "k", "kind"}:
            raise DataError(f"constraint file {path} has an unexpected header")
        for row in reader:
            kind = row["kind"]
            if kind not in rows:
                raise DataError(f"constraint file {path}: unknown kind {kind!r}")
            if kind == "R":
                rows[kind].append((int(row["i"]), int(row["j"]), int(row["k"])))
            else:
                rows[kind].append((int(row["i"]), int(row["j"])))
    return {
        "M": PairSet(np.asarray(rows["M"], dtype=np.int64).reshape(-1, 2), MUST_LINK),
        "N": PairSet(np.asarray(rows["N"], dtype=np.int64).reshape(-1, 2), CANNOT_LINK),
        "R": TripletSet(np.asarray(rows["R"], dtype=np.int64).reshape(-1, 3)),
    }
