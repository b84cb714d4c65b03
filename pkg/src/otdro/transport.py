"""Exact discrete optimal transport used as a verification oracle.

Two solvers live here:

* :func:`ot_discrepancy` computes the Kantorovich coupling between two finite
  distributions with a self-contained transportation simplex (phase 1 finds a
  feasible flow with Edmonds-Karp augmentation, phase 2 runs tree-basis
  pivots). Cells with infinite cost are excluded from the variable set
  outright, never replaced by a large finite surrogate.
* :func:`worst_case_expectation` maximizes an expectation over all
  distributions within a transport budget of a base distribution, restricted
  to a finite candidate support. In coupling variables this is an LP with one
  budget row; it is solved exactly by walking the per-point concave
  cost/payoff frontiers in decreasing bang-for-buck order (the standard
  fractional-knapsack argument; complementary slackness gives optimality).

Both are meant for desk-scale instances: couplings are capped at 10^4 cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import DataError, InfeasibleProblem, mahalanobis_sq

MASS_TOL = 1e-9
MARGINAL_TOL = 1e-8
MAX_COUPLING_CELLS = 10_000

# cost_fn signature: (x_u, y_u, x_v, y_v) -> float, labels None when absent


def euclidean_cost(xu, yu, xv, yv) -> float:
    return float(np.linalg.norm(np.asarray(xu, float) - np.asarray(xv, float)))


def sqeuclidean_cost(xu, yu, xv, yv) -> float:
    d = np.asarray(xu, float) - np.asarray(xv, float)
    return float(d @ d)


def metric_cost(L: np.ndarray) -> Callable:
    """Squared Mahalanobis ground cost under the metric matrix L."""

    def cost(xu, yu, xv, yv) -> float:
        return mahalanobis_sq(L, xu, xv)

    return cost


def label_preserving(ground_cost: Callable) -> Callable:
    """Wraps a ground cost with the label rule: +inf when labels differ."""

    def cost(xu, yu, xv, yv) -> float:
        if yu != yv:
            return math.inf
        return ground_cost(xu, yu, xv, yv)

    return cost


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finitely supported distribution; ``y`` is None for unlabeled points."""

    X: np.ndarray
    mass: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        mass = np.asarray(self.mass, dtype=np.float64).ravel()
        if X.shape[0] != mass.shape[0]:
            raise DataError("support size and mass vector disagree")
        if X.shape[0] == 0:
            raise DataError("distribution has empty support")
        if np.any(mass < 0):
            raise DataError("masses must be nonnegative")
        if abs(mass.sum() - 1.0) > MASS_TOL:
            raise DataError(f"masses sum to {mass.sum()}, not 1")
        y = self.y
        if y is not None:
            y = np.asarray(y, dtype=np.int64).ravel()
            if y.shape[0] != X.shape[0]:
                raise DataError("label vector length mismatch")
        keys = set()
        for i in range(X.shape[0]):
            key = (X[i].tobytes(), None if y is None else int(y[i]))
            if key in keys:
                raise DataError("support points must be distinct")
            keys.add(key)
        X = X.copy()
        X.flags.writeable = False
        mass = mass.copy()
        mass.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "mass", mass)
        if y is not None:
            y = y.copy()
            y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_samples(cls, X, y=None) -> "DiscreteDistribution":
        """Empirical (uniform) distribution; duplicate points merge mass."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = X.shape[0]
        y = None if y is None else np.asarray(y, dtype=np.int64).ravel()
        agg: dict = {}
        order = []
        for i in range(n):
            key = (X[i].tobytes(), None if y is None else int(y[i]))
            if key not in agg:
                agg[key] = [i, 0.0]
                order.append(key)
            agg[key][1] += 1.0 / n
        idx = [agg[k][0] for k in order]
        mass = np.array([agg[k][1] for k in order])
        return cls(X[idx], mass, None if y is None else y[idx])


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling: ``entries[i, j]`` is mass moved from P point i to
    Q point j; ``value`` is the attained expected cost."""

    entries: np.ndarray
    value: float

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64).copy()
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    def row_marginals(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def col_marginals(self) -> np.ndarray:
        return self.entries.sum(axis=0)


def _cost_matrix(P: DiscreteDistribution, Q: DiscreteDistribution, cost_fn) -> np.ndarray:
    C = np.empty((P.size, Q.size))
    for i in range(P.size):
        yu = None if P.y is None else int(P.y[i])
        for j in range(Q.size):
            yv = None if Q.y is None else int(Q.y[j])
            c = float(cost_fn(P.X[i], yu, Q.X[j], yv))
            if math.isnan(c) or c < 0:
                raise DataError(f"cost must be nonnegative, got {c}")
            C[i, j] = c
    return C


def _feasible_flow(a: np.ndarray, b: np.ndarray, finite: np.ndarray) -> np.ndarray:
    """Max-flow feasible coupling on the allowed cells (Edmonds-Karp)."""
    n, m = finite.shape
    f = np.zeros((n, m))
    rem_a = a.copy()
    rem_b = b.copy()
    tol = 1e-13
    while True:
        sources = np.flatnonzero(rem_a > tol)
        if sources.size == 0:
            break
        # BFS over the residual bipartite graph
        row_par = {int(i): (None, None) for i in sources}
        col_par: dict = {}
        frontier_rows = list(row_par)
        target = None
        while frontier_rows and target is None:
            next_rows = []
            for i in frontier_rows:
                for j in np.flatnonzero(finite[i]):
                    j = int(j)
                    if j in col_par:
                        continue
                    col_par[j] = i
                    if rem_b[j] > tol:
                        target = j
                        break
                if target is not None:
                    break
            if target is not None:
                break
            for j in list(col_par):
                for i in np.flatnonzero(f[:, j] > tol):
                    i = int(i)
                    if i not in row_par:
                        row_par[i] = (j, None)
                        next_rows.append(i)
            frontier_rows = next_rows
        if target is None:
            break
        # backtrack: alternating path target <- row <- col <- row ... <- source
        path = []  # (i, j, direction) with +1 forward, -1 backward
        j = target
        while True:
            i = col_par[j]
            path.append((i, j, 1))
            prev_col = row_par[i][0]
            if prev_col is None:
                source = i
                break
            path.append((i, prev_col, -1))
            j = prev_col
        theta = min(rem_a[source], rem_b[target])
        for i, j, sgn in path:
            if sgn < 0:
                theta = min(theta, f[i, j])
        if theta <= tol:
            # numerically empty augmentation: treat the path as exhausted
            break
        for i, j, sgn in path:
            f[i, j] += sgn * theta
        rem_a[source] -= theta
        rem_b[target] -= theta
    if rem_a.sum() > MASS_TOL:
        raise InfeasibleProblem(
            "no finite-cost coupling matches the marginals "
            f"(unrouted mass {rem_a.sum():.3g})"
        )
    return f


def _components(finite: np.ndarray) -> list[tuple[list[int], list[int]]]:
    """Connected components of the bipartite allowed-cell graph."""
    n, m = finite.shape
    row_seen = [False] * n
    col_seen = [False] * m
    comps = []
    for start in range(n):
        if row_seen[start]:
            continue
        rows, cols = [], []
        stack = [("r", start)]
        row_seen[start] = True
        while stack:
            side, node = stack.pop()
            if side == "r":
                rows.append(node)
                for j in np.flatnonzero(finite[node]):
                    j = int(j)
                    if not col_seen[j]:
                        col_seen[j] = True
                        stack.append(("c", j))
            else:
                cols.append(node)
                for i in np.flatnonzero(finite[:, node]):
                    i = int(i)
                    if not row_seen[i]:
                        row_seen[i] = True
                        stack.append(("r", i))
        comps.append((sorted(rows), sorted(cols)))
    return comps


class _UnionFind:
    def __init__(self, n):
        self.par = list(range(n))

    def find(self, x):
        while self.par[x] != x:
            self.par[x] = self.par[self.par[x]]
            x = self.par[x]
        return x

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return False
        self.par[rx] = ry
        return True


def _find_cycle(adj: dict):
    """A cycle (as a node list) in an undirected graph, or None.

    Depth-first search keeping the active path explicit: in an undirected
    DFS every edge to an already-visited vertex other than the parent leads
    to an ancestor on the current path, which closes a cycle.
    """
    seen = set()
    for root in sorted(adj):
        if root in seen:
            continue
        seen.add(root)
        path = [root]
        parents = [None]
        iters = [iter(sorted(adj[root]))]
        on_path = {root}
        while path:
            try:
                nb = next(iters[-1])
            except StopIteration:
                on_path.discard(path.pop())
                parents.pop()
                iters.pop()
                continue
            if nb == parents[-1]:
                continue
            if nb in on_path:
                return path[path.index(nb):]
            if nb not in seen:
                seen.add(nb)
                parents.append(path[-1])
                path.append(nb)
                on_path.add(nb)
                iters.append(iter(sorted(adj[nb])))
    return None


def _cancel_cycles(flow: dict):
    """Reduce a feasible flow's support to a forest by pushing flow around
    undirected cycles until one arc on each cycle hits zero."""
    while True:
        adj: dict = {}
        for (i, j) in flow:
            adj.setdefault(("r", i), []).append(("c", j))
            adj.setdefault(("c", j), []).append(("r", i))
        cycle = _find_cycle(adj)
        if cycle is None:
            return
        # cycle nodes alternate row/col; cells sit between consecutive nodes
        cells = []
        for t in range(len(cycle)):
            a, b = cycle[t], cycle[(t + 1) % len(cycle)]
            cell = (a[1], b[1]) if a[0] == "r" else (b[1], a[1])
            cells.append(cell)
        signs = [1 if t % 2 == 0 else -1 for t in range(len(cells))]
        theta = min(flow[c] for c, s in zip(cells, signs) if s < 0)
        for c, s in zip(cells, signs):
            flow[c] += s * theta
        for c, s in zip(cells, signs):
            if s < 0 and c in flow and flow[c] <= 1e-15:
                del flow[c]


def _tree_path(adj: dict, start, goal):
    """Node path start..goal in a tree given adjacency {node: [(nb, cell)]}."""
    parent = {start: (None, None)}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nb, cell in adj[node]:
            if nb not in parent:
                parent[nb] = (node, cell)
                stack.append(nb)
    path_nodes = [goal]
    path_cells = []
    cur = goal
    while parent[cur][0] is not None:
        path_cells.append(parent[cur][1])
        cur = parent[cur][0]
        path_nodes.append(cur)
    return path_nodes[::-1], path_cells[::-1]


def _simplex_component(rows, cols, C, finite, flow: dict):
    """Transportation-simplex pivots on one connected component.

    ``flow`` maps (i, j) -> mass on a forest support; it is completed to a
    spanning-tree basis and pivoted until no allowed cell prices negative.
    """
    nodes = [("r", i) for i in rows] + [("c", j) for j in cols]
    index = {node: t for t, node in enumerate(nodes)}
    uf = _UnionFind(len(nodes))
    basis = set(flow)
    for (i, j) in flow:
        uf.union(index[("r", i)], index[("c", j)])
    # complete the basis with zero-flow cells, cheapest first (deterministic)
    cand = sorted(
        ((C[i, j], i, j) for i in rows for j in cols if finite[i, j] and (i, j) not in basis)
    )
    for _, i, j in cand:
        if len(basis) == len(nodes) - 1:
            break
        if uf.union(index[("r", i)], index[("c", j)]):
            basis.add((i, j))
    if len(basis) != len(nodes) - 1:
        raise RuntimeError("failed to build a spanning-tree basis")

    finite_cost_max = max((abs(C[i, j]) for i in rows for j in cols if finite[i, j]), default=0.0)
    tol = 1e-10 * (1.0 + finite_cost_max)
    max_pivots = 50 * len(rows) * len(cols) + 1000
    bland_after = 5 * len(rows) * len(cols) + 200

    for pivot in range(max_pivots + 1):
        # potentials from the tree
        adj: dict = {node: [] for node in nodes}
        for (i, j) in basis:
            adj[("r", i)].append((("c", j), (i, j)))
            adj[("c", j)].append((("r", i), (i, j)))
        pot = {nodes[0]: 0.0}
        stack = [nodes[0]]
        while stack:
            node = stack.pop()
            for nb, (i, j) in adj[node]:
                if nb not in pot:
                    pot[nb] = C[i, j] - pot[node]
                    stack.append(nb)
        # price the allowed cells (potentials satisfy u_i + v_j = C on basis)
        entering = None
        best = -tol
        for i in rows:
            ui = pot[("r", i)]
            for j in cols:
                if not finite[i, j] or (i, j) in basis:
                    continue
                rc = C[i, j] - ui - pot[("c", j)]
                if pivot > bland_after:
                    if rc < -tol:
                        entering = (i, j)
                        break
                elif rc < best:
                    best = rc
                    entering = (i, j)
            if pivot > bland_after and entering is not None:
                break
        if entering is None:
            break
        if pivot == max_pivots:
            raise RuntimeError("transportation simplex failed to terminate")
        ei, ej = entering
        _, path_cells = _tree_path(adj, ("r", ei), ("c", ej))
        cycle = [(entering, 1)]
        sgn = -1
        for cell in path_cells:
            cycle.append((cell, sgn))
            sgn = -sgn
        theta = min(flow.get(c, 0.0) for c, s in cycle if s < 0)
        leaving = min(c for c, s in cycle if s < 0 and flow.get(c, 0.0) <= theta + 1e-15)
        for c, s in cycle:
            if s > 0:
                flow[c] = flow.get(c, 0.0) + theta
            else:
                flow[c] = flow.get(c, 0.0) - theta
        basis.discard(leaving)
        basis.add(entering)
        flow.pop(leaving, None)
        for c in [c for c in list(flow) if flow[c] <= 1e-15 and c not in basis]:
            del flow[c]
    return flow


def ot_discrepancy(
    P: DiscreteDistribution, Q: DiscreteDistribution, cost_fn
) -> TransportPlan:
    """Optimal transport discrepancy between P and Q: the minimal expected
    cost over couplings with the given marginals, solved exactly."""
    if P.size * Q.size > MAX_COUPLING_CELLS:
        raise DataError(
            f"coupling has {P.size * Q.size} cells; this oracle caps at {MAX_COUPLING_CELLS}"
        )
    C = _cost_matrix(P, Q, cost_fn)
    finite = np.isfinite(C)
    if not finite.any():
        raise InfeasibleProblem("every coupling cell has infinite cost")
    f0 = _feasible_flow(P.mass, Q.mass, finite)
    flow = {
        (int(i), int(j)): float(f0[i, j])
        for i, j in zip(*np.nonzero(f0 > 1e-15))
    }
    _cancel_cycles(flow, P.size)
    for rows, cols in _components(finite):
        comp_flow = {
            (i, j): v for (i, j), v in flow.items() if i in set(rows)
        }
        if len(rows) + len(cols) < 2:
            continue
        solved = _simplex_component(rows, cols, C, finite, dict(comp_flow))
        for cell in comp_flow:
            flow.pop(cell, None)
        flow.update({c: v for c, v in solved.items() if v > 0.0})
    entries = np.zeros((P.size, Q.size))
    value = 0.0
    for (i, j), v in sorted(flow.items()):
        entries[i, j] = v
        value += v * C[i, j]
    plan = TransportPlan(entries, float(value))
    if (
        np.max(np.abs(plan.row_marginals() - P.mass)) > MARGINAL_TOL
        or np.max(np.abs(plan.col_marginals() - Q.mass)) > MARGINAL_TOL
    ):
        raise RuntimeError("transport plan violates its marginals")
    return plan


@dataclass(frozen=True)
class WorstCaseProblem:
    """Maximize E_P[loss] over distributions P supported on the candidates
    with transport discrepancy at most ``delta`` from ``base``."""

    base: DiscreteDistribution
    cand_X: np.ndarray
    cand_y: Optional[np.ndarray]
    loss_at: np.ndarray
    delta: float
    cost_fn: Callable = sqeuclidean_cost

    def __post_init__(self):
        cand_X = np.atleast_2d(np.asarray(self.cand_X, dtype=np.float64))
        loss = np.asarray(self.loss_at, dtype=np.float64).ravel()
        if cand_X.shape[0] != loss.shape[0]:
            raise DataError("candidate count and loss vector disagree")
        if self.delta < 0:
            raise DataError("delta must be nonnegative")
        cand_y = self.cand_y
        if cand_y is not None:
            cand_y = np.asarray(cand_y, dtype=np.int64).ravel()
            if cand_y.shape[0] != cand_X.shape[0]:
                raise DataError("candidate label length mismatch")
        cand_keys = {
            (cand_X[k].tobytes(), None if cand_y is None else int(cand_y[k]))
            for k in range(cand_X.shape[0])
        }
        for i in range(self.base.size):
            key = (
                self.base.X[i].tobytes(),
                None if self.base.y is None else int(self.base.y[i]),
            )
            if key not in cand_keys:
                raise DataError("candidates must include the base support")
        object.__setattr__(self, "cand_X", cand_X)
        object.__setattr__(self, "cand_y", cand_y)
        object.__setattr__(self, "loss_at", loss)


def grid_candidates(
    base: DiscreteDistribution, radius: float, steps: int
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Axis-aligned grid of the given radius around every base point, with
    ``steps`` intervals per axis; base points are always included. Only
    d <= 2 is supported (this is a desk-scale verification device)."""
    d = base.X.shape[1]
    if d > 2:
        raise DataError("candidate grids are limited to d <= 2")
    offs = np.linspace(-radius, radius, steps + 1)
    if d == 1:
        deltas = offs[:, None]
    else:
        g1, g2 = np.meshgrid(offs, offs, indexing="ij")
        deltas = np.column_stack([g1.ravel(), g2.ravel()])
    chunks_X, chunks_y = [], []
    for i in range(base.size):
        pts = base.X[i][None, :] + deltas
        chunks_X.append(np.vstack([base.X[i][None, :], pts]))
        if base.y is not None:
            chunks_y.append(np.full(pts.shape[0] + 1, base.y[i], dtype=np.int64))
    cand_X = np.vstack(chunks_X)
    cand_y = np.concatenate(chunks_y) if base.y is not None else None
    return cand_X, cand_y


def worst_case_expectation(
    prob: WorstCaseProblem,
) -> tuple[float, DiscreteDistribution]:
    """Exact optimum of the restricted worst-case LP.

    Each base point contributes a concave frontier of (move cost, loss)
    options; spending the budget on frontier segments in decreasing
    loss-gain-per-cost order is LP-optimal, with at most one fractional
    split when the budget runs out mid-segment.
    """
    base = prob.base
    n_cand = prob.cand_X.shape[0]
    hulls = []
    for i in range(base.size):
        yu = None if base.y is None else int(base.y[i])
        opts = []
        for k in range(n_cand):
            yv = None if prob.cand_y is None else int(prob.cand_y[k])
            c = float(prob.cost_fn(base.X[i], yu, prob.cand_X[k], yv))
            if math.isinf(c):
                continue
            if math.isnan(c) or c < 0:
                raise DataError(f"cost must be nonnegative, got {c}")
            opts.append((c, float(prob.loss_at[k]), k))
        opts.sort(key=lambda t: (t[0], -t[1]))
        pts = []
        best = -math.inf
        for c, l, k in opts:
            if l > best:
                pts.append((c, l, k))
                best = l
        if not pts or pts[0][0] > 1e-12:
            raise DataError("each base point needs a zero-cost candidate")
        hull = []
        for p in pts:
            while len(hull) >= 2:
                c1, l1, _ = hull[-2]
                c2, l2, _ = hull[-1]
                if (l2 - l1) * (p[0] - c2) <= (p[1] - l2) * (c2 - c1):
                    hull.pop()
                else:
                    break
            hull.append(p)
        hulls.append(hull)

    items = []
    for i, hull in enumerate(hulls):
        for s in range(len(hull) - 1):
            dc = hull[s + 1][0] - hull[s][0]
            dl = hull[s + 1][1] - hull[s][1]
            items.append((dl / dc, i, s, dc, dl))
    items.sort(key=lambda t: (-t[0], t[1], t[2]))

    pos = [0] * base.size
    frac = [0.0] * base.size
    value = float(sum(base.mass[i] * hulls[i][0][1] for i in range(base.size)))
    budget = float(prob.delta)
    for rate, i, s, dc, dl in items:
        full = base.mass[i] * dc
        if budget >= full * (1.0 - 1e-15):
            value += base.mass[i] * dl
            budget -= full
            pos[i] = s + 1
            frac[i] = 0.0
        else:
            f = budget / full if full > 0 else 0.0
            value += f * base.mass[i] * dl
            pos[i] = s
            frac[i] = f
            budget = 0.0
            break

    cand_mass = np.zeros(n_cand)
    for i in range(base.size):
        at = hulls[i][pos[i]][2]
        if frac[i] > 0.0:
            nxt = hulls[i][pos[i] + 1][2]
            cand_mass[at] += base.mass[i] * (1.0 - frac[i])
            cand_mass[nxt] += base.mass[i] * frac[i]
        else:
            cand_mass[at] += base.mass[i]

    # aggregate exact-duplicate candidate points into one support atom
    agg: dict = {}
    order = []
    for k in np.flatnonzero(cand_mass > 0.0):
        k = int(k)
        key = (
            prob.cand_X[k].tobytes(),
            None if prob.cand_y is None else int(prob.cand_y[k]),
        )
        if key not in agg:
            agg[key] = [k, 0.0]
            order.append(key)
        agg[key][1] += cand_mass[k]
    idx = [agg[k][0] for k in order]
    mass = np.array([agg[k][1] for k in order])
    worst = DiscreteDistribution(
        prob.cand_X[idx],
        mass / mass.sum(),
        None if prob.cand_y is None else prob.cand_y[idx],
    )
    return value, worst
