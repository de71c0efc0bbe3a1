"""Dependent multivariate DTW, distance matrices and DTW barycenter averaging.

The local cost between two time points is the squared difference summed
over the selected dimensions, and the reported distance is the raw
cumulative cost ``D(T, T)`` without a warping window.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Panel, Trajectory
from .errors import DomainError

DIMS = {
    "joint": (0, 1),
    "action": (0,),
    "state": (1,),
    "action_only": (0,),
    "state_only": (1,),
}


def resolve_dims(dims) -> tuple[int, ...]:
    if isinstance(dims, str):
        try:
            return DIMS[dims]
        except KeyError:
            raise DomainError(f"unknown dims {dims!r}; expected one of {sorted(DIMS)}") from None
    return tuple(int(d) for d in dims)


def _as_array(x, dims) -> np.ndarray:
    if isinstance(x, Trajectory):
        return x.series(resolve_dims(dims))
    arr = np.asarray(x, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def local_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared-difference cost grid between every pair of time points."""
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)


def batch_cumulative_cost(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Cumulative cost grids for many pairs at once.

    ``X`` and ``Y`` have shape ``(P, T, d)``; the result has shape
    ``(P, T, T)``. The recurrence runs cell by cell but every cell is
    vectorized over the ``P`` pairs.
    """
    C = ((X[:, :, None, :] - Y[:, None, :, :]) ** 2).sum(axis=-1)
    P, n, m = C.shape
    D = np.empty_like(C)
    D[:, 0, 0] = C[:, 0, 0]
    for j in range(1, m):
        D[:, 0, j] = C[:, 0, j] + D[:, 0, j - 1]
    for i in range(1, n):
        D[:, i, 0] = C[:, i, 0] + D[:, i - 1, 0]
        for j in range(1, m):
            best = np.minimum(np.minimum(D[:, i - 1, j - 1], D[:, i - 1, j]), D[:, i, j - 1])
            D[:, i, j] = C[:, i, j] + best
    return D


def cost_matrix(x, y, dims="joint") -> np.ndarray:
    xs, ys = _as_array(x, dims), _as_array(y, dims)
    return batch_cumulative_cost(xs[None], ys[None])[0]


def _check_lengths(xs: np.ndarray, ys: np.ndarray) -> None:
    if xs.shape[0] != ys.shape[0]:
        raise DomainError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.shape[0] < 1:
        raise DomainError("series must have at least one point")
    if xs.shape[1] != ys.shape[1]:
        raise DomainError("dimension mismatch")


def dtw_distance(x, y, dims="joint") -> float:
    xs, ys = _as_array(x, dims), _as_array(y, dims)
    _check_lengths(xs, ys)
    return float(batch_cumulative_cost(xs[None], ys[None])[0, -1, -1])


def euclidean_distance(x, y, dims="joint") -> float:
    """Sum over rounds of squared per-round differences (no warping)."""
    xs, ys = _as_array(x, dims), _as_array(y, dims)
    _check_lengths(xs, ys)
    return float(_diagonal_cost(xs[None] - ys[None])[0])


def _diagonal_cost(diff: np.ndarray) -> np.ndarray:
    """Round-by-round running sum of squared differences, shape ``(P,)``.

    Accumulates in the same order as the DTW recurrence does along its
    diagonal, so the Euclidean cost (the diagonal warping path) can never
    undercut the DTW minimum through round-off.
    """
    return np.cumsum((diff**2).sum(axis=-1), axis=1)[:, -1]


def warping_path(D: np.ndarray) -> list[tuple[int, int]]:
    """Backtrack the optimal alignment through a cumulative cost grid.

    Ties prefer the diagonal step, then the vertical one.
    """
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            steps = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
            i, j = min(steps, key=lambda ij: D[ij])
        path.append((i, j))
    path.reverse()
    return path


# ---------------------------------------------------------------------------
# distance matrices


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    uids: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DomainError("distance matrix must be square")
        if not np.allclose(v, v.T, atol=1e-12, rtol=0):
            raise DomainError("distance matrix must be symmetric")
        if np.any(np.diag(v) != 0) or np.any(v < 0):
            raise DomainError("distance matrix needs a zero diagonal and nonnegative entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        uids = tuple(self.uids) if self.uids else tuple(str(i) for i in range(v.shape[0]))
        if len(uids) != v.shape[0]:
            raise DomainError("uid count does not match matrix size")
        object.__setattr__(self, "uids", uids)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.size

    def sub(self, indices: Sequence[int]) -> "DistanceMatrix":
        idx = np.asarray(indices, dtype=int)
        return DistanceMatrix(self.values[np.ix_(idx, idx)], tuple(self.uids[i] for i in idx))

    def condensed(self) -> np.ndarray:
        iu = np.triu_indices(self.size, k=1)
        return self.values[iu]


def _pair_chunks(n: int, n_chunks: int) -> list[tuple[np.ndarray, np.ndarray]]:
    ii, jj = np.triu_indices(n, k=1)
    if ii.size == 0:
        return []
    bounds = np.linspace(0, ii.size, max(1, n_chunks) + 1).astype(int)
    return [(ii[a:b], jj[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def pairwise_distances(X: np.ndarray, metric: str = "dtw", n_jobs: int = 1, chunk_size: int = 4096) -> np.ndarray:
    """Symmetric distance grid for stacked series ``X`` of shape ``(N, T, d)``.

    Only ``i < j`` pairs are computed. Pairs are split into chunks that may be
    evaluated by parallel workers; each chunk writes its own slots, so the
    merged result does not depend on scheduling.
    """
    n = X.shape[0]
    out = np.zeros((n, n))
    n_pairs = n * (n - 1) // 2
    n_chunks = max(int(n_jobs), -(-n_pairs // chunk_size)) if n_pairs else 0
    chunks = _pair_chunks(n, n_chunks)

    def work(chunk):
        ii, jj = chunk
        if metric == "dtw":
            return batch_cumulative_cost(X[ii], X[jj])[:, -1, -1]
        if metric == "euclidean":
            return _diagonal_cost(X[ii] - X[jj])
        raise DomainError(f"unknown metric {metric!r}")

    if n_jobs and n_jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=int(n_jobs)) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    for (ii, jj), vals in zip(chunks, results):
        out[ii, jj] = vals
        out[jj, ii] = vals
    return out


def distance_matrix(panel: Panel, dims="joint", metric: str = "dtw", n_jobs: int = 1) -> DistanceMatrix:
    if len(panel) == 0:
        raise DomainError("empty panel")
    X = panel.stacked(resolve_dims(dims))
    return DistanceMatrix(pairwise_distances(X, metric=metric, n_jobs=n_jobs), tuple(panel.uids))


def save_distance_matrix(dm: DistanceMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in dm.values:
            writer.writerow([repr(float(v)) for v in row])


def load_distance_matrix(path, uids: Sequence[str] = ()) -> DistanceMatrix:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return DistanceMatrix(np.array(rows).reshape(len(rows), -1), tuple(uids))


# ---------------------------------------------------------------------------
# DBA


@dataclass(frozen=True, eq=False)
class Barycenter:
    """DBA center of a set of trajectories with per-round IQR bands.

    ``iqr_low`` and ``iqr_high`` have shape ``(T, 2)`` with columns
    (actions, states).
    """

    actions: np.ndarray
    states: np.ndarray
    iqr_low: np.ndarray
    iqr_high: np.ndarray
    objective: tuple[float, ...] = field(default=())
    n_members: int = 0

    def series(self, dims=(0, 1)) -> np.ndarray:
        return np.column_stack([self.actions, self.states])[:, list(dims)]

    def as_trajectory(self, uid: str = "barycenter") -> Trajectory:
        return Trajectory(uid, np.clip(self.actions, 0, 1), np.clip(self.states, 0, 1))


def _medoid_index(X: np.ndarray, rng: np.random.Generator) -> int:
    if X.shape[0] == 1:
        return 0
    totals = pairwise_distances(X).sum(axis=1)
    ties = np.flatnonzero(totals <= totals.min() + 1e-12)
    return int(ties[0]) if ties.size == 1 else int(rng.choice(ties))


def _align_to_center(X: np.ndarray, center: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align every member to ``center`` and accumulate the DBA update.

    Backtracking runs for all members at once with the same tie order as
    ``warping_path``. Returns (per-member cost, summed aligned points per
    center index, alignment counts per center index).
    """
    P, T = X.shape[0], X.shape[1]
    C = np.broadcast_to(center, X.shape[:1] + center.shape)
    D = batch_cumulative_cost(X, np.ascontiguousarray(C))
    sums = np.zeros_like(center)
    counts = np.zeros(center.shape[0])
    rows = np.arange(P)
    i = np.full(P, T - 1)
    j = np.full(P, center.shape[0] - 1)
    np.add.at(sums, j, X[rows, i])
    np.add.at(counts, j, 1.0)
    active = (i > 0) | (j > 0)
    while active.any():
        p, ii, jj = rows[active], i[active], j[active]
        cand = np.full((p.size, 3), np.inf)
        both = (ii > 0) & (jj > 0)
        cand[both, 0] = D[p[both], ii[both] - 1, jj[both] - 1]
        cand[ii > 0, 1] = D[p[ii > 0], ii[ii > 0] - 1, jj[ii > 0]]
        cand[jj > 0, 2] = D[p[jj > 0], ii[jj > 0], jj[jj > 0] - 1]
        step = np.argmin(cand, axis=1)
        ii = ii - (step != 2)
        jj = jj - (step != 1)
        i[active], j[active] = ii, jj
        np.add.at(sums, jj, X[p, ii])
        np.add.at(counts, jj, 1.0)
        active = (i > 0) | (j > 0)
    return D[:, -1, -1], sums, counts


def dba_average(
    X: np.ndarray,
    max_iter: int = 30,
    seed: int = 0,
    tol: float = 1e-9,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """DTW barycenter of series ``X`` with shape ``(N, T, d)``.

    Starts from the medoid (ties broken by a seeded draw) unless ``init`` is
    given. Each iteration aligns every member to the current center and
    replaces each center point with the mean of the member points aligned to
    it. Returns the best center and the objective (summed DTW cost) recorded
    at the start and after every accepted update.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.shape[0] == 0:
        raise DomainError("DBA needs at least one member")
    rng = np.random.default_rng(seed)
    center = X[_medoid_index(X, rng)].copy() if init is None else np.array(init, dtype=float).reshape(X.shape[1], -1)
    costs, sums, counts = _align_to_center(X, center)
    history = [float(costs.sum())]
    for _ in range(max_iter):
        candidate = sums / counts[:, None]
        new_costs, new_sums, new_counts = _align_to_center(X, candidate)
        objective = float(new_costs.sum())
        if objective > history[-1]:
            break
        improvement = history[-1] - objective
        center, sums, counts = candidate, new_sums, new_counts
        history.append(objective)
        if improvement < tol:
            break
    return center, history


def dba_barycenter(members: Sequence[Trajectory], max_iter: int = 30, seed: int = 0, tol: float = 1e-9) -> Barycenter:
    members = list(members)
    if not members:
        raise DomainError("DBA needs at least one member")
    X = np.stack([m.series((0, 1)) for m in members])
    center, history = dba_average(X, max_iter=max_iter, seed=seed, tol=tol)
    low = np.percentile(X, 25, axis=0)
    high = np.percentile(X, 75, axis=0)
    return Barycenter(
        actions=center[:, 0],
        states=center[:, 1],
        iqr_low=low,
        iqr_high=high,
        objective=tuple(history),
        n_members=len(members),
    )
