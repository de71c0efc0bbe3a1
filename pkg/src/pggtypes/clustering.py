"""Clustering on precomputed DTW distance matrices and selection of k.

All algorithms return a ClusterSolution whose cluster ids run 1..k in order
of ascending mean action when a panel is supplied (otherwise in order of
each cluster's first member).
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.linalg import eigh
from sklearn.cluster import KMeans

from .core import Panel
from .dtw import Barycenter, DistanceMatrix, batch_cumulative_cost, dba_average, dba_barycenter, resolve_dims
from .errors import ConstraintError, DegenerateAffinityError, DomainError

ALGORITHMS = ("spectral", "kmedoids", "dba_kmeans", "average", "complete", "ward")
LINKAGES = ("average", "complete", "ward")


@dataclass(frozen=True, eq=False)
class ClusterSolution:
    """Partition of a panel into k clusters.

    ``labels[i]`` is the cluster id (1..k) of ``uids[i]``.
    """

    k: int
    uids: tuple[str, ...]
    labels: np.ndarray
    barycenters: tuple[Barycenter, ...] = field(default=())
    algorithm: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).copy()
        if labels.shape != (len(self.uids),):
            raise DomainError("one label per uid is required")
        if len(set(self.uids)) != len(self.uids):
            raise DomainError("uids must be unique")
        if set(labels.tolist()) != set(range(1, self.k + 1)):
            raise DomainError(f"labels must cover 1..{self.k} with no empty cluster")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "uids", tuple(self.uids))

    @property
    def assignment(self) -> dict[str, int]:
        return dict(zip(self.uids, self.labels.tolist()))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k + 1)[1:]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def member_uids(self, cluster: int) -> list[str]:
        return [self.uids[i] for i in self.members(cluster)]

    def with_barycenters(self, panel: Panel, seed: int = 0, max_iter: int = 30) -> "ClusterSolution":
        return replace(self, barycenters=cluster_barycenters(panel, self, seed=seed, max_iter=max_iter))


def _panel_for(panel: Panel, uids: Sequence[str]) -> Panel:
    return panel if tuple(panel.uids) == tuple(uids) else panel.subset(uids)


def order_labels(raw: np.ndarray, mean_actions: np.ndarray | None = None) -> np.ndarray:
    """Relabel arbitrary cluster ids to 1..k.

    With ``mean_actions`` clusters are sorted by ascending member mean
    action; ties and the no-panel case fall back to first-member order.
    """
    raw = np.asarray(raw)
    uniq, first = np.unique(raw, return_index=True)
    keys = []
    for u, f in zip(uniq, first):
        m = float(np.mean(mean_actions[raw == u])) if mean_actions is not None else 0.0
        keys.append((m, int(f)))
    order = sorted(range(len(uniq)), key=lambda c: keys[c])
    mapping = {uniq[c]: rank + 1 for rank, c in enumerate(order)}
    return np.array([mapping[v] for v in raw], dtype=int)


def _finish(raw, dm: DistanceMatrix, panel: Panel | None, algorithm: str) -> ClusterSolution:
    means = None
    if panel is not None:
        means = _panel_for(panel, dm.uids).actions().mean(axis=1)
    labels = order_labels(raw, means)
    return ClusterSolution(int(labels.max()), dm.uids, labels, algorithm=algorithm)


def _check_k(dm: DistanceMatrix, k: int) -> None:
    if k < 2:
        raise DomainError(f"k must be at least 2, got {k}")
    if k > dm.size:
        raise DomainError(f"k={k} exceeds the number of trajectories ({dm.size})")


# ---------------------------------------------------------------------------
# spectral


def affinity_bandwidth(dm: DistanceMatrix) -> float:
    """Median off-diagonal distance, or the median positive one if that is 0."""
    off = dm.condensed()
    if off.size == 0 or not np.any(off > 0):
        raise DegenerateAffinityError("all trajectories are identical; the affinity has a single cluster")
    sigma = float(np.median(off))
    return sigma if sigma > 0 else float(np.median(off[off > 0]))


def spectral_embedding(dm: DistanceMatrix, k: int) -> np.ndarray:
    """Row-normalized leading eigenvectors of the normalized affinity."""
    sigma = affinity_bandwidth(dm)
    A = np.exp(-(dm.values**2) / (2.0 * sigma**2))
    d = 1.0 / np.sqrt(A.sum(axis=1))
    M = d[:, None] * A * d[None, :]
    # the k smallest eigenvalues of I - M are the k largest of M
    n = dm.size
    _, vecs = eigh(M, subset_by_index=[n - k, n - 1])
    U = vecs[:, ::-1]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    return U / np.where(norms > 0, norms, 1.0)


def spectral_cluster(dm: DistanceMatrix, k: int, seed: int = 0, panel: Panel | None = None) -> ClusterSolution:
    _check_k(dm, k)
    if k == dm.size:
        return _finish(np.arange(k), dm, panel, "spectral")
    U = spectral_embedding(dm, k)
    km = KMeans(n_clusters=k, init="k-means++", n_init=20, random_state=seed).fit(U)
    raw = km.labels_
    if np.unique(raw).size < k:
        raise DegenerateAffinityError(f"spectral embedding supports fewer than {k} distinct clusters")
    return _finish(raw, dm, panel, "spectral")


# ---------------------------------------------------------------------------
# k-medoids


def pam(D: np.ndarray, k: int, max_iter: int = 100) -> np.ndarray:
    """PAM (BUILD then best-improvement SWAP); returns medoid indices."""
    n = D.shape[0]
    medoids = [int(np.argmin(D.sum(axis=1)))]
    nearest = D[:, medoids[0]].copy()
    for _ in range(1, k):
        gain = np.maximum(nearest[:, None] - D, 0).sum(axis=0)
        gain[medoids] = -np.inf
        m = int(np.argmax(gain))
        medoids.append(m)
        nearest = np.minimum(nearest, D[:, m])
    medoids = np.array(medoids)
    cost = D[:, medoids].min(axis=1).sum()
    for _ in range(max_iter):
        best = (cost, -1, -1)
        is_medoid = np.zeros(n, dtype=bool)
        is_medoid[medoids] = True
        candidates = np.flatnonzero(~is_medoid)
        for slot in range(k):
            others = np.delete(medoids, slot)
            rest = D[:, others].min(axis=1) if others.size else np.full(n, np.inf)
            totals = np.minimum(rest[:, None], D[:, candidates]).sum(axis=0)
            h = int(np.argmin(totals))
            if totals[h] < best[0] - 1e-12:
                best = (totals[h], slot, int(candidates[h]))
        if best[1] < 0:
            break
        cost = best[0]
        medoids[best[1]] = best[2]
    return medoids


def _assign(D_to_centers: np.ndarray) -> np.ndarray:
    return np.argmin(D_to_centers, axis=1)  # lowest index wins ties


def _dba_kmeans(dm: DistanceMatrix, panel: Panel, k: int, seed: int, dims="joint", max_iter: int = 20) -> np.ndarray:
    X = _panel_for(panel, dm.uids).stacked(resolve_dims(dims))
    medoids = pam(dm.values, k)
    centers = [X[m].copy() for m in medoids]
    labels = _assign(dm.values[:, medoids])
    for _ in range(max_iter):
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                centers[c], _ = dba_average(X[idx], max_iter=10, seed=seed, init=centers[c])
        dist = np.column_stack(
            [batch_cumulative_cost(X, np.broadcast_to(c, X.shape).copy())[:, -1, -1] for c in centers]
        )
        new = _assign(dist)
        for c in range(k):
            if not np.any(new == c):
                # re-seed an empty cluster with the worst-fitting point
                worst = int(np.argmax(dist[np.arange(len(new)), new]))
                new[worst] = c
                centers[c] = X[worst].copy()
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def kmedoids_cluster(
    dm: DistanceMatrix,
    k: int,
    seed: int = 0,
    panel: Panel | None = None,
    dba_kmeans: bool = False,
    dims="joint",
) -> ClusterSolution:
    """PAM k-medoids, or DBA k-means (DBA centers, DTW assignment) with ``dba_kmeans``.

    PAM is deterministic; the seed only breaks DBA medoid ties.
    """
    _check_k(dm, k)
    if k == dm.size:
        return _finish(np.arange(k), dm, panel, "dba_kmeans" if dba_kmeans else "kmedoids")
    if dba_kmeans:
        if panel is None:
            raise DomainError("dba_kmeans needs the panel to average trajectories")
        return _finish(_dba_kmeans(dm, panel, k, seed, dims=dims), dm, panel, "dba_kmeans")
    medoids = pam(dm.values, k)
    return _finish(_assign(dm.values[:, medoids]), dm, panel, "kmedoids")


# ---------------------------------------------------------------------------
# agglomerative


def mds_embedding(dm: DistanceMatrix) -> np.ndarray:
    """Classical MDS coordinates treating entries as squared distances.

    DTW costs are sums of squared differences, so ``-0.5 J D J`` is the
    Gram matrix; negative eigenvalues (DTW is not Euclidean) are dropped.
    """
    n = dm.size
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ dm.values @ J
    vals, vecs = eigh(B)
    keep = vals > 1e-10 * max(1.0, float(np.abs(vals).max()))
    if not keep.any():
        return np.zeros((n, 1))
    return vecs[:, keep] * np.sqrt(vals[keep])


def agglomerative_cluster(
    dm: DistanceMatrix, k: int, linkage_method: str = "average", panel: Panel | None = None
) -> ClusterSolution:
    _check_k(dm, k)
    if linkage_method not in LINKAGES:
        raise DomainError(f"unknown linkage {linkage_method!r}; expected one of {LINKAGES}")
    if k == dm.size:
        return _finish(np.arange(k), dm, panel, linkage_method)
    if linkage_method == "ward":
        Z = linkage(mds_embedding(dm), method="ward")
    else:
        Z = linkage(dm.condensed(), method=linkage_method)
    raw = cut_tree(Z, n_clusters=k).ravel()
    return _finish(raw, dm, panel, linkage_method)


def cluster(
    dm: DistanceMatrix, k: int, algorithm: str = "spectral", seed: int = 0, panel: Panel | None = None, dims="joint"
) -> ClusterSolution:
    if algorithm == "spectral":
        return spectral_cluster(dm, k, seed=seed, panel=panel)
    if algorithm == "kmedoids":
        return kmedoids_cluster(dm, k, seed=seed, panel=panel)
    if algorithm == "dba_kmeans":
        return kmedoids_cluster(dm, k, seed=seed, panel=panel, dba_kmeans=True, dims=dims)
    if algorithm in LINKAGES:
        return agglomerative_cluster(dm, k, linkage_method=algorithm, panel=panel)
    raise DomainError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def cluster_barycenters(panel: Panel, solution: ClusterSolution, seed: int = 0, max_iter: int = 30) -> tuple[Barycenter, ...]:
    sub = _panel_for(panel, solution.uids)
    return tuple(
        dba_barycenter([sub[i] for i in solution.members(c)], max_iter=max_iter, seed=seed)
        for c in range(1, solution.k + 1)
    )


# ---------------------------------------------------------------------------
# validity indices


@dataclass(frozen=True)
class SilhouetteResult:
    scores: np.ndarray
    cluster_means: np.ndarray
    overall: float


def silhouette(dm: DistanceMatrix, labels) -> SilhouetteResult:
    """Per-point silhouette from the distance matrix; singletons score 0."""
    labels = np.asarray(labels.labels if isinstance(labels, ClusterSolution) else labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise DomainError("silhouette needs at least two clusters")
    D = dm.values
    onehot = labels[:, None] == clusters[None, :]
    sizes = onehot.sum(axis=0)
    sums = D @ onehot
    own = np.argmax(onehot, axis=1)
    n = len(labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    cmeans = np.array([s[labels == c].mean() for c in clusters])
    return SilhouetteResult(s, cmeans, float(s.mean()))


def _barycenter_distances(X: np.ndarray, center: np.ndarray) -> np.ndarray:
    return batch_cumulative_cost(X, np.broadcast_to(center, X.shape).copy())[:, -1, -1]


POWER = 2


def dispersion(
    panel: Panel, solution: ClusterSolution, dims="joint", seed: int = 0, max_iter: int = 30
) -> tuple[float, float]:
    """Between and within dispersion using squared DTW distances to DBA barycenters.

    Returns ``(B, W)`` with ``B = sum_c n_c D(b_c, g)^2`` and
    ``W = sum_i D(x_i, b_c(i))^2`` where ``g`` is the global barycenter.
    Barycenters are averaged over the same dims as the distances.
    """
    X = _panel_for(panel, solution.uids).stacked(resolve_dims(dims))
    g, _ = dba_average(X, max_iter=max_iter, seed=seed)
    B = W = 0.0
    for c in range(1, solution.k + 1):
        idx = solution.members(c)
        center, _ = dba_average(X[idx], max_iter=max_iter, seed=seed)
        W += float((_barycenter_distances(X[idx], center) ** POWER).sum())
        B += idx.size * float(_barycenter_distances(center[None], g)[0] ** POWER)
    return B, W


def calinski_harabasz(B: float, W: float, n: int, k: int) -> float:
    if W <= 0:
        return float("inf") if B > 0 else 0.0
    return (B / (k - 1)) / (W / (n - k))


def _minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    finite = np.isfinite(x)
    lo, hi = x[finite].min(), x[finite].max()
    if hi <= lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class CviReport:
    ks: np.ndarray
    silhouette: np.ndarray
    ch: np.ndarray
    icv: np.ndarray
    sil_n: np.ndarray
    ch_n: np.ndarray
    icv_n: np.ndarray
    mean: np.ndarray
    sizes: tuple[tuple[int, ...], ...]

    def best_k(self) -> int:
        return int(self.ks[int(np.argmax(self.mean))])

    def rows(self):
        for i, k in enumerate(self.ks):
            yield (int(k), self.silhouette[i], self.ch[i], self.icv[i], self.sil_n[i], self.ch_n[i], self.icv_n[i], self.mean[i])


def build_cvi_report(ks, sil, ch, icv, sizes) -> CviReport:
    sil, ch, icv = (np.asarray(v, dtype=float) for v in (sil, ch, icv))
    sil_n = _minmax(sil)
    # an infinite CH (zero within dispersion) ties the best finite score
    finite = ch[np.isfinite(ch)]
    ch_n = _minmax(np.where(np.isfinite(ch), ch, finite.max() if finite.size else 0.0))
    icv_n = _minmax(-icv)  # inverted: lower variance scores higher
    mean = (sil_n + ch_n + icv_n) / 3.0
    return CviReport(np.asarray(ks, dtype=int), sil, ch, icv, sil_n, ch_n, icv_n, mean, tuple(tuple(s) for s in sizes))


def cvi_report(
    dm: DistanceMatrix,
    panel: Panel,
    k_range: Sequence[int] = range(2, 21),
    seed: int = 0,
    algorithm: str = "spectral",
    dims="joint",
    n_jobs: int = 1,
    max_iter: int = 30,
) -> CviReport:
    """Silhouette, Calinski-Harabasz and intra-cluster variance over a k grid."""
    ks = [int(k) for k in k_range]
    if not ks:
        raise DomainError("empty k range")
    if dm.size <= max(ks):
        raise DomainError(f"need more than {max(ks)} trajectories for k up to {max(ks)}, got {dm.size}")
    sub = _panel_for(panel, dm.uids)
    n = dm.size

    def one(k):
        sol = cluster(dm, k, algorithm=algorithm, seed=seed, panel=sub, dims=dims)
        B, W = dispersion(sub, sol, dims=dims, seed=seed, max_iter=max_iter)
        return silhouette(dm, sol).overall, calinski_harabasz(B, W, n, k), W / n, tuple(int(s) for s in sol.sizes())

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(one, ks))
    else:
        results = [one(k) for k in ks]
    sil, ch, icv, sizes = zip(*results)
    return build_cvi_report(ks, sil, ch, icv, sizes)


def select_k(report: CviReport, min_cluster_size: int = 30) -> int:
    """Best mean score among k whose clusters all meet the size floor; ties go to smaller k."""
    if len(report.ks) == 0:
        raise DomainError("empty CVI report")
    ok = [i for i, s in enumerate(report.sizes) if min(s) >= min_cluster_size]
    if not ok:
        detail = "; ".join(f"k={k}: smallest cluster {min(s)}" for k, s in zip(report.ks, report.sizes))
        raise ConstraintError(f"no k satisfies the minimum cluster size {min_cluster_size} ({detail})")
    best = max(ok, key=lambda i: (report.mean[i], -report.ks[i]))
    return int(report.ks[best])


# ---------------------------------------------------------------------------
# persistence


def save_solution(solution: ClusterSolution, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["uid", "cluster"])
        w.writerows(zip(solution.uids, solution.labels.tolist()))


def load_solution(path) -> ClusterSolution:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: no assignments")
    labels = np.array([int(r["cluster"]) for r in rows])
    return ClusterSolution(int(labels.max()), tuple(r["uid"] for r in rows), labels)


def save_cvi_report(report: CviReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "silhouette", "ch", "icv", "sil_n", "ch_n", "icv_n", "mean"])
        for row in report.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
