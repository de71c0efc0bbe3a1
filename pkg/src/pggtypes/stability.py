"""Partition agreement, bootstrap stability and heterogeneity diagnostics."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .clustering import ClusterSolution, silhouette, spectral_cluster
from .core import Panel
from .dtw import DistanceMatrix, batch_cumulative_cost, dba_average, distance_matrix, resolve_dims
from .errors import DomainError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# agreement


def _aligned(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Label arrays for two partitions given as mappings or equal-length sequences."""
    if isinstance(a, ClusterSolution):
        a = a.assignment
    if isinstance(b, ClusterSolution):
        b = b.assignment
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        if not (isinstance(a, Mapping) and isinstance(b, Mapping)):
            raise DomainError("compare two mappings or two sequences")
        if set(a) != set(b):
            raise DomainError("partitions cover different uid sets")
        keys = sorted(a)
        return np.array([a[k] for k in keys]), np.array([b[k] for k in keys])
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DomainError("partitions cover different uid sets")
    return a, b


def contingency(a, b) -> np.ndarray:
    a, b = _aligned(a, b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b) -> float:
    table = contingency(a, b)
    n = table.sum()
    index = _comb2(table).sum()
    rows, cols = _comb2(table.sum(axis=1)).sum(), _comb2(table.sum(axis=0)).sum()
    expected = rows * cols / _comb2(n) if n > 1 else 0.0
    top = 0.5 * (rows + cols)
    if top == expected:
        # both partitions trivial in the same way (one cluster, or all singletons)
        return 1.0
    return float((index - expected) / (top - expected))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(a, b) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    A zero-entropy (single-cluster) partition yields 0.
    """
    table = contingency(a, b).astype(float)
    n = table.sum()
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0 or hb == 0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / (0.5 * (ha + hb)))))


def match_clusters(table: np.ndarray) -> dict[int, int]:
    """Column index -> row index under the maximal-overlap assignment."""
    rows, cols = linear_sum_assignment(-np.asarray(table, dtype=float))
    return dict(zip(cols.tolist(), rows.tolist()))


def returned_to_baseline(base: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Per-point indicator that a point's new cluster matches its baseline cluster.

    The match for each point is the Hungarian max-overlap assignment
    computed with that point left out, so a point's own label never votes
    on its own match. Points sharing a contingency cell share the same
    leave-one-out table, so only one assignment per occupied cell is solved.
    """
    base_ids, ib = np.unique(base, return_inverse=True)
    new_ids, inn = np.unique(new, return_inverse=True)
    table = np.zeros((base_ids.size, new_ids.size))
    np.add.at(table, (ib, inn), 1)
    out = np.zeros(base.size, dtype=bool)
    for r, c in zip(*np.nonzero(table)):
        loo = table.copy()
        loo[r, c] -= 1
        hit = match_clusters(loo).get(int(c)) == r
        out[(ib == r) & (inn == c)] = hit
    return out


# ---------------------------------------------------------------------------
# bootstrap


ClusterFn = Callable[[DistanceMatrix, int, int, Panel], np.ndarray]


def spectral_labels(dm: DistanceMatrix, k: int, seed: int, panel: Panel) -> np.ndarray:
    return spectral_cluster(dm, k, seed=seed, panel=panel).labels


def random_labels(dm: DistanceMatrix, k: int, seed: int, panel: Panel) -> np.ndarray:
    """Uniform random assignment: the chance benchmark for return rates."""
    return np.random.default_rng(seed).integers(1, k + 1, size=dm.size)


@dataclass(frozen=True, eq=False)
class StabilityReport:
    replications: int
    skipped: int
    subsample_fraction: float
    ari: np.ndarray
    nmi: np.ndarray
    uids: tuple[str, ...]
    base_labels: np.ndarray
    sampled: np.ndarray
    returned: np.ndarray

    @property
    def ari_mean(self) -> float:
        return float(np.mean(self.ari)) if self.ari.size else float("nan")

    @property
    def ari_sd(self) -> float:
        return float(np.std(self.ari, ddof=1)) if self.ari.size > 1 else 0.0

    @property
    def nmi_mean(self) -> float:
        return float(np.mean(self.nmi)) if self.nmi.size else float("nan")

    @property
    def nmi_sd(self) -> float:
        return float(np.std(self.nmi, ddof=1)) if self.nmi.size > 1 else 0.0

    @property
    def return_rate(self) -> np.ndarray:
        """Share of replications containing a uid in which it returned; NaN if never sampled."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.sampled > 0, self.returned / np.maximum(self.sampled, 1), np.nan)

    def cluster_return_rate(self) -> dict[int, float]:
        rate = self.return_rate
        return {int(c): float(np.nanmean(rate[self.base_labels == c])) for c in np.unique(self.base_labels)}

    @property
    def mean_return_rate(self) -> float:
        return float(np.nanmean(self.return_rate))


def _replication(panel, base_labels, k, fraction, seed, r, dims, cluster_fn, n_jobs):
    rng = np.random.default_rng([seed, r])
    n = len(panel)
    m = int(round(fraction * n))
    if m < k or m < 2:
        log.warning("replication %d skipped: subsample of %d is smaller than k=%d", r, m, k)
        return None
    idx = np.sort(rng.choice(n, size=m, replace=False))
    sub = panel.take(idx)
    dm = distance_matrix(sub, dims=dims, n_jobs=n_jobs)
    rep_seed = int(rng.integers(2**31 - 1))
    new = np.asarray(cluster_fn(dm, k, rep_seed, sub))
    base = base_labels[idx]
    return idx, adjusted_rand_index(base, new), normalized_mutual_information(base, new), returned_to_baseline(base, new)


def bootstrap_stability(
    panel: Panel,
    base: ClusterSolution,
    reps: int = 100,
    fraction: float = 0.8,
    seed: int = 0,
    dims="joint",
    cluster_fn: ClusterFn = spectral_labels,
    n_jobs: int = 1,
) -> StabilityReport:
    """Subsample, recompute distances, re-cluster with the base k, and compare.

    Replication ``r`` draws from a generator seeded with ``(seed, r)``, so
    results do not depend on execution order and replications may run in
    parallel.
    """
    if reps < 1:
        raise DomainError("reps must be at least 1")
    if not 0 < fraction <= 1:
        raise DomainError("fraction must lie in (0, 1]")
    if tuple(panel.uids) != tuple(base.uids):
        panel = panel.subset(base.uids)
    labels = base.labels
    args = [(panel, labels, base.k, fraction, seed, r, dims, cluster_fn, 1) for r in range(reps)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(lambda a: _replication(*a), args))
    else:
        results = [_replication(*a) for a in args]
    sampled = np.zeros(len(panel))
    returned = np.zeros(len(panel))
    ari, nmi = [], []
    for res in results:
        if res is None:
            continue
        idx, a, b, hit = res
        ari.append(a)
        nmi.append(b)
        sampled[idx] += 1
        returned[idx] += hit
    done = len(ari)
    return StabilityReport(
        replications=done,
        skipped=reps - done,
        subsample_fraction=fraction,
        ari=np.array(ari),
        nmi=np.array(nmi),
        uids=tuple(base.uids),
        base_labels=labels,
        sampled=sampled,
        returned=returned,
    )


# ---------------------------------------------------------------------------
# heterogeneity


@dataclass(frozen=True, eq=False)
class HeterogeneityReport:
    silhouette_mean: np.ndarray
    silhouette_sd: np.ndarray
    silhouette_overall: float
    share_negative_silhouette: float
    within_distance_mean: float
    within_distance_sd: float
    between_distance_mean: float
    between_distance_sd: float
    separation_ratio: float
    total_variance: float
    between_variance: float
    within_variance: float
    between_variance_share: float
    within_variance_share: float
    degenerate: bool
    clipped: bool
    global_center: np.ndarray
    centers: tuple[np.ndarray, ...]


def _dtw_to(X: np.ndarray, center: np.ndarray) -> np.ndarray:
    return batch_cumulative_cost(X, np.broadcast_to(center, X.shape).copy())[:, -1, -1]


def variance_decomposition(X: np.ndarray, labels: np.ndarray, seed: int = 0, max_iter: int = 30):
    """Squared-DTW variance split around DBA barycenters.

    ``total`` is the mean squared DTW distance to the global barycenter,
    ``between`` the size-weighted mean squared distance of cluster
    barycenters to it, and ``within = total - between``.
    """
    g, _ = dba_average(X, max_iter=max_iter, seed=seed)
    total = float(np.mean(_dtw_to(X, g) ** 2))
    n = X.shape[0]
    between = 0.0
    centers = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        center, _ = dba_average(X[idx], max_iter=max_iter, seed=seed)
        centers.append(center)
        between += idx.size / n * float(_dtw_to(center[None], g)[0] ** 2)
    return g, tuple(centers), total, between


def heterogeneity(
    dm: DistanceMatrix,
    solution: ClusterSolution,
    panel: Panel,
    dims="joint",
    seed: int = 0,
    max_iter: int = 30,
) -> HeterogeneityReport:
    if solution.k < 2:
        raise DomainError("heterogeneity needs at least two clusters")
    labels = solution.labels
    sil = silhouette(dm, labels)
    iu = np.triu_indices(dm.size, k=1)
    same = labels[iu[0]] == labels[iu[1]]
    d = dm.values[iu]
    within, between = d[same], d[~same]
    w_mean = float(within.mean()) if within.size else 0.0
    b_mean = float(between.mean()) if between.size else 0.0
    sub = panel if tuple(panel.uids) == tuple(solution.uids) else panel.subset(solution.uids)
    X = sub.stacked(resolve_dims(dims))
    g, centers, total, between_var = variance_decomposition(X, labels, seed=seed, max_iter=max_iter)
    degenerate = total <= 0.0
    clipped = between_var > total and not degenerate
    if degenerate:
        between_var, share = 0.0, 0.0
    else:
        between_var = min(between_var, total)
        share = between_var / total
    within_var = total - between_var
    return HeterogeneityReport(
        silhouette_mean=sil.cluster_means,
        silhouette_sd=np.array([sil.scores[labels == c].std() for c in np.unique(labels)]),
        silhouette_overall=sil.overall,
        share_negative_silhouette=float(np.mean(sil.scores < 0)),
        within_distance_mean=w_mean,
        within_distance_sd=float(within.std()) if within.size else 0.0,
        between_distance_mean=b_mean,
        between_distance_sd=float(between.std()) if between.size else 0.0,
        separation_ratio=b_mean / w_mean if w_mean > 0 else float("inf"),
        total_variance=total,
        between_variance=between_var,
        within_variance=within_var,
        between_variance_share=share,
        within_variance_share=1.0 - share,
        degenerate=degenerate,
        clipped=clipped,
        global_center=g,
        centers=centers,
    )


# ---------------------------------------------------------------------------
# Welch


def welch_t_test(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Two-sided Welch t-test returning ``(t, df, p)``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or y.size < 2:
        raise DomainError("each sample needs at least two observations")
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    if vx + vy == 0:
        raise DomainError("both samples have zero variance")
    t = (x.mean() - y.mean()) / np.sqrt(vx + vy)
    df = (vx + vy) ** 2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return float(t), float(df), float(min(1.0, p))


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_table(path, k: int, rows: list[tuple[str, Sequence, float | None]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + [f"cluster_{c}" for c in range(1, k + 1)] + ["overall"])
        for name, per_cluster, overall in rows:
            cells = list(per_cluster) if per_cluster is not None else [None] * k
            w.writerow([name] + [_fmt(v) for v in cells] + [_fmt(overall)])


def save_stability_report(report: StabilityReport, path) -> None:
    ks = np.unique(report.base_labels)
    sizes = [int((report.base_labels == c).sum()) for c in ks]
    rates = report.cluster_return_rate()
    _write_table(
        path,
        len(ks),
        [
            ("size", sizes, len(report.uids)),
            ("mean_return_rate", [rates[int(c)] for c in ks], report.mean_return_rate),
            ("ari_mean", None, report.ari_mean),
            ("ari_sd", None, report.ari_sd),
            ("nmi_mean", None, report.nmi_mean),
            ("nmi_sd", None, report.nmi_sd),
            ("replications", None, report.replications),
            ("subsample_fraction", None, report.subsample_fraction),
        ],
    )


def save_heterogeneity_report(report: HeterogeneityReport, path) -> None:
    k = len(report.silhouette_mean)
    _write_table(
        path,
        k,
        [
            ("silhouette_mean", report.silhouette_mean, report.silhouette_overall),
            ("silhouette_sd", report.silhouette_sd, None),
            ("share_negative_silhouette", None, report.share_negative_silhouette),
            ("within_distance_mean", None, report.within_distance_mean),
            ("within_distance_sd", None, report.within_distance_sd),
            ("between_distance_mean", None, report.between_distance_mean),
            ("between_distance_sd", None, report.between_distance_sd),
            ("separation_ratio", None, report.separation_ratio),
            ("total_variance", None, report.total_variance),
            ("between_variance_share", None, report.between_variance_share),
            ("within_variance_share", None, report.within_variance_share),
        ],
    )
