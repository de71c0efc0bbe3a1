"""Behavioral-type metrics: first-round types, intention persistence and switcher labels."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Panel
from .errors import DomainError, UnsupportedConfigurationError
from .stability import welch_t_test

FREE_RIDER = "FreeRider"
CONDITIONAL_COOPERATOR = "ConditionalCooperator"
FULL_COOPERATOR = "FullCooperator"
FIRST_ROUND_TYPES = (FREE_RIDER, CONDITIONAL_COOPERATOR, FULL_COOPERATOR)

_FLAT = 1e-12  # spread below which a series counts as constant


def classify_first_round(c1: float) -> str:
    if not 0.0 <= c1 <= 1.0:
        raise DomainError(f"first-round contribution {c1} outside [0, 1]")
    if c1 <= 0.1:
        return FREE_RIDER
    if c1 >= 0.9:
        return FULL_COOPERATOR
    return CONDITIONAL_COOPERATOR


def first_round_shares(panel: Panel) -> dict[str, float]:
    if not len(panel):
        raise DomainError("empty panel")
    types = [classify_first_round(float(t.actions[0])) for t in panel]
    return {name: types.count(name) / len(types) for name in FIRST_ROUND_TYPES}


def stickiness(series: Sequence[float]) -> float:
    """Lag-1 Pearson autocorrelation.

    A constant series is maximally persistent and scores 1.0. If only one of
    the lagged halves is constant (e.g. 0, 0, 0, 1) the correlation is
    undefined and scores 0.0.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise DomainError("stickiness needs a series of length at least 3")
    if np.ptp(x) <= _FLAT:
        return 1.0
    a, b = x[:-1], x[1:]
    if np.ptp(a) <= _FLAT or np.ptp(b) <= _FLAT:
        return 0.0
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


def switching_rate(lam) -> float:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (2, 2):
        raise UnsupportedConfigurationError("switching rate is defined for two intentions")
    if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=1) - 1) > 1e-9):
        raise DomainError("transition matrix rows must be probability vectors")
    return float((lam[0, 1] + lam[1, 0]) / 2.0)


def volatility(series: Sequence[float]) -> float:
    """Share of consecutive steps that strictly straddle 0.5."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DomainError("volatility needs a series of length at least 2")
    a, b = x[:-1], x[1:]
    crossings = ((a < 0.5) & (b > 0.5)) | ((a > 0.5) & (b < 0.5))
    return float(crossings.sum() / (x.size - 1))


@dataclass(frozen=True)
class SwitcherCriteria:
    stickiness_max: float = 0.15
    switching_min: float = 0.35
    volatility_min: float = 0.25

    def __post_init__(self):
        for name in ("stickiness_max", "switching_min", "volatility_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class ClusterMetrics:
    cluster: int
    stickiness: float
    switching_rate: float
    volatility: float
    stickiness_iqr: tuple[float, float] = (float("nan"), float("nan"))
    switching_iqr: tuple[float, float] = (float("nan"), float("nan"))
    volatility_iqr: tuple[float, float] = (float("nan"), float("nan"))
    n_members: int = 0


def classify_switcher(metrics: ClusterMetrics, criteria: SwitcherCriteria = SwitcherCriteria()) -> bool:
    return (
        metrics.stickiness < criteria.stickiness_max
        and metrics.switching_rate > criteria.switching_min
        and metrics.volatility > criteria.volatility_min
    )


def _iqr(values: np.ndarray) -> tuple[float, float]:
    q25, q75 = np.percentile(values, [25, 75])
    return float(q25), float(q75)


def cluster_metrics(cluster: int, intention1: Sequence[Sequence[float]], lam) -> ClusterMetrics:
    """Aggregate member-level metrics of one cluster.

    ``intention1`` holds each member's intention-1 posterior series.
    Stickiness and volatility are member-level means with member IQRs; the
    switching rate comes from the cluster's fitted transition matrix, so its
    IQR band is degenerate.
    """
    if not len(intention1):
        raise DomainError(f"cluster {cluster} has no members")
    st = np.array([stickiness(p) for p in intention1])
    vo = np.array([volatility(p) for p in intention1])
    sw = switching_rate(lam)
    return ClusterMetrics(
        cluster, float(st.mean()), sw, float(vo.mean()), _iqr(st), (sw, sw), _iqr(vo), len(intention1)
    )


@dataclass(frozen=True)
class Responsiveness:
    r: float
    degenerate: bool
    n_pairs: int


def responsiveness(panel: Panel, assignment: Mapping[str, int]) -> dict[int, Responsiveness]:
    """Pooled Pearson correlation of each action with the previous round's others' average, per cluster."""
    if panel.game_length < 3:
        raise DomainError("responsiveness needs at least 3 rounds")
    pairs: dict[int, tuple[list, list]] = {}
    for t in panel:
        xs, ys = pairs.setdefault(int(assignment[t.uid]), ([], []))
        xs.append(t.states[:-1])
        ys.append(t.actions[1:])
    out = {}
    for c in sorted(pairs):
        x, y = np.concatenate(pairs[c][0]), np.concatenate(pairs[c][1])
        if np.ptp(x) <= _FLAT or np.ptp(y) <= _FLAT:
            out[c] = Responsiveness(0.0, True, x.size)
        else:
            out[c] = Responsiveness(float(np.corrcoef(x, y)[0, 1]), False, x.size)
    return out


def drop_round(actions: Sequence[float]) -> int | None:
    """1-based round that ends the largest consecutive decrease, or None if actions never fall."""
    a = np.asarray(actions, dtype=float)
    if a.size < 2:
        return None
    diffs = np.diff(a)
    i = int(np.argmin(diffs))
    return i + 2 if diffs[i] < 0 else None


@dataclass(frozen=True)
class FirstRoundTest:
    cluster: int
    mean: float
    rest_mean: float
    t: float
    df: float
    p: float


def first_round_tests(panel: Panel, assignment: Mapping[str, int]) -> list[FirstRoundTest]:
    """Welch test of each cluster's first-round contribution against all other participants."""
    c1 = np.array([t.actions[0] for t in panel])
    labels = np.array([int(assignment[u]) for u in panel.uids])
    out = []
    for c in sorted(set(labels.tolist())):
        inside, rest = c1[labels == c], c1[labels != c]
        try:
            t, df, p = welch_t_test(inside, rest)
        except DomainError:
            t = df = p = float("nan")
        rest_mean = float(rest.mean()) if rest.size else float("nan")
        out.append(FirstRoundTest(c, float(inside.mean()), rest_mean, t, df, p))
    return out


METRICS_HEADER = [
    "cluster",
    "stickiness",
    "switching_rate",
    "volatility",
    "is_switcher",
    "stickiness_q25",
    "stickiness_q75",
    "switching_q25",
    "switching_q75",
    "volatility_q25",
    "volatility_q75",
    "n_members",
]


def save_metrics(metrics: Sequence[ClusterMetrics], path, criteria: SwitcherCriteria = SwitcherCriteria()) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(
                [m.cluster, repr(m.stickiness), repr(m.switching_rate), repr(m.volatility), int(classify_switcher(m, criteria))]
                + [repr(float(v)) for v in (*m.stickiness_iqr, *m.switching_iqr, *m.volatility_iqr)]
                + [m.n_members]
            )
