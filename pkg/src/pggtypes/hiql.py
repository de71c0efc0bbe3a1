"""Hierarchical inverse Q-learning over discrete latent intentions.

Each intention k has a reward table r_k(s, a) on the 5x5 binned state and
action space. Its soft (log-sum-exp) Bellman fixed point Q_k under the
empirical state dynamics gives a Boltzmann policy pi_k(a|s), which serves as
the emission model of a hidden Markov chain over intentions with initial
distribution Pi and transition matrix Lambda. Parameters are fitted by EM.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize
from scipy.signal import find_peaks

from .core import N_BINS, DiscreteTrajectory
from .errors import DomainError, FittingError, NumericError, UnsupportedConfigurationError

log = logging.getLogger(__name__)

EMISSION_FLOOR = 1e-12
BELLMAN_TOL = 1e-8


# ---------------------------------------------------------------------------
# soft Bellman machinery


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _soft_value(Q: np.ndarray, beta: float) -> np.ndarray:
    # local log-sum-exp: scipy's version carries too much overhead for 5x5 tables
    z = beta * Q
    m = z.max(axis=-1)
    return (m + np.log(np.exp(z - m[..., None]).sum(axis=-1))) / beta


def bellman_residual(Q: np.ndarray, r: np.ndarray, P: np.ndarray, gamma: float, beta: float) -> float:
    return float(np.max(np.abs(r + gamma * P @ _soft_value(Q, beta) - Q)))


def value_iteration(
    r: np.ndarray, P: np.ndarray, gamma: float = 0.99, beta: float = 1.0, tol: float = 1e-10, max_iter: int = 100_000
) -> tuple[np.ndarray, list[float]]:
    """Plain soft value iteration; returns Q and the residual after each sweep."""
    Q = np.array(r, dtype=float)
    residuals = []
    for _ in range(max_iter):
        Q_new = r + gamma * P @ _soft_value(Q, beta)
        residuals.append(float(np.max(np.abs(Q_new - Q))))
        Q = Q_new
        if residuals[-1] < tol:
            return Q, residuals
    raise NumericError(f"value iteration did not converge in {max_iter} sweeps (residual {residuals[-1]:.3g})")


def _policy_matrix(pi: np.ndarray) -> np.ndarray:
    """(S, S*A) matrix mapping Q to the policy-weighted state value."""
    S, A = pi.shape
    M = np.zeros((S, S, A))
    M[np.arange(S), np.arange(S)] = pi
    return M.reshape(S, S * A)


def soft_q(
    r: np.ndarray,
    P: np.ndarray,
    gamma: float = 0.99,
    beta: float = 1.0,
    q0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> np.ndarray:
    """Soft Bellman fixed point by soft policy iteration.

    Each iteration evaluates the current Boltzmann policy exactly (one linear
    solve) and improves it; near the fixed point this is Newton's method on
    the soft Bellman equation. Falls back to value iteration if the residual
    stalls.
    """
    S, A = r.shape
    PA = P.reshape(S * A, S)
    Q = np.array(r if q0 is None else q0, dtype=float)
    eye = np.eye(S * A)
    for _ in range(max_iter):
        if bellman_residual(Q, r, P, gamma, beta) < tol:
            return Q
        pi = softmax(beta * Q, axis=1)
        with np.errstate(divide="ignore"):
            logpi = np.where(pi > 0, np.log(pi), 0.0)
        entropy = -(pi * logpi).sum(axis=1) / beta
        Pi = _policy_matrix(pi)
        rhs = r.ravel() + gamma * PA @ entropy
        Q = np.linalg.solve(eye - gamma * PA @ Pi, rhs).reshape(S, A)
    log.debug("soft policy iteration stalled; falling back to value iteration")
    return value_iteration(r, P, gamma, beta, tol=tol)[0]


def policy_from_q(Q: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return softmax(beta * Q, axis=-1)


def policy_from_reward(r: np.ndarray, P: np.ndarray, gamma: float = 0.99, beta: float = 1.0) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericError("rewards must be finite")
    return policy_from_q(soft_q(r, P, gamma, beta), beta)


def optimal_value(r: np.ndarray, P: np.ndarray, gamma: float) -> np.ndarray:
    """Hard-max optimal state values by policy iteration (lowest-index ties)."""
    S, A = r.shape
    PA = P.reshape(S * A, S)
    policy = np.argmax(r, axis=1)
    for _ in range(1000):
        Pp = P[np.arange(S), policy]
        V = np.linalg.solve(np.eye(S) - gamma * Pp, r[np.arange(S), policy])
        Q = r + gamma * (PA @ V).reshape(S, A)
        best = np.argmax(Q, axis=1)
        keep = Q[np.arange(S), policy] >= Q[np.arange(S), best] - 1e-12
        new = np.where(keep, policy, best)
        if np.array_equal(new, policy):
            return V
        policy = new
    raise NumericError("policy iteration did not converge")


def shape_rewards(r: np.ndarray, P: np.ndarray, gamma: float) -> np.ndarray:
    """Policy-invariant reward normalization.

    Applies potential shaping r'(s,a) = r(s,a) + gamma E[Phi(s')] - Phi(s)
    with Phi the optimal value of r, which makes max_a r'(s,a) = 0 in every
    state while leaving the soft-optimal policy unchanged.
    """
    S, A = r.shape
    phi = optimal_value(r, P, gamma)
    shaped = r + gamma * (P.reshape(S * A, S) @ phi).reshape(S, A) - phi[:, None]
    return shaped - shaped.max(axis=1, keepdims=True)  # exact zeros despite round-off


def reward_gradient(
    r: np.ndarray, w: np.ndarray, P: np.ndarray, gamma: float, beta: float, Q: np.ndarray | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted log-likelihood sum_{s,a} w(s,a) log pi_r(a|s) and its gradient in r.

    With dV = Pi dQ and dQ = dr + gamma P dV, the gradient is
    (I - gamma P Pi)^{-T} beta (w - n pi) where n(s) = sum_a w(s,a).
    """
    S, A = r.shape
    Q = soft_q(r, P, gamma, beta, q0=Q)
    pi = policy_from_q(Q, beta)
    logpi = np.log(np.maximum(pi, 1e-300))
    value = float((w * logpi).sum())
    g = beta * (w - w.sum(axis=1, keepdims=True) * pi)
    M = np.eye(S * A) - gamma * P.reshape(S * A, S) @ _policy_matrix(pi)
    grad = np.linalg.solve(M.T, g.ravel()).reshape(S, A)
    return value, grad, Q


def _ascend(r: np.ndarray, wn: np.ndarray, P, gamma, beta, steps: int, step_size: float) -> np.ndarray:
    """Plain gradient ascent with Armijo backtracking and step doubling."""
    f, g, Q = reward_gradient(r, wn, P, gamma, beta)
    eta = step_size
    for _ in range(steps):
        gn2 = float((g * g).sum())
        if gn2 < 1e-20:
            break
        for _ in range(40):
            cand = r + eta * g
            f_new, g_new, Q_new = reward_gradient(cand, wn, P, gamma, beta, Q=Q)
            if f_new >= f + 1e-4 * eta * gn2:
                break
            eta *= 0.5
        else:
            break
        r, f, g, Q = cand, f_new, g_new, Q_new
        eta *= 2.0
    return r


def _lbfgs(r: np.ndarray, wn: np.ndarray, P, gamma, beta, steps: int) -> np.ndarray:
    warm = {}

    def objective(x):
        v, g, Q = reward_gradient(x.reshape(r.shape), wn, P, gamma, beta, Q=warm.get("Q"))
        warm["Q"] = Q
        return -v, -g.ravel()

    f0 = objective(r.ravel())[0]
    res = minimize(objective, r.ravel(), jac=True, method="L-BFGS-B", options={"maxiter": steps})
    return res.x.reshape(r.shape) if res.fun <= f0 else r


def fit_reward(
    r0: np.ndarray,
    w: np.ndarray,
    P: np.ndarray,
    gamma: float,
    beta: float,
    steps: int = 50,
    step_size: float = 0.1,
    method: str = "lbfgs",
) -> np.ndarray:
    """Maximize the responsibility-weighted policy log-likelihood over r.

    The objective is divided by the total weight. ``method="lbfgs"`` runs
    up to ``steps`` L-BFGS iterations; ``method="gradient"`` runs ``steps``
    line-searched gradient steps starting at ``step_size``. Both return a
    table whose objective is no lower than at ``r0``.
    """
    total = float(w.sum())
    r = np.array(r0, dtype=float)
    if total <= 0:
        return r
    wn = w / total
    if method == "lbfgs":
        return _lbfgs(r, wn, P, gamma, beta, steps)
    if method == "gradient":
        return _ascend(r, wn, P, gamma, beta, steps, step_size)
    raise UnsupportedConfigurationError(f"unknown reward optimizer {method!r}")


# ---------------------------------------------------------------------------
# model


def estimate_dynamics(dataset: Sequence[DiscreteTrajectory], pseudocount: float = 0.5) -> np.ndarray:
    """Empirical P(s'|s,a) with a symmetric pseudocount; unvisited pairs are uniform."""
    counts = np.zeros((N_BINS, N_BINS, N_BINS))
    for d in dataset:
        np.add.at(counts, (d.states, d.actions, d.next_states), 1.0)
    counts += pseudocount
    totals = counts.sum(axis=2, keepdims=True)
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / N_BINS)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HiqlModel:
    rewards: np.ndarray  # (K, S, A)
    lam: np.ndarray  # (K, K)
    pi: np.ndarray  # (K,)
    dynamics: np.ndarray  # (S, A, S)
    gamma: float = 0.99
    beta: float = 1.0
    q_tables: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rewards = _frozen(self.rewards)
        if rewards.ndim != 3 or rewards.shape[1:] != (N_BINS, N_BINS):
            raise DomainError("rewards must have shape (K, 5, 5)")
        K = rewards.shape[0]
        lam, pi, P = _frozen(self.lam), _frozen(self.pi), _frozen(self.dynamics)
        if lam.shape != (K, K) or pi.shape != (K,):
            raise DomainError("lambda must be KxK and pi length K")
        if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=1) - 1) > 1e-9):
            raise DomainError("lambda rows must be probability vectors")
        if np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
            raise DomainError("pi must be a probability vector")
        if P.shape != (N_BINS, N_BINS, N_BINS) or np.any(np.abs(P.sum(axis=2) - 1) > 1e-9):
            raise DomainError("dynamics must be a (5, 5, 5) conditional distribution")
        if not 0 <= self.gamma < 1:
            raise DomainError("gamma must lie in [0, 1)")
        if self.beta <= 0:
            raise DomainError("beta must be positive")
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "dynamics", P)
        if self.q_tables is None:
            q = np.stack([soft_q(r, P, self.gamma, self.beta) for r in rewards])
        else:
            q = np.array(self.q_tables, dtype=float)
        object.__setattr__(self, "q_tables", _frozen(q))

    @property
    def K(self) -> int:
        return self.rewards.shape[0]

    @property
    def policies(self) -> np.ndarray:
        return policy_from_q(self.q_tables, self.beta)

    def permuted(self, order: Sequence[int]) -> "HiqlModel":
        o = np.asarray(order)
        return HiqlModel(
            self.rewards[o], self.lam[np.ix_(o, o)], self.pi[o], self.dynamics, self.gamma, self.beta, self.q_tables[o]
        )

    def n_params(self) -> int:
        K = self.K
        return K * N_BINS * N_BINS + K * (K - 1) + (K - 1)


@dataclass(frozen=True, eq=False)
class IntentionPosterior:
    uid: str
    probs: np.ndarray  # (steps, K)

    def intention(self, k: int = 0) -> np.ndarray:
        return self.probs[:, k]


# ---------------------------------------------------------------------------
# E-step


@dataclass
class _Batch:
    """Trajectories of one length stacked as integer arrays."""

    index: np.ndarray
    s: np.ndarray
    a: np.ndarray


def _batches(dataset: Sequence[DiscreteTrajectory]) -> list[_Batch]:
    by_len: dict[int, list[int]] = {}
    for i, d in enumerate(dataset):
        if len(d) == 0:
            raise DomainError(f"{d.uid}: trajectory has no decision steps")
        by_len.setdefault(len(d), []).append(i)
    out = []
    for L in sorted(by_len):
        idx = np.array(by_len[L])
        out.append(
            _Batch(idx, np.stack([dataset[i].states for i in idx]), np.stack([dataset[i].actions for i in idx]))
        )
    return out


@dataclass
class EStepResult:
    gammas: list[np.ndarray]  # per trajectory (L, K)
    xi_sum: np.ndarray  # (K, K) expected transition counts
    ll: np.ndarray  # per trajectory log-likelihood
    floored: bool

    @property
    def total_ll(self) -> float:
        return float(self.ll.sum())


def _forward_backward(pol: np.ndarray, lam: np.ndarray, pi: np.ndarray, b: _Batch):
    E = pol[:, b.s, b.a]  # (K, N, L)
    E = np.moveaxis(E, 0, -1)  # (N, L, K)
    floored = bool(np.any(E < EMISSION_FLOOR))
    E = np.maximum(E, EMISSION_FLOOR)
    N, L, K = E.shape
    alpha = np.empty((N, L, K))
    c = np.empty((N, L))
    a = pi[None, :] * E[:, 0]
    c[:, 0] = a.sum(axis=1)
    alpha[:, 0] = a / c[:, 0:1]
    for t in range(1, L):
        a = (alpha[:, t - 1] @ lam) * E[:, t]
        c[:, t] = a.sum(axis=1)
        alpha[:, t] = a / c[:, t:t + 1]
    beta = np.empty((N, L, K))
    beta[:, -1] = 1.0
    for t in range(L - 2, -1, -1):
        beta[:, t] = ((E[:, t + 1] * beta[:, t + 1]) @ lam.T) / c[:, t + 1:t + 2]
    gam = alpha * beta
    gam /= gam.sum(axis=2, keepdims=True)
    if L > 1:
        xi = alpha[:, :-1, :, None] * lam[None, None] * (E[:, 1:] * beta[:, 1:])[:, :, None, :] / c[:, 1:, None, None]
        xi_sum = xi.sum(axis=(0, 1))
    else:
        xi_sum = np.zeros((K, K))
    return gam, xi_sum, np.log(c).sum(axis=1), floored


def e_step(model: HiqlModel, dataset: Sequence[DiscreteTrajectory]) -> EStepResult:
    """Scaled forward-backward for every trajectory under ``model``."""
    dataset = list(dataset)
    return _e_step(model.policies, model.lam, model.pi, dataset, _batches(dataset))


def _e_step(pol, lam, pi, dataset, batches) -> EStepResult:
    n = len(dataset)
    gammas: list = [None] * n
    ll = np.zeros(n)
    xi_sum = np.zeros((len(pi), len(pi)))
    floored = False
    for b in batches:
        g, x, l, f = _forward_backward(pol, lam, pi, b)
        for j, i in enumerate(b.index):
            gammas[i] = g[j]
        ll[b.index] = l
        xi_sum += x
        floored |= f
    return EStepResult(gammas, xi_sum, ll, floored)


def posteriors(model: HiqlModel, dataset: Sequence[DiscreteTrajectory]) -> list[IntentionPosterior]:
    res = e_step(model, dataset)
    return [IntentionPosterior(d.uid, g) for d, g in zip(dataset, res.gammas)]


def log_likelihood(model: HiqlModel, dataset: Sequence[DiscreteTrajectory]) -> np.ndarray:
    return e_step(model, dataset).ll


# ---------------------------------------------------------------------------
# M-step


@dataclass
class MStepResult:
    pi: np.ndarray
    lam: np.ndarray
    rewards: np.ndarray
    flags: list[str]


def responsibility_counts(res: EStepResult, dataset: Sequence[DiscreteTrajectory], K: int) -> np.ndarray:
    """Expected (s, a) visit counts per intention, shape (K, S, A)."""
    W = np.zeros((K, N_BINS, N_BINS))
    for d, g in zip(dataset, res.gammas):
        for k in range(K):
            np.add.at(W[k], (d.states, d.actions), g[:, k])
    return W


def m_step(
    res: EStepResult,
    dataset: Sequence[DiscreteTrajectory],
    prev: HiqlModel,
    rng: np.random.Generator | None = None,
    min_row_mass: float = 1.0,
    reward_steps: int = 50,
    step_size: float = 0.1,
    reward_sd: float = 0.1,
    reward_method: str = "lbfgs",
) -> MStepResult:
    """Update Pi, Lambda and the per-intention rewards.

    Lambda rows with less than ``min_row_mass`` expected transitions keep
    their previous values. Rewards take ``reward_steps`` line-searched
    gradient steps from their previous values and are then shaped to a
    per-state max of zero.
    """
    K = prev.K
    flags = []
    first = np.array([g[0] for g in res.gammas])
    pi = first.mean(axis=0)
    pi = pi / pi.sum()
    lam = np.array(prev.lam, dtype=float)
    row_mass = res.xi_sum.sum(axis=1)
    for k in range(K):
        if row_mass[k] >= min_row_mass:
            lam[k] = res.xi_sum[k] / row_mass[k]
    W = responsibility_counts(res, dataset, K)
    rewards = np.array(prev.rewards, dtype=float)
    for k in range(K):
        if W[k].sum() < 1e-10 * max(1.0, W.sum()):
            rng = rng or np.random.default_rng(0)
            rewards[k] = rng.normal(0.0, reward_sd, size=(N_BINS, N_BINS))
            flags.append(f"intention {k + 1} had no responsibility and was reinitialized")
            continue
        r = fit_reward(
            rewards[k], W[k], prev.dynamics, prev.gamma, prev.beta, reward_steps, step_size, reward_method
        )
        rewards[k] = shape_rewards(r, prev.dynamics, prev.gamma)
    return MStepResult(pi, lam, rewards, flags)


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class EmConfig:
    max_em_iter: int = 200
    tol: float = 1e-6
    reward_steps: int = 50
    step_size: float = 0.1
    min_row_mass: float = 1.0
    reward_sd: float = 0.1
    lambda_sd: float = 0.05
    pseudocount: float = 0.5
    reward_method: str = "lbfgs"


@dataclass(frozen=True, eq=False)
class FitReport:
    K: int
    train_ll: float
    n_decisions: int
    bic: float
    chosen_init: int
    histories: tuple[tuple[float, ...], ...]
    flags: tuple[str, ...] = ()
    cv: tuple[tuple[int, int, float, float], ...] = ()  # (repeat, fold, train, test) per decision

    @property
    def train_ll_per_decision(self) -> float:
        return self.train_ll / self.n_decisions

    @property
    def test_ll_per_decision(self) -> float:
        return float(np.mean([row[3] for row in self.cv])) if self.cv else float("nan")


def bic(ll_total: float, K: int, n_decisions: int) -> float:
    p = K * N_BINS * N_BINS + K * (K - 1) + (K - 1)
    return p * math.log(n_decisions) - 2.0 * ll_total


def _split_groups(d: DiscreteTrajectory, K: int) -> np.ndarray:
    return ((N_BINS - 1 - d.actions) * K) // N_BINS


def action_split_rewards(
    dataset: Sequence[DiscreteTrajectory], K: int, dynamics: np.ndarray, cfg: EmConfig, gamma: float, beta: float
) -> np.ndarray:
    """Rewards fitted to a hard split of decisions by action level.

    Action bins are cut into K contiguous ranges, highest first, so
    intention 1 starts as the most cooperative one.
    """
    W = np.zeros((K, N_BINS, N_BINS))
    for d in dataset:
        np.add.at(W, (_split_groups(d, K), d.states, d.actions), 1.0)
    rewards = np.zeros((K, N_BINS, N_BINS))
    for k in range(K):
        if W[k].sum() > 0:
            r = fit_reward(rewards[k], W[k], dynamics, gamma, beta, cfg.reward_steps, cfg.step_size, cfg.reward_method)
            rewards[k] = shape_rewards(r, dynamics, gamma)
    return rewards


def action_split_model(
    dataset: Sequence[DiscreteTrajectory], K: int, dynamics: np.ndarray, cfg: EmConfig, gamma: float, beta: float
) -> HiqlModel:
    """Hard-assignment start: one M-step on the action-level split.

    Pi and Lambda come from the split's first-step shares and transition
    counts (with one pseudo-transition per cell so no entry starts at an
    absorbing zero). EM started near the identity tends to settle on each
    participant holding one intention throughout; this start instead
    begins with intentions that differ in what they do.
    """
    first = np.ones(K)
    trans = np.ones((K, K))
    for d in dataset:
        g = _split_groups(d, K)
        first[g[0]] += 1
        np.add.at(trans, (g[:-1], g[1:]), 1.0)
    rewards = action_split_rewards(dataset, K, dynamics, cfg, gamma, beta)
    return HiqlModel(rewards, trans / trans.sum(axis=1, keepdims=True), first / first.sum(), dynamics, gamma, beta)


def initial_model(
    K: int,
    dynamics: np.ndarray,
    rng: np.random.Generator,
    cfg: EmConfig,
    gamma: float,
    beta: float,
) -> HiqlModel:
    """Uniform Pi, Lambda = 0.95 I plus Gaussian noise (clipped, row-normalized), small random rewards."""
    lam = 0.95 * np.eye(K) + rng.normal(0.0, cfg.lambda_sd, size=(K, K)) if K > 1 else np.ones((1, 1))
    lam = np.clip(lam, 1e-6, None)
    lam = lam / lam.sum(axis=1, keepdims=True)
    rewards = rng.normal(0.0, cfg.reward_sd, size=(K, N_BINS, N_BINS))
    return HiqlModel(rewards, lam, np.full(K, 1.0 / K), dynamics, gamma, beta)


def run_em(
    model: HiqlModel,
    dataset: Sequence[DiscreteTrajectory],
    cfg: EmConfig = EmConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[HiqlModel, list[float], list[str]]:
    """EM from ``model``; returns the fitted model, the train LL before each M-step, and flags.

    ``history[i]`` is the log-likelihood of the parameters after ``i``
    M-steps, so the sequence is non-decreasing up to round-off.
    """
    dataset = list(dataset)
    batches = _batches(dataset)
    flags: list[str] = []
    res = _e_step(model.policies, model.lam, model.pi, dataset, batches)
    history = [res.total_ll]
    for _ in range(cfg.max_em_iter):
        if res.floored and "emission floor" not in flags:
            flags.append("emission floor")
        m = m_step(
            res, dataset, model, rng, cfg.min_row_mass, cfg.reward_steps, cfg.step_size, cfg.reward_sd, cfg.reward_method
        )
        flags.extend(m.flags)
        model = HiqlModel(m.rewards, m.lam, m.pi, model.dynamics, model.gamma, model.beta)
        res = _e_step(model.policies, model.lam, model.pi, dataset, batches)
        history.append(res.total_ll)
        if not np.isfinite(history[-1]):
            raise NumericError("log-likelihood became non-finite")
        gain = history[-1] - history[-2]
        if gain < cfg.tol * abs(history[-2]):
            break
    return model, history, flags


def fit(
    dataset: Sequence[DiscreteTrajectory],
    K: int,
    seed: int = 0,
    n_init: int = 10,
    cfg: EmConfig = EmConfig(),
    gamma: float = 0.99,
    beta: float = 1.0,
    dynamics: np.ndarray | None = None,
) -> tuple[HiqlModel, FitReport]:
    """Best of ``n_init`` EM runs by train log-likelihood (ties: lowest index)."""
    dataset = list(dataset)
    if K < 1:
        raise DomainError("K must be at least 1")
    if not dataset:
        raise DomainError("empty dataset")
    if n_init < 1:
        raise DomainError("n_init must be at least 1")
    P = estimate_dynamics(dataset, cfg.pseudocount) if dynamics is None else np.asarray(dynamics, dtype=float)
    best = None
    histories, flags, errors = [], [], []
    for i in range(n_init):
        rng = np.random.default_rng([seed, i])
        try:
            if i == 0 and K > 1:
                start = action_split_model(dataset, K, P, cfg, gamma, beta)
            else:
                start = initial_model(K, P, rng, cfg, gamma, beta)
            model, hist, f = run_em(start, dataset, cfg, rng)
        except (NumericError, np.linalg.LinAlgError) as exc:
            errors.append(f"init {i}: {exc}")
            histories.append(())
            continue
        histories.append(tuple(hist))
        flags.extend(f"init {i}: {x}" for x in f)
        if best is None or hist[-1] > best[1]:
            best = (model, hist[-1], i)
    if best is None:
        raise FittingError("all initializations failed: " + "; ".join(errors))
    model, ll, chosen = best
    n = sum(len(d) for d in dataset)
    report = FitReport(K, ll, n, bic(ll, K, n), chosen, tuple(histories), tuple(flags))
    return model, report


def cluster_initialized_fit(
    dataset: Sequence[DiscreteTrajectory],
    global_model: HiqlModel,
    cfg: EmConfig = EmConfig(),
    seed: int = 0,
    smoothing: float = 0.05,
) -> tuple[HiqlModel, FitReport]:
    """EM on one cluster started from the global Pi, Lambda and dynamics.

    Two starts are run: the global model as is, and rewards re-estimated
    from the cluster's own action split (see ``action_split_rewards``) with
    ``smoothing`` of uniform mass mixed into the global Lambda. EM can never
    revive a transition its start gives probability zero, and a global fit
    over mixed clusters often has exact zeros there. The start with the
    higher final train log-likelihood wins (ties: the global start), so the
    result never scores below EM from the global model alone.
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("empty cluster")
    g = global_model
    starts = [g]
    if g.K > 1:
        split = action_split_rewards(dataset, g.K, g.dynamics, cfg, g.gamma, g.beta)
        lam = (1.0 - smoothing) * g.lam + smoothing / g.K
        starts.append(HiqlModel(split, lam, g.pi, g.dynamics, g.gamma, g.beta))
    runs = [run_em(start, dataset, cfg, np.random.default_rng([seed, i])) for i, start in enumerate(starts)]
    chosen = max(range(len(runs)), key=lambda i: (runs[i][1][-1], -i))
    model, hist, flags = runs[chosen]
    n = sum(len(d) for d in dataset)
    histories = tuple(tuple(r[1]) for r in runs)
    report = FitReport(model.K, hist[-1], n, bic(hist[-1], model.K, n), chosen, histories, tuple(flags))
    return model, report


# ---------------------------------------------------------------------------
# latent alignment


def _action_series(d) -> np.ndarray:
    if isinstance(d, DiscreteTrajectory):
        return d.actions / (N_BINS - 1)
    return np.asarray(d, dtype=float)


def align_order(posts: Sequence[np.ndarray], trajectories: Sequence, prominence: float = 0.2, window: int = 1) -> list[int]:
    """Intention order (new index -> old index) for one fitted two-intention model.

    The intention whose posterior peaks most often fall within ``window``
    rounds of an action peak becomes intention 1. Ties fall back to the
    correlation between actions and posteriors, then to the current order.
    """
    if any(p.shape[1] != 2 for p in posts):
        raise UnsupportedConfigurationError("latent alignment is defined for K = 2 only")
    hits = np.zeros(2)
    xs, ys = [], []
    for p, d in zip(posts, trajectories):
        acts = _action_series(d)
        a_peaks, _ = find_peaks(acts, prominence=prominence)
        for k in range(2):
            k_peaks, _ = find_peaks(p[:, k], prominence=prominence)
            if a_peaks.size and k_peaks.size:
                hits[k] += int(np.sum(np.min(np.abs(k_peaks[:, None] - a_peaks[None, :]), axis=1) <= window))
        xs.append(acts)
        ys.append(p[:, 0])
    if hits[0] != hits[1]:
        return [0, 1] if hits[0] > hits[1] else [1, 0]
    x, y = np.concatenate(xs), np.concatenate(ys)
    if x.std() > 0 and y.std() > 0:
        r = float(np.corrcoef(x, y)[0, 1])
        if r < 0:
            return [1, 0]
    return [0, 1]


def align_latents(posts: Sequence[IntentionPosterior], trajectories: Sequence) -> list[IntentionPosterior]:
    order = align_order([p.probs for p in posts], trajectories)
    return [IntentionPosterior(p.uid, p.probs[:, order]) for p in posts]


def _match_to_reference(model: HiqlModel, reference: HiqlModel) -> list[int]:
    """Order of ``model`` intentions that best matches ``reference`` policies."""
    cost = np.abs(reference.policies[:, None] - model.policies[None, :]).sum(axis=(2, 3))
    rows, cols = linear_sum_assignment(cost)
    return [int(cols[i]) for i in np.argsort(rows)]


# ---------------------------------------------------------------------------
# cross-validation and K selection


def stratify(dataset: Sequence[DiscreteTrajectory], folds: int, n_strata: int = 3) -> tuple[np.ndarray, list[str]]:
    """Stratum per participant from equal-width bins of mean action; small strata merge with a neighbor."""
    means = np.array([d.actions.mean() / (N_BINS - 1) for d in dataset])
    strata = np.minimum((means * n_strata).astype(int), n_strata - 1)
    flags = []
    while True:
        ids, counts = np.unique(strata, return_counts=True)
        small = [i for i, c in zip(ids, counts) if c < folds]
        if not small or ids.size == 1:
            break
        s = small[0]
        pos = int(np.flatnonzero(ids == s)[0])
        target = ids[pos + 1] if pos + 1 < ids.size else ids[pos - 1]
        strata[strata == s] = target
        flags.append(f"stratum {s} had fewer than {folds} participants and was merged into stratum {target}")
    return strata, flags


def fold_assignment(strata: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(strata.size, dtype=int)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        perm = rng.permutation(idx)
        out[perm] = np.arange(perm.size) % folds
    return out


@dataclass(frozen=True, eq=False)
class CvResult:
    model: HiqlModel | None
    report: FitReport
    posteriors: dict
    test_ll: np.ndarray  # per participant mean test LL per decision
    flags: tuple[str, ...] = ()


def cv_fit(
    dataset: Sequence[DiscreteTrajectory],
    K: int,
    folds: int = 5,
    repeats: int = 10,
    seed: int = 0,
    n_init: int = 10,
    cfg: EmConfig = EmConfig(),
    gamma: float = 0.99,
    beta: float = 1.0,
) -> CvResult:
    """Repeated stratified K-fold evaluation of held-out log-likelihood.

    Every participant is held out once per repeat; its test posterior is
    aligned (K = 2: peak rule; otherwise policy matching to the first
    fitted model) and averaged over repeats.
    """
    dataset = list(dataset)
    n = len(dataset)
    if folds < 2 or n < folds:
        raise DomainError(f"need at least {folds} participants for {folds}-fold CV")
    strata, flags = stratify(dataset, folds)
    P = estimate_dynamics(dataset, cfg.pseudocount)
    rows = []
    post_sum = [np.zeros((len(d), K)) for d in dataset]
    test_sum = np.zeros(n)
    reference = None
    for rep in range(repeats):
        assign = fold_assignment(strata, folds, np.random.default_rng([seed, rep]))
        for f in range(folds):
            train = [dataset[i] for i in np.flatnonzero(assign != f)]
            test_idx = np.flatnonzero(assign == f)
            test = [dataset[i] for i in test_idx]
            model, rep_report = fit(train, K, seed=seed * 1000 + rep * folds + f, n_init=n_init, cfg=cfg, gamma=gamma, beta=beta, dynamics=P)
            res = e_step(model, test)
            n_test = sum(len(d) for d in test)
            rows.append((rep, f, rep_report.train_ll_per_decision, float(res.ll.sum()) / n_test))
            for j, i in enumerate(test_idx):
                test_sum[i] += res.ll[j] / len(dataset[i])
            probs = res.gammas
            if K == 2:
                order = align_order(probs, test)
            elif K > 2:
                reference = reference or model
                order = _match_to_reference(model, reference)
            else:
                order = [0]
            for j, i in enumerate(test_idx):
                post_sum[i] += probs[j][:, order]
    full_model, full_report = fit(dataset, K, seed=seed, n_init=n_init, cfg=cfg, gamma=gamma, beta=beta, dynamics=P)
    report = replace(full_report, cv=tuple(rows), flags=full_report.flags + tuple(flags))
    posts = {d.uid: IntentionPosterior(d.uid, post_sum[i] / repeats) for i, d in enumerate(dataset)}
    return CvResult(full_model, report, posts, test_sum / repeats, tuple(flags))


@dataclass(frozen=True)
class KSelection:
    K: int
    ks: tuple[int, ...]
    test_ll: tuple[float, ...]
    bic: tuple[float, ...]
    delta_ll: tuple[float, ...]
    delta_bic: tuple[float, ...]

    def rows(self):
        for i, k in enumerate(self.ks):
            yield k, self.test_ll[i], self.bic[i], (self.delta_ll[i - 1] if i else None), (self.delta_bic[i - 1] if i else None)


def choose_K(ks: Sequence[int], test_ll: Sequence[float], bics: Sequence[float]) -> int:
    """Pick the K reached by the largest positive test-LL gain; ties go to the smaller BIC increase."""
    ks = list(ks)
    if len(ks) == 1:
        return ks[0]
    dll = np.diff(test_ll)
    dbic = np.diff(bics)
    cands = [i for i in range(dll.size) if dll[i] > 0]
    if not cands:
        return ks[0]
    best = max(cands, key=lambda i: (dll[i], -dbic[i]))
    return ks[best + 1]


def select_K(
    dataset: Sequence[DiscreteTrajectory],
    K_range: Sequence[int] = range(1, 6),
    folds: int = 5,
    repeats: int = 10,
    seed: int = 0,
    n_init: int = 10,
    cfg: EmConfig = EmConfig(),
    gamma: float = 0.99,
    beta: float = 1.0,
) -> tuple[KSelection, dict]:
    ks = [int(k) for k in K_range]
    results = {k: cv_fit(dataset, k, folds, repeats, seed, n_init, cfg, gamma, beta) for k in ks}
    ll = [results[k].report.test_ll_per_decision for k in ks]
    bics = [results[k].report.bic for k in ks]
    sel = KSelection(
        choose_K(ks, ll, bics),
        tuple(ks),
        tuple(ll),
        tuple(bics),
        tuple(np.diff(ll).tolist()),
        tuple(np.diff(bics).tolist()),
    )
    return sel, results


# ---------------------------------------------------------------------------
# serialization


def _write_block(lines: list[str], name: str, arr: np.ndarray) -> None:
    lines.append(name)
    for row in np.atleast_2d(arr):
        lines.append(" ".join(repr(float(v)) for v in row))


def save_model(model: HiqlModel, path) -> None:
    lines = [f"K {model.K}", f"GAMMA {model.gamma!r}", f"BETA {model.beta!r}"]
    _write_block(lines, "PI", model.pi[None])
    _write_block(lines, "LAMBDA", model.lam)
    for k in range(model.K):
        _write_block(lines, f"REWARD_{k + 1}", model.rewards[k])
    _write_block(lines, "DYNAMICS", model.dynamics.reshape(N_BINS * N_BINS, N_BINS))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> HiqlModel:
    header: dict[str, str] = {}
    blocks: dict[str, list[list[float]]] = {}
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        head = line.split()
        if head[0] in ("K", "GAMMA", "BETA") and len(head) == 2:
            header[head[0]] = head[1]
        elif head[0].isupper() and len(head) == 1:
            current = head[0]
            blocks[current] = []
        elif current is None:
            raise DomainError(f"{path}: numbers before any section")
        else:
            blocks[current].append([float(v) for v in head])
    try:
        K = int(header["K"])
        rewards = np.array([blocks[f"REWARD_{k + 1}"] for k in range(K)])
        return HiqlModel(
            rewards,
            np.array(blocks["LAMBDA"]),
            np.array(blocks["PI"][0]),
            np.array(blocks["DYNAMICS"]).reshape(N_BINS, N_BINS, N_BINS),
            float(header["GAMMA"]),
            float(header["BETA"]),
        )
    except KeyError as exc:
        raise DomainError(f"{path}: missing section {exc}") from None


def save_posteriors(posts: Sequence[IntentionPosterior], path) -> None:
    K = posts[0].probs.shape[1] if posts else 0
    lines = ["uid,step," + ",".join(f"p_intention{k + 1}" for k in range(K))]
    for p in posts:
        for t, row in enumerate(p.probs, start=1):
            lines.append(f"{p.uid},{t}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_posteriors(path) -> list[IntentionPosterior]:
    out: dict[str, list[list[float]]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                out.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return [IntentionPosterior(uid, np.array(rows)) for uid, rows in out.items()]
