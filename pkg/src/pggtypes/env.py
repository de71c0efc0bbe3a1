"""Forward simulation of the repeated public goods game.

Provides tabular Q-learning primitives and a set of scripted archetypes that
generate labeled synthetic panels with known behavioral types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import N_BINS, GameConfig, Panel, Trajectory, bin_index
from .errors import DomainError

ARCHETYPES = (
    "free_rider",
    "unconditional_cooperator",
    "consistent_cooperator",
    "threshold_switcher",
    "farsighted_free_rider",
    "markov_switcher",
    "conditional_cooperator",
    "q_learner",
)

# pure types play the extremes exactly; noisy types scatter into bin 4 / bin 0
PURE_KINDS = ("free_rider", "unconditional_cooperator")
DEFAULT_NOISE_SD = 0.08


def new_q_table(fill: float = 0.0) -> np.ndarray:
    return np.full((N_BINS, N_BINS), float(fill))


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 <= self.gamma < 1:
            raise DomainError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.epsilon <= 1:
            raise DomainError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def q_update(q: np.ndarray, s: int, a: int, r: float, s_next: int, cfg: LearnerConfig) -> np.ndarray:
    """One tabular Q-learning step; returns an updated copy.

    ``alpha`` is validated by LearnerConfig to lie in (0, 1]; passing a
    config-like object with ``alpha=0`` leaves the table unchanged.
    """
    out = np.array(q, dtype=float, copy=True)
    target = r + cfg.gamma * np.max(q[s_next])
    out[s, a] = (1.0 - cfg.alpha) * q[s, a] + cfg.alpha * target
    return out


def greedy_action(q: np.ndarray, s: int) -> int:
    return int(np.argmax(q[s]))  # argmax returns the lowest index on ties


def epsilon_greedy(q: np.ndarray, s: int, epsilon: float, rng: np.random.Generator) -> int:
    if not 0 <= epsilon <= 1:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(q.shape[1]))
    return greedy_action(q, s)


# ---------------------------------------------------------------------------
# archetypes


@dataclass(frozen=True)
class ArchetypeSpec:
    """A scripted behavioral type.

    ``p`` is the per-round intention switch probability of a markov
    switcher; ``switch_rounds`` bounds the (1-based) first defection round of
    a threshold switcher and defaults to ``2..T-1``; ``noise_sd`` is the
    action noise around the cooperate/defect levels (``None`` means 0 for the
    pure types and 0.08 otherwise); ``level`` is the steady contribution of
    a consistent cooperator; ``start`` is the probability that a markov
    switcher begins in the cooperative intention.
    """

    kind: str
    p: float = 0.5
    noise_sd: float | None = None
    switch_rounds: tuple[int, int] | None = None
    level: float = 0.5
    start: float = 0.5
    learner: LearnerConfig | None = None

    def __post_init__(self):
        if self.kind not in ARCHETYPES:
            raise DomainError(f"unknown archetype {self.kind!r}")
        for name in ("p", "level", "start"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sd is None:
            object.__setattr__(self, "noise_sd", 0.0 if self.kind in PURE_KINDS else DEFAULT_NOISE_SD)
        if self.noise_sd < 0:
            raise DomainError("noise_sd must be nonnegative")

    @classmethod
    def of(cls, kind) -> "ArchetypeSpec":
        return kind if isinstance(kind, ArchetypeSpec) else cls(str(kind))


def _clip(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


class _Agent:
    """Per-agent mutable play state; ``act`` returns a normalized contribution."""

    def __init__(self, spec: ArchetypeSpec, config: GameConfig, rng: np.random.Generator):
        self.spec = spec
        self.T = config.rounds
        self.config = config
        self.rng = rng
        self.intentions: list[int] = []
        sd = spec.noise_sd
        if spec.kind == "threshold_switcher":
            lo, hi = spec.switch_rounds or (2, self.T - 1)
            if not 1 <= lo <= hi <= self.T:
                raise DomainError(f"switch rounds {lo}..{hi} outside 1..{self.T}")
            self.switch_round = int(rng.integers(lo, hi + 1))
            # levels are drawn once so the path is a single monotone drop
            self.high = max(0.7, 1.0 - abs(rng.normal(0, sd)))
            self.low = min(0.1, abs(rng.normal(0, sd)))
        elif spec.kind == "markov_switcher":
            self.intention = int(rng.random() < spec.start)  # 1 = cooperate
        elif spec.kind == "q_learner":
            self.learner = spec.learner or LearnerConfig()
            self.q = new_q_table()
            self.prev: tuple[int, int] | None = None

    def cooperate(self) -> float:
        return _clip(1.0 - abs(self.rng.normal(0, self.spec.noise_sd)))

    def defect(self) -> float:
        return _clip(abs(self.rng.normal(0, self.spec.noise_sd)))

    def act(self, t: int, last_state: float | None) -> float:
        kind = self.spec.kind
        if kind == "free_rider":
            return self.defect()
        if kind == "unconditional_cooperator":
            return self.cooperate()
        if kind == "consistent_cooperator":
            return _clip(self.spec.level + self.rng.normal(0, self.spec.noise_sd))
        if kind == "threshold_switcher":
            return self.high if t + 1 < self.switch_round else self.low
        if kind == "farsighted_free_rider":
            plateau = math.ceil(0.7 * self.T)
            r = t + 1
            base = 1.0 if r <= plateau else 1.0 - (r - plateau) / (self.T - plateau)
            return _clip(base + self.rng.normal(0, self.spec.noise_sd))
        if kind == "markov_switcher":
            if t > 0 and self.rng.random() < self.spec.p:
                self.intention = 1 - self.intention
            self.intentions.append(self.intention)
            return self.cooperate() if self.intention else self.defect()
        if kind == "conditional_cooperator":
            base = 0.5 if last_state is None else last_state
            return _clip(base + self.rng.normal(0, self.spec.noise_sd))
        if kind == "q_learner":
            s = 0 if last_state is None else bin_index(last_state)
            a = epsilon_greedy(self.q, s, self.learner.epsilon, self.rng)
            self.prev = (s, a)
            return (a + 0.5) / N_BINS
        raise DomainError(f"unknown archetype {kind!r}")

    def learn(self, reward: float, next_state: float) -> None:
        if self.spec.kind == "q_learner" and self.prev is not None:
            s, a = self.prev
            self.q = q_update(self.q, s, a, reward, bin_index(next_state), self.learner)


@dataclass(frozen=True)
class SimulatedGroup:
    trajectories: tuple[Trajectory, ...]
    labels: tuple[str, ...]
    intentions: tuple[tuple[int, ...], ...]


def simulate_group(
    specs: Sequence,
    config: GameConfig,
    seed,
    uids: Sequence[str] | None = None,
    group_id: str | None = None,
) -> SimulatedGroup:
    """Play ``config.rounds`` rounds with one agent per ArchetypeSpec.

    Each agent sees the previous round's others' average. Markov switchers
    record their latent intention per round (1 = cooperate).
    """
    specs = [ArchetypeSpec.of(s) for s in specs]
    if len(specs) != config.group_size:
        raise DomainError(f"need {config.group_size} specs, got {len(specs)}")
    rng = np.random.default_rng(seed)
    agents = [_Agent(spec, config, rng) for spec in specs]
    n, T = len(agents), config.rounds
    actions = np.zeros((n, T))
    states = np.zeros((n, T))
    last = [None] * n
    for t in range(T):
        contribs = np.array([agent.act(t, last[i]) for i, agent in enumerate(agents)])
        actions[:, t] = contribs
        states[:, t] = np.clip((contribs.sum() - contribs) / (n - 1), 0.0, 1.0)
        for i, agent in enumerate(agents):
            if agent.spec.kind == "q_learner":
                tokens = contribs * config.endowment
                reward = (config.endowment - tokens[i] + config.multiplier * tokens.sum()) / config.endowment
                agent.learn(reward, states[i, t])
            last[i] = float(states[i, t])
    uids = list(uids) if uids is not None else [f"a{i}" for i in range(n)]
    trajs = tuple(Trajectory(uids[i], actions[i], states[i], group=group_id) for i in range(n))
    return SimulatedGroup(
        trajectories=trajs,
        labels=tuple(s.kind for s in specs),
        intentions=tuple(tuple(a.intentions) for a in agents),
    )


@dataclass(frozen=True)
class SimulatedPanel:
    panel: Panel
    labels: dict
    intentions: dict

    def label_array(self) -> list[str]:
        return [self.labels[u] for u in self.panel.uids]


def simulate_panel(census: Mapping, config: GameConfig, seed: int) -> SimulatedPanel:
    """Randomly assign a census of archetypes to groups and play every group.

    ``census`` maps an archetype name (or ArchetypeSpec) to a head count.
    Agents are shuffled into groups of ``config.group_size``; group ``g`` is
    simulated with its own seed derived from ``(seed, g)``.
    """
    pool = []
    for kind, count in census.items():
        if int(count) < 0:
            raise DomainError("census counts must be nonnegative")
        pool.extend([ArchetypeSpec.of(kind)] * int(count))
    if not pool or len(pool) % config.group_size:
        raise DomainError(f"census total {len(pool)} is not a positive multiple of group size {config.group_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    width = len(str(len(pool) - 1))
    trajectories, labels, intentions = [], {}, {}
    n_groups = len(pool) // config.group_size
    gwidth = len(str(n_groups - 1))
    for g in range(n_groups):
        members = order[g * config.group_size:(g + 1) * config.group_size]
        uids = [f"u{int(m):0{width}d}" for m in members]
        group_id = f"g{g:0{gwidth}d}"
        sim = simulate_group([pool[m] for m in members], config, seed=[seed, g], uids=uids, group_id=group_id)
        trajectories.extend(sim.trajectories)
        for uid, label, intent in zip(uids, sim.labels, sim.intentions):
            labels[uid] = label
            if intent:
                intentions[uid] = intent
    trajectories.sort(key=lambda t: t.uid)
    return SimulatedPanel(Panel(tuple(trajectories)), labels, intentions)


def parse_census(text: str) -> dict[str, int]:
    """Parse ``kind=count,kind=count`` into a census mapping."""
    census: dict[str, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise DomainError(f"census entry {part!r} is not kind=count")
        kind, count = part.split("=", 1)
        kind = kind.strip()
        if kind not in ARCHETYPES:
            raise DomainError(f"unknown archetype {kind!r}")
        try:
            census[kind] = census.get(kind, 0) + int(count)
        except ValueError:
            raise DomainError(f"census count {count!r} is not an integer") from None
    if not census:
        raise DomainError("empty census")
    return census
