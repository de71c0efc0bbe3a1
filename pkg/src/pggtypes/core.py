"""Game definitions, trajectories, panels and CSV ingestion.

Contributions are stored normalized to ``[0, 1]`` by the study endowment.
A trajectory pairs a participant's own contributions (actions) with the
average contribution of the other group members in the same round (states).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, IngestionError

N_BINS = 5
PANEL_COLUMNS = ("uid", "round", "contribution", "others_avg", "game_length")


@dataclass(frozen=True)
class GameConfig:
    endowment: float = 10.0
    multiplier: float = 0.4
    group_size: int = 4
    rounds: int = 10

    def __post_init__(self):
        if not self.endowment > 0:
            raise DomainError(f"endowment must be positive, got {self.endowment}")
        if not 0 < self.multiplier < 1:
            raise DomainError(f"multiplier must lie in (0, 1), got {self.multiplier}")
        if self.group_size < 2:
            raise DomainError(f"group_size must be >= 2, got {self.group_size}")
        if self.rounds < 2:
            raise DomainError(f"rounds must be >= 2, got {self.rounds}")


def _check_contribution(value: float, endowment: float) -> None:
    if not 0.0 <= value <= endowment:
        raise DomainError(f"contribution {value} outside [0, {endowment}]")


def payoff(config: GameConfig, own: float, all_contribs: Sequence[float]) -> float:
    """Round payoff ``e - c_i + mu * sum_j c_j`` in tokens."""
    for c in all_contribs:
        _check_contribution(c, config.endowment)
    _check_contribution(own, config.endowment)
    if not any(math.isclose(own, c) for c in all_contribs):
        raise DomainError("own contribution must appear in all_contribs")
    return config.endowment - own + config.multiplier * float(sum(all_contribs))


def others_average(config: GameConfig, all_contribs: Sequence[float], index: int) -> float:
    """Mean contribution of everyone in the group except member ``index``."""
    n = len(all_contribs)
    if config.group_size < 2 or n < 2:
        raise DomainError("others_average needs a group of at least two")
    if not 0 <= index < n:
        raise DomainError(f"index {index} out of range for group of {n}")
    return (float(sum(all_contribs)) - all_contribs[index]) / (n - 1)


def normalize(raw_contribution: float, endowment: float) -> float:
    if endowment <= 0:
        raise DomainError("endowment must be positive")
    _check_contribution(raw_contribution, endowment)
    return raw_contribution / endowment


def bin_index(value):
    """Equal-width bin on ``[0, 1]``: half-open bins, the last one closed at 1."""
    v = np.asarray(value, dtype=float)
    out = np.minimum(np.floor(v * N_BINS), N_BINS - 1).astype(int)
    return int(out) if out.ndim == 0 else out


def _frozen(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One participant's normalized action and state series."""

    uid: str
    actions: np.ndarray
    states: np.ndarray
    group: str | None = None

    def __post_init__(self):
        actions = _frozen(self.actions, "actions")
        states = _frozen(self.states, "states")
        if actions.shape != states.shape:
            raise DomainError(f"{self.uid}: actions and states differ in length")
        if actions.size == 0:
            raise DomainError(f"{self.uid}: empty trajectory")
        for name, arr in (("actions", actions), ("states", states)):
            if not np.all((arr >= 0.0) & (arr <= 1.0)):
                raise DomainError(f"{self.uid}: {name} must lie in [0, 1]")
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "states", states)

    @property
    def game_length(self) -> int:
        return int(self.actions.size)

    def series(self, dims=(0, 1)) -> np.ndarray:
        """Stack the selected dimensions into a ``(T, d)`` array."""
        both = np.column_stack([self.actions, self.states])
        return both[:, list(dims)]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.uid == other.uid
            and self.group == other.group
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.states, other.states)
        )

    __hash__ = None


@dataclass(frozen=True)
class Panel:
    trajectories: tuple[Trajectory, ...]
    game_length: int = field(default=0)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not trajs:
            object.__setattr__(self, "game_length", int(self.game_length))
            return
        lengths = {t.game_length for t in trajs}
        if len(lengths) != 1:
            raise DomainError(f"mixed game lengths in panel: {sorted(lengths)}")
        length = lengths.pop()
        if self.game_length and self.game_length != length:
            raise DomainError(f"declared game_length {self.game_length} != {length}")
        object.__setattr__(self, "game_length", length)
        seen = set()
        for t in trajs:
            if t.uid in seen:
                raise DomainError(f"duplicate uid {t.uid!r}")
            seen.add(t.uid)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def uids(self) -> list[str]:
        return [t.uid for t in self.trajectories]

    def actions(self) -> np.ndarray:
        return np.array([t.actions for t in self.trajectories]).reshape(len(self), -1)

    def states(self) -> np.ndarray:
        return np.array([t.states for t in self.trajectories]).reshape(len(self), -1)

    def stacked(self, dims=(0, 1)) -> np.ndarray:
        """``(N, T, d)`` array of the selected dimensions."""
        return np.stack([t.series(dims) for t in self.trajectories]) if len(self) else np.zeros((0, self.game_length, len(dims)))

    def subset(self, uids: Iterable[str]) -> "Panel":
        index = {t.uid: t for t in self.trajectories}
        return Panel(tuple(index[u] for u in uids))

    def take(self, indices: Iterable[int]) -> "Panel":
        return Panel(tuple(self.trajectories[i] for i in indices))


@dataclass(frozen=True, eq=False)
class DiscreteTrajectory:
    """State/action/next-state bin triplets for one participant.

    Step ``t`` pairs the action of round ``t + 1`` with the others' average
    observed after round ``t``; the opening round has no prior state and is
    dropped.
    """

    uid: str
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("states", "actions", "next_states"):
            arr = np.array(getattr(self, name), dtype=int)
            if arr.ndim != 1:
                raise DomainError(f"{name} must be one-dimensional")
            if arr.size and (arr.min() < 0 or arr.max() >= N_BINS):
                raise DomainError(f"{self.uid}: {name} bins must lie in 0..{N_BINS - 1}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrays.append(arr)
        if len({a.size for a in arrays}) != 1:
            raise DomainError(f"{self.uid}: triplet arrays differ in length")
        if arrays[0].size > 1 and not np.array_equal(self.next_states[:-1], self.states[1:]):
            raise DomainError(f"{self.uid}: triplets do not chain")

    def __len__(self) -> int:
        return int(self.actions.size)

    @property
    def triplets(self) -> list[tuple[int, int, int]]:
        return [(int(s), int(a), int(n)) for s, a, n in zip(self.states, self.actions, self.next_states)]

    def __eq__(self, other):
        if not isinstance(other, DiscreteTrajectory):
            return NotImplemented
        return self.uid == other.uid and self.triplets == other.triplets

    __hash__ = None


def discretize(traj: Trajectory) -> DiscreteTrajectory:
    action_bins = bin_index(traj.actions)
    state_bins = bin_index(traj.states)
    return DiscreteTrajectory(
        uid=traj.uid,
        states=state_bins[:-1],
        actions=action_bins[1:],
        next_states=state_bins[1:],
    )


def discretize_panel(panel: Panel) -> list[DiscreteTrajectory]:
    return [discretize(t) for t in panel]


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_float(text: str, uid: str, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"uid {uid}: cannot parse {column}={text!r}") from None


def load_panel(path, endowment: float) -> Panel:
    """Read a panel CSV with raw token contributions.

    Required header: ``uid,round,contribution,others_avg,game_length`` plus an
    optional ``group_id``.  Rows with an empty ``others_avg`` have it computed
    from the other members of their group in the same round.
    """
    if endowment <= 0:
        raise DomainError("endowment must be positive")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in PANEL_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing columns {missing}")
        rows = list(reader)

    records: dict[str, dict[int, dict]] = defaultdict(dict)
    lengths: dict[str, int] = {}
    groups: dict[str, str] = {}
    for row in rows:
        uid = row["uid"].strip()
        try:
            rnd = int(row["round"])
            length = int(row["game_length"])
        except ValueError:
            raise IngestionError(f"uid {uid}: non-integer round or game_length") from None
        if rnd in records[uid]:
            raise IngestionError(f"uid {uid}: duplicate round {rnd}")
        if lengths.setdefault(uid, length) != length:
            raise IngestionError(f"uid {uid}: inconsistent game_length")
        contribution = _parse_float(row["contribution"], uid, "contribution")
        if not 0.0 <= contribution <= endowment:
            raise IngestionError(f"uid {uid}: contribution {contribution} outside [0, {endowment}]")
        others = row.get("others_avg", "").strip()
        group = (row.get("group_id") or "").strip() or None
        if group is not None:
            if groups.setdefault(uid, group) != group:
                raise IngestionError(f"uid {uid}: group_id changes between rounds")
        records[uid][rnd] = {
            "contribution": contribution,
            "others": _parse_float(others, uid, "others_avg") if others else None,
        }

    if not records:
        return Panel(())

    panel_lengths = set(lengths.values())
    if len(panel_lengths) > 1:
        first = next(iter(lengths.values()))
        odd = next(u for u, n in lengths.items() if n != first)
        raise IngestionError(f"uid {odd}: game_length {lengths[odd]} differs from {first} (mixed game lengths)")
    game_length = panel_lengths.pop()

    for uid, by_round in records.items():
        expected = set(range(1, game_length + 1))
        if set(by_round) != expected:
            gaps = sorted(expected - set(by_round))
            extra = sorted(set(by_round) - expected)
            raise IngestionError(f"uid {uid}: missing rounds {gaps}" + (f", unexpected rounds {extra}" if extra else ""))

    members: dict[str, list[str]] = defaultdict(list)
    for uid, g in groups.items():
        members[g].append(uid)

    trajectories = []
    for uid in records:
        by_round = records[uid]
        actions, states = [], []
        for rnd in range(1, game_length + 1):
            rec = by_round[rnd]
            actions.append(rec["contribution"] / endowment)
            if rec["others"] is None:
                group = groups.get(uid)
                if group is None:
                    raise IngestionError(f"uid {uid}: others_avg empty and no group_id")
                mates = members[group]
                if len(mates) < 2:
                    raise IngestionError(f"uid {uid}: group {group} has a single member")
                contribs = [records[m][rnd]["contribution"] for m in mates]
                cfg = GameConfig(endowment=endowment, group_size=len(mates))
                others = others_average(cfg, contribs, mates.index(uid))
            else:
                others = rec["others"]
                if not 0.0 <= others <= endowment:
                    raise IngestionError(f"uid {uid}: others_avg {others} outside [0, {endowment}]")
            states.append(others / endowment)
        trajectories.append(Trajectory(uid, actions, states, group=groups.get(uid)))
    return Panel(tuple(trajectories))


def _fmt(x: float) -> str:
    return repr(float(x))


def save_panel(panel: Panel, path, endowment: float) -> None:
    with_groups = any(t.group is not None for t in panel)
    columns = list(PANEL_COLUMNS) + (["group_id"] if with_groups else [])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for t in panel:
            for r in range(t.game_length):
                row = [t.uid, r + 1, _fmt(t.actions[r] * endowment), _fmt(t.states[r] * endowment), t.game_length]
                if with_groups:
                    row.append(t.group or "")
                writer.writerow(row)


def load_config(path) -> tuple[GameConfig, int | None]:
    """Parse a flat ``key = value`` config file into a GameConfig and seed."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise IngestionError(f"{path}:{lineno}: expected key=value")
        values[key.strip().lower()] = value.strip()
    known = {"endowment", "multiplier", "group_size", "rounds", "seed"}
    unknown = set(values) - known
    if unknown:
        raise IngestionError(f"{path}: unknown config keys {sorted(unknown)}")
    kwargs = {}
    try:
        if "endowment" in values:
            kwargs["endowment"] = float(values["endowment"])
        if "multiplier" in values:
            kwargs["multiplier"] = float(values["multiplier"])
        if "group_size" in values:
            kwargs["group_size"] = int(values["group_size"])
        if "rounds" in values:
            kwargs["rounds"] = int(values["rounds"])
        seed = int(values["seed"]) if "seed" in values else None
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    return GameConfig(**kwargs), seed
