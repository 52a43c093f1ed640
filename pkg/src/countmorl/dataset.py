"""Offline transition datasets: storage, exact counts, generation and CSV I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .mdp import TabularMdp, check_policy

CSV_COLUMNS = "s,a,r,s'"


class DatasetParseError(ValueError):
    """Malformed dataset file; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DatasetValidationError(ValueError):
    pass


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class DatasetMeta:
    env_id: str = ""
    seed: int = 0
    generator: str = ""


def _column(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OfflineDataset:
    """Immutable columnar dataset ``D = {(s_i, a_i, r_i, s'_i)}``."""

    num_states: int
    num_actions: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        for name, dtype in (("states", np.int64), ("actions", np.int64),
                            ("rewards", np.float64), ("next_states", np.int64)):
            object.__setattr__(self, name, _column(getattr(self, name), dtype))
        n = self.states.size
        if not (self.actions.size == self.rewards.size == self.next_states.size == n):
            raise DatasetValidationError("column lengths differ")
        if self.num_states <= 0 or self.num_actions <= 0:
            raise DatasetValidationError("num_states and num_actions must be positive")
        for name, col, bound in (("state", self.states, self.num_states),
                                 ("action", self.actions, self.num_actions),
                                 ("next_state", self.next_states, self.num_states)):
            bad = np.flatnonzero((col < 0) | (col >= bound))
            if bad.size:
                i = int(bad[0])
                raise DatasetValidationError(f"transition {i}: {name} index {col[i]} out of range [0, {bound})")
        if not np.all(np.isfinite(self.rewards)):
            raise DatasetValidationError("rewards must be finite")

    @classmethod
    def from_transitions(cls, num_states, num_actions, transitions, meta=None) -> "OfflineDataset":
        cols = list(zip(*transitions)) if transitions else ([], [], [], [])
        return cls(num_states, num_actions, *cols, meta=meta or DatasetMeta())

    @classmethod
    def empty(cls, num_states, num_actions, meta=None) -> "OfflineDataset":
        return cls.from_transitions(num_states, num_actions, [], meta)

    def __len__(self) -> int:
        return int(self.states.size)

    def __getitem__(self, i) -> Transition:
        return Transition(int(self.states[i]), int(self.actions[i]),
                          float(self.rewards[i]), int(self.next_states[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (self.num_states == other.num_states and self.num_actions == other.num_actions
                and self.meta == other.meta
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards)
                and np.array_equal(self.next_states, other.next_states))

    __hash__ = None

    def subset(self, index, meta=None) -> "OfflineDataset":
        index = np.asarray(index, dtype=np.int64)
        return OfflineDataset(self.num_states, self.num_actions, self.states[index],
                              self.actions[index], self.rewards[index], self.next_states[index],
                              meta=meta or self.meta)


def exact_counts(data: OfflineDataset) -> np.ndarray:
    """``n(s, a)`` as an ``(S, A)`` integer table."""
    counts = np.zeros((data.num_states, data.num_actions), dtype=np.int64)
    np.add.at(counts, (data.states, data.actions), 1)
    return counts


def transition_counts(data: OfflineDataset) -> np.ndarray:
    """``n(s, a, s')`` as an ``(S, A, S)`` integer table."""
    counts = np.zeros((data.num_states, data.num_actions, data.num_states), dtype=np.int64)
    np.add.at(counts, (data.states, data.actions, data.next_states), 1)
    return counts


def empirical_behavior_policy(data: OfflineDataset) -> np.ndarray:
    """Per-state action frequencies; uniform where a state never appears."""
    counts = exact_counts(data).astype(float)
    totals = counts.sum(1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / data.num_actions)
    return np.where(totals > 0, counts / np.maximum(totals, 1), uniform)


def sample_cumulative(cum_row: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cum_row, u, side="right"))
    return min(idx, cum_row.size - 1)


def generate_dataset(
    mdp: TabularMdp,
    behavior: np.ndarray,
    n_transitions: int,
    seed: int = 0,
    episode_cap: int = 100,
    env_id: str = "",
) -> OfflineDataset:
    """Roll out ``behavior`` from ``d0`` until ``n_transitions`` are collected.

    Episodes reset (with a fresh draw from ``d0``) after entering an absorbing
    state or after ``episode_cap`` steps.
    """
    if n_transitions < 0 or episode_cap <= 0:
        raise ValueError("n_transitions must be >= 0 and episode_cap > 0")
    behavior = check_policy(mdp, behavior)
    rng = np.random.default_rng(seed)
    cum_P = np.cumsum(mdp.transition, axis=-1)
    cum_pi = np.cumsum(behavior, axis=-1)
    cum_d0 = np.cumsum(mdp.initial_dist)
    absorbing = mdp.absorbing_states()

    s_col = np.empty(n_transitions, dtype=np.int64)
    a_col = np.empty(n_transitions, dtype=np.int64)
    s2_col = np.empty(n_transitions, dtype=np.int64)
    s = sample_cumulative(cum_d0, rng.random())
    steps = 0
    for i in range(n_transitions):
        a = sample_cumulative(cum_pi[s], rng.random())
        s2 = sample_cumulative(cum_P[s, a], rng.random())
        s_col[i], a_col[i], s2_col[i] = s, a, s2
        steps += 1
        if absorbing[s2] or steps >= episode_cap:
            s = sample_cumulative(cum_d0, rng.random())
            steps = 0
        else:
            s = s2
    meta = DatasetMeta(env_id=env_id or mdp.name, seed=seed, generator="policy-rollout")
    return OfflineDataset(mdp.num_states, mdp.num_actions, s_col, a_col,
                          mdp.reward[s_col, a_col], s2_col, meta=meta)


def split_heldout(data: OfflineDataset, k: int, seed: int = 0) -> tuple[OfflineDataset, OfflineDataset]:
    """Uniformly random disjoint split into ``(train, heldout)`` with ``|heldout| = k``."""
    if k < 0 or k > len(data):
        raise ValueError(f"cannot hold out {k} of {len(data)} transitions")
    perm = np.random.default_rng(seed).permutation(len(data))
    held = np.sort(perm[:k])
    train = np.sort(perm[k:])
    return data.subset(train), data.subset(held)


def save_dataset(data: OfflineDataset, path) -> None:
    lines = [
        f"# env_id={data.meta.env_id}",
        f"# seed={data.meta.seed}",
        f"# generator={data.meta.generator}",
        f"# num_states={data.num_states}",
        f"# num_actions={data.num_actions}",
        CSV_COLUMNS,
    ]
    lines += [f"{s},{a},{r!r},{s2}" for s, a, r, s2 in
              zip(data.states.tolist(), data.actions.tolist(), data.rewards.tolist(), data.next_states.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> OfflineDataset:
    header: dict[str, str] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if rows:
                    raise DatasetParseError(lineno, "metadata after transitions")
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise DatasetParseError(lineno, f"expected key=value, got {line!r}")
                header[key.strip()] = value.strip()
                continue
            if line == CSV_COLUMNS:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DatasetParseError(lineno, f"expected 4 fields, got {len(parts)}")
            try:
                rows.append((int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise DatasetParseError(lineno, str(exc)) from None
    try:
        S = int(header["num_states"])
        A = int(header["num_actions"])
        meta = DatasetMeta(header.get("env_id", ""), int(header.get("seed", 0)), header.get("generator", ""))
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(0, f"bad or missing header field: {exc}") from None
    return OfflineDataset.from_transitions(S, A, rows, meta)
