"""Approximate state-action counts from ensembles of hash-code counters.

Each member pairs a feature map ``phi_i(s, a)`` with a sign-of-random-projection
hash of ``d`` bits; the member's count for a pair is the number of ingested
transitions sharing its code. Members are combined as the mean count shifted by
``alpha`` sample standard deviations (LC / AVG / UC).
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataset import OfflineDataset


class CountMode(str, enum.Enum):
    LC = "LC"
    AVG = "AVG"
    UC = "UC"

    @classmethod
    def parse(cls, value) -> "CountMode":
        return value if isinstance(value, cls) else cls(str(value).upper())


class OneHot:
    """Indicator vector of the pair index ``s * A + a``."""

    def __init__(self, num_states: int, num_actions: int):
        self.num_states = num_states
        self.num_actions = num_actions
        self.dim = num_states * num_actions

    def matrix(self) -> np.ndarray:
        """Features of every pair, row ``s * A + a``."""
        return np.eye(self.dim)

    def __call__(self, s: int, a: int) -> np.ndarray:
        return self.matrix()[s * self.num_actions + a]


class NoisyOneHot(OneHot):
    """One-hot plus a Gaussian perturbation of scale ``rho``, frozen at construction."""

    def __init__(self, num_states: int, num_actions: int, rho: float = 0.05, seed: int = 0):
        super().__init__(num_states, num_actions)
        self.rho = rho
        noise = np.random.default_rng(seed).normal(0.0, rho, size=(self.dim, self.dim))
        self._features = np.eye(self.dim) + noise
        self._features.setflags(write=False)

    def matrix(self) -> np.ndarray:
        return self._features


class HashCounter:
    """``d``-bit sign-projection hash with a bucket count table."""

    def __init__(self, dim: int, code_bits: int, seed: int = 0):
        if code_bits < 1:
            raise ValueError("code_bits must be positive")
        self.dim = dim
        self.code_bits = code_bits
        self.projections = np.random.default_rng(seed).standard_normal((code_bits, dim))
        self.projections.setflags(write=False)
        self.table: Counter = Counter()
        self.total = 0

    def codes(self, features: np.ndarray) -> list[int]:
        """Integer codes for a batch of feature rows; a zero projection maps to bit 1."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.dim:
            raise ValueError(f"feature dimension {features.shape[1]} != counter dimension {self.dim}")
        bits = (features @ self.projections.T) >= 0
        weights = [1 << i for i in range(self.code_bits)]
        return [sum(w for w, b in zip(weights, row) if b) for row in bits.tolist()]

    def code(self, vector) -> int:
        return self.codes(vector)[0]

    def add_codes(self, codes, counts=None) -> None:
        counts = [1] * len(codes) if counts is None else counts
        for c, k in zip(codes, counts):
            if k:
                self.table[c] += int(k)
                self.total += int(k)

    def count(self, code: int) -> int:
        return self.table.get(code, 0)

    def reset(self) -> None:
        self.table.clear()
        self.total = 0


@dataclass
class CountEnsemble:
    feature_maps: list
    counters: list
    alpha: float = 0.5

    def __post_init__(self):
        if len(self.feature_maps) != len(self.counters) or not self.counters:
            raise ValueError("need one counter per feature map and at least one member")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        shapes = {(f.num_states, f.num_actions) for f in self.feature_maps}
        if len(shapes) != 1:
            raise ValueError("feature maps disagree on (S, A)")
        self.num_states, self.num_actions = shapes.pop()
        for f, c in zip(self.feature_maps, self.counters):
            if f.dim != c.dim:
                raise ValueError(f"feature dimension {f.dim} != counter dimension {c.dim}")
        # pair -> code lookup, row s * A + a
        self._pair_codes = [c.codes(f.matrix()) for f, c in zip(self.feature_maps, self.counters)]
        self._member_tables = None

    @property
    def n_members(self) -> int:
        return len(self.counters)

    def pair_codes(self, member: int) -> list[int]:
        return self._pair_codes[member]

    def reset(self) -> None:
        for c in self.counters:
            c.reset()
        self._member_tables = None

    def member_count(self, member: int, s: int, a: int) -> int:
        if not 0 <= member < self.n_members:
            raise IndexError(f"member index {member} out of range")
        return self.counters[member].count(self._pair_codes[member][s * self.num_actions + a])

    def member_tables(self) -> np.ndarray:
        """``(N, S, A)`` table of every member's count for every pair."""
        if self._member_tables is None:
            out = np.zeros((self.n_members, self.num_states * self.num_actions))
            for i, (codes, counter) in enumerate(zip(self._pair_codes, self.counters)):
                out[i] = [counter.count(c) for c in codes]
            self._member_tables = out.reshape(self.n_members, self.num_states, self.num_actions)
        return self._member_tables

    def estimate_count(self, s: int, a: int, mode, alpha: float | None = None) -> float:
        return float(self.estimate_table(mode, alpha)[s, a])

    def estimate_table(self, mode, alpha: float | None = None) -> np.ndarray:
        return combine_counts(self.member_tables(), mode, self.alpha if alpha is None else alpha)


def combine_counts(member_counts: np.ndarray, mode, alpha: float) -> np.ndarray:
    """Mean of member counts shifted by ``alpha`` sample standard deviations.

    LC results may be negative and are returned unclamped.
    """
    mode = CountMode.parse(mode)
    counts = np.asarray(member_counts, dtype=float)
    n = counts.shape[0]
    mean = counts.mean(axis=0)
    if mode is CountMode.AVG or alpha == 0:
        return mean
    if n < 2:
        raise ValueError(f"{mode.value} count with alpha > 0 needs at least 2 members")
    sigma = np.sqrt(((counts - mean) ** 2).sum(axis=0) / (n - 1))
    return mean - alpha * sigma if mode is CountMode.LC else mean + alpha * sigma


def make_count_ensemble(
    num_states: int,
    num_actions: int,
    n_members: int = 5,
    code_bits: int = 20,
    feature_map: str = "onehot",
    alpha: float = 0.5,
    rho: float = 0.05,
    seed: int = 0,
) -> CountEnsemble:
    """Build ``n_members`` independent (feature map, counter) pairs from one seed."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    children = np.random.SeedSequence(seed).spawn(2 * n_members)
    maps, counters = [], []
    for i in range(n_members):
        fseed = int(children[2 * i].generate_state(1)[0])
        hseed = int(children[2 * i + 1].generate_state(1)[0])
        if feature_map == "onehot":
            fmap = OneHot(num_states, num_actions)
        elif feature_map == "noisy_onehot":
            fmap = NoisyOneHot(num_states, num_actions, rho=rho, seed=fseed)
        else:
            raise ValueError(f"unknown feature map {feature_map!r}")
        maps.append(fmap)
        counters.append(HashCounter(fmap.dim, code_bits, seed=hseed))
    return CountEnsemble(maps, counters, alpha)


def ingest_dataset(ensemble: CountEnsemble, data: OfflineDataset) -> None:
    """Add ``phi_i(s, a)`` of every transition to every member's counter."""
    if (data.num_states, data.num_actions) != (ensemble.num_states, ensemble.num_actions):
        raise ValueError("dataset (S, A) does not match the count ensemble")
    pair = data.states * data.num_actions + data.actions
    multiplicity = np.bincount(pair, minlength=data.num_states * data.num_actions)
    # order-independent: bucket totals only depend on per-pair multiplicities
    for codes, counter in zip(ensemble._pair_codes, ensemble.counters):
        counter.add_codes(codes, multiplicity.tolist())
    ensemble._member_tables = None


class ExactCountOracle:
    """Drop-in for :class:`CountEnsemble` that returns exact counts in every mode."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=float)
        self.num_states, self.num_actions = self.counts.shape
        self.n_members = 1
        self.alpha = 0.0

    def estimate_table(self, mode=None, alpha=None) -> np.ndarray:
        return self.counts.copy()

    def estimate_count(self, s, a, mode=None, alpha=None) -> float:
        return float(self.counts[s, a])


@dataclass(frozen=True)
class CollisionReport:
    member: int
    distinct_codes: int
    colliding_pairs: int
    colliding_observed_pairs: int
    injective_on_data: bool
    max_abs_error: float


def collision_audit(ensemble: CountEnsemble, true_counts: np.ndarray) -> list[CollisionReport]:
    """Per member: code collisions among all pairs and among observed pairs, and the
    worst count error against ``true_counts``."""
    true_counts = np.asarray(true_counts)
    flat_true = true_counts.reshape(-1)
    tables = ensemble.member_tables()
    reports = []
    for i in range(ensemble.n_members):
        codes = ensemble.pair_codes(i)
        multiplicity = Counter(codes)
        colliding = sum(1 for c in codes if multiplicity[c] > 1)
        observed_codes = Counter(c for c, n in zip(codes, flat_true) if n > 0)
        colliding_obs = sum(1 for c, n in zip(codes, flat_true) if n > 0 and observed_codes[c] > 1)
        # a pair's count is wrong iff its code is shared with an observed pair other than itself
        reports.append(CollisionReport(
            member=i,
            distinct_codes=len(multiplicity),
            colliding_pairs=colliding,
            colliding_observed_pairs=colliding_obs,
            injective_on_data=colliding_obs == 0,
            max_abs_error=float(np.abs(tables[i] - true_counts).max()),
        ))
    return reports

