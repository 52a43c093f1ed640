"""Policy learning on the conservative model.

``exact_plan`` runs value iteration on the conservative MDP. ``rollout_plan``
follows the model-rollout loop: short branched rollouts from dataset states
through randomly chosen ensemble members, count-penalized rewards stored in a
model buffer, and Q-learning on batches mixing real and synthetic transitions.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conservative import ConservativeMdp, PenaltySpec, penalty_table
from .dataset import OfflineDataset
from .estimation import EnsembleModel
from .mdp import greedy_policy, value_iteration


def exact_plan(cmdp: ConservativeMdp, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Greedy optimal policy and values of the conservative MDP."""
    values, policy = value_iteration(cmdp.base, tol)
    return policy, values


@dataclass(frozen=True)
class RolloutConfig:
    epochs: int = 50
    rollout_batch: int = 100
    horizon: int = 5
    updates_per_epoch: int = 50
    batch_size: int = 256
    real_ratio: float = 0.05
    q_learning_rate: float = 0.1
    exploration_eps: float = 0.1
    seed: int = 0
    model_buffer_capacity: int = 100_000

    def __post_init__(self):
        if min(self.epochs, self.horizon, self.updates_per_epoch, self.batch_size,
               self.model_buffer_capacity) <= 0 or self.rollout_batch < 0:
            raise ValueError("rollout counts and sizes must be positive")
        if not 0 <= self.real_ratio <= 1 or not 0 <= self.exploration_eps <= 1:
            raise ValueError("real_ratio and exploration_eps must lie in [0, 1]")
        if not 0 < self.q_learning_rate <= 1:
            raise ValueError("q_learning_rate must lie in (0, 1]")


class ModelBuffer:
    """Bounded FIFO of synthetic transitions ``(s, a, r_hat, n_hat, penalty, r_tilde, s')``."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.raw_rewards = np.zeros(capacity)
        self.nhat = np.zeros(capacity)
        self.penalties = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros(capacity, dtype=np.int64)
        self.members = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r_hat, n_hat, pen, r_tilde, s2, member=0) -> None:
        i = self._next
        self.states[i], self.actions[i], self.next_states[i] = s, a, s2
        self.raw_rewards[i], self.nhat[i], self.penalties[i], self.rewards[i] = r_hat, n_hat, pen, r_tilde
        self.members[i] = member
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, k: int):
        idx = rng.integers(0, self._size, size=k)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]

    def ordered(self) -> dict:
        """Contents oldest-first."""
        order = (np.arange(self._size) + (self._next - self._size)) % self.capacity
        return {name: getattr(self, name)[order] for name in
                ("states", "actions", "raw_rewards", "nhat", "penalties", "rewards", "next_states", "members")}


class RolloutPlanner:
    """Stateful rollout planner; :func:`rollout_plan` is the one-call wrapper."""

    def __init__(self, ensemble: EnsembleModel, counts, data: OfflineDataset, true_reward: np.ndarray,
                 spec: PenaltySpec, cfg: RolloutConfig, gamma: float, r_max: float,
                 terminal: np.ndarray | None = None):
        if len(data) == 0:
            raise ValueError("rollout planning needs a non-empty dataset")
        self.ensemble = ensemble
        self.data = data
        self.spec = spec
        self.cfg = cfg
        self.gamma = gamma
        self.true_reward = np.asarray(true_reward, dtype=float)
        S, A = ensemble.num_states, ensemble.num_actions
        self.nhat = counts.estimate_table(spec.count_mode, spec.alpha)
        self.penalties = penalty_table(self.nhat, spec, gamma, r_max)
        self.terminal = np.zeros(S, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool)
        self.penalties[self.terminal] = 0.0
        # per-member completed rows: self-loop where that member never observed the pair
        self.member_cum = np.stack([np.cumsum(m.completed(), axis=-1) for m in ensemble.members])
        self.real_rewards = self.true_reward[data.states, data.actions] - self.penalties[data.states, data.actions]
        self.Q = np.zeros((S, A))
        self.buffer = ModelBuffer(cfg.model_buffer_capacity)
        self.rng = np.random.default_rng(cfg.seed)
        self.real_fraction_log: list[float] = []

    def _act(self, s: int) -> int:
        if self.rng.random() < self.cfg.exploration_eps:
            return int(self.rng.integers(self.Q.shape[1]))
        return int(np.argmax(self.Q[s]))

    def rollouts(self) -> None:
        cfg, rng = self.cfg, self.rng
        n_members = self.ensemble.n_members
        for _ in range(cfg.rollout_batch):
            s = int(self.data.states[rng.integers(len(self.data))])
            for _ in range(cfg.horizon):
                a = self._act(s)
                i = int(rng.integers(n_members))
                cum = self.member_cum[i, s, a]
                s2 = min(int(np.searchsorted(cum, rng.random(), side="right")), cum.size - 1)
                r_hat = self.true_reward[s, a]
                pen = self.penalties[s, a]
                self.buffer.add(s, a, r_hat, self.nhat[s, a], pen, r_hat - pen, s2, member=i)
                if self.terminal[s2]:
                    break
                s = s2

    def _batch(self):
        cfg, rng = self.cfg, self.rng
        if len(self.buffer) == 0:
            n_real = cfg.batch_size
        else:
            n_real = int(rng.binomial(cfg.batch_size, cfg.real_ratio))
        self.real_fraction_log.append(n_real / cfg.batch_size)
        idx = rng.integers(0, len(self.data), size=n_real)
        s_r, a_r = self.data.states[idx], self.data.actions[idx]
        r_r, s2_r = self.real_rewards[idx], self.data.next_states[idx]
        if n_real == cfg.batch_size:
            return s_r, a_r, r_r, s2_r
        s_m, a_m, r_m, s2_m = self.buffer.sample(rng, cfg.batch_size - n_real)
        return (np.concatenate([s_r, s_m]), np.concatenate([a_r, a_m]),
                np.concatenate([r_r, r_m]), np.concatenate([s2_r, s2_m]))

    def update(self) -> None:
        s, a, r, s2 = self._batch()
        # nothing is earned after a terminal state
        target = r + self.gamma * np.where(self.terminal[s2], 0.0, self.Q[s2].max(axis=1))
        td = target - self.Q[s, a]
        # average duplicate pairs within the batch so the step never exceeds the learning rate
        total = np.zeros_like(self.Q)
        hits = np.zeros_like(self.Q)
        np.add.at(total, (s, a), td)
        np.add.at(hits, (s, a), 1.0)
        seen = hits > 0
        self.Q[seen] += self.cfg.q_learning_rate * total[seen] / hits[seen]

    def run(self) -> np.ndarray:
        for _ in range(self.cfg.epochs):
            self.rollouts()
            for _ in range(self.cfg.updates_per_epoch):
                self.update()
        return greedy_policy(self.Q)


def rollout_plan(ensemble: EnsembleModel, counts, data: OfflineDataset, true_reward: np.ndarray,
                 spec: PenaltySpec, cfg: RolloutConfig, gamma: float, r_max: float,
                 terminal: np.ndarray | None = None) -> np.ndarray:
    """Greedy policy of the final Q-table after ``cfg.epochs`` rollout / update rounds."""
    return RolloutPlanner(ensemble, counts, data, true_reward, spec, cfg, gamma, r_max, terminal).run()


def save_policy(policy: np.ndarray, path) -> None:
    lines = ["s,a,prob"]
    for s in range(policy.shape[0]):
        for a in range(policy.shape[1]):
            lines.append(f"{s},{a},{float(policy[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_policy(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines()[1:] if line.strip()]
    S = max(int(r[0]) for r in rows) + 1
    A = max(int(r[1]) for r in rows) + 1
    policy = np.zeros((S, A))
    for s, a, p in rows:
        policy[int(s), int(a)] = float(p)
    return policy
