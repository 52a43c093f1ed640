"""8x8 lava grid worlds and the Q-learning behavior policy that produces replay buffers.

Layout files use one row per line: ``.`` free, ``L`` lava, ``S`` start, ``G`` goal.
States are indexed ``row * width + col`` with row 0 at the top; actions are
up, down, left, right.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import DatasetMeta, OfflineDataset, sample_cumulative
from .mdp import TabularMdp, greedy_policy

LAYOUT_KINDS = ("empty", "bridge", "cliff", "zigzag")
ACTIONS = ("up", "down", "left", "right")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

STEP_REWARD = -0.01
GOAL_REWARD = 1.0
LAVA_REWARD = -1.0
R_MAX = 1.0
GAMMA = 0.99


@dataclass(frozen=True)
class GridLayout:
    kind: str
    lava_cells: frozenset
    start: tuple[int, int]
    goal: tuple[int, int]
    width: int = 8
    height: int = 8

    def __post_init__(self):
        cells = set(self.lava_cells) | {self.start, self.goal}
        for r, c in cells:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ValueError(f"cell {(r, c)} outside the {self.height}x{self.width} grid")
        if self.start in self.lava_cells or self.goal in self.lava_cells:
            raise ValueError("start and goal must not be lava")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")

    def index(self, cell) -> int:
        return cell[0] * self.width + cell[1]


def parse_layout(text: str, kind: str = "custom") -> GridLayout:
    rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("layout rows must be non-empty and of equal length")
    lava, start, goal = set(), [], []
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch == "L":
                lava.add((r, c))
            elif ch == "S":
                start.append((r, c))
            elif ch == "G":
                goal.append((r, c))
            elif ch != ".":
                raise ValueError(f"row {r + 1}: unknown cell character {ch!r}")
    if len(start) != 1 or len(goal) != 1:
        raise ValueError("layout needs exactly one S and one G")
    return GridLayout(kind, frozenset(lava), start[0], goal[0], width=len(rows[0]), height=len(rows))


def load_layout(kind_or_path) -> GridLayout:
    """Load a bundled layout by name (``empty``, ``bridge``, ...) or a layout file path."""
    name = str(kind_or_path).lower()
    if name in LAYOUT_KINDS:
        text = resources.files("countmorl").joinpath("layouts", f"{name}.txt").read_text()
        return parse_layout(text, kind=name)
    path = Path(kind_or_path)
    return parse_layout(path.read_text(), kind=path.stem)


def build_gridworld(layout: GridLayout, gamma: float = GAMMA) -> TabularMdp:
    H, W = layout.height, layout.width
    S, A = H * W, len(MOVES)
    goal = layout.index(layout.goal)
    lava = {layout.index(c) for c in layout.lava_cells}
    P = np.zeros((S, A, S))
    r = np.zeros((S, A))
    for row in range(H):
        for col in range(W):
            s = row * W + col
            if s == goal or s in lava:
                P[s, :, s] = 1.0
                continue
            for a, (dr, dc) in enumerate(MOVES):
                nr = min(max(row + dr, 0), H - 1)
                nc = min(max(col + dc, 0), W - 1)
                s2 = nr * W + nc
                P[s, a, s2] = 1.0
                r[s, a] = GOAL_REWARD if s2 == goal else LAVA_REWARD if s2 in lava else STEP_REWARD
    d0 = np.zeros(S)
    d0[layout.index(layout.start)] = 1.0
    return TabularMdp(P, r, gamma, d0, R_MAX, name=f"grid/{layout.kind}")


def gridworld(kind: str, gamma: float = GAMMA) -> TabularMdp:
    return build_gridworld(load_layout(kind), gamma)


@dataclass(frozen=True)
class BehaviorTrainConfig:
    """Tabular Q-learning settings for the behavior policy (artifact defaults)."""

    episodes: int = 1000
    epsilon: float = 0.3
    learning_rate: float = 0.5
    max_episode_steps: int = 100
    seed: int = 0
    # keep training past ``episodes`` until the replay buffer holds this many transitions
    min_transitions: int = 0

    def __post_init__(self):
        if self.episodes < 0 or self.max_episode_steps <= 0 or self.min_transitions < 0:
            raise ValueError("episodes must be >= 0 and max_episode_steps > 0")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")


def q_learning(mdp: TabularMdp, cfg: BehaviorTrainConfig) -> tuple[np.ndarray, OfflineDataset]:
    """Epsilon-greedy tabular Q-learning; returns the final Q-table and the full replay buffer.

    Runs ``cfg.episodes`` episodes, then more whole episodes until at least
    ``cfg.min_transitions`` transitions were recorded.
    """
    rng = np.random.default_rng(cfg.seed)
    S, A = mdp.num_states, mdp.num_actions
    cum_P = np.cumsum(mdp.transition, axis=-1)
    cum_d0 = np.cumsum(mdp.initial_dist)
    absorbing = mdp.absorbing_states()
    reward = mdp.reward
    gamma, lr, eps = mdp.gamma, cfg.learning_rate, cfg.epsilon
    Q = np.zeros((S, A))
    buf_s, buf_a, buf_s2 = [], [], []
    episode = 0
    while episode < cfg.episodes or len(buf_s) < cfg.min_transitions:
        episode += 1
        s = sample_cumulative(cum_d0, rng.random())
        for _ in range(cfg.max_episode_steps):
            if rng.random() < eps:
                a = int(rng.integers(A))
            else:
                a = int(np.argmax(Q[s]))
            s2 = sample_cumulative(cum_P[s, a], rng.random())
            buf_s.append(s)
            buf_a.append(a)
            buf_s2.append(s2)
            target = reward[s, a] + gamma * Q[s2].max()
            Q[s, a] += lr * (target - Q[s, a])
            if absorbing[s2]:
                break
            s = s2
    s_col = np.asarray(buf_s, dtype=np.int64)
    a_col = np.asarray(buf_a, dtype=np.int64)
    meta = DatasetMeta(env_id=mdp.name, seed=cfg.seed, generator=f"qlearning-replay(eps={cfg.epsilon})")
    data = OfflineDataset(S, A, s_col, a_col, reward[s_col, a_col], np.asarray(buf_s2, dtype=np.int64), meta)
    return Q, data


def train_behavior(mdp: TabularMdp, cfg: BehaviorTrainConfig) -> tuple[np.ndarray, OfflineDataset]:
    """Greedy policy of the final Q-table plus the replay buffer of every training transition."""
    Q, data = q_learning(mdp, cfg)
    return greedy_policy(Q), data


def epsilon_greedy(policy: np.ndarray, epsilon: float) -> np.ndarray:
    """Mix a policy with the uniform policy: ``(1 - eps) pi + eps / A``."""
    A = policy.shape[1]
    return (1 - epsilon) * np.asarray(policy, dtype=float) + epsilon / A


def reachable_pairs(mdp: TabularMdp) -> np.ndarray:
    """Pairs ``(s, a)`` that an episode can record: ``s`` reachable from ``d0`` without
    passing through an absorbing state, and ``s`` itself not absorbing."""
    absorbing = mdp.absorbing_states()
    support = mdp.transition.sum(axis=1) > 0
    frontier = list(np.flatnonzero(mdp.initial_dist > 0))
    seen = set(frontier)
    while frontier:
        s = frontier.pop()
        if absorbing[s]:
            continue
        for s2 in np.flatnonzero(support[s]):
            if s2 not in seen:
                seen.add(int(s2))
                frontier.append(int(s2))
    mask = np.zeros((mdp.num_states, mdp.num_actions), dtype=bool)
    for s in seen:
        if not absorbing[s]:
            mask[s] = True
    return mask
