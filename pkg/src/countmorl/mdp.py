"""Exact finite-MDP machinery.

Policies are ``(S, A)`` row-stochastic arrays, value functions ``(S,)`` arrays
and visitation distributions ``(S, A)`` arrays summing to one. All solvers use
synchronous fixed-point iteration with a sup-norm stopping rule derived from the
contraction factor ``gamma``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

SIMPLEX_ATOL = 1e-9
_MAX_ITERS = 10_000_000


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP ``(S, A, P, r, d0, gamma)`` with reward bound ``r_max``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    r_max: float
    name: str = field(default="", compare=False)

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        d0 = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] == 0 or P.shape[1] == 0:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if d0.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {d0.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0) or np.any(np.abs(P.sum(-1) - 1) > SIMPLEX_ATOL):
            raise ValueError("transition rows must be probability distributions")
        if np.any(d0 < 0) or abs(d0.sum() - 1) > SIMPLEX_ATOL:
            raise ValueError("initial_dist must be a probability distribution")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if not np.all(np.isfinite(r)) or np.any(np.abs(r) > self.r_max):
            raise ValueError("|reward| must not exceed r_max")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def absorbing_states(self) -> np.ndarray:
        """Boolean mask of states whose every action self-loops with probability one."""
        idx = np.arange(self.num_states)
        return np.all(self.transition[idx, :, idx] == 1.0, axis=1)

    def replace(self, **changes) -> "TabularMdp":
        kwargs = dict(
            transition=self.transition,
            reward=self.reward,
            gamma=self.gamma,
            initial_dist=self.initial_dist,
            r_max=self.r_max,
            name=self.name,
        )
        kwargs.update(changes)
        return TabularMdp(**kwargs)


def random_mdp(
    num_states: int,
    num_actions: int,
    gamma: float = 0.9,
    seed: int = 0,
    r_max: float = 1.0,
    reward_low: float = 0.0,
    concentration: float = 1.0,
) -> TabularMdp:
    """Random MDP with Dirichlet rows, uniform rewards in ``[reward_low, r_max]`` and uniform d0."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    r = rng.uniform(reward_low, r_max, size=(num_states, num_actions))
    d0 = np.full(num_states, 1.0 / num_states)
    return TabularMdp(P, r, gamma, d0, r_max, name=f"synthetic/random-s{num_states}a{num_actions}-{seed}")


def check_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})"
        )
    if np.any(policy < 0) or np.any(np.abs(policy.sum(1) - 1) > SIMPLEX_ATOL):
        raise ValueError("policy rows must be probability distributions")
    return policy


def one_hot_policy(actions, num_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    policy = np.zeros((actions.size, num_actions))
    policy[np.arange(actions.size), actions] = 1.0
    return policy


def uniform_policy(num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_states, num_actions), 1.0 / num_actions)


def deterministic_policies(num_states: int, num_actions: int) -> Iterator[np.ndarray]:
    """Yield every deterministic policy as a one-hot table (A**S of them)."""
    for actions in itertools.product(range(num_actions), repeat=num_states):
        yield one_hot_policy(actions, num_actions)


def _policy_matrices(mdp: TabularMdp, policy: np.ndarray):
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    return P_pi, r_pi


def bellman_policy(mdp: TabularMdp, policy: np.ndarray, values: np.ndarray) -> np.ndarray:
    """One application of the policy Bellman operator ``T_pi``."""
    P_pi, r_pi = _policy_matrices(mdp, policy)
    return r_pi + mdp.gamma * P_pi @ values


def q_values(mdp: TabularMdp, values: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.transition @ values


def _stop_threshold(gamma: float, tol: float) -> float:
    # ||V_{k+1} - V_k|| <= tol (1-g)/g  implies  ||V_{k+1} - V_fixed|| <= tol
    return np.inf if gamma == 0 else tol * (1 - gamma) / gamma


def policy_evaluation(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Value of ``policy`` on ``mdp`` to within ``tol`` in sup-norm."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    policy = check_policy(mdp, policy)
    P_pi, r_pi = _policy_matrices(mdp, policy)
    threshold = _stop_threshold(mdp.gamma, tol)
    v = np.zeros(mdp.num_states)
    for _ in range(_MAX_ITERS):
        v_new = r_pi + mdp.gamma * P_pi @ v
        done = np.max(np.abs(v_new - v)) <= threshold
        v = v_new
        if done:
            return v
    raise RuntimeError("policy evaluation did not converge")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """One-hot greedy policy; ``np.argmax`` breaks ties toward the lowest action."""
    return one_hot_policy(np.argmax(q, axis=1), q.shape[1])


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values (within ``tol``) and the greedy one-hot policy w.r.t. them."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    threshold = _stop_threshold(mdp.gamma, tol)
    v = np.zeros(mdp.num_states)
    for _ in range(_MAX_ITERS):
        v_new = q_values(mdp, v).max(axis=1)
        done = np.max(np.abs(v_new - v)) <= threshold
        v = v_new
        if done:
            return v, greedy_policy(q_values(mdp, v))
    raise RuntimeError("value iteration did not converge")


def discounted_visitation(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Normalized discounted state-action occupancy ``d(s, a) = d(s) pi(a|s)``.

    Iterates ``d <- (1-g) d0 + g P_pi^T d`` from ``d0``; every iterate keeps unit
    mass and the L1 error contracts by ``gamma`` per step.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    policy = check_policy(mdp, policy)
    P_pi, _ = _policy_matrices(mdp, policy)
    d0 = mdp.initial_dist
    g = mdp.gamma
    threshold = _stop_threshold(g, tol)
    d = d0.copy()
    for _ in range(_MAX_ITERS):
        d_new = (1 - g) * d0 + g * (P_pi.T @ d)
        done = np.abs(d_new - d).sum() <= threshold
        d = d_new
        if done:
            break
    else:
        raise RuntimeError("visitation did not converge")
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return d[:, None] * policy


def scalar_return(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-10) -> float:
    """Expected discounted return from ``d0``."""
    return float(mdp.initial_dist @ policy_evaluation(mdp, policy, tol))


def total_variation(p, q) -> float:
    """Total variation distance, half the L1 distance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    for x in (p, q):
        if np.any(x < -SIMPLEX_ATOL) or abs(x.sum() - 1) > 1e-8:
            raise ValueError("inputs must be probability vectors")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def row_total_variation(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Vectorized TV over the last axis, without simplex validation."""
    return np.minimum(1.0, 0.5 * np.abs(np.asarray(P) - np.asarray(Q)).sum(-1))
