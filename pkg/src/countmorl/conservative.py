"""Count-penalized conservative MDPs.

Two penalty modes share one interface:

* ``theory``: ``gamma * R_max / (1 - gamma) * error_bound(n_hat)``
* ``practical``: ``beta / sqrt(n_hat)`` if ``n_hat > 0`` else ``beta``

Combined ensemble counts can be fractional. A practical count in ``(0, 1)`` is
raised to 1 so the penalty never exceeds ``beta`` and stays non-increasing in
``n_hat`` across zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .counting import CountMode
from .estimation import EnsembleModel, ErrorBoundConfig, error_bound, error_bound_table
from .mdp import TabularMdp

THEORY = "theory"
PRACTICAL = "practical"


@dataclass(frozen=True)
class PenaltySpec:
    mode: str = PRACTICAL
    beta: float = 1.0
    bound_cfg: ErrorBoundConfig = field(default_factory=ErrorBoundConfig)
    count_mode: CountMode = CountMode.AVG
    alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "count_mode", CountMode.parse(self.count_mode))
        if self.mode not in (THEORY, PRACTICAL):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        # beta = 0 is allowed as the unpenalized baseline
        if self.mode == PRACTICAL and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def max_penalty(self, gamma: float, r_max: float) -> float:
        if self.mode == PRACTICAL:
            return self.beta
        return gamma * r_max / (1 - gamma)


def penalty(r: float, n_hat: float, spec: PenaltySpec, gamma: float, r_max: float) -> tuple[float, float]:
    """Return ``(penalized_reward, penalty_amount)`` for one pair."""
    if spec.mode == PRACTICAL:
        amount = spec.beta / math.sqrt(max(n_hat, 1.0)) if n_hat > 0 else spec.beta
    else:
        amount = gamma * r_max / (1 - gamma) * error_bound(n_hat, spec.bound_cfg)
    return r - amount, amount


def penalty_table(n_hat: np.ndarray, spec: PenaltySpec, gamma: float, r_max: float) -> np.ndarray:
    """Vectorized penalty amounts; equal to :func:`penalty` elementwise."""
    n_hat = np.asarray(n_hat, dtype=float)
    if spec.mode == PRACTICAL:
        return spec.beta / np.sqrt(np.maximum(n_hat, 1.0))
    return gamma * r_max / (1 - gamma) * error_bound_table(n_hat, spec.bound_cfg)


@dataclass(frozen=True)
class ConservativeMdp:
    """``base`` carries the completed model and ``r_tilde``; ``env_r_max`` is the
    declared reward bound of the true environment."""

    base: TabularMdp
    penalty_table: np.ndarray
    nhat_table: np.ndarray
    spec: PenaltySpec
    env_r_max: float

    @property
    def rtilde(self) -> np.ndarray:
        return self.base.reward


def conservative_from_transition(
    transition: np.ndarray,
    true_reward: np.ndarray,
    nhat: np.ndarray,
    spec: PenaltySpec,
    gamma: float,
    r_max: float,
    d0: np.ndarray,
    name: str = "",
    terminal: np.ndarray | None = None,
) -> ConservativeMdp:
    """Penalize ``true_reward`` with counts ``nhat`` over an already-completed transition tensor.

    ``terminal`` optionally marks known episode-ending states. The episode is
    over once one is entered, so their pairs become unpenalized self-loops
    even though the dataset never records an action there.
    """
    true_reward = np.asarray(true_reward, dtype=float)
    nhat = np.asarray(nhat, dtype=float)
    if true_reward.shape != transition.shape[:2] or nhat.shape != transition.shape[:2]:
        raise ValueError("reward / count tables do not match the transition shape")
    pen = penalty_table(nhat, spec, gamma, r_max)
    if terminal is not None:
        terminal = np.asarray(terminal, dtype=bool)
        if terminal.shape != nhat.shape[:1]:
            raise ValueError("terminal mask must have one entry per state")
        pen[terminal] = 0.0
        transition = transition.copy()
        idx = np.flatnonzero(terminal)
        transition[idx] = 0.0
        transition[idx, :, idx] = 1.0
    rtilde = true_reward - pen
    effective_rmax = max(float(np.abs(rtilde).max()), r_max)
    base = TabularMdp(transition, rtilde, gamma, d0, effective_rmax, name=name)
    for arr in (pen, nhat):
        arr.setflags(write=False)
    return ConservativeMdp(base, pen, nhat, spec, r_max)


def build_conservative_mdp(
    ensemble: EnsembleModel,
    counts,
    true_reward: np.ndarray,
    spec: PenaltySpec,
    gamma: float,
    r_max: float,
    d0: np.ndarray,
    terminal: np.ndarray | None = None,
) -> ConservativeMdp:
    """Ensemble-mean transitions (self-loop where unobserved) with count-penalized rewards.

    ``counts`` is anything with ``estimate_table(mode, alpha)``, e.g. a
    :class:`~countmorl.counting.CountEnsemble` or an exact-count oracle.
    ``terminal`` is passed through to :func:`conservative_from_transition`.
    """
    if (counts.num_states, counts.num_actions) != (ensemble.num_states, ensemble.num_actions):
        raise ValueError("count ensemble and model ensemble disagree on (S, A)")
    nhat = counts.estimate_table(spec.count_mode, spec.alpha)
    return conservative_from_transition(ensemble.mean_transition(), true_reward, nhat, spec,
                                        gamma, r_max, d0, name="conservative", terminal=terminal)


def save_penalty_audit(cmdp: ConservativeMdp, true_reward: np.ndarray, path) -> None:
    lines = ["s,a,r,nhat,penalty,rtilde"]
    S, A = cmdp.penalty_table.shape
    for s in range(S):
        for a in range(A):
            lines.append(f"{s},{a},{float(true_reward[s, a])!r},{float(cmdp.nhat_table[s, a])!r},"
                         f"{float(cmdp.penalty_table[s, a])!r},{float(cmdp.rtilde[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
