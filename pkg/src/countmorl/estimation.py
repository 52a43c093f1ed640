"""Maximum-likelihood transition models, bootstrap ensembles and the count-based error bound."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import OfflineDataset, exact_counts, transition_counts
from .mdp import TabularMdp, row_total_variation


@dataclass(frozen=True)
class MleModel:
    """Empirical next-state frequencies. Rows with ``observed == False`` are all-zero
    and must not be read as distributions; use :meth:`completed` for a full model."""

    p_hat: np.ndarray
    observed: np.ndarray
    source_counts: np.ndarray

    @property
    def num_states(self) -> int:
        return self.p_hat.shape[0]

    @property
    def num_actions(self) -> int:
        return self.p_hat.shape[1]

    def completed(self) -> np.ndarray:
        """Transition tensor with unobserved rows replaced by self-loops."""
        P = self.p_hat.copy()
        s_idx, a_idx = np.nonzero(~self.observed)
        P[s_idx, a_idx, :] = 0.0
        P[s_idx, a_idx, s_idx] = 1.0
        return P

    def log_likelihood(self, data: OfflineDataset) -> float:
        probs = self.p_hat[data.states, data.actions, data.next_states]
        return float(np.log(probs).sum())


def fit_mle(data: OfflineDataset) -> MleModel:
    n_sas = transition_counts(data).astype(float)
    n_sa = exact_counts(data)
    observed = n_sa > 0
    p_hat = np.divide(n_sas, n_sa[..., None], out=np.zeros_like(n_sas), where=observed[..., None])
    for arr in (p_hat, observed, n_sa):
        arr.setflags(write=False)
    return MleModel(p_hat, observed, n_sa)


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple
    seed: int = 0

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        shapes = {m.p_hat.shape for m in self.members}
        if len(shapes) != 1:
            raise ValueError("ensemble members disagree on (S, A)")

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def num_states(self) -> int:
        return self.members[0].num_states

    @property
    def num_actions(self) -> int:
        return self.members[0].num_actions

    def mean_transition(self) -> np.ndarray:
        """Mean of members' rows over the members that observed each pair; self-loop
        where no member did."""
        stacked = np.stack([m.p_hat for m in self.members])
        observed = np.stack([m.observed for m in self.members])
        n_obs = observed.sum(0)
        P = stacked.sum(0) / np.maximum(n_obs, 1)[..., None]
        s_idx, a_idx = np.nonzero(n_obs == 0)
        P[s_idx, a_idx, :] = 0.0
        P[s_idx, a_idx, s_idx] = 1.0
        return P / P.sum(-1, keepdims=True)

    def observed_any(self) -> np.ndarray:
        return np.any(np.stack([m.observed for m in self.members]), axis=0)


def fit_ensemble(data: OfflineDataset, n_members: int, seed: int = 0, include_plain: bool = False) -> EnsembleModel:
    """``n_members`` MLE models on independent full-size bootstrap resamples.

    With ``include_plain`` member 0 is fit on the raw dataset instead.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(data)
    members = []
    for i in range(n_members):
        if include_plain and i == 0:
            members.append(fit_mle(data))
        else:
            members.append(fit_mle(data.subset(rng.integers(0, n, size=n) if n else [])))
    return EnsembleModel(tuple(members), seed)


def mean_pairwise_tv(ensemble: EnsembleModel) -> float:
    """Mean TV between member rows over pairs observed by both members of each member pair."""
    total, count = 0.0, 0
    ms = ensemble.members
    for i in range(len(ms)):
        for j in range(i + 1, len(ms)):
            both = ms[i].observed & ms[j].observed
            if both.any():
                tv = row_total_variation(ms[i].p_hat[both], ms[j].p_hat[both])
                total += tv.sum()
                count += tv.size
    return total / count if count else 0.0


@dataclass(frozen=True)
class ErrorBoundConfig:
    """``delta`` and ``log|M|``; the latter is a calibration knob since the tabular
    model class is not finite."""

    delta: float = 0.1
    log_model_class: float = 2.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.log_model_class > 0:
            raise ValueError("log_model_class must be positive")

    @property
    def log_term(self) -> float:
        return self.log_model_class + math.log(1.0 / self.delta)


def default_log_model_class(num_states: int, multiplier: float = 1.0) -> float:
    return multiplier * (2.0 + num_states * math.log(num_states))


def error_bound(n_hat: float, cfg: ErrorBoundConfig) -> float:
    """``min(1, sqrt(2 log(|M|/delta) / n_hat))``, and 1 when ``n_hat <= 0``."""
    if n_hat <= 0:
        return 1.0
    return min(1.0, math.sqrt(2.0 * cfg.log_term / n_hat))


def error_bound_table(n_hat: np.ndarray, cfg: ErrorBoundConfig) -> np.ndarray:
    n_hat = np.asarray(n_hat, dtype=float)
    safe = np.where(n_hat > 0, n_hat, 1.0)
    return np.where(n_hat > 0, np.minimum(1.0, np.sqrt(2.0 * cfg.log_term / safe)), 1.0)


def tv_errors(model: MleModel, truth: TabularMdp) -> np.ndarray:
    """Per-pair TV to the true rows; 1 for unobserved pairs."""
    if model.p_hat.shape != truth.transition.shape:
        raise ValueError(f"model shape {model.p_hat.shape} != MDP shape {truth.transition.shape}")
    tv = row_total_variation(model.p_hat, truth.transition)
    return np.where(model.observed, tv, 1.0)


def save_model(model: MleModel, path) -> None:
    S, A = model.num_states, model.num_actions
    lines = [f"# num_states={S}", f"# num_actions={A}", "s,a,s',p"]
    for s, a, s2 in zip(*np.nonzero(model.p_hat)):
        lines.append(f"{s},{a},{s2},{float(model.p_hat[s, a, s2])!r}")
    lines.append("# section=observed")
    lines.append("s,a,count")
    for s in range(S):
        for a in range(A):
            lines.append(f"{s},{a},{int(model.source_counts[s, a])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> MleModel:
    header, probs, counts = {}, [], []
    section = "p"
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line in ("s,a,s',p", "s,a,count"):
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "section":
                section = value.strip()
            else:
                header[key.strip()] = value.strip()
            continue
        parts = line.split(",")
        try:
            if section == "p":
                probs.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                counts.append((int(parts[0]), int(parts[1]), int(parts[2])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    S, A = int(header["num_states"]), int(header["num_actions"])
    p_hat = np.zeros((S, A, S))
    for s, a, s2, p in probs:
        p_hat[s, a, s2] = p
    n_sa = np.zeros((S, A), dtype=np.int64)
    for s, a, c in counts:
        n_sa[s, a] = c
    return MleModel(p_hat, n_sa > 0, n_sa)
