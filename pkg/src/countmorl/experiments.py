"""Experiment pipelines behind the CLI: single runs, count audits, theory checks and sweeps.

Functions here compute results and return plain dicts / arrays; file output
lives in :mod:`countmorl.cli`.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ExperimentConfig
from .conservative import PenaltySpec, build_conservative_mdp, conservative_from_transition
from .counting import CountEnsemble, ExactCountOracle, collision_audit, ingest_dataset, make_count_ensemble
from .dataset import OfflineDataset, empirical_behavior_policy, exact_counts, generate_dataset, load_dataset
from .estimation import (ErrorBoundConfig, default_log_model_class, error_bound_table, fit_ensemble, fit_mle,
                         tv_errors)
from .gridworld import BehaviorTrainConfig, epsilon_greedy, gridworld, train_behavior
from .mdp import (TabularMdp, deterministic_policies, discounted_visitation, random_mdp, scalar_return,
                  uniform_policy, value_iteration)
from .planner import RolloutConfig, exact_plan, rollout_plan

LOG_MODEL_CLASS_FLOOR = 1e-6


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class _Stage:
    name: str

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def derive_seed(base: int, *keys) -> int:
    """Independent 32-bit seed for a (base seed, purpose...) tuple."""
    words = [int(base)] + [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------- environments and data

def make_env(cfg: ExperimentConfig) -> TabularMdp:
    return _make_env(cfg.env_id, cfg.synthetic)


@lru_cache(maxsize=16)
def _make_env(env_id: str, syn) -> TabularMdp:
    kind, _, name = env_id.partition("/")
    if kind == "grid":
        return gridworld(name)
    if kind == "synthetic":
        mdp = random_mdp(syn.num_states, syn.num_actions, syn.gamma, syn.mdp_seed, syn.r_max, syn.reward_low)
        return mdp.replace(name=env_id)
    raise ValueError(f"unknown env_id {env_id!r}")


@lru_cache(maxsize=64)
def _cached_dataset(env_id: str, syn, ds, seed: int):
    data, behavior = _build_dataset(_make_env(env_id, syn), ds, seed)
    behavior = np.array(behavior, dtype=float)
    behavior.setflags(write=False)
    return data, behavior


def _build_dataset(mdp: TabularMdp, ds, seed: int) -> tuple[OfflineDataset, np.ndarray]:
    if ds.path:
        data = load_dataset(ds.path)
        if (data.num_states, data.num_actions) != (mdp.num_states, mdp.num_actions):
            raise ValueError("dataset (S, A) does not match the environment")
        return data, empirical_behavior_policy(data)
    if ds.source == "qlearning":
        bcfg = BehaviorTrainConfig(ds.episodes, ds.epsilon, ds.learning_rate, ds.max_episode_steps, seed,
                                   min_transitions=ds.n_transitions)
        _, data = train_behavior(mdp, bcfg)
        return data, empirical_behavior_policy(data)
    if ds.source == "epsilon_greedy":
        _, optimal = value_iteration(mdp)
        behavior = epsilon_greedy(optimal, ds.epsilon)
    else:
        behavior = uniform_policy(mdp.num_states, mdp.num_actions)
    data = generate_dataset(mdp, behavior, ds.n_transitions, seed, ds.max_episode_steps, env_id=mdp.name)
    data = dataclasses.replace(data, meta=dataclasses.replace(data.meta, generator=f"{ds.source}(eps={ds.epsilon})"))
    return data, behavior


def build_dataset(cfg: ExperimentConfig, seed: int) -> tuple[OfflineDataset, np.ndarray]:
    """Dataset and the behavior policy used to judge it (empirical for replay buffers/files)."""
    return _cached_dataset(cfg.env_id, cfg.synthetic, cfg.dataset, seed)


def build_counts(cfg: ExperimentConfig, data: OfflineDataset, seed: int):
    c = cfg.counting
    if c.exact:
        return ExactCountOracle(exact_counts(data))
    ens = make_count_ensemble(data.num_states, data.num_actions, c.n_members, c.code_bits, c.feature_map,
                              c.alpha, c.rho, seed)
    ingest_dataset(ens, data)
    return ens


def penalty_spec(cfg: ExperimentConfig, beta: float | None = None) -> PenaltySpec:
    p = cfg.penalty
    return PenaltySpec(
        mode=p.mode,
        beta=p.beta if beta is None else beta,
        bound_cfg=ErrorBoundConfig(p.delta, p.log_model_class),
        count_mode=cfg.counting.mode,
        alpha=cfg.counting.alpha,
    )


def rollout_config(cfg: ExperimentConfig, seed: int) -> RolloutConfig:
    r = cfg.planner.rollout
    return RolloutConfig(r.epochs, r.rollout_batch, r.horizon, r.updates_per_epoch, r.batch_size, r.real_ratio,
                         r.q_learning_rate, r.exploration_eps, seed, r.model_buffer_capacity)


# ---------------------------------------------------------------- single run

def run_seed(cfg: ExperimentConfig, seed_index: int, keep_artifacts: bool = False) -> dict:
    """Full pipeline for one seed; every number is a deterministic function of (cfg, seed)."""
    base = cfg.seed
    with _Stage("environment"):
        mdp = make_env(cfg)
    with _Stage("dataset"):
        data, behavior = build_dataset(cfg, derive_seed(base, seed_index, "data"))
        if len(data) == 0:
            raise StageError("dataset", ValueError("empty dataset"))
    with _Stage("estimation"):
        ensemble = fit_ensemble(data, cfg.ensemble.n_members, derive_seed(base, seed_index, "ensemble"),
                                include_plain=cfg.ensemble.include_plain)
    with _Stage("counting"):
        counts = build_counts(cfg, data, derive_seed(base, seed_index, "counting"))
        true_counts = exact_counts(data)
    with _Stage("planning"):
        spec = penalty_spec(cfg)
        terminal = mdp.absorbing_states() if cfg.planner.known_terminals else None
        cmdp = build_conservative_mdp(ensemble, counts, mdp.reward, spec, mdp.gamma, mdp.r_max, mdp.initial_dist,
                                      terminal)
        if cfg.planner.kind == "exact":
            policy, _ = exact_plan(cmdp, cfg.eval.tol)
        else:
            policy = rollout_plan(ensemble, counts, data, mdp.reward, spec,
                                  rollout_config(cfg, derive_seed(base, seed_index, "planner")),
                                  mdp.gamma, mdp.r_max, terminal)
        unpenalized = PenaltySpec(mode="practical", beta=0.0)
        baseline_mdp = build_conservative_mdp(ensemble, counts, mdp.reward, unpenalized, mdp.gamma, mdp.r_max,
                                              mdp.initial_dist, terminal)
        baseline_policy, _ = exact_plan(baseline_mdp, cfg.eval.tol)
    with _Stage("evaluation"):
        tol = cfg.eval.tol
        _, optimal = value_iteration(mdp, tol)
        nhat = cmdp.nhat_table
        pen = cmdp.penalty_table
        max_pen = spec.max_penalty(mdp.gamma, mdp.r_max)
        absorbing = mdp.absorbing_states()
        result = {
            "seed_index": seed_index,
            "seed": derive_seed(base, seed_index, "data"),
            "dataset_size": len(data),
            "pairs_observed": int((true_counts > 0).sum()),
            "nonabsorbing_pairs_observed": int((true_counts[~absorbing] > 0).sum()),
            "nonabsorbing_pairs": int((~absorbing).sum() * mdp.num_actions),
            "learned_return": scalar_return(mdp, policy, tol),
            "behavior_return": scalar_return(mdp, behavior, tol),
            "baseline_return": scalar_return(mdp, baseline_policy, tol),
            "optimal_return": scalar_return(mdp, optimal, tol),
            "model_return": scalar_return(cmdp.base, policy, tol),
            "penalty_mean": float(pen.mean()),
            "penalty_max": float(pen.max()),
            "frac_max_penalty": float(np.mean(np.isclose(pen, max_pen, rtol=0, atol=1e-12))),
            "count_max_abs_error": float(np.abs(nhat - true_counts).max()),
            "count_collisions": _collision_total(counts, true_counts),
        }
    if keep_artifacts:
        result["_artifacts"] = {"cmdp": cmdp, "policy": policy, "reward": mdp.reward}
    return result


def _collision_total(counts, true_counts) -> int:
    if not isinstance(counts, CountEnsemble):
        return 0
    return int(sum(r.colliding_observed_pairs for r in collision_audit(counts, true_counts)))


def run_experiment(cfg: ExperimentConfig, workers: int = 1, keep_artifacts: bool = False) -> dict:
    """``cmd_run`` core: all seeds, aggregated. ``wall_clock_s`` is the only non-reproducible field."""
    t0 = time.perf_counter()
    indices = list(range(cfg.eval.num_seeds))
    rows = _map(run_seed, [(cfg, i, keep_artifacts) for i in indices], workers)
    learned = np.array([r["learned_return"] for r in rows])
    behavior = np.array([r["behavior_return"] for r in rows])
    baseline = np.array([r["baseline_return"] for r in rows])
    return {
        "config_hash": cfg.config_hash(),
        "env_id": cfg.env_id,
        "base_seed": cfg.seed,
        "penalty_mode": cfg.penalty.mode,
        "count_mode": cfg.counting.mode.upper(),
        "rows": rows,
        "summary": {
            "learned_mean": float(learned.mean()),
            "learned_std": float(learned.std(ddof=1)) if len(rows) > 1 else 0.0,
            "behavior_mean": float(behavior.mean()),
            "baseline_mean": float(baseline.mean()),
            "learned_ge_behavior": int(np.sum(learned >= behavior - 1e-9)),
            "learned_ge_baseline": int(np.sum(learned >= baseline - 1e-9)),
            "num_seeds": len(rows),
        },
        "wall_clock_s": time.perf_counter() - t0,
    }


def _call(args):
    fn, a = args
    return fn(*a)


def _map(fn, arg_list, workers: int):
    if workers <= 1 or len(arg_list) <= 1:
        return [fn(*a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, [(fn, a) for a in arg_list]))


# ---------------------------------------------------------------- count audit

def count_audit(cfg: ExperimentConfig, seed_index: int = 0) -> dict:
    """Per-pair true vs. approximate counts for one dataset."""
    with _Stage("dataset"):
        data, _ = build_dataset(cfg, derive_seed(cfg.seed, seed_index, "data"))
    with _Stage("counting"):
        c = cfg.counting
        ens = make_count_ensemble(data.num_states, data.num_actions, c.n_members, c.code_bits, c.feature_map,
                                  c.alpha, c.rho, derive_seed(cfg.seed, seed_index, "counting"))
        ingest_dataset(ens, data)
        true = exact_counts(data)
        tables = ens.member_tables()
        needs_two = ens.n_members >= 2 or c.alpha == 0
        lc = ens.estimate_table("LC") if needs_two else tables[0]
        uc = ens.estimate_table("UC") if needs_two else tables[0]
        avg = ens.estimate_table("AVG")
        collisions = collision_audit(ens, true)
    errors = np.abs(tables - true[None]).max() if tables.size else 0.0
    return {
        "dataset_size": len(data),
        "true": true,
        "members": tables,
        "lc": lc,
        "avg": avg,
        "uc": uc,
        "collisions": collisions,
        "max_abs_error": float(errors),
        "max_abs_error_mode": float(np.abs(ens.estimate_table(c.mode) - true).max()) if needs_two or
        c.mode.upper() == "AVG" else float(errors),
    }


# ---------------------------------------------------------------- theory checks

def tv_count_samples(mdp: TabularMdp, sizes, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(count, TV) for every observed pair over datasets of the given sizes, uniform behavior."""
    behavior = uniform_policy(mdp.num_states, mdp.num_actions)
    ns, tvs = [], []
    for i, size in enumerate(sizes):
        data = generate_dataset(mdp, behavior, int(size), derive_seed(seed, i, "tv"), episode_cap=1000)
        model = fit_mle(data)
        tv = tv_errors(model, mdp)
        ns.append(model.source_counts[model.observed])
        tvs.append(tv[model.observed])
    return np.concatenate(ns), np.concatenate(tvs)


def loglog_slope(counts: np.ndarray, tvs: np.ndarray, n_min: float = 10, n_max: float = 1e4,
                 min_bin: int = 5) -> tuple[float, list[tuple[float, float, int]]]:
    """Slope of log(median TV) vs log(count) over doubling bins ``[n, 2n)``."""
    bins = []
    lo = n_min
    while lo < n_max:
        hi = min(2 * lo, n_max + 1)
        mask = (counts >= lo) & (counts < hi)
        if mask.sum() >= min_bin and np.median(tvs[mask]) > 0:
            bins.append((float(np.median(counts[mask])), float(np.median(tvs[mask])), int(mask.sum())))
        lo = hi
    if len(bins) < 2:
        raise ValueError("need at least two populated count bins")
    x = np.log([b[0] for b in bins])
    y = np.log([b[1] for b in bins])
    slope = float(np.polyfit(x, y, 1)[0])
    return slope, bins


def calibrate_log_model_class(counts: np.ndarray, tvs: np.ndarray, delta: float) -> float:
    """Smallest ``log|M|`` with ``TV <= error_bound(n)`` on a ``1 - delta`` fraction of samples.

    ``TV <= sqrt(2 (L + log(1/delta)) / n)`` iff ``L >= n TV^2 / 2 - log(1/delta)``.
    """
    required = counts * tvs ** 2 / 2 - math.log(1 / delta)
    level = float(np.quantile(required, 1 - delta, method="inverted_cdf"))
    return max(level, LOG_MODEL_CLASS_FLOOR)


def coverage_rate(counts: np.ndarray, tvs: np.ndarray, bound_cfg: ErrorBoundConfig) -> float:
    return float(np.mean(tvs <= error_bound_table(counts, bound_cfg)))


def geometric_sizes(n: int, lo: float, hi: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.round(np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))).astype(int)


def scaling_and_coverage(th, seed: int) -> dict:
    mdp = random_mdp(th.num_states, th.num_actions, th.gamma, th.mdp_seed)
    sizes = np.geomspace(th.min_dataset, th.max_dataset, th.slope_draws).round().astype(int)
    counts, tvs = tv_count_samples(mdp, sizes, derive_seed(seed, "slope"))
    slope, bins = loglog_slope(counts, tvs)

    cal_sizes = geometric_sizes(th.coverage_reps, th.coverage_min_dataset, th.coverage_max_dataset,
                                derive_seed(seed, "cal-sizes"))
    cal_n, cal_tv = tv_count_samples(mdp, cal_sizes, derive_seed(seed, "calibrate"))
    log_m = calibrate_log_model_class(cal_n, cal_tv, th.delta)
    ev_sizes = geometric_sizes(th.coverage_reps, th.coverage_min_dataset, th.coverage_max_dataset,
                               derive_seed(seed, "eval-sizes"))
    ev_n, ev_tv = tv_count_samples(mdp, ev_sizes, derive_seed(seed, "evaluate"))
    default_l = default_log_model_class(th.num_states)
    return {
        "slope": slope,
        "bins": bins,
        "slope_samples": (counts, tvs),
        "calibrated_log_model_class": log_m,
        "calibration_coverage": coverage_rate(cal_n, cal_tv, ErrorBoundConfig(th.delta, log_m)),
        "coverage": coverage_rate(ev_n, ev_tv, ErrorBoundConfig(th.delta, log_m)),
        "coverage_pairs": int(ev_n.size),
        "default_log_model_class": default_l,
        "default_coverage": coverage_rate(ev_n, ev_tv, ErrorBoundConfig(th.delta, default_l)),
    }


def value_gap_coefficient(gamma: float, r_max: float) -> float:
    return gamma * r_max / (1 - gamma) ** 2


@dataclass(frozen=True)
class InequalityCheck:
    """Outcome of one repetition of the conditional value-gap / pessimism / sub-optimality checks."""

    repetition: int
    dataset_size: int
    event: bool
    epsilon: float
    lemma_violations: int
    pessimism_violations: int
    suboptimality_violations: int
    identity_error: float
    min_lemma_slack: float
    min_pessimism_slack: float
    suboptimality_slack: float


def check_inequalities(truth: TabularMdp, data: OfflineDataset, bound_cfg: ErrorBoundConfig, counts=None,
                       count_mode="AVG", alpha: float = 0.5, tol: float = 1e-6, repetition: int = 0,
                       solver_tol: float = 1e-11) -> InequalityCheck:
    """Evaluate the value-gap, pessimism and sub-optimality inequalities exactly for every
    deterministic policy.

    ``counts`` defaults to exact counts (zero approximation error).
    """
    S, A = truth.num_states, truth.num_actions
    model = fit_mle(data)
    n_true = model.source_counts.astype(float)
    nhat = n_true if counts is None else counts.estimate_table(count_mode, alpha)
    c_true = error_bound_table(n_true, bound_cfg)
    c_hat = error_bound_table(nhat, bound_cfg)
    eps = float(np.abs(c_true - c_hat).max())
    event = bool(np.all(tv_errors(model, truth) <= c_true))

    P_hat = model.completed()
    g, r_max = truth.gamma, truth.r_max
    spec = PenaltySpec(mode="theory", bound_cfg=bound_cfg)
    cmdp = conservative_from_transition(P_hat, truth.reward, nhat, spec, g, r_max, truth.initial_dist)
    m_hat = truth.replace(transition=P_hat)
    coef = value_gap_coefficient(g, r_max)

    pi_hat, _ = exact_plan(cmdp, solver_tol)
    v_star_hat = scalar_return(truth, pi_hat, solver_tol)

    lemma_v = pess_v = 0
    identity_err = 0.0
    lemma_slack = pess_slack = np.inf
    best_rhs = -np.inf
    for pi in deterministic_policies(S, A):
        v_star = scalar_return(truth, pi, solver_tol)
        v_hat = scalar_return(m_hat, pi, solver_tol)
        v_tilde = scalar_return(cmdp.base, pi, solver_tol)
        d_hat = discounted_visitation(m_hat, pi, 1e-13)
        exp_c = float((d_hat * c_hat).sum())
        # penalty = gamma R_max/(1-gamma) * C_hat, so V_tilde = V_hat - coef E[C_hat]
        identity_err = max(identity_err, abs(v_tilde - (v_hat - coef * exp_c)))
        s_lemma = coef * (exp_c + eps) - (v_hat - v_star)
        s_pess = v_star + coef * eps - v_tilde
        lemma_slack = min(lemma_slack, s_lemma)
        pess_slack = min(pess_slack, s_pess)
        lemma_v += s_lemma < -tol
        pess_v += s_pess < -tol
        best_rhs = max(best_rhs, v_star - 2 * coef * exp_c)
    sub_slack = v_star_hat - (best_rhs - 2 * coef * eps)
    return InequalityCheck(
        repetition=repetition,
        dataset_size=len(data),
        event=event,
        epsilon=eps,
        lemma_violations=int(lemma_v),
        pessimism_violations=int(pess_v),
        suboptimality_violations=int(sub_slack < -tol),
        identity_error=identity_err,
        min_lemma_slack=float(lemma_slack),
        min_pessimism_slack=float(pess_slack),
        suboptimality_slack=float(sub_slack),
    )


def conditional_checks(th, log_model_class: float, seed: int, code_bits: int = 20, n_members: int = 5,
                       count_mode: str = "AVG", alpha: float = 0.5) -> list[InequalityCheck]:
    S, A = th.enum_states, th.enum_actions
    if S * A > 12:
        raise ValueError(f"enumeration needs S*A <= 12, got {S * A}")
    bound_cfg = ErrorBoundConfig(th.delta, log_model_class)
    results = []
    for rep in range(th.repetitions):
        rng = np.random.default_rng(derive_seed(seed, rep, "enum"))
        truth = random_mdp(S, A, th.enum_gamma, int(rng.integers(2 ** 31)), 1.0, th.reward_low)
        # skewed behavior so that some pairs are rare or unobserved
        behavior = rng.dirichlet(np.full(A, 0.5), size=S)
        size = int(round(math.exp(rng.uniform(math.log(th.enum_min_dataset), math.log(th.enum_max_dataset)))))
        data = generate_dataset(truth, behavior, size, int(rng.integers(2 ** 31)), episode_cap=50)
        counts = None
        if th.count_source == "hash":
            counts = make_count_ensemble(S, A, n_members, code_bits, "onehot", alpha, seed=int(rng.integers(2 ** 31)))
            ingest_dataset(counts, data)
        results.append(check_inequalities(truth, data, bound_cfg, counts, count_mode, alpha, th.tol, rep))
    return results


def theory_check(cfg: ExperimentConfig) -> dict:
    th = cfg.theory
    with _Stage("scaling"):
        scaling = scaling_and_coverage(th, derive_seed(cfg.seed, "scaling"))
    log_m = th.log_model_class if th.log_model_class > 0 else scaling["calibrated_log_model_class"]
    with _Stage("inequalities"):
        checks = conditional_checks(th, log_m, derive_seed(cfg.seed, "conditional"), cfg.counting.code_bits,
                                    max(cfg.counting.n_members, 1), cfg.counting.mode, cfg.counting.alpha)
    held = [c for c in checks if c.event]
    return {
        "scaling": scaling,
        "log_model_class_used": log_m,
        "checks": checks,
        "event_count": len(held),
        "conditional_violations": {
            "lemma": sum(c.lemma_violations for c in held),
            "pessimism": sum(c.pessimism_violations for c in held),
            "suboptimality": sum(c.suboptimality_violations for c in held),
        },
        "unconditional_violations": {
            "lemma": sum(c.lemma_violations for c in checks),
            "pessimism": sum(c.pessimism_violations for c in checks),
            "suboptimality": sum(c.suboptimality_violations for c in checks),
        },
    }


# ---------------------------------------------------------------- sweeps

def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    sw = cfg.sweep
    cells = [dict(mode=m.upper(), beta=float(b), horizon=int(h), code_bits=int(d), alpha=float(a))
             for m, b, h, d, a in itertools.product(sw.modes, sw.betas, sw.horizons, sw.code_bits, sw.alphas)]
    if not cells:
        raise ValueError("sweep grid is empty")
    return cells


def cell_config(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    return cfg.replace(
        counting=dataclasses.replace(cfg.counting, mode=cell["mode"], code_bits=cell["code_bits"],
                                     alpha=cell["alpha"]),
        penalty=dataclasses.replace(cfg.penalty, beta=cell["beta"]),
        planner=dataclasses.replace(cfg.planner,
                                    rollout=dataclasses.replace(cfg.planner.rollout, horizon=cell["horizon"])),
    )


def _sweep_task(cfg, cell, seed_index):
    row = run_seed(cell_config(cfg, cell), seed_index)
    return {**cell, **row}


def run_sweep(cfg: ExperimentConfig, workers: int = 1) -> dict:
    cells = sweep_cells(cfg)
    tasks = [(cfg, cell, i) for cell in cells for i in range(cfg.eval.num_seeds)]
    rows = _map(_sweep_task, tasks, workers)
    rows.sort(key=lambda r: (r["mode"], r["beta"], r["horizon"], r["code_bits"], r["alpha"], r["seed_index"]))
    summary = []
    for cell in cells:
        vals = np.array([r["learned_return"] for r in rows if all(r[k] == v for k, v in cell.items())])
        summary.append({**cell, "mean_return": float(vals.mean()),
                        "std_return": float(vals.std(ddof=1)) if vals.size > 1 else 0.0, "n": int(vals.size)})
    return {"config_hash": cfg.config_hash(), "rows": rows, "summary": summary}
