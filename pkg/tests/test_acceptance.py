"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the pytest terminal
summary. Configurations come from the repository's ``configs/`` directory.
"""
import dataclasses
import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from countmorl import cli
from countmorl import experiments as ex
from countmorl.config import load_config
from countmorl.counting import combine_counts

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
LAYOUTS = ("empty", "bridge", "cliff", "zigzag")
LAVA_LAYOUTS = ("bridge", "cliff", "zigzag")


def with_env(cfg, layout):
    return cfg.replace(env_id=f"grid/{layout}")


@pytest.fixture(scope="module")
def theory_report():
    cfg = load_config(CONFIGS / "theory.toml")
    t0 = time.perf_counter()
    report = ex.theory_check(cfg)
    report["elapsed"] = time.perf_counter() - t0
    report["cfg"] = cfg
    return report


def test_count_exactness_on_grids(acceptance_report):
    base = load_config(CONFIGS / "count_audit.toml")
    assert base.counting.feature_map == "onehot" and base.counting.code_bits == 20
    details, ok = [], True
    for layout in LAYOUTS:
        t0 = time.perf_counter()
        audit = ex.count_audit(with_env(base, layout))
        elapsed = time.perf_counter() - t0
        size_ok = 2e4 <= audit["dataset_size"] <= 1e5
        bad_members = [r.member for r in audit["collisions"] if r.max_abs_error > 0]
        ok &= audit["max_abs_error"] == 0 and size_ok and elapsed < 60
        details.append(f"{layout}: n={audit['dataset_size']} max_err={audit['max_abs_error']:g}"
                       f"{' (members ' + str(bad_members) + ')' if bad_members else ''} {elapsed:.1f}s")
    acceptance_report("1 count exactness", ok, "; ".join(details))
    assert ok


def test_tv_scaling_slope(acceptance_report, theory_report):
    sc = theory_report["scaling"]
    th = theory_report["cfg"].theory
    counts = [b[0] for b in sc["bins"]]
    ok = (-0.65 <= sc["slope"] <= -0.35 and th.slope_draws >= 50 and min(counts) <= 20 and max(counts) >= 5000
          and theory_report["elapsed"] < 120)
    acceptance_report("2 TV scaling", ok, f"slope={sc['slope']:.4f} over {len(sc['bins'])} bins, median counts "
                      f"{min(counts):.0f}..{max(counts):.0f}, {th.slope_draws} datasets")
    assert ok


def test_bound_coverage(acceptance_report, theory_report):
    sc = theory_report["scaling"]
    th = theory_report["cfg"].theory
    ok = sc["coverage"] >= 0.88 and th.coverage_reps >= 200 and th.delta == 0.1
    acceptance_report("3 bound coverage", ok,
                      f"coverage={sc['coverage']:.4f} on {sc['coverage_pairs']} fresh pairs from {th.coverage_reps} "
                      f"datasets, calibrated log|M|={sc['calibrated_log_model_class']:.3g}")
    assert ok


def test_conditional_pessimism_and_value_gap(acceptance_report, theory_report):
    th = theory_report["cfg"].theory
    cond = theory_report["conditional_violations"]
    held = [c for c in theory_report["checks"] if c.event]
    ok = (th.enum_states * th.enum_actions <= 12 and th.count_source == "exact" and th.repetitions >= 100
          and len(held) > 0 and cond["lemma"] == 0 and cond["pessimism"] == 0 and th.tol <= 1e-6)
    slack = min((c.min_pessimism_slack for c in held), default=float("nan"))
    acceptance_report("4 pessimism / value gap", ok,
                      f"event held in {len(held)}/{len(theory_report['checks'])} repetitions; violations lemma="
                      f"{cond['lemma']} pessimism={cond['pessimism']}; min pessimism slack {slack:.3g}")
    assert ok


def test_suboptimality_bound(acceptance_report, theory_report):
    cond = theory_report["conditional_violations"]
    held = [c for c in theory_report["checks"] if c.event]
    ok = len(held) > 0 and cond["suboptimality"] == 0
    slack = min((c.suboptimality_slack for c in held), default=float("nan"))
    acceptance_report("5 sub-optimality", ok, f"violations={cond['suboptimality']} over {len(held)} repetitions; "
                      f"min slack {slack:.3g}")
    assert ok


def test_policy_improvement_on_lava_grids(acceptance_report):
    base = load_config(CONFIGS / "bridge_run.toml")
    assert base.dataset.source == "qlearning" and base.dataset.epsilon == 0.3
    t0 = time.perf_counter()
    details, ok = [], True
    for layout in LAVA_LAYOUTS:
        report = ex.run_experiment(with_env(base, layout))
        s = report["summary"]
        sizes_ok = all(r["dataset_size"] >= 30_000 for r in report["rows"])
        ok &= s["learned_ge_behavior"] >= 4 and s["learned_ge_baseline"] >= 3 and sizes_ok and s["num_seeds"] == 5
        details.append(f"{layout}: >=behavior {s['learned_ge_behavior']}/5, >=beta0 {s['learned_ge_baseline']}/5 "
                       f"(learned {s['learned_mean']:.3f}, behavior {s['behavior_mean']:.3f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    acceptance_report("6 policy improvement", ok, "; ".join(details) + f"; {elapsed:.0f}s")
    assert ok


def test_lc_uc_dataset_quality_trend(acceptance_report):
    base = load_config(CONFIGS / "lc_uc_trend.toml")
    assert base.counting.feature_map == "noisy_onehot" and base.eval.num_seeds >= 5
    t0 = time.perf_counter()
    wins, details = 0, []
    for layout in LAVA_LAYOUTS:
        means = {}
        for quality, eps in (("random", 0.9), ("expert", 0.05)):
            for mode in ("LC", "UC"):
                cfg = with_env(base, layout).replace(
                    dataset=dataclasses.replace(base.dataset, epsilon=eps),
                    counting=dataclasses.replace(base.counting, mode=mode))
                means[quality, mode] = ex.run_experiment(cfg)["summary"]["learned_mean"]
        holds = means["random", "LC"] >= means["random", "UC"] and means["expert", "UC"] >= means["expert", "LC"]
        wins += holds
        details.append(f"{layout}: random LC {means['random', 'LC']:.3f} / UC {means['random', 'UC']:.3f}, "
                       f"expert LC {means['expert', 'LC']:.3f} / UC {means['expert', 'UC']:.3f}"
                       f" {'holds' if holds else 'reversed'}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 2 and elapsed < 600
    acceptance_report("7 LC/UC trend (stochastic)", ok, f"{wins}/3 layouts; " + "; ".join(details))
    assert ok


def test_count_combination_arithmetic(acceptance_report):
    lc, avg, uc = (combine_counts(np.array([[4.0], [6.0]]), m, 0.5)[0] for m in ("LC", "AVG", "UC"))
    collapse = all(combine_counts(np.full((3, 1), 9.0), m, 1.0)[0] == 9.0 for m in ("LC", "AVG", "UC"))
    rng = np.random.default_rng(0)
    members = rng.integers(0, 50, size=(5, 200)).astype(float)
    tables = [combine_counts(members, m, 0.7) for m in ("LC", "AVG", "UC")]
    ordered = bool(np.all(tables[0] <= tables[1]) and np.all(tables[1] <= tables[2]))
    ok = (abs(lc - 4.29289321881345) < 1e-9 and abs(uc - 5.70710678118655) < 1e-9 and avg == 5.0
          and collapse and ordered)
    acceptance_report("8 count arithmetic", ok, f"LC={lc:.11f} AVG={avg} UC={uc:.11f} collapse={collapse} "
                      f"ordered={ordered}")
    assert ok


def test_run_is_bit_reproducible(acceptance_report, tmp_path):
    config = str(CONFIGS / "bridge_run.toml")
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["run", "--config", config, "--out", str(o)]) for o in outs]
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "timing.json")
    _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
    ok = codes == [0, 0] and not mismatch and not errors and "report.json" in names
    acceptance_report("9 determinism", ok, f"{len(names)} artifacts compared byte-for-byte, "
                      f"mismatches={mismatch + errors}")
    assert ok
