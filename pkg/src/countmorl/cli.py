"""``countmorl`` command-line entry point.

    countmorl <gen-data|count-audit|theory-check|run|sweep> --config <path>
              [--out <dir>] [--seed <u64>] [--workers <n>]

Every CSV starts with ``# config_hash=`` and ``# seed=`` lines; each output
directory gets a ``manifest.json`` with SHA-256 hashes of its artifacts.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import svg
from .config import ConfigError, ExperimentConfig, load_config
from .conservative import save_penalty_audit
from .counting import CollisionReport
from .dataset import exact_counts, save_dataset
from .planner import save_policy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = {
    "environment": 3,
    "dataset": 3,
    "estimation": 4,
    "counting": 5,
    "planning": 6,
    "evaluation": 7,
    "scaling": 8,
    "inequalities": 8,
    "output": 9,
}
EXIT_AUDIT_MISMATCH = 10
EXIT_THEORY_VIOLATION = 11


class Outputs:
    def __init__(self, root: Path, cfg: ExperimentConfig, command: str):
        self.root = root
        self.cfg = cfg
        self.command = command
        self.files: list[Path] = []
        root.mkdir(parents=True, exist_ok=True)

    def _header(self) -> list[str]:
        return [f"# config_hash={self.cfg.config_hash()}", f"# seed={self.cfg.seed}"]

    def csv(self, name: str, columns: list[str], rows) -> Path:
        lines = self._header() + [",".join(columns)]
        for r in rows:
            values = [r[c] for c in columns] if isinstance(r, dict) else list(r)
            lines.append(",".join(_fmt(v) for v in values))
        return self.text(name, "\n".join(lines) + "\n")

    def text(self, name: str, content: str) -> Path:
        path = self.root / name
        path.write_text(content, encoding="utf-8")
        self.files.append(path)
        return path

    def track(self, path: Path) -> None:
        self.files.append(path)

    def manifest(self) -> None:
        artifacts = [{"path": p.relative_to(self.root).as_posix(),
                      "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in self.files]
        doc = {"command": self.command, "config_hash": self.cfg.config_hash(), "seed": self.cfg.seed,
               "config": self.cfg.to_dict(), "artifacts": artifacts}
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2, default=list) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: ExperimentConfig, out: Outputs, workers: int) -> int:
    rows = []
    for i in range(cfg.eval.num_seeds):
        seed = ex.derive_seed(cfg.seed, i, "data")
        with ex._Stage("dataset"):
            mdp = ex.make_env(cfg)
            data, _ = ex.build_dataset(cfg, seed)
        path = out.root / f"dataset_{i}.csv"
        save_dataset(data, path)
        out.track(path)
        counts = exact_counts(data)
        absorbing = mdp.absorbing_states()
        row = {"seed_index": i, "seed": seed, "transitions": len(data), "count_total": int(counts.sum()),
               "pairs_observed": int((counts > 0).sum()), "pairs_total": counts.size,
               "nonabsorbing_observed": int((counts[~absorbing] > 0).sum()),
               "nonabsorbing_total": int((~absorbing).sum() * mdp.num_actions)}
        rows.append(row)
        print(f"dataset_{i}: {row['transitions']} transitions, {row['pairs_observed']}/{row['pairs_total']} pairs "
              f"observed ({row['nonabsorbing_observed']}/{row['nonabsorbing_total']} outside absorbing states)")
    out.csv("coverage.csv", list(rows[0]), rows)
    return EXIT_OK


def cmd_count_audit(cfg: ExperimentConfig, out: Outputs, workers: int) -> int:
    audit = ex.count_audit(cfg)
    true, members = audit["true"], audit["members"]
    S, A = true.shape
    n = members.shape[0]
    cols = ["s", "a", "true_count"] + [f"member_{i}" for i in range(n)] + ["lc", "avg", "uc"]
    rows = [[s, a, int(true[s, a])] + [int(members[i, s, a]) for i in range(n)]
            + [float(audit["lc"][s, a]), float(audit["avg"][s, a]), float(audit["uc"][s, a])]
            for s in range(S) for a in range(A)]
    out.csv("count_audit.csv", cols, rows)
    out.csv("collisions.csv", [f.name for f in dataclasses.fields(CollisionReport)],
            [dataclasses.asdict(r) for r in audit["collisions"]])
    out.text("count_histogram.svg", svg.paired_bars(
        f"{cfg.env_id}: true vs. approximate ({cfg.counting.mode.upper()}) count",
        true.reshape(-1).tolist(), audit["avg"].reshape(-1).tolist()))
    print(f"{cfg.env_id}: {audit['dataset_size']} transitions, max |approx - true| over members = "
          f"{audit['max_abs_error']:g}")
    for r in audit["collisions"]:
        print(f"  member {r.member}: {r.distinct_codes} distinct codes, {r.colliding_observed_pairs} observed "
              f"pairs share a code, max error {r.max_abs_error:g}")
    return EXIT_OK if audit["max_abs_error"] == 0 else EXIT_AUDIT_MISMATCH


def cmd_theory_check(cfg: ExperimentConfig, out: Outputs, workers: int) -> int:
    report = ex.theory_check(cfg)
    sc = report["scaling"]
    counts, tvs = sc["slope_samples"]
    out.csv("tv_samples.csv", ["count", "tv"], zip(counts.tolist(), tvs.tolist()))
    out.csv("tv_bins.csv", ["median_count", "median_tv", "samples"], sc["bins"])
    xs, ys = [b[0] for b in sc["bins"]], [b[1] for b in sc["bins"]]
    icpt = float(np.mean(np.log(ys)) - sc["slope"] * np.mean(np.log(xs)))
    out.text("tv_scaling.svg", svg.loglog_scatter("median TV vs. count", xs, ys, fit=(sc["slope"], icpt)))
    out.csv("theory_checks.csv", [f.name for f in dataclasses.fields(ex.InequalityCheck)],
            [dataclasses.asdict(c) for c in report["checks"]])
    cond = report["conditional_violations"]
    summary = [
        ("tv_loglog_slope", sc["slope"]),
        ("calibrated_log_model_class", sc["calibrated_log_model_class"]),
        ("calibration_coverage", sc["calibration_coverage"]),
        ("coverage", sc["coverage"]),
        ("coverage_pairs", sc["coverage_pairs"]),
        ("default_log_model_class", sc["default_log_model_class"]),
        ("default_coverage", sc["default_coverage"]),
        ("log_model_class_used", report["log_model_class_used"]),
        ("repetitions", len(report["checks"])),
        ("event_count", report["event_count"]),
        ("lemma_violations_given_event", cond["lemma"]),
        ("pessimism_violations_given_event", cond["pessimism"]),
        ("suboptimality_violations_given_event", cond["suboptimality"]),
    ]
    out.csv("theory_summary.csv", ["metric", "value"], summary)
    for k, v in summary:
        print(f"{k:40s} {_fmt(v)}")
    return EXIT_OK if sum(cond.values()) == 0 else EXIT_THEORY_VIOLATION


def cmd_run(cfg: ExperimentConfig, out: Outputs, workers: int) -> int:
    report = ex.run_experiment(cfg, workers, keep_artifacts=True)
    for row in report["rows"]:
        art = row.pop("_artifacts")
        i = row["seed_index"]
        save_penalty_audit(art["cmdp"], art["reward"], out.root / f"penalty_{i}.csv")
        out.track(out.root / f"penalty_{i}.csv")
        save_policy(art["policy"], out.root / f"policy_{i}.csv")
        out.track(out.root / f"policy_{i}.csv")
    rows = report["rows"]
    out.csv("runs.csv", list(rows[0]), rows)
    wall = report.pop("wall_clock_s")
    out.text("report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out.root / "timing.json").write_text(json.dumps({"wall_clock_s": wall}) + "\n")
    s = report["summary"]
    print(f"{cfg.env_id} [{cfg.penalty.mode}, {report['count_mode']}]: learned {s['learned_mean']:.4f} "
          f"(behavior {s['behavior_mean']:.4f}, unpenalized {s['baseline_mean']:.4f}); learned >= behavior in "
          f"{s['learned_ge_behavior']}/{s['num_seeds']} seeds; wall clock {wall:.1f}s")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Outputs, workers: int) -> int:
    result = ex.run_sweep(cfg, workers)
    rows = result["rows"]
    out.csv("sweep_rows.csv", list(rows[0]), rows)
    out.csv("sweep_summary.csv", list(result["summary"][0]), result["summary"])
    # LC / AVG / UC side by side for each remaining hyperparameter setting
    keyed = {}
    for r in result["summary"]:
        key = (r["beta"], r["horizon"], r["code_bits"], r["alpha"])
        keyed.setdefault(key, {})[r["mode"]] = r
    modes = [m for m in ("LC", "AVG", "UC") if any(m in v for v in keyed.values())]
    cols = ["beta", "horizon", "code_bits", "alpha"] + [f"{m}_{s}" for m in modes for s in ("mean", "std")]
    table = []
    for key in sorted(keyed):
        row = list(key)
        for m in modes:
            cell = keyed[key].get(m)
            row += [cell["mean_return"], cell["std_return"]] if cell else ["", ""]
        table.append(row)
    out.csv("count_mode_table.csv", cols, table)
    for r in result["summary"]:
        print(f"{r['mode']:>3} beta={r['beta']:g} H={r['horizon']} d={r['code_bits']} alpha={r['alpha']:g}: "
              f"{r['mean_return']:.4f} +- {r['std_return']:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "count-audit": cmd_count_audit,
    "theory-check": cmd_theory_check,
    "run": cmd_run,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countmorl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes for seeds / sweep cells")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.replace(seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs(Path(args.out or cfg.output_dir), cfg, args.command)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, out, max(args.workers, 1))
    except ex.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE.get(exc.stage, 1)
    try:
        out.manifest()
    except OSError as exc:
        print(f"error: stage 'output' failed: {exc}", file=sys.stderr)
        return EXIT_STAGE["output"]
    print(f"wrote {len(out.files)} artifacts to {out.root} in {time.perf_counter() - t0:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
