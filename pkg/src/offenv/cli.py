"""Command-line entry points: gen-env, sweep, report."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .envs import GridworldSpec, build_gridworld_pair
from .harness import (
    ExperimentConfig,
    load_rows,
    report_csv,
    report_text,
    run_sweep,
    save_rows,
    summarize,
)
from .mdp import MDPValidationError, save_mdp


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _cmd_gen_env(args) -> int:
    doc = _load_json(args.config)
    spec = GridworldSpec.from_dict(doc["grid"] if "grid" in doc else doc)
    eps_sim = float(doc.get("eps_sim", 0.0))
    eps_real = float(doc.get("eps_real", spec.noise_eps))
    mdp_tr, mdp_te = build_gridworld_pair(spec, eps_sim, eps_real)
    os.makedirs(args.out, exist_ok=True)
    save_mdp(mdp_tr, os.path.join(args.out, "mdp_tr.json"))
    save_mdp(mdp_te, os.path.join(args.out, "mdp_te.json"))
    print(f"wrote mdp_tr.json (eps={eps_sim}) and mdp_te.json (eps={eps_real}) to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seeds": [args.seed]})
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    rows = run_sweep(cfg, jobs=args.jobs)
    csv_path = os.path.join(out, "results.csv")
    save_rows(rows, csv_path)
    summary = {"config": cfg.to_dict(), "results_csv": "results.csv", **summarize(rows)}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {csv_path} ({len(rows)} rows) and summary.json")
    return 0


def _cmd_report(args) -> int:
    rows = load_rows(args.results_csv)
    text = report_text(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "report.csv"), "w") as fh:
            fh.write(report_csv(rows))
        print(f"wrote report.txt and report.csv to {args.out}")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offenv",
        description="Off-environment policy evaluation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_env = sub.add_parser("gen-env", help="write a simulator/real MDP pair as JSON")
    p_env.add_argument("--config", required=True, help="gridworld spec JSON")
    p_env.add_argument("--out", required=True, help="output directory")
    p_env.set_defaults(func=_cmd_gen_env)

    p_sweep = sub.add_parser("sweep", help="run an estimator sweep from a config JSON")
    p_sweep.add_argument("--config", required=True, help="experiment config JSON")
    p_sweep.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p_sweep.add_argument("--seed", type=int, default=None, help="run a single seed instead of the configured list")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_rep = sub.add_parser("report", help="summarize a results CSV")
    p_rep.add_argument("results_csv", help="path to results.csv from a sweep")
    p_rep.add_argument("--out", default=None, help="also write report.txt / report.csv here")
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MDPValidationError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
