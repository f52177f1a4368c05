"""Command line entry point: ``dpglab <subcommand> [flags]``.

Every subcommand prints a JSON summary on stdout and exits 0; failures print
``{"error": ..., "type": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .checks import run_checks
from .config import ExperimentConfig, config_schema, load_config
from .experiments import compare_estimators, make_problem, run_experiment, sweep

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_ERROR = 3


class CheckFailed(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    update = {}
    if getattr(args, "seed", None):
        update["seeds"] = args.seed
    if getattr(args, "out", None):
        update["output_dir"] = str(args.out)
    if update:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **update})
    return cfg


def _cmd_make_problem(args) -> dict:
    cfg = _config(args)
    out = make_problem(cfg, args.out or cfg.output_dir)
    return {"problem_dir": str(out)}


def _cmd_run(args) -> dict:
    cfg = _config(args)
    report = run_experiment(cfg, threads=args.threads)
    failed = [r.seed for r in report.seeds if r.error]
    if failed and len(failed) == len(report.seeds):
        raise RuntimeError(f"all seeds failed: {[r.error for r in report.seeds]}")
    return {"output_dir": cfg.output_dir, "aggregate": report.aggregate, "failed_seeds": failed}


def _cmd_compare(args) -> dict:
    cfg = _config(args)
    out = Path(cfg.output_dir) / "compare.csv"
    rows = compare_estimators(
        cfg,
        estimators=args.estimators.split(","),
        timesteps=args.timesteps,
        n_states=args.n_states,
        seed=cfg.seeds[0],
        out_path=out,
    )
    return {"csv": str(out), "rows": rows}


def _cmd_oracle_check(args) -> dict:
    results = [r.as_dict() for r in run_checks(seed=(args.seed or [0])[0])]
    summary = {"checks": results, "all_passed": all(r["passed"] for r in results)}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "oracle_check.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not summary["all_passed"]:
        print(json.dumps(summary, indent=2))
        raise CheckFailed(", ".join(r["name"] for r in results if not r["passed"]))
    return summary


def _cmd_sweep(args) -> dict:
    cfg = _config(args)
    rows = sweep(cfg, n_mc=args.n_mc, guidance_norm=args.guidance_norm, sigma_y=args.sigma_y, threads=args.threads)
    return {"csv": str(Path(cfg.output_dir) / "sweep.csv"), "rows": rows}


def _cmd_schema(args) -> dict:
    schema = config_schema()
    if args.out:
        Path(args.out).write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
        return {"schema": str(args.out)}
    return schema


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpglab", description="Guided diffusion posterior sampling experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", type=Path, help="experiment config JSON")
        p.add_argument("--seed", type=_int_list, help="comma-separated seeds, overrides the config")
        p.add_argument("--out", type=Path, help="output directory, overrides the config")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="seeds or sweep points run concurrently")
        return p

    common(sub.add_parser("make-problem", help="write ground truth, observation and operator files"), threads=False).set_defaults(func=_cmd_make_problem)
    common(sub.add_parser("run", help="solve the configured problem for every seed")).set_defaults(func=_cmd_run)

    p = common(sub.add_parser("compare", help="direction accuracy of estimators vs the exact oracle"), threads=False)
    p.add_argument("--estimators", default="dpg,dps,oracle")
    p.add_argument("--timesteps", type=_float_list, default=[0.95, 0.9, 0.8], help="fractions of N or absolute steps")
    p.add_argument("--n-states", type=int, default=20)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("oracle-check", help="invariant suite over the closed forms")
    p.add_argument("--seed", type=_int_list)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_oracle_check)

    p = common(sub.add_parser("sweep", help="grid over N_mc, B and sigma_y"))
    p.add_argument("--n-mc", type=_int_list)
    p.add_argument("--guidance-norm", type=_float_list)
    p.add_argument("--sigma-y", type=_float_list)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("schema", help="print (or write with --out) the config JSON schema")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_schema)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": str(exc), "type": type(exc).__name__}
    if isinstance(exc, ValidationError):
        payload["details"] = json.loads(exc.json(include_url=False))
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail(ValueError("invalid command line"), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except CheckFailed as exc:
        return _fail(exc, EXIT_CHECK_FAILED)
    except (ValidationError, ValueError, FileNotFoundError, TypeError) as exc:
        return _fail(exc, EXIT_USAGE)
    except Exception as exc:
        return _fail(exc, EXIT_ERROR)
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
