"""Command line entry point: sample, guide, verify, diagnose."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig
from .runner import run_experiment
from .verify import SUITES, verify

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-guidance",
                                     description="Guided diffusion sampling on linear-subspace data.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--config", help="JSON experiment config (defaults fill missing keys)")
    run_opts.add_argument("--seed", type=int, help="master seed")
    run_opts.add_argument("--out", help="output directory")
    run_opts.add_argument("--steps", type=int, help="number of diffusion steps T")
    run_opts.add_argument("--eta", type=float, help="DDIM eta in [0, 1]")
    run_opts.add_argument("--chains", type=int, help="number of chains")
    run_opts.add_argument("--workers", type=int, help="worker threads")
    run_opts.add_argument("--force", action="store_true", help="overwrite existing outputs")
    run_opts.add_argument("--no-trajectories", action="store_true", help="skip trajectories.csv")

    guide_opts = argparse.ArgumentParser(add_help=False)
    guide_opts.add_argument("--method", help="ddim, dps, mpgd, mpgd-ae, mpgd-z or mpgd-ldm")
    guide_opts.add_argument("--rho", type=float, help="guidance step size")
    guide_opts.add_argument("--travel", type=int, help="time-travel repeats per step")
    guide_opts.add_argument("--inner", type=int, help="inner optimisation steps")
    guide_opts.add_argument("--optimizer", choices=("gd", "cg"), help="inner optimiser")

    sub.add_parser("sample", parents=[run_opts], help="unguided DDIM sampling")
    sub.add_parser("guide", parents=[run_opts, guide_opts], help="guided sampling")
    sub.add_parser("diagnose", parents=[run_opts, guide_opts],
                   help="guided run with a diagnostics summary (no trajectories)")
    ver = sub.add_parser("verify", help="run self-check suites")
    ver.add_argument("--suite", default="all", choices=SUITES + ("all",))
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", help="write the JSON report here instead of stdout")
    return parser


def _overrides(args) -> dict:
    """Config sections touched by command-line flags."""
    raw: dict = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                raw[key] = value
            else:
                raw.setdefault(section, {})[key] = value

    put(None, "master_seed", args.seed)
    put("schedule", "T", args.steps)
    put("schedule", "eta", args.eta)
    put(None, "chains", args.chains)
    put(None, "workers", args.workers)
    put("output", "dir", args.out)
    if args.command == "sample":
        raw["method"] = "ddim"
    else:
        put(None, "method", args.method)
        put("step_size", "rho", args.rho)
        put(None, "travel", args.travel)
        put("inner", "steps", args.inner)
        put("inner", "optimizer", args.optimizer)
    return raw


def load_config(args) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected a JSON object")
    for key, value in _overrides(args).items():
        if isinstance(value, dict):
            section = raw.setdefault(key, {})
            if not isinstance(section, dict):
                raise ConfigError(key, "expected an object")
            section.update(value)
        else:
            raw[key] = value
    return ExperimentConfig.from_dict(raw)


def _summary(record) -> dict:
    curves = record.curves or []
    out = {
        "method": record.method,
        "config_hash": record.config_hash,
        "chains": len(record.terminal_samples),
        "failed": record.failed,
        "mean_loss": float(np.mean([v for v in record.losses if v is not None])) if any(
            v is not None for v in record.losses) else None,
        "jacobian_products_per_chain": record.telemetry["jacobian_products_per_chain"],
        "files": record.files,
    }
    if curves:
        T = record.config["schedule"]["T"]
        cos = [abs(r.cosine) for c in curves for r in c.rows if r.cosine is not None and r.t <= T / 2]
        out["mean_abs_cosine_late_half"] = float(np.mean(cos)) if cos else None
        out["max_terminal_off_manifold"] = float(max(c.rows[-1].off_manifold_norm for c in curves))
    if record.bound_audit is not None:
        out["bound_audit"] = record.bound_audit
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "verify":
        report = verify(args.suite, args.seed)
        text = json.dumps(report, indent=2)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            print(text)
        return EXIT_OK if report["passed"] else EXIT_VERIFY
    try:
        config = load_config(args)
        skip = args.no_trajectories or args.command == "diagnose"
        record = run_experiment(config, force=args.force, trajectories=False if skip else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileExistsError, PermissionError, NotADirectoryError) as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(_summary(record), indent=2))
    if record.failed:
        for err in record.errors:
            print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
