"""Command-line entry point: one subcommand per experiment kind.

    cylmvm <subcommand> --config <path> [--threads N] [--seed S] [--out DIR]

Configs are JSON; anything structured lives in the config, flags only
override the seed, thread count, and output directory. The seed can also
come from the CYLMVM_SEED environment variable (flag beats env beats
config). Outputs are results.json (all test reports), CSV path samples,
and summary.txt; the exit status is 0 only when every report passed,
1 on a failed report, 2 on a config/schema error, 3 on a numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .experiments import EXPERIMENT_KINDS, SchemaError, run_experiment
from .registry import list_registry
from .spde import NonFiniteStateError

__all__ = ["main", "run"]


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}")


def _write_outputs(out_dir: Path, experiment: str, seed: int, reports, artifacts):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "experiment": experiment,
        "seed": seed,
        "reports": [r.to_dict() for r in reports],
        "all_pass": all(r.passed for r in reports),
    }
    (out_dir / "results.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        oracle = "" if r.oracle is None else f" oracle={r.oracle!r}"
        rel = "" if r.rel_err is None else f" rel_err={r.rel_err:.3e}"
        lines.append(f"{status} {r.name} estimate={r.estimate!r}"
                     f" se={r.std_error!r} z={r.z_score:.3f}{oracle}{rel}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, content in artifacts.items():
        if isinstance(content, (dict, list)):
            content = json.dumps(content, sort_keys=True, indent=2) + "\n"
        (out_dir / name).write_text(content, encoding="utf-8")
    return payload["all_pass"]


def run(config_path: str, experiment: str | None = None, seed: int | None = None,
        threads: int | None = None, out_dir: str | None = None) -> int:
    """Run one experiment config; returns the process exit status."""
    try:
        cfg = _load_config(config_path)
        if experiment is not None:
            stated = cfg.get("experiment")
            if stated is None:
                cfg["experiment"] = experiment
            elif stated != experiment:
                raise SchemaError(
                    f"config says experiment {stated!r} but subcommand is {experiment!r}")
        if seed is None:
            env = os.environ.get("CYLMVM_SEED")
            if env is not None:
                try:
                    seed = int(env)
                except ValueError:
                    raise SchemaError(f"CYLMVM_SEED must be an integer, got {env!r}")
        if seed is not None:
            cfg["seed"] = seed
        if threads is not None and cfg.get("experiment") == "identities":
            cfg["threads"] = threads
        reports, artifacts = run_experiment(cfg)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteStateError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    out = Path(out_dir or cfg.get("out_dir", "out"))
    all_pass = _write_outputs(out, cfg["experiment"], cfg.get("seed", 0),
                              reports, artifacts)
    for line in (out / "summary.txt").read_text(encoding="utf-8").splitlines():
        print(line)
    return 0 if all_pass else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cylmvm",
        description="noise, stochastic-integral, and SPDE verification experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment from a config")
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
    p_list = sub.add_parser("list", help="list registered families/specs/coefficients")
    p_list.add_argument("--config", default=None,
                        help="optional config whose registrations are applied first")
    args = parser.parse_args(argv)
    if args.command == "list":
        if args.config:
            try:
                cfg = _load_config(args.config)
                from .experiments import _apply_registrations

                _apply_registrations(cfg)
            except SchemaError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return 2
        for name in list_registry():
            print(name)
        return 0
    return run(args.config, experiment=args.command, seed=args.seed,
               threads=args.threads, out_dir=args.out)


if __name__ == "__main__":
    sys.exit(main())
