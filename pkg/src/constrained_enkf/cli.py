"""Command-line entry point: ``cenkf --preset quadratic-convex --out runs/``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .constraints import RepairError
from .experiment import (DEFAULT_J_LIST, EXIT_CONFIG_ERROR, EXIT_CODES, PRESETS, ConfigError,
                         build_config, parse_config_text, parse_j_list, run_experiment)

# argparse dest -> config key
_OVERRIDES = {
    "preset": "preset", "d": "d", "J": "J", "gamma": "gamma",
    "seed_noise": "seed_noise", "seed_ensemble": "seed_ensemble", "seed_b": "seed_b",
    "max_steps": "max_steps", "out": "out", "T": "T", "dt": "dt",
}


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's own status 2 means max_steps here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="cenkf",
        description="Run a constrained ensemble Kalman experiment and write CSV + JSON diagnostics.",
        epilog="Exit codes: 0 discrepancy reached (or trajectory completed), 2 max_steps reached, "
               "3 numerical failure, 4 configuration error. Values on the command line override "
               "the config file, which overrides built-in defaults.")
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--preset", choices=PRESETS, help="experiment preset (default quadratic-convex)")
    p.add_argument("--d", type=int, help="number of interior grid nodes (default 256)")
    p.add_argument("--J", type=int, help="ensemble size (default depends on the preset)")
    p.add_argument("--J-list", dest="J_list", nargs="?", const="default",
                   help="comma-separated ensemble sizes to run in turn; without a value the "
                        "preset's list is used (40,80,160 convex; 40,...,640 non-convex)")
    p.add_argument("--gamma", type=float, help="noise level (default 0.01)")
    p.add_argument("--seed-noise", dest="seed_noise", type=int, help="seed for the observation noise")
    p.add_argument("--seed-ensemble", dest="seed_ensemble", type=int, help="seed for the initial ensemble")
    p.add_argument("--seed-b", dest="seed_b", type=int, help="seed for the constraint vector b")
    p.add_argument("--max-steps", dest="max_steps", type=int, help="hard cap on filter steps (IMEX steps, or iterations for linear-symmetry)")
    p.add_argument("--T", type=float, help="horizon for the counterexample preset")
    p.add_argument("--dt", type=float, help="step for the counterexample preset")
    p.add_argument("--out", help="output directory (falls back to $CENKF_OUT_DIR)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded execution (runs are always single-threaded; accepted for compatibility)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def resolve_values(args: argparse.Namespace) -> dict:
    values = {}
    if args.config is not None:
        try:
            values.update(parse_config_text(args.config.read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    for dest, key in _OVERRIDES.items():
        v = getattr(args, dest)
        if v is not None:
            values[key] = v
    if args.J_list is not None:
        values["J_list"] = args.J_list
    # the discrete preset has its own iteration cap
    if values.get("preset") == "linear-symmetry" and args.max_steps is not None:
        values["discrete_max_steps"] = args.max_steps
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_values(args)
        j_list = values.pop("J_list", None)
        base = build_config(values)
        if j_list == "default":
            j_list = DEFAULT_J_LIST.get(base.preset, (base.J,))
        elif j_list is not None and not isinstance(j_list, tuple):
            j_list = parse_j_list(j_list)
        configs = [base] if j_list is None else [build_config({**values, "J": J}) for J in j_list]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    code = 0
    for config in configs:
        try:
            result = run_experiment(config)
        except RepairError as exc:
            print(f"{config.stem}: setup failed: {exc}", file=sys.stderr)
            code = max(code, EXIT_CODES["error"])
            continue
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        meta = result.metadata
        line = f"{config.stem}: {result.termination}"
        if "steps" in meta:
            line += f" after {meta['steps']} steps"
        if result.csv_path is not None:
            line += f" -> {result.csv_path}"
        print(line)
        if "error" in meta:
            print(f"  {meta['error']}", file=sys.stderr)
        code = max(code, result.exit_code)
    return code


if __name__ == "__main__":
    sys.exit(main())
