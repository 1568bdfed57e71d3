"""Command line entry point: ``mchmc sample ...``."""

from __future__ import annotations

import argparse
import json
import sys

from .bench import ConfigError, TUNE_MODES, build_config, read_config_file, run_experiment
from .samplers import ALGORITHMS
from .targets import TARGET_NAMES


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mchmc", description="Microcanonical HMC / Langevin samplers")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("sample", help="run an experiment and write its convergence report")
    s.add_argument("--config", help="flat 'key = value' configuration file; flags override it")
    s.add_argument("--target", choices=TARGET_NAMES)
    s.add_argument("--d", type=int)
    s.add_argument("--kappa", type=float)
    s.add_argument("--q", dest="Q", type=float, help="Rosenbrock variance parameter")
    s.add_argument("--alg", dest="algorithm", choices=ALGORITHMS)
    s.add_argument("--integrator", choices=("lf", "mn", "leapfrog", "minimal_norm"))
    s.add_argument("--eps", type=float)
    s.add_argument("--L", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seeds", type=int)
    s.add_argument("--seed", type=int, help="first seed (default 0)")
    s.add_argument("--tune", choices=TUNE_MODES)
    s.add_argument("--eps-grid", dest="eps_grid", help="comma separated step sizes for --tune grid")
    s.add_argument("--L-grid", dest="L_grid", help="comma separated lengths for --tune grid")
    s.add_argument("--varE-target", dest="varE_target", type=float)
    s.add_argument("--refine-steps", dest="refine_steps", type=int,
                   help="initial length of the preliminary run that sets L")
    s.add_argument("--out")
    s.add_argument("--returns-csv", dest="returns_csv")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    values = vars(args)
    values.pop("command")
    path = values.pop("config")
    try:
        file_values = read_config_file(path) if path else {}
        config = build_config(file_values, **values)
        report = run_experiment(config)
    except (ConfigError, ValueError) as err:
        print(f"mchmc: configuration error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"mchmc: I/O error: {err}", file=sys.stderr)
        return 3
    summary = report.summary()
    if not report.converged:
        print("mchmc: no chain reached the bias threshold (ESS = 0)", file=sys.stderr)
    print(json.dumps({k: summary[k] for k in ("target", "algorithm", "integrator", "ess_mean", "ess_std")}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
