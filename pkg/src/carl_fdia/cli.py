"""Command-line entry point: ``carl <subcommand> [options]``.

Exit status 0 on success, 1 on configuration or usage errors, 2 on runtime
failures. Errors are reported as one line on stderr::

    error code=<code> message=<json string>
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import CarlError, ConfigError, InvalidInputError
from .grid import default_initial_state, generate_grid, save_grid
from .nn import dumps_json, write_atomic
from .orchestrator import Experiment, load_config

log = logging.getLogger("carl_fdia")

SUBCOMMANDS = {
    "gen-grid": "write a random grid parameter file and a matching initial state",
    "train-predictor": "train the next-state predictor",
    "train-offline": "train the offline detector D0 (runs earlier stages as needed)",
    "carl": "run CARL iterations (adversary phase then detector phase)",
    "rcarl": "rehearsal training of the ultimate detector and adversary",
    "evaluate": "cross-evaluate every detector against every adversary",
    "explain": "transition matrices, epsilon distances and droop histograms",
    "report": "render report.md from the evaluation and explain artifacts",
}
_TARGET = {"train-predictor": "predictor", "train-offline": "offline", "carl": "carl", "rcarl": "rcarl",
           "evaluate": "evaluate", "explain": "explain", "report": "report"}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 and a machine-readable line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(1)


def _emit_error(code: str, message: str) -> None:
    print(f"error code={code} message={json.dumps(message)}", file=sys.stderr)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON (may be partial)")
    p.add_argument("--output", type=Path, help="run directory (default: $CARL_OUTPUT_DIR or config output_dir)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted path (repeatable)")
    p.add_argument("--resume", action="store_true", help="continue a run from its last completed stage")
    p.add_argument("--dry-run", action="store_true", help="validate the config and print the plan")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="parallel workers for evaluation (1 = fully sequential)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carl", description="Continual adversarial RL for droop-tampering detection.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name, text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "carl":
            p.add_argument("--iterations", type=int, help="number of CARL iterations")
        if name == "gen-grid":
            p.add_argument("--n", type=int, default=10, help="bus count")
    return parser


def _output_dir(args, config) -> Path:
    if args.output is not None:
        return args.output
    env = os.environ.get("CARL_OUTPUT_DIR")
    if env:
        return Path(env)
    return Path(config["output_dir"])


def _configure_logging(args) -> None:
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _gen_grid(args, config, out: Path) -> int:
    seed = config["seed"]
    model = generate_grid(n=args.n, seed=seed)
    initial = default_initial_state(args.n, seed)
    state = {"theta": initial.theta.tolist(), "omega": initial.omega.tolist()}
    if args.dry_run:
        print(dumps_json({"grid": str(out / "grid.json"), "n": args.n, "seed": seed}), end="")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    save_grid(model, out / "grid.json")
    write_atomic(out / "initial_state.json", dumps_json(state))
    log.info("wrote %s", out / "grid.json")
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "iterations", None) is not None:
            overrides.append(f"carl.iterations={args.iterations}")
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        config = load_config(args.config, overrides)
        out = _output_dir(args, config)
        if args.command == "gen-grid":
            return _gen_grid(args, config, out)
        exp = Experiment(config, out, workers=args.workers, resume=args.resume or args.dry_run)
        target = _TARGET[args.command]
        if args.dry_run:
            print(dumps_json({"output": str(out), "config_hash": exp.hash, "stages": exp.plan(target)}), end="")
            return 0
    except (ConfigError, InvalidInputError) as exc:
        _emit_error(exc.code, str(exc))
        return 1
    except CarlError as exc:
        _emit_error(exc.code, str(exc))
        return 1 if args.dry_run else 2
    except OSError as exc:
        _emit_error("io", str(exc))
        return 2
    try:
        ran = exp.run(target)
    except KeyboardInterrupt:
        _emit_error("interrupted", "stopped; rerun with --resume to continue")
        return 2
    except ConfigError as exc:
        _emit_error(exc.code, str(exc))
        return 1
    except CarlError as exc:
        _emit_error(exc.code, str(exc))
        return 2
    except OSError as exc:
        _emit_error("io", str(exc))
        return 2
    log.info("completed stages: %s", ", ".join(ran) if ran else "none (already up to date)")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
