"""
Command-line surface: classify, rates, hardness, degeneracy, gen-instance,
validate.

Exit codes: 0 on success (budget exhaustion is flagged in the summary),
2 on configuration, parameter or IO errors, 3 on internal invariant
violations.
"""

import argparse
import sys
import uuid
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from . import __version__
from .config import get_settings
from .experiments import build_instance, cmd_classify, cmd_degeneracy, cmd_hardness, cmd_rates
from .expert import validate_expert_jsonl
from .logging_config import get_logger, set_run_id, setup_logging
from .mdp_core import ConfigError, IrlCompatError, ParameterError
from .models import InstanceBlock
from .store import load_experiment_config, load_instance, save_instance, validate_instance_file

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

EXPERIMENTS = {
    "classify": cmd_classify,
    "rates": cmd_rates,
    "hardness": cmd_hardness,
    "degeneracy": cmd_degeneracy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irlcompat",
        description="Reward compatibility classification for inverse reinforcement learning",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="overrides IRLCOMPAT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment from a TOML config")
        cmd.add_argument("--config", required=True, type=Path)
        cmd.add_argument("--out-dir", type=Path, default=None,
                         help="defaults to output.out_dir of the config")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker processes over seeds")
        if name == "classify":
            cmd.add_argument("--oracle", dest="oracle", action="store_true", default=None,
                             help="compare against exact compatibilities")
            cmd.add_argument("--no-oracle", dest="oracle", action="store_false")

    gen = sub.add_parser("gen-instance", help="write an instance document")
    gen.add_argument("--config", type=Path, default=None,
                     help="take the [instance] block of an experiment config")
    gen.add_argument("--source", choices=["named", "random", "tree", "packing"],
                     default="random")
    gen.add_argument("--name", default=None)
    gen.add_argument("--states", type=int, default=5)
    gen.add_argument("--actions", type=int, default=3)
    gen.add_argument("--horizon", type=int, default=5)
    gen.add_argument("--feature-dim", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True)

    val = sub.add_parser("validate", help="check an instance document or expert JSONL file")
    val.add_argument("--instance", type=Path, default=None)
    val.add_argument("--expert", type=Path, default=None,
                     help="JSONL episodes; dimensions come from --instance")
    return parser


def _run_experiment(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    out_dir = args.out_dir or Path(config.output.out_dir)
    threads = args.threads or get_settings().default_threads
    kwargs = {"oracle": args.oracle} if args.command == "classify" else {}
    summary = EXPERIMENTS[args.command](config, out_dir, threads, **kwargs)
    if summary.get("budget_exhausted_runs"):
        logger.warning(f"{summary['budget_exhausted_runs']} runs exhausted their budget")
    print(f"{args.command}: results written to {out_dir}")
    return EXIT_OK


def _gen_instance(args: argparse.Namespace) -> int:
    if args.config is not None:
        block = load_experiment_config(args.config).instance
    else:
        block = InstanceBlock(source=args.source, name=args.name, num_states=args.states,
                              num_actions=args.actions, horizon=args.horizon,
                              feature_dim=args.feature_dim)
    bundle = build_instance(block, args.seed)
    bundle.provenance.setdefault("seed", args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_instance(bundle, args.out)
    print(f"wrote {bundle.name} instance to {args.out}")
    return EXIT_OK


def _validate(args: argparse.Namespace) -> int:
    if args.instance is None:
        raise ConfigError("validate needs --instance (and optionally --expert)")
    problems = [f"instance {p}" for p in validate_instance_file(args.instance)]
    if not problems and args.expert is not None:
        mdp = load_instance(args.instance).mdp
        problems = [f"expert line {p.line}: {p.reason}" for p in validate_expert_jsonl(
            args.expert, mdp.num_states, mdp.num_actions, mdp.horizon)]
    for problem in problems:
        print(problem, file=sys.stderr)
    if problems:
        return EXIT_CONFIG
    print("valid")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(args.log_level or settings.log_level, settings.log_format)
    set_run_id(uuid.uuid4().hex[:12])

    try:
        if args.command == "gen-instance":
            return _gen_instance(args)
        if args.command == "validate":
            return _validate(args)
        return _run_experiment(args)
    except (ConfigError, ParameterError, OSError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except IrlCompatError as e:
        logger.error(f"Internal error: {e}", exc_info=True)
        return EXIT_INTERNAL
