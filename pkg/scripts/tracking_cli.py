#!/usr/bin/env python3
"""
Command-line entrypoint for funnel synthesis, planning and simulation.

Exit codes: 0 success, 1 unexpected failure, 2 config or artifact error,
3 initialization failure, 4 alternation failure, 5 unsafe, 6 simulation
or planning failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from tracking_funnels.tools.planning import cmd_plan
from tracking_funnels.tools.project import cmd_describe_config, cmd_run_demo
from tracking_funnels.tools.simulation import cmd_simulate
from tracking_funnels.tools.synthesis import (
    cmd_check_safety,
    cmd_extract_teb,
    cmd_synthesize,
)

logger = logging.getLogger(__name__)


def _schedule(text: str) -> list[float]:
    try:
        factors = [float(f) for f in text.split(",") if f.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid shrink schedule '{text}'") from e
    if not factors or any(not 0 < f <= 1 for f in factors):
        raise argparse.ArgumentTypeError(
            "shrink schedule needs factors in (0, 1], e.g. 1.0,0.9,0.8"
        )
    return factors


def _substeps(text: str) -> int:
    value = int(text)
    if value < 10:
        raise argparse.ArgumentTypeError("at least 10 substeps are required")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracking-funnels",
        description="Planner-tracker funnel synthesis and closed-loop simulation",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging"
    )
    verbs = parser.add_subparsers(dest="verb", required=True)

    def add(name: str, help_text: str, config: bool = True):
        sub = verbs.add_parser(name, help=help_text)
        if config:
            sub.add_argument(
                "--config", required=True, help="Project config (.json/.yaml)"
            )
        sub.add_argument("--out", help="Output directory override")
        return sub

    synth = add("synthesize", "Synthesize funnel, TEB and safety verdict")
    synth.add_argument("--shrink-schedule", type=_schedule)
    synth.add_argument("--seed", type=int, default=0)

    add("extract-teb", "Re-extract the TEB of a persisted funnel")

    check = add("check-safety", "Check the persisted TEB against constraints")
    check.add_argument("--seed", type=int, default=0)

    add("plan", "Run the planner alone to the goal")

    sim = add("simulate", "Simulate and audit the closed loop")
    sim.add_argument("--substeps", type=_substeps)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--fault-scale-kappa", type=float)
    sim.add_argument("--duration", type=float)

    add("describe-config", "Validate a config and print its error system")

    demo = add("demo", "Run a built-in scenario end to end", config=False)
    demo.add_argument("name", choices=["integrator", "vehicle"])
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--substeps", type=_substeps)
    demo.add_argument("--shrink-schedule", type=_schedule)
    demo.add_argument("--fault-scale-kappa", type=float)
    return parser


def run(args: argparse.Namespace) -> dict:
    if args.verb == "synthesize":
        return cmd_synthesize(args.config, args.out, args.shrink_schedule, args.seed)
    if args.verb == "extract-teb":
        return cmd_extract_teb(args.config, args.out)
    if args.verb == "check-safety":
        return cmd_check_safety(args.config, args.out, args.seed)
    if args.verb == "plan":
        return cmd_plan(args.config, args.out)
    if args.verb == "simulate":
        return cmd_simulate(
            args.config,
            args.out,
            substeps=args.substeps,
            seed=args.seed,
            fault_scale_kappa=args.fault_scale_kappa,
            duration=args.duration,
        )
    if args.verb == "describe-config":
        return cmd_describe_config(args.config)
    return cmd_run_demo(
        args.name,
        args.out,
        seed=args.seed,
        substeps=args.substeps,
        shrink_schedule=args.shrink_schedule,
        fault_scale_kappa=args.fault_scale_kappa,
    )


def main(argv: list[str] | None = None) -> int:
    """Main entrypoint for the CLI."""
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        result = run(args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    if result["status"] != "ok":
        logger.error(result["message"])
    return int(result.get("exit_code", 1))


if __name__ == "__main__":
    sys.exit(main())
