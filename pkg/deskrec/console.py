import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from colorama import Fore, Style, just_fix_windows_console

from deskrec.config import Config, load_config
from deskrec.errors import ConfigError, DeskRecError, InvariantViolation
from deskrec.experiment import (freeze_holdout, load_plan, run_days, single_arm_plan, workspace_report)
from deskrec.metrics import lt_k
from deskrec.pipeline import STAGES
from deskrec.store import Workspace

logger = logging.getLogger(__name__)

DEFAULT_WORKSPACE = "deskrec_run"
FORMATS = ("table", "json", "csv", "tsv")

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _workspace(path: str) -> Workspace:
    ws = Workspace()
    if not ws.open(path): raise ConfigError(f"no workspace at {path}; run `simulate` first")
    return ws


def _fresh_or_open(path: str, config: Config, plan, seed: int) -> Workspace:
    """
    Resume the workspace at `path` when present, otherwise create it
    """
    ws = Workspace()
    if ws.open(path):
        logger.info("resuming workspace %s at day %d", path, ws.world.day)
        return ws
    return ws.create(config, plan, seed, path)


def _emit(report, fmt: str) -> str:
    if fmt == "json": return report.to_json()
    if fmt == "csv": return report.to_csv()
    if fmt == "tsv": return report.to_tsv()
    return report.to_table(color=sys.stdout.isatty())


# ---------------------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    config = load_config(args.config)
    ws = _fresh_or_open(args.out, config, single_arm_plan(config), args.seed)
    run_days(ws, args.days, progress=not args.quiet)
    ws.close()

    # Reports
    report = workspace_report(ws, seed=args.seed)
    report.write(os.path.join(args.out, "reports"))
    print(_emit(report, "table"))
    return EXIT_OK


def cmd_train(args) -> int:
    ws = _workspace(args.workspace)
    if args.day > ws.last_day: raise ConfigError(f"day {args.day} has no logs yet (last simulated day {ws.last_day})")
    result = ws.suite.train_stage(args.stage, ws.log_state, ws.side_logger, args.day, ws.checkpoint_dir)
    ws.close()
    print(f"{args.stage} on day {args.day}: {result}")
    return EXIT_OK


def cmd_ab_test(args) -> int:
    base = load_config(args.config)
    plan = load_plan(args.plan, base)
    ws = Workspace()
    if ws.open(args.out):
        if sorted(ws.plan.arm_ids) != sorted(plan.arm_ids): raise ConfigError("plan arms differ from the workspace's arms")
        ws.plan = freeze_holdout(ws.plan, plan)
    else:
        ws.create(base, plan, args.seed, args.out)
    run_days(ws, args.days, progress=not args.quiet)
    ws.close()

    # Reports
    report = workspace_report(ws, seed=args.seed)
    report.write(os.path.join(args.out, "reports"))
    print(_emit(report, "table"))
    return EXIT_OK


def cmd_report(args) -> int:
    ws = _workspace(args.log)
    report = workspace_report(ws, args.first_day, args.last_day, args.seed)
    print(_emit(report, args.format), end="" if args.format in ("csv", "tsv") else "\n")
    return EXIT_OK


def cmd_inspect_user(args) -> int:
    ws = _workspace(args.workspace)
    user = ws.log_state.users.get(args.id)
    if user is None: raise ConfigError(f"unknown user {args.id}")
    activity = ws.log_state.activity
    days = activity.active_days(args.id)
    info = {
        "user_id": user.user_id,
        "signup_day": user.signup_day,
        "demographic_group": user.demographic_group,
        "group_tag": user.group_tag,
        "follow_count": user.follow_count,
        "kol_score": user.kol_score,
        "last_n": user.recent_items(),
        "active_days": days,
        "lt7": {str(d): lt_k(activity, args.id, d, 7, ws.last_day) for d in days if d + 6 <= ws.last_day},
        "stats": ws.log_state.user_stats[args.id].to_dict() if args.id in ws.log_state.user_stats else {},
    }
    print(f"{Fore.CYAN}user {args.id}{Style.RESET_ALL}" if sys.stdout.isatty() else f"user {args.id}")
    print(json.dumps(info, sort_keys=True, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskrec", description="Desk-scale recommender pipeline, user simulator and experiment console")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="no progress bar")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run the closed loop with one arm")
    simulate.add_argument("--config", help="TOML config (defaults when omitted)")
    simulate.add_argument("--days", type=int, default=30)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--out", default=DEFAULT_WORKSPACE)
    simulate.set_defaults(func=cmd_simulate)

    train = commands.add_parser("train", help="retrain one model stage on a simulated day")
    train.add_argument("--stage", choices=STAGES, required=True)
    train.add_argument("--day", type=int, required=True)
    train.add_argument("--workspace", default=DEFAULT_WORKSPACE)
    train.set_defaults(func=cmd_train)

    ab_test = commands.add_parser("ab-test", help="run an experiment plan")
    ab_test.add_argument("--plan", required=True)
    ab_test.add_argument("--days", type=int, default=30)
    ab_test.add_argument("--config", help="base TOML config for inline arm overrides")
    ab_test.add_argument("--seed", type=int, default=0)
    ab_test.add_argument("--out", default=DEFAULT_WORKSPACE)
    ab_test.set_defaults(func=cmd_ab_test)

    report = commands.add_parser("report", help="metrics report for a workspace")
    report.add_argument("--log", default=DEFAULT_WORKSPACE)
    report.add_argument("--format", choices=FORMATS, default="table")
    report.add_argument("--first-day", type=int)
    report.add_argument("--last-day", type=int)
    report.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    report.set_defaults(func=cmd_report)

    inspect = commands.add_parser("inspect-user", help="show one user's state")
    inspect.add_argument("--id", type=int, required=True)
    inspect.add_argument("--workspace", default=DEFAULT_WORKSPACE)
    inspect.set_defaults(func=cmd_inspect_user)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    just_fix_windows_console()
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except InvariantViolation as e:
        logger.error("invariant violation: %s", e)
        return EXIT_INVARIANT
    except DeskRecError as e:
        logger.error("%s", e)
        return e.exit_code
