import csv
import hashlib
import io
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set

import numpy as np
from colorama import Fore, Style
from tqdm import tqdm

from deskrec.config import Config, config_from_dict, load_config
from deskrec.domain import EventType, InteractionEvent
from deskrec.errors import ConfigError, InvariantViolation
from deskrec.eventlog import LogState
from deskrec.metrics import DailyRow, daily_metrics, lt_k, mau
from deskrec.pipeline import build_daily_state, tag_groups
from deskrec.simulator import DayResult, simulate_day
from deskrec.store import Workspace

logger = logging.getLogger(__name__)

BOOTSTRAP_RESAMPLES = 1000
CONFIDENCE = 0.95
DEFAULT_SALT = "deskrec"

# Launch annotations
LAUNCH = "launch"
NEUTRAL = "neutral"
REGRESS = "regress"
BASELINE = "baseline"
INSUFFICIENT = "insufficient"


# ---------------------------------------------------------------------------- plans

@dataclass
class ArmSpec:
    arm_id: str
    fraction: float
    config: Config = field(default_factory=Config)
    holdout: bool = False


@dataclass
class ExperimentPlan:
    """
    Arms with traffic fractions; a holdout arm keeps its config frozen
    """
    arms: List[ArmSpec]
    salt: str = DEFAULT_SALT
    holdout_enabled: bool = False

    def validate(self) -> "ExperimentPlan":
        if not self.arms: raise ConfigError("experiment plan needs at least one arm")
        ids = [a.arm_id for a in self.arms]
        if len(ids) != len(set(ids)): raise ConfigError("arm ids must be unique")
        if any(a.fraction < 0.0 for a in self.arms): raise ConfigError("arm fractions must be >= 0")
        if abs(sum(a.fraction for a in self.arms) - 1.0) > 1e-9: raise ConfigError("arm fractions must sum to 1")
        holdouts = sum(1 for a in self.arms if a.holdout)
        if self.holdout_enabled and holdouts != 1: raise ConfigError("exactly one holdout arm is required when holdout is enabled")
        if not self.holdout_enabled and holdouts: raise ConfigError("holdout arms need holdout = true in the plan")
        if all(a.holdout for a in self.arms): raise ConfigError("plan needs a non-holdout arm")
        return self

    @property
    def arm_ids(self) -> List[str]:
        return [a.arm_id for a in self.arms]

    @property
    def baseline(self) -> str:
        return next(a.arm_id for a in self.arms if not a.holdout)

    def arm(self, arm_id: str) -> ArmSpec:
        for a in self.arms:
            if a.arm_id == arm_id: return a
        raise KeyError(arm_id)


def single_arm_plan(config: Config, arm_id: str = "control") -> ExperimentPlan:
    return ExperimentPlan([ArmSpec(arm_id, 1.0, config)]).validate()


def load_plan(path: str, base: Config) -> ExperimentPlan:
    """
    Parse a TOML plan: `salt`, `holdout` and [[arms]] tables with `arm_id`,
    `fraction`, optional `holdout`, and either a `config` file path (relative
    to the plan) or an inline `overrides` table applied to `base`
    """
    try:
        with open(path, "rb") as file: data = tomllib.load(file)
    except FileNotFoundError as e: raise ConfigError(f"plan file not found: {path}") from e
    except tomllib.TOMLDecodeError as e: raise ConfigError(f"invalid TOML in {path}: {e}") from e

    # Arms
    arms = []
    for i, table in enumerate(data.get("arms", [])):
        unknown = set(table) - {"arm_id", "fraction", "holdout", "config", "overrides"}
        if unknown: raise ConfigError(f"arms[{i}]: unknown keys {sorted(unknown)}")
        if "arm_id" not in table or "fraction" not in table: raise ConfigError(f"arms[{i}] needs arm_id and fraction")
        if "config" in table: config = load_config(os.path.join(os.path.dirname(path), table["config"]))
        else: config = config_from_dict(table.get("overrides", {}), base)
        arms.append(ArmSpec(str(table["arm_id"]), float(table["fraction"]), config, bool(table.get("holdout", False))))
    return ExperimentPlan(arms, str(data.get("salt", DEFAULT_SALT)), bool(data.get("holdout", False))).validate()


def freeze_holdout(previous: ExperimentPlan, updated: ExperimentPlan) -> ExperimentPlan:
    """
    The updated plan, with the holdout arm's config kept from `previous`
    """
    frozen = {a.arm_id: a.config for a in previous.arms if a.holdout}
    arms = [ArmSpec(a.arm_id, a.fraction, frozen.get(a.arm_id, a.config), a.holdout) for a in updated.arms]
    return ExperimentPlan(arms, updated.salt, updated.holdout_enabled).validate()


def assign_arm(user_id: int, plan: ExperimentPlan) -> str:
    """
    Stable hash of (salt, user) mapped onto cumulative arm fractions
    """
    digest = hashlib.sha256(f"{plan.salt}:{user_id}".encode()).digest()
    point = int.from_bytes(digest[:8], "big") / float(1 << 64)
    cumulative = 0.0
    for arm in plan.arms:
        cumulative += arm.fraction
        if point < cumulative: return arm.arm_id
    return plan.arms[-1].arm_id


# ---------------------------------------------------------------------------- runs

def run_day(ws: Workspace) -> DayResult:
    """
    Start the day, refresh snapshots, serve every arm, ingest and train
    """
    world, log_state, plan = ws.world, ws.log_state, ws.plan
    day = world.day

    # Catalog growth happens before serving
    start = world.begin_day()
    for user in start.new_users: log_state.register_user(user.user_id, user.signup_day, user.demographic_group)
    for item in start.new_items: log_state.register_item(item)
    tag_groups(log_state, day, ws.config.special_groups)

    # Daily snapshot shared by the arms
    pool_ids = set().union(*(p.pool_ids() for p in ws.pipelines.values()))
    state = build_daily_state(log_state, ws.suite, ws.config, day, pool_ids)
    for pipeline in ws.pipelines.values(): pipeline.refresh(state)

    # Serve and simulate
    result = simulate_day(world, {a: p.serve_fn() for a, p in ws.pipelines.items()}, lambda u: assign_arm(u, plan))

    # Ingest, then train on the day
    log_state.ingest_many(result.events)
    ws.side_logger.append("events", (e.to_json() for e in result.events))
    ws.suite.observe(result.events)
    log_state.update_kol_scores(day, ws.config.utility.kol_decay, ws.config.utility.kol_scale)
    ws.suite.train_day(log_state, ws.side_logger, day, ws.checkpoint_dir)
    ws.write_snapshots(state, day)

    # Per-arm daily rows
    ws.minutes[day] = dict(result.ledger.minutes)
    ws.publishing[day] = set(result.ledger.publishing_users)
    ws.published_by_user[day] = dict(result.ledger.published_by_user)
    ws.last_day = day
    ws.rows.extend(arm_rows(ws, day, result.events))
    return result


def arm_rows(ws: Workspace, day: int, events: Sequence[InteractionEvent]) -> List[DailyRow]:
    """
    Daily metric rows for every arm; publishing and catalog counts are split by arm membership
    """
    log_state, plan = ws.log_state, ws.plan
    members: Dict[str, Set[int]] = defaultdict(set)
    for user_id in log_state.users: members[assign_arm(user_id, plan)].add(user_id)
    taxonomy_of = {i: item.taxonomy for i, item in log_state.items.items()}
    published = ws.published_by_user.get(day, {})
    rows = []
    for arm_id in plan.arm_ids:
        publishing = ws.publishing.get(day, set()) & members[arm_id]
        items = sum(count for user_id, count in published.items() if user_id in members[arm_id])
        rows.append(daily_metrics(events, day, arm_id, ws.minutes.get(day, {}), publishing, items,
                                  mau(log_state.activity, members[arm_id], day), taxonomy_of))
    return rows


def run_days(ws: Workspace, days: int, progress: bool = True) -> List[DayResult]:
    results = []
    for _ in tqdm(range(days), desc="simulating", unit="day", disable=not progress):
        results.append(run_day(ws))
    return results


# ---------------------------------------------------------------------------- reports

@dataclass
class Interval:
    mean: float
    low: float
    high: float

    def overlaps(self, other: "Interval") -> bool:
        return self.low <= other.high and other.low <= self.high


@dataclass
class ArmSummary:
    arm_id: str
    users: int
    lt7: Optional[Interval]
    lt7_by_day: Optional[float]
    lt30: Optional[float]
    duration: Optional[Interval]
    dau: Optional[Interval]
    dau_rate: Optional[Interval]
    mau: int
    impressions: int
    clicks: int
    follows: int
    follows_per_user: float
    participation: float
    slate_taxonomies: float
    decision: str = NEUTRAL


@dataclass
class MetricsReport:
    first_day: int
    last_day: int
    seed: int
    baseline: str
    arms: Dict[str, ArmSummary]
    daily: List[DailyRow]

    def to_dict(self) -> dict:
        return {"first_day": self.first_day, "last_day": self.last_day, "seed": self.seed, "baseline": self.baseline,
                "arms": {a: asdict(s) for a, s in sorted(self.arms.items())}, "daily": [r.to_dict() for r in self.daily]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        """
        Daily rows, one per (day, arm)
        """
        out = io.StringIO()
        columns = list(DailyRow.__dataclass_fields__)
        writer = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in self.daily: writer.writerow(row.to_dict())
        return out.getvalue()

    def summary_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["arm_id", "users", "lt7", "lt7_low", "lt7_high", "lt30", "duration", "dau", "dau_rate", "decision"])
        for arm_id, s in sorted(self.arms.items()):
            lt7 = s.lt7 or Interval(float("nan"), float("nan"), float("nan"))
            writer.writerow([arm_id, s.users, _fmt(lt7.mean), _fmt(lt7.low), _fmt(lt7.high), _fmt(s.lt30),
                             _fmt(s.duration.mean if s.duration else None), _fmt(s.dau.mean if s.dau else None),
                             _fmt(s.dau_rate.mean if s.dau_rate else None), s.decision])
        return out.getvalue()

    def to_tsv(self) -> str:
        """
        Whitespace-separated daily series for plotting
        """
        columns = ["day", "arm_id", "dau", "duration", "ctr", "participation", "slate_taxonomies"]
        lines = ["# " + "\t".join(columns)]
        for row in self.daily: lines.append("\t".join(str(row.to_dict()[c]) for c in columns))
        return "\n".join(lines) + "\n"

    def to_table(self, color: bool = True) -> str:
        """
        Terminal table of the per-arm summaries
        """
        paint = {LAUNCH: Fore.GREEN, REGRESS: Fore.RED, NEUTRAL: Fore.YELLOW, BASELINE: Fore.CYAN, INSUFFICIENT: Fore.WHITE}
        header = f"{'arm':<12}{'users':>7}{'LT7':>22}{'LT30':>8}{'duration':>10}{'DAU':>9}{'follows/u':>11}{'tax/slate':>10}  decision"
        lines = [f"days {self.first_day}..{self.last_day} (baseline {self.baseline})", header, "-" * len(header)]
        for arm_id, s in sorted(self.arms.items()):
            lt7 = f"{s.lt7.mean:.3f} [{s.lt7.low:.3f},{s.lt7.high:.3f}]" if s.lt7 else "n/a"
            decision = f"{paint[s.decision]}{s.decision}{Style.RESET_ALL}" if color else s.decision
            lines.append(f"{arm_id:<12}{s.users:>7}{lt7:>22}{_fmt(s.lt30):>8}{_fmt(s.duration.mean if s.duration else None):>10}"
                         f"{_fmt(s.dau.mean if s.dau else None):>9}{s.follows_per_user:>11.3f}{s.slate_taxonomies:>10.2f}  {decision}")
        return "\n".join(lines)

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as f: f.write(self.to_json())
        with open(os.path.join(out_dir, "report.csv"), "w") as f: f.write(self.to_csv())
        with open(os.path.join(out_dir, "summary.csv"), "w") as f: f.write(self.summary_csv())
        with open(os.path.join(out_dir, "report.tsv"), "w") as f: f.write(self.to_tsv())


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None or value != value else f"{value:.3f}"


def bootstrap_ratio(numerators: np.ndarray, denominators: np.ndarray, rng: np.random.Generator,
                    resamples: int = BOOTSTRAP_RESAMPLES, confidence: float = CONFIDENCE) -> Optional[Interval]:
    """
    Cluster bootstrap of sum(num) / sum(den): users are resampled with replacement
    """
    numerators, denominators = np.asarray(numerators, dtype=float), np.asarray(denominators, dtype=float)
    if len(numerators) == 0 or denominators.sum() <= 0: return None
    picks = rng.integers(len(numerators), size=(resamples, len(numerators)))
    den = denominators[picks].sum(axis=1)
    stats = np.divide(numerators[picks].sum(axis=1), den, out=np.full(resamples, np.nan), where=den > 0)
    tail = (1.0 - confidence) / 2.0 * 100.0
    low, high = np.nanpercentile(stats, [tail, 100.0 - tail])
    return Interval(float(numerators.sum() / denominators.sum()), float(low), float(high))


def _decide(arm: ArmSummary, base: ArmSummary) -> str:
    """
    launch: LT7 up with DAU at least neutral; regress: LT7 down; else neutral
    """
    if arm.lt7 is None or base.lt7 is None: return INSUFFICIENT
    if arm.lt7.high < base.lt7.low: return REGRESS
    dau_ok = arm.dau_rate is None or base.dau_rate is None or arm.dau_rate.high >= base.dau_rate.low
    if arm.lt7.low > base.lt7.high and dau_ok: return LAUNCH
    return NEUTRAL


def ab_report(log_state: LogState, plan: ExperimentPlan, first_day: int, last_day: int, last_simulated: int,
              minutes: Optional[Mapping[int, Mapping[int, float]]] = None, daily: Sequence[DailyRow] = (),
              seed: int = 0, resamples: int = BOOTSTRAP_RESAMPLES) -> MetricsReport:
    """
    Per-arm retention, duration and DAU with user-level bootstrap intervals,
    annotated with the launch decision against the baseline arm
    """
    if first_day > last_day: raise ValueError("empty day range")
    if last_day > last_simulated: raise ValueError(f"day {last_day} has not been simulated")
    minutes = minutes or {}
    activity = log_state.activity
    days = last_day - first_day + 1

    # Check arms in the log and count events
    known = set(plan.arm_ids)
    counts: Dict[str, Dict[EventType, int]] = {a: defaultdict(int) for a in known}
    for event in log_state.events_between(first_day, last_day):
        if event.arm_id not in known: raise InvariantViolation(f"event for unknown arm {event.arm_id}: {event.to_json()}")
        counts[event.arm_id][event.event_type] += 1

    # Users per arm that existed inside the range
    members: Dict[str, List[int]] = {a: [] for a in plan.arm_ids}
    for user_id in sorted(log_state.users):
        if log_state.users[user_id].signup_day <= last_day: members[assign_arm(user_id, plan)].append(user_id)

    summaries = {}
    rows = [r for r in daily if first_day <= r.day <= last_day]
    for index, arm_id in enumerate(plan.arm_ids):
        users = members[arm_id]

        # Per-user sums
        lt_sum, lt_count, lt30 = np.zeros(len(users)), np.zeros(len(users)), []
        spent, active_days, lifetime = np.zeros(len(users)), np.zeros(len(users)), np.zeros(len(users))
        lt_by_day: Dict[int, List[int]] = defaultdict(list)
        for k, user_id in enumerate(users):
            born = max(first_day, log_state.users[user_id].signup_day)
            lifetime[k] = last_day - born + 1
            for day in range(first_day, last_day + 1):
                if not activity.is_active(user_id, day): continue
                active_days[k] += 1
                spent[k] += minutes.get(day, {}).get(user_id, 0.0)
                value = lt_k(activity, user_id, day, 7, last_simulated)
                if value is not None: lt_sum[k] += value; lt_count[k] += 1; lt_by_day[day].append(value)
                value = lt_k(activity, user_id, day, 30, last_simulated)
                if value is not None: lt30.append(value)

        # Bootstrap intervals, one stream per (arm, metric)
        rng = lambda metric: np.random.default_rng([seed, index, metric])
        arm_rows = [r for r in rows if r.arm_id == arm_id]
        arm_counts = counts[arm_id]
        summaries[arm_id] = ArmSummary(
            arm_id, len(users),
            lt7=bootstrap_ratio(lt_sum, lt_count, rng(0), resamples),
            lt7_by_day=float(np.mean([np.mean(v) for _, v in sorted(lt_by_day.items())])) if lt_by_day else None,
            lt30=float(np.mean(lt30)) if lt30 else None,
            duration=bootstrap_ratio(spent, active_days, rng(1), resamples),
            dau=bootstrap_ratio(active_days, np.full(len(users), days / max(len(users), 1)), rng(2), resamples),
            dau_rate=bootstrap_ratio(active_days, lifetime, rng(3), resamples),
            mau=arm_rows[-1].mau if arm_rows else 0,
            impressions=arm_counts[EventType.IMPRESSION], clicks=arm_counts[EventType.CLICK], follows=arm_counts[EventType.FOLLOW],
            follows_per_user=arm_counts[EventType.FOLLOW] / max(len(users), 1),
            participation=float(np.mean([r.participation for r in arm_rows])) if arm_rows else 0.0,
            slate_taxonomies=float(np.mean([r.slate_taxonomies for r in arm_rows if r.dau])) if any(r.dau for r in arm_rows) else 0.0,
        )

    # Launch annotations
    base = summaries[plan.baseline]
    for arm_id, summary in summaries.items():
        summary.decision = BASELINE if arm_id == plan.baseline else _decide(summary, base)
    return MetricsReport(first_day, last_day, seed, plan.baseline, summaries, list(rows))


def workspace_report(ws: Workspace, first_day: Optional[int] = None, last_day: Optional[int] = None,
                     seed: int = 0, resamples: int = BOOTSTRAP_RESAMPLES) -> MetricsReport:
    first = 0 if first_day is None else first_day
    last = ws.last_day if last_day is None else last_day
    return ab_report(ws.log_state, ws.plan, first, last, ws.last_day, ws.minutes, ws.rows, seed, resamples)
