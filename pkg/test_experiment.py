import json
import os
from dataclasses import replace

import numpy as np
import pytest

from deskrec.config import Config, DiversityConfig
from deskrec.console import EXIT_CONFIG, EXIT_OK, main
from deskrec.domain import EventType, InteractionEvent, Item
from deskrec.errors import ConfigError, InvariantViolation
from deskrec.eventlog import LogState
from deskrec.experiment import (BASELINE, INSUFFICIENT, LAUNCH, NEUTRAL, REGRESS, ArmSpec, ExperimentPlan, Interval,
                                ab_report, arm_rows, assign_arm, bootstrap_ratio, freeze_holdout, load_plan, run_days,
                                single_arm_plan, workspace_report)
from deskrec.index import ActivityIndex
from deskrec.metrics import DailyRow, daily_metrics, lt_k, mau, mean_lt
from deskrec.store import Workspace

SMALL_TOML = """
[sim]
initial_users = 40
initial_authors = 8
initial_items = 120
daily_new_users = 2
daily_new_authors = 1

[model]
embedding_dim = 8
tower_hidden = 16
ranker_layers = [16]
residual_hidden = 8
sim_cap = 8

[training]
mix = [8, 4, 16, 4]
rank_batch_size = 32

[sizes]
retrieval = 60
prerank = 30
rank = 20
slate = 10

[diversity]
clusters = 8
"""


def _plan(*arms, salt="ab", holdout=False) -> ExperimentPlan:
    return ExperimentPlan([ArmSpec(a, f, Config(), h) for a, f, h in arms], salt, holdout)


# ---------------------------------------------------------------------------- assignment and plans

def test_assign_arm_is_stable():
    plan = _plan(("a", 0.5, False), ("b", 0.5, False))
    assert all(assign_arm(u, plan) == assign_arm(u, plan) for u in range(100))
    assert {assign_arm(u, single_arm_plan(Config())) for u in range(100)} == {"control"}


def test_assign_arm_splits_evenly():
    plan = _plan(("a", 0.5, False), ("b", 0.5, False))
    count = sum(1 for u in range(10_000) if assign_arm(u, plan) == "a")
    assert abs(count - 5000) <= 200


def test_assign_arm_depends_on_salt():
    first, second = _plan(("a", 0.5, False), ("b", 0.5, False)), _plan(("a", 0.5, False), ("b", 0.5, False), salt="other")
    assert any(assign_arm(u, first) != assign_arm(u, second) for u in range(100))


@pytest.mark.parametrize("plan", [
    _plan(),
    _plan(("a", 0.5, False), ("a", 0.5, False)),
    _plan(("a", 1.2, False), ("b", -0.2, False)),
    _plan(("a", 0.5, False), ("b", 0.4, False)),
    _plan(("a", 0.5, False), ("b", 0.5, False), holdout=True),
    _plan(("a", 0.5, True), ("b", 0.5, False)),
    _plan(("a", 1.0, True), holdout=True),
])
def test_invalid_plans(plan):
    with pytest.raises(ConfigError):
        plan.validate()


def test_baseline_skips_the_holdout():
    plan = _plan(("held", 0.1, True), ("control", 0.45, False), ("treat", 0.45, False), holdout=True).validate()
    assert plan.baseline == "control"
    assert plan.arm("treat").fraction == 0.45
    with pytest.raises(KeyError):
        plan.arm("missing")


def test_load_plan(tmp_path):
    path = tmp_path / "plan.toml"
    path.write_text("""
salt = "exp1"
holdout = true

[[arms]]
arm_id = "held"
fraction = 0.2
holdout = true

[[arms]]
arm_id = "control"
fraction = 0.4

[[arms]]
arm_id = "dpp"
fraction = 0.4

[arms.overrides.diversity]
method = "dpp"
""")
    plan = load_plan(str(path), Config())
    assert plan.salt == "exp1" and plan.holdout_enabled
    assert plan.arm_ids == ["held", "control", "dpp"]
    assert plan.arm("dpp").config.diversity.method == "dpp"
    assert plan.arm("control").config.diversity.method == "mmr"


def test_load_plan_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_plan(str(tmp_path / "missing.toml"), Config())
    broken = tmp_path / "broken.toml"
    broken.write_text("[[arms]\narm_id = ")
    with pytest.raises(ConfigError):
        load_plan(str(broken), Config())
    unknown = tmp_path / "unknown.toml"
    unknown.write_text('[[arms]]\narm_id = "a"\nfraction = 1.0\nweight = 3\n')
    with pytest.raises(ConfigError):
        load_plan(str(unknown), Config())


def test_freeze_holdout_keeps_the_old_config():
    old = Config()
    new = replace(Config(), diversity=DiversityConfig(method="dpp"))
    previous = ExperimentPlan([ArmSpec("held", 0.5, old, True), ArmSpec("control", 0.5, old)], holdout_enabled=True)
    updated = ExperimentPlan([ArmSpec("held", 0.5, new, True), ArmSpec("control", 0.5, new)], holdout_enabled=True)
    frozen = freeze_holdout(previous, updated)
    assert frozen.arm("held").config is old
    assert frozen.arm("control").config is new


# ---------------------------------------------------------------------------- metrics

def _activity(days_by_user) -> ActivityIndex:
    activity = ActivityIndex()
    for user_id, days in days_by_user.items(): activity.mark_many(user_id, days)
    return activity


def test_lt_examples():
    activity = _activity({1: [10, 11, 13, 16], 2: [10], 3: range(10, 17)})
    assert lt_k(activity, 1, 10, 7, 16) == 4
    assert lt_k(activity, 2, 10, 7, 16) == 1
    assert lt_k(activity, 3, 10, 7, 16) == 7
    assert lt_k(activity, 3, 10, 7, 15) is None
    assert lt_k(activity, 3, 10, 30, 100) == 7


def test_lt_errors():
    activity = _activity({1: [10]})
    with pytest.raises(ValueError):
        lt_k(activity, 1, 11, 7, 20)
    with pytest.raises(ValueError):
        lt_k(activity, 1, 10, 0, 20)


def test_lt_is_monotone_in_activity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        days = {0} | {int(d) for d in rng.integers(1, 7, size=int(rng.integers(0, 6)))}
        before = lt_k(_activity({1: days}), 1, 0, 7, 6)
        after = lt_k(_activity({1: days | {int(rng.integers(1, 7))}}), 1, 0, 7, 6)
        assert after >= before


def test_mean_lt_and_mau():
    activity = _activity({1: [0, 2], 2: [0], 3: [5]})
    assert mean_lt(activity, [1, 2, 3], 0, 7, 6) == pytest.approx(1.5)
    assert mean_lt(activity, [3], 0, 7, 6) is None
    assert mau(activity, [1, 2, 3], 4) == 2
    assert mau(activity, [1, 2, 3], 40) == 0


def _impressions(day, users, arm_id="control"):
    return [InteractionEvent(day, k, u, 10, EventType.IMPRESSION, 0, arm_id=arm_id) for k, u in enumerate(users)]


def test_daily_metrics_participation_and_duration():
    events = _impressions(3, [1, 2]) + [InteractionEvent(3, 2, 1, 10, EventType.CLICK, arm_id="control")]
    row = daily_metrics(events, 3, "control", minutes={1: 10.0, 2: 20.0}, publishing_users={2, 9}, published_items=4)
    assert row.dau == 2
    assert row.duration == pytest.approx(15.0)
    assert row.participation == pytest.approx(1.0)
    assert row.ctr == pytest.approx(0.5)
    assert row.published_items == 4

    row = daily_metrics(events, 3, "control", publishing_users={2})
    assert row.participation == pytest.approx(0.5)


def test_daily_metrics_zero_day():
    row = daily_metrics(_impressions(2, [1]), 3, "control")
    assert row == DailyRow(3, "control")
    assert daily_metrics(_impressions(3, [1], "other"), 3, "control").dau == 0


def test_daily_metrics_slate_taxonomies():
    events = [InteractionEvent(0, k, 1, item, EventType.IMPRESSION, k) for k, item in enumerate((10, 11, 12))]
    row = daily_metrics(events, 0, "control", taxonomy_of={10: 1, 11: 2, 12: 1})
    assert row.slate_taxonomies == 2.0


# ---------------------------------------------------------------------------- bootstrap

def test_bootstrap_ratio():
    num, den = np.array([4.0, 7.0, 1.0, 6.0]), np.array([1.0, 1.0, 1.0, 1.0])
    interval = bootstrap_ratio(num, den, np.random.default_rng(0), resamples=500)
    assert interval.mean == pytest.approx(4.5)
    assert 1.0 <= interval.low <= interval.mean <= interval.high <= 7.0
    assert interval == bootstrap_ratio(num, den, np.random.default_rng(0), resamples=500)


def test_bootstrap_degenerate_inputs():
    rng = np.random.default_rng(0)
    assert bootstrap_ratio(np.zeros(0), np.zeros(0), rng) is None
    assert bootstrap_ratio(np.ones(3), np.zeros(3), rng) is None
    constant = bootstrap_ratio(np.full(5, 3.0), np.ones(5), rng, resamples=100)
    assert (constant.low, constant.mean, constant.high) == (3.0, 3.0, 3.0)


def test_interval_overlap():
    assert Interval(1.0, 0.5, 1.5).overlaps(Interval(2.0, 1.4, 2.5))
    assert not Interval(1.0, 0.5, 1.5).overlaps(Interval(2.0, 1.6, 2.5))


# ---------------------------------------------------------------------------- A/B reports

PATTERNS = {
    "daily": range(14),
    "even": range(0, 14, 2),
    "sparse": (0, 5, 10),
    "mixed": (0, 1, 2, 4, 7, 8, 9, 12),
}


def _ab_log(plan, users, patterns_by_arm) -> LogState:
    """
    One impression per active day; inside an arm users cycle through the
    arm's activity patterns in id order
    """
    state = LogState()
    for day in range(14): state.register_item(Item(1000 + day, author_id=1, publish_day=0, taxonomy=0))
    members = {a: [] for a in plan.arm_ids}
    for user_id in range(users):
        state.register_user(user_id, 0)
        members[assign_arm(user_id, plan)].append(user_id)
    for arm_id, ids in members.items():
        patterns = patterns_by_arm[arm_id]
        for k, user_id in enumerate(ids):
            for day in PATTERNS[patterns[k % len(patterns)]]:
                state.ingest(InteractionEvent(day, user_id, user_id, 1000 + day, EventType.IMPRESSION, 0, arm_id=arm_id))
    return state


@pytest.fixture
def two_arms() -> ExperimentPlan:
    return _plan(("control", 0.5, False), ("treat", 0.5, False)).validate()


def test_aa_report_is_neutral(two_arms):
    mix = ["daily", "even", "sparse", "mixed"]
    state = _ab_log(two_arms, 200, {"control": mix, "treat": mix})
    report = ab_report(state, two_arms, 0, 6, 13, seed=1, resamples=300)
    control, treat = report.arms["control"], report.arms["treat"]
    assert control.decision == BASELINE
    assert treat.lt7.overlaps(control.lt7)
    assert treat.decision == NEUTRAL
    assert 1.0 <= control.lt7.mean <= 7.0


@pytest.mark.parametrize("control, treat, decision", [(["even"], ["daily"], LAUNCH), (["daily"], ["even"], REGRESS)])
def test_launch_decisions(two_arms, control, treat, decision):
    state = _ab_log(two_arms, 60, {"control": control, "treat": treat})
    report = ab_report(state, two_arms, 0, 6, 13, resamples=200)
    assert report.arms["treat"].decision == decision
    assert report.arms["control"].lt7.mean == pytest.approx(7.0 if control == ["daily"] else 4.0)


def test_incomplete_windows_are_insufficient(two_arms):
    state = _ab_log(two_arms, 20, {"control": ["daily"], "treat": ["daily"]})
    report = ab_report(state, two_arms, 10, 13, 13, resamples=50)
    assert report.arms["treat"].lt7 is None
    assert report.arms["treat"].decision == INSUFFICIENT
    assert report.arms["treat"].dau.mean > 0


def test_dropping_low_retention_users_raises_lt_and_lowers_dau():
    plan = single_arm_plan(Config())
    everyone = ab_report(_ab_log(plan, 40, {"control": ["daily", "sparse"]}), plan, 0, 6, 13, resamples=100)
    retained = ab_report(_ab_log(plan, 40, {"control": ["daily"]}), plan, 0, 6, 13, resamples=100)
    assert retained.arms["control"].lt7.mean > everyone.arms["control"].lt7.mean

    # Same users, but the sparse half leaves no events at all
    state = LogState()
    for day in range(14): state.register_item(Item(1000 + day, author_id=1, publish_day=0, taxonomy=0))
    for user_id in range(40):
        state.register_user(user_id, 0)
        if user_id % 2: continue
        for day in PATTERNS["daily"]: state.ingest(InteractionEvent(day, user_id, user_id, 1000 + day, EventType.IMPRESSION, 0))
    dropped = ab_report(state, plan, 0, 6, 13, resamples=100)
    assert dropped.arms["control"].lt7.mean > everyone.arms["control"].lt7.mean
    assert dropped.arms["control"].dau.mean < everyone.arms["control"].dau.mean


def test_report_errors(two_arms):
    state = _ab_log(two_arms, 10, {"control": ["daily"], "treat": ["daily"]})
    with pytest.raises(ValueError):
        ab_report(state, two_arms, 5, 4, 13)
    with pytest.raises(ValueError):
        ab_report(state, two_arms, 0, 14, 13)
    state.ingest(InteractionEvent(3, 999, 0, 1003, EventType.IMPRESSION, 0, arm_id="ghost"))
    with pytest.raises(InvariantViolation):
        ab_report(state, two_arms, 0, 6, 13)


def test_reports_are_reproducible(two_arms, tmp_path):
    state = _ab_log(two_arms, 50, {"control": ["daily", "even"], "treat": ["mixed", "sparse"]})
    daily = [DailyRow(0, "control", dau=30), DailyRow(0, "treat", dau=25)]
    first = ab_report(state, two_arms, 0, 6, 13, daily=daily, seed=4, resamples=100)
    second = ab_report(state, two_arms, 0, 6, 13, daily=daily, seed=4, resamples=100)
    assert first.to_json() == second.to_json()

    # Every format
    assert first.to_csv().splitlines()[0].startswith("day,arm_id,dau,mau")
    assert len(first.to_csv().splitlines()) == 3
    assert first.to_tsv().splitlines()[0] == "# day\tarm_id\tdau\tduration\tctr\tparticipation\tslate_taxonomies"
    assert first.summary_csv().splitlines()[1].startswith("control,")
    assert "baseline" in first.to_table(color=False)
    assert json.loads(first.to_json())["arms"]["treat"]["decision"] == first.arms["treat"].decision
    first.write(str(tmp_path / "reports"))
    assert sorted(os.listdir(tmp_path / "reports")) == ["report.csv", "report.json", "report.tsv", "summary.csv"]


# ---------------------------------------------------------------------------- closed loop

def test_run_days(workspace):
    results = run_days(workspace, 2, progress=False)
    assert [r.day for r in results] == [0, 1]
    assert workspace.last_day == 1 and workspace.world.day == 2
    assert [(r.day, r.arm_id) for r in workspace.rows] == [(0, "control"), (1, "control")]
    assert {e.arm_id for e in workspace.log_state.events_between(0, 1)} == {"control"}
    assert workspace.rows[0].dau == len({e.user_id for e in results[0].events if e.event_type == EventType.IMPRESSION})

    report = workspace_report(workspace, resamples=50)
    assert report.arms["control"].decision == BASELINE
    assert report.arms["control"].lt7 is None
    assert report.to_json() == workspace_report(workspace, resamples=50).to_json()


def test_published_items_split_by_arm(config, tmp_path):
    plan = ExperimentPlan([ArmSpec("a", 0.5, config), ArmSpec("b", 0.5, config)], "publish").validate()
    ws = Workspace().create(config, plan, seed=7, path=str(tmp_path / "ab"))
    in_a = [u for u in sorted(ws.log_state.users) if assign_arm(u, plan) == "a"]
    assert in_a and len(in_a) < len(ws.log_state.users)

    # Only one author-user in arm a publishes
    ws.publishing[0] = {in_a[0]}
    ws.published_by_user[0] = {in_a[0]: 3}
    rows = {row.arm_id: row for row in arm_rows(ws, 0, [])}
    assert rows["a"].published_items == 3 and rows["a"].participation == 0.0
    assert rows["b"].published_items == 0


# ---------------------------------------------------------------------------- console

@pytest.fixture
def small_toml(tmp_path) -> str:
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return str(path)


def test_console_simulate_report_inspect(tmp_path, small_toml, capsys):
    out = str(tmp_path / "run")
    assert main(["-q", "simulate", "--config", small_toml, "--days", "2", "--seed", "3", "--out", out]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "reports", "report.json"))
    capsys.readouterr()

    assert main(["report", "--log", out, "--format", "json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert list(report["arms"]) == ["control"] and report["last_day"] == 1

    ws = Workspace()
    assert ws.open(out)
    user_id = min(ws.log_state.users)
    assert main(["inspect-user", "--id", str(user_id), "--workspace", out]) == EXIT_OK
    assert f'"user_id": {user_id}' in capsys.readouterr().out

    assert main(["train", "--stage", "rank", "--day", "1", "--workspace", out]) == EXIT_OK
    assert "rank on day 1" in capsys.readouterr().out


def test_console_resumes_a_workspace(tmp_path, small_toml):
    out = str(tmp_path / "run")
    assert main(["-q", "simulate", "--config", small_toml, "--days", "1", "--out", out]) == EXIT_OK
    assert main(["-q", "simulate", "--config", small_toml, "--days", "1", "--out", out]) == EXIT_OK
    ws = Workspace()
    assert ws.open(out) and ws.last_day == 1


def test_console_ab_test(tmp_path, small_toml):
    plan = tmp_path / "plan.toml"
    plan.write_text('salt = "t"\n\n[[arms]]\narm_id = "control"\nfraction = 0.5\n\n'
                    '[[arms]]\narm_id = "dpp"\nfraction = 0.5\n\n[arms.overrides.diversity]\nmethod = "dpp"\n')
    out = str(tmp_path / "ab")
    assert main(["-q", "ab-test", "--plan", str(plan), "--config", small_toml, "--days", "1", "--out", out]) == EXIT_OK
    with open(os.path.join(out, "reports", "report.json")) as f: report = json.load(f)
    assert sorted(report["arms"]) == ["control", "dpp"]
    assert report["arms"]["control"]["decision"] == BASELINE


def test_console_config_errors(tmp_path, small_toml):
    missing = str(tmp_path / "missing")
    assert main(["report", "--log", missing]) == EXIT_CONFIG
    assert main(["inspect-user", "--id", "1", "--workspace", missing]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--days", "1", "--out", missing]) == EXIT_CONFIG

    out = str(tmp_path / "run")
    assert main(["-q", "simulate", "--config", small_toml, "--days", "1", "--out", out]) == EXIT_OK
    assert main(["train", "--stage", "rank", "--day", "5", "--workspace", out]) == EXIT_CONFIG
    assert main(["inspect-user", "--id", "99999", "--workspace", out]) == EXIT_CONFIG
