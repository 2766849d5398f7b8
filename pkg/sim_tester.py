from dataclasses import replace
from time import process_time

import numpy as np
from colorama import Fore, Style, just_fix_windows_console
from scipy.stats import kendalltau, spearmanr

from deskrec.config import GROUP_NEW, USER_GROUPS, Config, SimConfig, TrainingConfig
from deskrec.domain import EventType, InteractionEvent, Item
from deskrec.eventlog import LogState
from deskrec.experiment import LAUNCH, NEUTRAL, ArmSpec, ExperimentPlan, ab_report, assign_arm, run_days, workspace_report
from deskrec.nn import make_optimizer
from deskrec.pipeline import utility_contexts, utility_scores
from deskrec.ranking import PrerankModel, attach_teacher, impression_samples, teacher_index, train_prerank
from deskrec.simulator import init_world, oracle_serve_fn, random_serve_fn, simulate_day
from deskrec.store import Workspace
from deskrec.two_tower import DayLogs, PopularityEstimator, TwoTowerModel, train_two_tower, user_features

just_fix_windows_console()

# Start timing the entire test
total_start_time = process_time()

number_of_users = 2000
number_of_items = 10000
number_of_days = 30
zipf_users = 2000
zipf_items = 500
zipf_days = 3
seed = 3562901
failures = 0


def check(name, passed, detail):
    global failures
    mark = f"{Fore.GREEN}PASS{Style.RESET_ALL}" if passed else f"{Fore.RED}FAIL{Style.RESET_ALL}"
    if not passed: failures += 1
    print(f"[{mark}] {name}: {detail}")


def base_config():
    return Config(seed=seed, sim=SimConfig(initial_users=number_of_users, initial_items=number_of_items)).validate()


def run_experiment(name, control, treat, salt):
    """
    Two arms over the same world; returns the workspace and the report over complete LT7 windows
    """
    start_time = process_time()
    plan = ExperimentPlan([ArmSpec("control", 0.5, control), ArmSpec("treat", 0.5, treat)], salt).validate()
    ws = Workspace().create(control, plan, seed)
    run_days(ws, number_of_days, progress=False)
    report = workspace_report(ws, 0, ws.last_day - 6, seed=seed)
    print(f"{name}: {number_of_days} days took {process_time() - start_time:.2f} seconds")
    return ws, report


def new_user_follow_stats(ws, arm_id):
    """
    Follows per new user and day-7 return rate of new users in one arm
    """
    state, last_day = ws.log_state, ws.last_day
    new_users = {u for u, user in state.users.items() if user.signup_day > 0 and assign_arm(u, ws.plan) == arm_id}
    follows = sum(1 for e in state.all_events() if e.event_type == EventType.FOLLOW and e.user_id in new_users)
    eligible = [u for u in new_users if state.users[u].signup_day + 7 <= last_day]
    returned = sum(1 for u in eligible if state.activity.is_active(u, state.users[u].signup_day + 7))
    return follows / max(len(new_users), 1), returned / max(len(eligible), 1)


# ---------------------------------------------------------------------------- oracle vs random world check

world_start_time = process_time()
sim = SimConfig(initial_users=number_of_users, initial_items=number_of_items)
world = init_world(sim, seed)
log_state = LogState(sim.last_n)
for user_id in sorted(world.users):
    user = world.users[user_id]
    log_state.register_user(user_id, user.signup_day, user.demographic_group, user.prior_active_days)
for item_id in sorted(world.items): log_state.register_item(world.items[item_id].to_item())
plan = ExperimentPlan([ArmSpec("random", 0.5), ArmSpec("oracle", 0.5)], "sensitivity").validate()
serve = {"oracle": oracle_serve_fn(world), "random": random_serve_fn(world, seed)}
minutes = {}
for day in range(number_of_days):
    result = simulate_day(world, serve, lambda u: assign_arm(u, plan))
    for user in result.new_users: log_state.register_user(user.user_id, user.signup_day, user.demographic_group)
    for item in result.new_items: log_state.register_item(item)
    log_state.ingest_many(result.events)
    minutes[day] = dict(result.ledger.minutes)
report = ab_report(log_state, plan, 0, number_of_days - 7, number_of_days - 1, minutes, seed=seed)
oracle, random_arm = report.arms["oracle"], report.arms["random"]
print(f"Oracle vs random world over {number_of_days} days took: {process_time() - world_start_time:.2f} seconds")
check("oracle beats random on LT7", oracle.decision == LAUNCH,
      f"oracle {oracle.lt7.mean:.3f} [{oracle.lt7.low:.3f},{oracle.lt7.high:.3f}] "
      f"random {random_arm.lt7.mean:.3f} [{random_arm.lt7.low:.3f},{random_arm.lt7.high:.3f}]")

# ---------------------------------------------------------------------------- logQ correction on Zipf popularity

zipf_start_time = process_time()
rng = np.random.default_rng([seed, 1])
popularity = 1.0 / np.arange(1, zipf_items + 1) ** 1.1
popularity = popularity / popularity.sum()
zipf_state = LogState()
for item_id in range(zipf_items): zipf_state.register_item(Item(item_id, author_id=item_id % 50, publish_day=0, taxonomy=item_id % 20))
for user_id in range(zipf_users): zipf_state.register_user(user_id, 0)
for day in range(zipf_days):
    seq = 0
    for user_id in range(zipf_users):
        for item_id in rng.choice(zipf_items, size=4, replace=False, p=popularity):
            zipf_state.ingest(InteractionEvent(day, seq, user_id, int(item_id), EventType.IMPRESSION, 0))
            if rng.random() < 0.6: zipf_state.ingest(InteractionEvent(day, seq + 1, user_id, int(item_id), EventType.CLICK))
            seq += 2

rho = {}
for corrected in (False, True):
    training = replace(TrainingConfig(), logq_correction=corrected)
    model = TwoTowerModel(base_config().model, seed=seed)
    estimator, optimizer = PopularityEstimator(training.popularity_decay), make_optimizer(training.optimizer, training.learning_rate)
    for day in range(zipf_days): train_two_tower(model, DayLogs.from_state(zipf_state, None, day), training, estimator, optimizer, seed)
    users, _ = model.forward_users([user_features(zipf_state, u) for u in range(zipf_users)], grow=False)
    items, _ = model.forward_items(list(range(zipf_items)), [i % 20 for i in range(zipf_items)], grow=False)
    clicks = [zipf_state.items[i].quality_stats.clicks for i in range(zipf_items)]
    rho[corrected] = spearmanr(items @ users.mean(axis=(0, 1)), clicks)[0]
print(f"Zipf two-tower training ({zipf_users} users, {zipf_items} items) took: {process_time() - zipf_start_time:.2f} seconds")
check("logQ correction lowers popularity correlation", rho[True] < rho[False], f"spearman corrected {rho[True]:.3f} plain {rho[False]:.3f}")

# ---------------------------------------------------------------------------- directional closed-loop runs

# MMR and hard scattering
base = base_config()
plain = replace(base, diversity=replace(base.diversity, soft_scatter=False, hard_scatter=False))
ws, report = run_experiment("Diversity", plain, base, "diversity")
control, treat = report.arms["control"], report.arms["treat"]
check("scattering spreads taxonomies", treat.slate_taxonomies > control.slate_taxonomies,
      f"taxonomies per slate {treat.slate_taxonomies:.2f} vs {control.slate_taxonomies:.2f}")
check("scattering raises LT7", treat.decision == LAUNCH,
      f"LT7 {treat.lt7.mean:.3f} [{treat.lt7.low:.3f},{treat.lt7.high:.3f}] vs "
      f"{control.lt7.mean:.3f} [{control.lt7.low:.3f},{control.lt7.high:.3f}]")

# Follow term for new users
following = replace(base, utility=replace(base.utility, follow_w0={g: 1.0 if g == GROUP_NEW else 0.0 for g in USER_GROUPS}))
ws, report = run_experiment("Follow term", base, following, "follow")
control_follows, control_return = new_user_follow_stats(ws, "control")
treat_follows, treat_return = new_user_follow_stats(ws, "treat")
check("follow term raises new-user follows", treat_follows > control_follows, f"{treat_follows:.3f} vs {control_follows:.3f} per new user")
check("follow term raises new-user day-7 return", treat_return > control_return, f"{treat_return:.3f} vs {control_return:.3f}")

# A/A
ws, report = run_experiment("A/A", base, base, "aa")
control, treat = report.arms["control"], report.arms["treat"]
check("A/A intervals overlap", treat.lt7.overlaps(control.lt7) and treat.decision == NEUTRAL,
      f"LT7 {treat.lt7.mean:.3f} vs {control.lt7.mean:.3f}, decision {treat.decision}")

# ---------------------------------------------------------------------------- consistency distillation

distill_start_time = process_time()
records = {day: ws.side_logger.since("teacher_predictions", day, day) for day in range(ws.last_day + 1)}
samples = {day: attach_teacher(impression_samples(DayLogs.from_state(ws.log_state, ws.side_logger, day)), teacher_index(records[day]),
                               drop_missing=True) for day in range(ws.last_day)}
tau = {}
for mode in ("plain", "pointwise_distill"):
    model = PrerankModel(base.model, seed=seed)
    optimizer = make_optimizer(base.training.optimizer, base.training.learning_rate)
    for day in range(ws.last_day): train_prerank(model, samples[day], mode, base.training, optimizer, day, seed=seed)
    values = []
    for record in records[ws.last_day]:
        if len(record["item_ids"]) < 3: continue
        user = user_features(ws.log_state, record["user_id"])
        ids = record["item_ids"]
        p = model.predict(user, ids, [ws.log_state.items[i].taxonomy for i in ids])
        group = ws.log_state.users[record["user_id"]].group_tag
        scores = utility_scores(p, utility_contexts(ws.log_state, record["user_id"], group, ids, ws.last_day), base.utility)
        value = kendalltau(scores, record["utility"])[0]
        if value == value: values.append(value)
    tau[mode] = float(np.mean(values)) if values else float("nan")
print(f"Prerank distillation comparison took: {process_time() - distill_start_time:.2f} seconds")
check("distillation improves prerank/rank agreement", tau["pointwise_distill"] - tau["plain"] >= 0.05,
      f"kendall tau distilled {tau['pointwise_distill']:.3f} plain {tau['plain']:.3f}")

# ---------------------------------------------------------------------------- determinism

determinism_start_time = process_time()
small = replace(base, sim=replace(base.sim, initial_users=200, initial_items=1000))
plan = ExperimentPlan([ArmSpec("control", 1.0, small)]).validate()
reports = []
for _ in range(2):
    ws = Workspace().create(small, plan, seed)
    run_days(ws, 8, progress=False)
    reports.append((workspace_report(ws, 0, 1, seed=seed).to_json(), [e.to_json() for e in ws.log_state.all_events()]))
print(f"Determinism replay took: {process_time() - determinism_start_time:.2f} seconds")
check("identical runs give identical logs and reports", reports[0] == reports[1], f"{len(reports[0][1])} events")

total_end_time = process_time()
print(f"Total time taken: {total_end_time - total_start_time:.2f} seconds")
print(f"{Fore.GREEN}All checks passed{Style.RESET_ALL}" if failures == 0 else f"{Fore.RED}{failures} checks failed{Style.RESET_ALL}")
