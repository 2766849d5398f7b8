import numpy as np
import pytest

from deskrec.config import (Config, DiversityConfig, ModelConfig, PipelineSizes, SimConfig, TrainingConfig)
from deskrec.domain import EventType, InteractionEvent, Item
from deskrec.eventlog import LogState
from deskrec.experiment import single_arm_plan
from deskrec.store import Workspace


def small_config(seed: int = 0) -> Config:
    """
    A world and model small enough to run a few closed-loop days in a test
    """
    return Config(
        seed=seed,
        sim=SimConfig(initial_users=40, initial_authors=8, initial_items=120, daily_new_users=2, daily_new_authors=1),
        model=ModelConfig(embedding_dim=8, tower_hidden=16, ranker_layers=(16,), residual_hidden=8, sim_cap=8),
        training=TrainingConfig(mix=(8, 4, 16, 4), rank_batch_size=32),
        sizes=PipelineSizes(retrieval=60, prerank=30, rank=20, slate=10),
        diversity=DiversityConfig(clusters=8),
    ).validate()


@pytest.fixture
def config() -> Config:
    return small_config()


@pytest.fixture
def workspace(config, tmp_path) -> Workspace:
    return Workspace().create(config, single_arm_plan(config), seed=7, path=str(tmp_path / "run"))


@pytest.fixture
def log_state() -> LogState:
    """
    Two users and three items by two authors, nothing logged yet
    """
    state = LogState()
    state.register_user(1, 0)
    state.register_user(2, 0, "g1")
    state.register_item(Item(10, author_id=100, publish_day=0, taxonomy=1))
    state.register_item(Item(11, author_id=100, publish_day=0, taxonomy=2))
    state.register_item(Item(12, author_id=200, publish_day=0, taxonomy=1))
    return state


class EventFactory:
    """
    Builds events with a running seq per day
    """

    def __init__(self):
        self.seq = {}

    def __call__(self, day: int, user_id: int, item_id: int, event_type: EventType, position=None, arm_id: str = "control") -> InteractionEvent:
        seq = self.seq.get(day, 0)
        self.seq[day] = seq + 1
        if event_type == EventType.IMPRESSION and position is None: position = 0
        return InteractionEvent(day, seq, user_id, item_id, event_type, position, arm_id=arm_id)


@pytest.fixture
def make_event() -> EventFactory:
    return EventFactory()


def check_gradients(loss_fn, params, grads, seed: int = 0, per_param: int = 4, h: float = 1e-4, tolerance: float = 1e-4) -> float:
    """
    Central-difference check of analytic gradients on sampled entries.
    `loss_fn` recomputes the loss from the current (mutated in place) params.
    Returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        param, grad = params[name], grads[name]
        if param.size == 0: continue
        flat = param.reshape(-1)

        # Sample entries, favouring ones with a gradient
        nonzero = np.flatnonzero(grad.reshape(-1))
        picks = list(rng.choice(nonzero, size=min(per_param, len(nonzero)), replace=False)) if len(nonzero) else []
        picks.append(int(rng.integers(param.size)))
        for index in picks:
            original = flat[index]
            flat[index] = original + h
            plus = loss_fn()
            flat[index] = original - h
            minus = loss_fn()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            analytic = grad.reshape(-1)[index]
            error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            assert error < tolerance, f"{name}[{index}]: analytic {analytic} vs numeric {numeric}"
            worst = max(worst, error)
    return worst
