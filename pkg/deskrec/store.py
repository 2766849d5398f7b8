import json
import logging
import os
import pickle
from typing import TYPE_CHECKING, Dict, List, Optional, Set

from deskrec.config import Config
from deskrec.eventlog import LogState
from deskrec.i2i import write_similarity_snapshot
from deskrec.logger import SideChannelLogger
from deskrec.metrics import DailyRow
from deskrec.pipeline import DailyState, ModelSuite, Pipeline
from deskrec.pools import write_pools_snapshot
from deskrec.simulator import World, init_world

if TYPE_CHECKING:
    from deskrec.experiment import ExperimentPlan

logger = logging.getLogger(__name__)

STATE_FILE = "state.pickle"


class Workspace:
    """
    Everything a run needs between commands: the simulated world, the log
    state, the shared models and one pipeline per experiment arm
    """

    def __init__(self):
        self.path: Optional[str] = None
        self.config: Optional[Config] = None
        self.plan: Optional["ExperimentPlan"] = None
        self.seed = 0
        self.world: Optional[World] = None
        self.log_state: Optional[LogState] = None
        self.suite: Optional[ModelSuite] = None
        self.pipelines: Dict[str, Pipeline] = {}
        self.side_logger: Optional[SideChannelLogger] = None
        self.minutes: Dict[int, Dict[int, float]] = {}
        self.publishing: Dict[int, Set[int]] = {}
        self.published_by_user: Dict[int, Dict[int, int]] = {}
        self.rows: List[DailyRow] = []
        self.last_day = -1

    def create(self, config: Config, plan: "ExperimentPlan", seed: int, path: Optional[str] = None) -> "Workspace":
        """
        Fresh world and models; initial users and back-catalog enter the log state
        """
        self.path, self.config, self.plan, self.seed = path, config, plan, seed
        if path is not None: os.makedirs(path, exist_ok=True)
        self.world = init_world(config.sim, seed)
        self.log_state = LogState(config.sim.last_n)
        self.side_logger = SideChannelLogger(None if path is None else os.path.join(path, "logs"))

        # Register the initial population
        for user_id in sorted(self.world.users):
            user = self.world.users[user_id]
            self.log_state.register_user(user_id, user.signup_day, user.demographic_group, user.prior_active_days)
        for item_id in sorted(self.world.items): self.log_state.register_item(self.world.items[item_id].to_item())

        # Shared models, one pipeline per arm
        self.suite = ModelSuite(config, seed)
        self.pipelines = {arm.arm_id: Pipeline(arm.config, self.suite, self.log_state, self.side_logger, arm.arm_id, seed)
                          for arm in plan.arms}
        return self

    @property
    def checkpoint_dir(self) -> Optional[str]:
        return None if self.path is None else os.path.join(self.path, "checkpoints")

    def open(self, path: str) -> bool:
        """
        Load a saved workspace; returns False when none exists
        """
        self.path = path
        state_path = os.path.join(path, STATE_FILE)
        if not os.path.exists(state_path): return False

        # Load state
        try:
            with open(state_path, "rb") as file: self.__dict__.update(pickle.load(file))
        except (OSError, pickle.UnpicklingError, EOFError) as e:
            logger.error("error loading workspace state from %s: %s", state_path, e)
            return False
        self.path = path
        return True

    def close(self) -> None:
        """
        Persist the workspace next to its logs
        """
        if self.path is None: return
        os.makedirs(self.path, exist_ok=True)
        with open(os.path.join(self.path, STATE_FILE), "wb") as file: pickle.dump(self.__dict__, file)

    def write_snapshots(self, state: DailyState, day: int) -> None:
        """
        JSON snapshots of the day's stats, pools, similarity indices and clusters
        """
        if self.path is None: return
        out = os.path.join(self.path, "snapshots")
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"stats_{day}.json"), "w") as f: json.dump(self.log_state.snapshot(day), f, sort_keys=True)
        write_pools_snapshot(os.path.join(out, f"pools_{day}.json"), state.pools)
        for kind, index in sorted(state.similarity.items()):
            write_similarity_snapshot(os.path.join(out, f"similarity_{kind}_{day}.json"), index)
        with open(os.path.join(out, f"clusters_{day}.json"), "w") as f:
            json.dump({str(i): c for i, c in sorted(state.clusters.items())}, f, sort_keys=True)
