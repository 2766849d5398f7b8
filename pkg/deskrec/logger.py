import os
import json
from threading import RLock
from typing import Dict, Iterable, List, Optional

# Side channels written next to the event log
CHANNELS = ("events", "teacher_predictions", "hard_negatives", "cache_events")


class SideChannelLogger:
    """
    Thread-safe append-only JSONL logger for the event log and the serving
    side channels. Records are also kept in memory so training can read them
    when no directory is configured.
    """

    def __init__(self, log_dir: Optional[str] = None):
        self.log_dir = log_dir
        self.records: Dict[str, List[dict]] = {channel: [] for channel in CHANNELS}
        self._lock = RLock()
        if log_dir is not None: os.makedirs(log_dir, exist_ok=True)

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_lock'] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = RLock()

    def path(self, channel: str) -> Optional[str]:
        return None if self.log_dir is None else os.path.join(self.log_dir, f"{channel}.jsonl")

    def append(self, channel: str, records: Iterable[dict]) -> None:
        """
        Append records to a channel, in order
        """
        if channel not in self.records: raise KeyError(f"unknown side channel {channel}")

        # Lock the logger
        with self._lock:
            batch = list(records)
            self.records[channel].extend(batch)

            # Write to the channel file
            path = self.path(channel)
            if path is not None and batch:
                with open(path, "a") as f:
                    for record in batch: f.write(json.dumps(record, sort_keys=True) + "\n")

    def log_teacher_predictions(self, day: int, request_id: str, user_id: int, item_ids: List[int],
                                predictions: List[List[float]], utilities: List[float], stage: str = "rank") -> None:
        """
        Log the ranking stage's per-item predictions for one request
        """
        self.append("teacher_predictions", [{
            "day": day, "request_id": request_id, "user_id": user_id, "item_ids": list(item_ids),
            "p": [list(map(float, p)) for p in predictions], "utility": list(map(float, utilities)), "stage": stage,
        }])

    def log_hard_negatives(self, day: int, request_id: str, user_id: int, item_ids: List[int]) -> None:
        """
        Log items that were retrieved but cut at preranking
        """
        if not item_ids: return
        self.append("hard_negatives", [{"day": day, "request_id": request_id, "user_id": user_id, "item_ids": list(item_ids)}])

    def log_cache_event(self, day: int, user_id: int, item_id: int, action: str, score: float) -> None:
        self.append("cache_events", [{"day": day, "user_id": user_id, "item_id": item_id, "action": action, "score": float(score)}])

    def since(self, channel: str, day: int, until: Optional[int] = None) -> List[dict]:
        """
        Records of a channel with day >= `day` (and <= `until` when given)
        """

        # Lock the logger
        with self._lock:
            return [r for r in self.records[channel] if r["day"] >= day and (until is None or r["day"] <= until)]

    @classmethod
    def load(cls, log_dir: str) -> "SideChannelLogger":
        """
        Re-read every channel file of a directory into memory
        """
        logger = cls(None)
        for channel in CHANNELS:
            path = os.path.join(log_dir, f"{channel}.jsonl")
            if not os.path.exists(path): continue
            with open(path, "r") as f:
                for line in f:

                    # Skip torn lines
                    try: logger.records[channel].append(json.loads(line))
                    except json.JSONDecodeError: continue
        logger.log_dir = log_dir
        return logger

    def clear(self) -> None:
        """
        Clear all channels (used for testing)
        """
        with self._lock:
            for channel in CHANNELS:
                self.records[channel].clear()
                path = self.path(channel)
                if path is not None and os.path.exists(path): os.remove(path)
