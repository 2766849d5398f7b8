from collections import OrderedDict
from dataclasses import dataclass
from threading import RLock
from typing import Dict, Iterable, List, Tuple

from deskrec.config import CACHE_CAPACITY, CACHE_TTL


@dataclass
class CacheEntry:
    item_id: int
    score: float
    ttl: int


class CacheState:
    """
    Per-user store of items with high ranking scores that re-ranking rules
    kept off the slate. Each user's store is an LRU (OrderedDict) bounded
    by `capacity`; entries also expire after `ttl` requests without display.
    """

    def __init__(self, ttl: int = CACHE_TTL, capacity: int = CACHE_CAPACITY):
        if ttl < 1 or capacity < 1: raise ValueError("cache ttl and capacity must be >= 1")
        self.ttl = ttl
        self.capacity = capacity
        self.entries: Dict[int, "OrderedDict[int, CacheEntry]"] = {}
        self._lock = RLock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_lock'] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = RLock()

    def put(self, user_id: int, item_id: int, score: float) -> List[int]:
        """
        Store (or refresh) an entry. Returns item ids evicted for capacity.
        """
        with self._lock:
            store = self.entries.setdefault(user_id, OrderedDict())

            # Refresh moves the entry to the most recently used end
            store[item_id] = CacheEntry(item_id, float(score), self.ttl)
            store.move_to_end(item_id)

            # Evict least recently used entries beyond capacity
            evicted = []
            while len(store) > self.capacity:
                old_id, _ = store.popitem(last=False)
                evicted.append(old_id)
            return evicted

    def peek(self, user_id: int) -> List[Tuple[int, float]]:
        """
        Entries for a user ordered by descending score, then item id
        """
        with self._lock:
            store = self.entries.get(user_id)
            if not store: return []
            return sorted(((e.item_id, e.score) for e in store.values()), key=lambda pair: (-pair[1], pair[0]))

    def tick(self, user_id: int) -> List[int]:
        """
        Consume one request of every entry's ttl; returns expired item ids
        """
        with self._lock:
            store = self.entries.get(user_id)
            if not store: return []
            expired = []
            for item_id in list(store.keys()):
                store[item_id].ttl -= 1
                if store[item_id].ttl <= 0: del store[item_id]; expired.append(item_id)
            return expired

    def evict_displayed(self, user_id: int, item_ids: Iterable[int]) -> List[int]:
        """
        Drop entries that were shown on a slate
        """
        with self._lock:
            store = self.entries.get(user_id)
            if not store: return []
            shown = [i for i in item_ids if i in store]
            for item_id in shown: del store[item_id]
            return shown

    def __len__(self) -> int:
        with self._lock:
            return sum(len(store) for store in self.entries.values())
