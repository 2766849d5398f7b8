from threading import RLock
from typing import Dict, Iterable, List, Optional

from BTrees.IIBTree import IITreeSet
from BTrees.OOBTree import OOBTree


class CatalogIndex:
    """
    Ordered publish-day indices over the catalog, backed by BTrees.
    Keys are (publish_day, item_id) so range scans come back in day order.
    """
    def __init__(self):
        self.by_day = OOBTree()
        self.by_author: Dict[int, OOBTree] = {}
        self._lock = RLock()

    def __getstate__(self):
        """
        Drop the lock when pickling
        """
        state = self.__dict__.copy()
        state['_lock'] = None
        return state

    def __setstate__(self, state):
        """
        Restore the lock after unpickling
        """
        self.__dict__.update(state)
        self._lock = RLock()

    def add(self, item_id: int, author_id: int, publish_day: int) -> None:
        """
        Index a newly registered item
        """
        with self._lock:
            self.by_day[(publish_day, item_id)] = author_id
            if author_id not in self.by_author: self.by_author[author_id] = OOBTree()
            self.by_author[author_id][(publish_day, item_id)] = item_id

    def published_between(self, first_day: int, last_day: int) -> List[int]:
        """
        Item ids published in [first_day, last_day], ordered by (day, item_id)
        """
        with self._lock:
            if first_day > last_day: return []
            return [item_id for _, item_id in self.by_day.keys(min=(first_day,), max=(last_day + 1,), excludemax=True)]

    def author_items_between(self, author_id: int, first_day: int, last_day: int) -> List[int]:
        """
        One author's items published in [first_day, last_day]
        """
        with self._lock:
            tree = self.by_author.get(author_id)
            if tree is None or first_day > last_day: return []
            return list(tree.values(min=(first_day,), max=(last_day + 1,), excludemax=True))


class ActivityIndex:
    """
    Per-user sets of active days (days with at least one impression)
    """
    def __init__(self):
        self.days: Dict[int, IITreeSet] = {}
        self._lock = RLock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_lock'] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = RLock()

    def mark(self, user_id: int, day: int) -> None:
        with self._lock:
            if user_id not in self.days: self.days[user_id] = IITreeSet()
            self.days[user_id].insert(day)

    def mark_many(self, user_id: int, days: Iterable[int]) -> None:
        for day in days: self.mark(user_id, day)

    def is_active(self, user_id: int, day: int) -> bool:
        with self._lock:
            tree = self.days.get(user_id)
            return tree is not None and day in tree

    def count_between(self, user_id: int, first_day: int, last_day: int) -> int:
        """
        Number of active days in [first_day, last_day]
        """
        with self._lock:
            tree = self.days.get(user_id)
            if tree is None or first_day > last_day: return 0
            return len(list(tree.keys(min=first_day, max=last_day)))

    def active_days(self, user_id: int) -> List[int]:
        with self._lock:
            tree = self.days.get(user_id)
            return list(tree) if tree is not None else []

    def users_active_on(self, day: int) -> List[int]:
        with self._lock:
            return sorted(u for u, tree in self.days.items() if day in tree)

    def last_active(self, user_id: int) -> Optional[int]:
        with self._lock:
            tree = self.days.get(user_id)
            return tree.maxKey() if tree is not None and len(tree) else None
