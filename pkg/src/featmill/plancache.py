"""LRU cache from normalized query text to compiled physical plans.

Deployments are pinned under their name in a separate map: they never count
against capacity and are never evicted, so the deployed request path is a
guaranteed hit.
"""

from __future__ import annotations

import threading
from collections import OrderedDict

from .errors import FingerprintMismatchError
from .planner import PhysicalPlan, plan_fingerprint


class PlanCache:
    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict[str, PhysicalPlan] = OrderedDict()
        self._pinned: dict[str, PhysicalPlan] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> PhysicalPlan | None:
        with self._lock:
            plan = self._pinned.get(key)
            if plan is not None:
                self.hits += 1
                return plan
            plan = self._entries.get(key)
            if plan is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return plan

    def put(self, key: str, plan: PhysicalPlan) -> str | None:
        """Insert as most-recently-used; returns the evicted key, if any."""
        if plan.fingerprint != plan_fingerprint(key):
            raise FingerprintMismatchError(
                f"plan fingerprint does not match cache key {key[:60]!r}"
            )
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self._entries[key] = plan
                return None
            self._entries[key] = plan
            if len(self._entries) > self.capacity:
                evicted, _ = self._entries.popitem(last=False)
                return evicted
            return None

    def pin(self, name: str, plan: PhysicalPlan) -> None:
        with self._lock:
            self._pinned[name] = plan

    def unpin(self, name: str) -> None:
        with self._lock:
            self._pinned.pop(name, None)

    @property
    def size(self) -> int:
        return len(self._entries)

    def stats(self) -> dict:
        with self._lock:
            return {
                "hits": self.hits,
                "misses": self.misses,
                "size": len(self._entries),
                "pinned": len(self._pinned),
                "capacity": self.capacity,
            }
