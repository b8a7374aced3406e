"""Minimal discrete-event timeline (integer cycles)."""

from __future__ import annotations

import heapq
import itertools


class EventLoop:
    def __init__(self):
        self.now = 0
        self._q = []
        self._seq = itertools.count()

    def at(self, t: int, fn, *args):
        if t < self.now:
            t = self.now
        heapq.heappush(self._q, (t, next(self._seq), fn, args))

    def after(self, dt: int, fn, *args):
        self.at(self.now + dt, fn, *args)

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        q = self._q
        pop = heapq.heappop
        n = 0
        while q:
            if until is not None and q[0][0] > until:
                break
            t, _, fn, args = pop(q)
            self.now = t
            fn(*args)
            n += 1
            if max_events is not None and n >= max_events:
                break
        return n

    def __len__(self):
        return len(self._q)
