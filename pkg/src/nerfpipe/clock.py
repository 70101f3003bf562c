"""Event clocks for the simulated fleet.

``VirtualClock`` is a discrete-event clock: time only moves when someone
advances it, and timers fire in (time, insertion order).  ``WallClock`` keeps
the same interface over real elapsed time for demo runs.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable, Optional


class Timer:
    __slots__ = ("when", "seq", "callback", "cancelled", "label")

    def __init__(self, when: float, seq: int, callback: Callable[[], None], label: str = ""):
        self.when = when
        self.seq = seq
        self.callback = callback
        self.cancelled = False
        self.label = label

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Timer") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class VirtualClock:
    """Simulated time in seconds, starting at ``start``."""

    virtual = True

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._heap: list[Timer] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def now(self) -> float:
        return self._now

    def call_at(self, when: float, callback: Callable[[], None], label: str = "") -> Timer:
        with self._lock:
            timer = Timer(max(float(when), self._now), next(self._seq), callback, label)
            heapq.heappush(self._heap, timer)
            return timer

    def call_later(self, delay: float, callback: Callable[[], None], label: str = "") -> Timer:
        return self.call_at(self._now + delay, callback, label)

    def next_event_time(self) -> Optional[float]:
        with self._lock:
            while self._heap and self._heap[0].cancelled:
                heapq.heappop(self._heap)
            return self._heap[0].when if self._heap else None

    def pending(self) -> int:
        with self._lock:
            return sum(1 for t in self._heap if not t.cancelled)

    def fire_due(self) -> int:
        """Run every timer due at or before now; returns how many ran."""
        fired = 0
        while True:
            with self._lock:
                if not self._heap or self._heap[0].when > self._now:
                    return fired
                timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            timer.callback()
            fired += 1

    def advance_to(self, when: float) -> int:
        """Move time forward to ``when``, firing timers in order on the way."""
        fired = 0
        fired += self.fire_due()
        while True:
            nxt = self.next_event_time()
            if nxt is None or nxt > when:
                break
            self._now = nxt
            fired += self.fire_due()
        if when > self._now:
            self._now = float(when)
        fired += self.fire_due()
        return fired

    def advance(self, seconds: float) -> int:
        if seconds < 0:
            raise ValueError("cannot move the clock backwards")
        return self.advance_to(self._now + seconds)

    def step(self) -> bool:
        """Jump to the next pending timer and fire everything due then."""
        nxt = self.next_event_time()
        if nxt is None:
            return False
        self.advance_to(nxt)
        return True


class WallClock(VirtualClock):
    """Real elapsed seconds since construction; ``advance`` sleeps."""

    virtual = False

    def __init__(self):
        super().__init__(0.0)
        self._t0 = time.monotonic()

    def now(self) -> float:
        self._now = time.monotonic() - self._t0
        return self._now

    def fire_due(self) -> int:
        self.now()
        return super().fire_due()

    def advance_to(self, when: float) -> int:
        delay = when - self.now()
        if delay > 0:
            time.sleep(delay)
        return self.fire_due()


def make_clock(mode: str) -> VirtualClock:
    if mode == "virtual":
        return VirtualClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown clock mode {mode!r} (expected 'virtual' or 'wall')")
