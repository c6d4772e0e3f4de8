"""Injectable clocks: wall time for services, simulated time for tests and replays.

Every timing decision in the system (lease expiry, idle-gap sequence closes,
motion durations, timestamps) flows through one of these so that the whole
stack can run deterministically on simulated time.
"""

from __future__ import annotations

import threading
import time


class Clock:
    """Interface: milliseconds since epoch plus a blocking sleep."""

    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class WallClock(Clock):
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimClock(Clock):
    """Manually advanced clock. `sleep` advances time instead of blocking.

    Sub-millisecond sleeps are rounded to the nearest millisecond; the tick
    is the timestamp resolution of the wire protocol.
    """

    def __init__(self, start_ms: int = 0) -> None:
        if start_ms < 0:
            raise ValueError("start_ms must be non-negative")
        self._now_ms = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now_ms

    def advance_ms(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError("cannot advance backwards")
        with self._lock:
            self._now_ms += delta_ms
            return self._now_ms

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("negative sleep")
        self.advance_ms(round(seconds * 1000))
