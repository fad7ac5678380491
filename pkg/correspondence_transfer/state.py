# correspondence_transfer/state.py

import threading


class DeltaCounter:
    """Counts patch-distance (delta) evaluations; safe to share across worker threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> int:
        with self._lock:
            previous, self._count = self._count, 0
            return previous


metric_evaluations = DeltaCounter()
