"""Append-only audit log with gapless sequence numbers.

Every security-relevant event the gateway takes is recorded here: one
JSON object per line, flushed as written, so the trail survives a crash
of the process that produced it.  The in-memory tail serves the control
API's event stream; sequence numbers start at 1 and never skip, letting
a consumer detect gaps after a reconnect.
"""

from __future__ import annotations

import json
import threading
import time
from typing import Any, BinaryIO, Callable


class AuditLog:
    def __init__(self, path: str | None = None, clock: Callable[[], float] = time.time):
        self._path = path
        self._clock = clock
        self._events: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._fh: BinaryIO | None = None
        if path is not None:
            self._fh = open(path, "ab")

    def emit(self, event_type: str, **data: Any) -> dict[str, Any]:
        with self._cond:
            event = {
                "seq": len(self._events) + 1,
                "ts": self._clock(),
                "type": event_type,
                "data": data,
            }
            self._events.append(event)
            if self._fh is not None:
                self._fh.write(
                    json.dumps(event, sort_keys=True, separators=(",", ":")).encode("utf-8")
                    + b"\n"
                )
                self._fh.flush()
            self._cond.notify_all()
            return event

    def events_since(self, after_seq: int) -> list[dict[str, Any]]:
        """All events with seq > after_seq, oldest first."""
        with self._lock:
            if after_seq < 0:
                after_seq = 0
            return list(self._events[after_seq:])

    def wait_for_events(self, after_seq: int, timeout: float) -> list[dict[str, Any]]:
        """Block until events beyond after_seq exist or the timeout runs
        out; used by the streaming control endpoint."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self._events) <= after_seq:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)
            return list(self._events[after_seq:])

    @property
    def last_seq(self) -> int:
        with self._lock:
            return len(self._events)

    def all_events(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._events)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
