"""Versioned latest-wins producer slots for asynchronous context updates."""

from __future__ import annotations

import threading

_SYNC_BUSY = object()  # marks a synchronously-completed call awaiting poll


class ProducerSlot:
    """At most one in-flight producer call; newer requests replace queued ones.

    With no executor the call runs synchronously at request time and its
    result is delivered on the next poll — deterministic, for tests and
    single-threaded runs. With an executor the call runs on its thread and
    the consumer keeps polling without blocking.
    """

    def __init__(self, executor=None):
        self._executor = executor
        self._lock = threading.Lock()
        self._future = None
        self._tag = None
        self._queued = None  # (fn, tag) waiting for the in-flight call
        self._done = []      # [(tag, result)]

    def request(self, fn, tag) -> None:
        with self._lock:
            if self._future is not None:
                self._queued = (fn, tag)  # latest-wins, drop older queued
                return
            self._launch(fn, tag)

    def _launch(self, fn, tag) -> None:
        self._tag = tag
        if self._executor is None:
            # run now, hold the slot busy until the result is collected
            self._done.append((tag, fn()))
            self._future = _SYNC_BUSY
        else:
            self._future = self._executor.submit(fn)

    def poll(self) -> list:
        """Completed (tag, result) pairs since the last poll."""
        with self._lock:
            if self._future is _SYNC_BUSY:
                self._future = None
            elif self._future is not None and self._future.done():
                self._done.append((self._tag, self._future.result()))
                self._future = None
            out, self._done = self._done, []
            if self._future is None and self._queued is not None:
                fn, tag = self._queued
                self._queued = None
                self._launch(fn, tag)
            return out

    @property
    def busy(self) -> bool:
        with self._lock:
            return self._future is not None
