"""Incremental digest engines and the bounded synchronized buffer queue that
lets transfer and checksum work share one pass of file I/O."""
from __future__ import annotations

import hashlib
import threading
from collections import deque

from .model import Digest, HashAlg


class DigestStateError(RuntimeError):
    """Update or finalize on a finalized digest state."""


class QueueClosedError(RuntimeError):
    """Push on a closed queue."""


class DigestState:
    """Streaming hash state. Single-owner: never touch from two threads at
    once. Finalization is one-shot; re-init a fresh state per chunk."""

    __slots__ = ("alg", "bytes_ingested", "_engine", "_finalized")

    def __init__(self, alg: HashAlg):
        if not isinstance(alg, HashAlg):
            raise ValueError(f"unsupported hash algorithm: {alg!r}")
        self.alg = alg
        self.bytes_ingested = 0
        self._engine = hashlib.new(alg.value)
        self._finalized = False

    def update(self, buffer: bytes) -> None:
        if self._finalized:
            raise DigestStateError("update after finalize")
        self._engine.update(buffer)
        self.bytes_ingested += len(buffer)

    def finalize(self) -> Digest:
        if self._finalized:
            raise DigestStateError("digest state already finalized")
        self._finalized = True
        return Digest(self.alg, self._engine.digest())


def digest_init(alg: HashAlg) -> DigestState:
    return DigestState(alg)


def digest_update(state: DigestState, buffer: bytes) -> None:
    state.update(buffer)


def digest_final(state: DigestState) -> Digest:
    return state.finalize()


class SharedQueue:
    """Bounded FIFO of immutable byte buffers for exactly one producer and
    one consumer thread.

    push() blocks while the queue holds `capacity` elements — this is the
    back-pressure that keeps a fast producer at the consumer's pace. pop()
    blocks while empty and the queue is open; after close(), pops drain the
    remaining elements and then return None (end of stream).

    bytes_pushed/bytes_popped/max_lead are instrumentation counters updated
    under the queue lock; max_lead is the high-water mark of producer lead
    in bytes.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[bytes] = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._closed = False
        self.bytes_pushed = 0
        self.bytes_popped = 0
        self.max_lead = 0

    def push(self, buffer: bytes) -> None:
        with self._not_full:
            while len(self._items) >= self.capacity and not self._closed:
                self._not_full.wait()
            if self._closed:
                raise QueueClosedError("push after close")
            self._items.append(buffer)
            self.bytes_pushed += len(buffer)
            lead = self.bytes_pushed - self.bytes_popped
            if lead > self.max_lead:
                self.max_lead = lead
            self._not_empty.notify()

    def pop(self) -> bytes | None:
        """Next buffer, or None once the queue is closed and drained."""
        with self._not_empty:
            while not self._items and not self._closed:
                self._not_empty.wait()
            if not self._items:
                return None
            buffer = self._items.popleft()
            self.bytes_popped += len(buffer)
            self._not_full.notify()
            return buffer

    def close(self) -> None:
        """Idempotent; wakes every blocked pusher and popper."""
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def size(self) -> int:
        # deliberately not __len__: an empty queue must never be falsy
        with self._lock:
            return len(self._items)
