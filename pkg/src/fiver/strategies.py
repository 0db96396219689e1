"""The integrity-verification execution strategies and the hybrid selector.

Each driver sequences SenderSession primitives; the receiver adapts per
window via the digest_source/chunk_size fields of FILE_BEGIN. All drivers
service pending retransfer windows before new dataset files and never end the
session with work outstanding.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from pathlib import Path

from .endpoint import DIGEST_NONE, DIGEST_QUEUE, DIGEST_REREAD, SenderSession
from .hashio import DigestState, QueueClosedError, SharedQueue
from .bench import TokenBucket
from .model import (
    DEFAULT_BUFFER_SIZE,
    ChunkSpec,
    FileMeta,
    HashAlg,
    Strategy,
    StrategyChoice,
    TransferPlan,
    chunk_layout,
)
from .wire import TransportError


class _Worker:
    """Thread wrapper that re-raises the target's exception at join()."""

    def __init__(self, fn):
        self._exc: BaseException | None = None

        def runner():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - handed to join()
                self._exc = exc

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()

    def join(self) -> None:
        self._thread.join()
        if self._exc is not None:
            raise self._exc


def _whole_unit(win: FileMeta) -> ChunkSpec:
    return ChunkSpec(win.file_id, 0, 0, win.length)


def _reread_unit(
    session: SenderSession,
    win: FileMeta,
    unit: ChunkSpec,
    chunked: bool,
    is_last: bool,
) -> None:
    """Checksum one reread-path unit: sender re-reads its range from disk,
    waits for the receiver's digest, and resolves the verdict."""
    local = session.reread_digest(win, unit.offset, unit.length)
    remote = session.await_digest(
        win.file_id, chunk_index=unit.index if chunked else None
    )
    session.compare_and_recover(win, unit, local, remote)
    if is_last:
        if session.audit:
            if unit.offset == 0 and unit.length == win.length:
                window_digest = local
            else:
                window_digest = session.source_window_digest(win)
            session.audit_window_reread(win, window_digest)
        session.window_resolved(win)


def _sequential_window(session: SenderSession, win: FileMeta) -> None:
    session.begin_window(win, DIGEST_REREAD, 0)
    session.send_range(win)
    _reread_unit(session, win, _whole_unit(win), chunked=False, is_last=True)


def _concurrent_window(
    session: SenderSession, plan: TransferPlan, win: FileMeta, chunk_size: int
) -> None:
    """The shared-I/O path: one thread moves bytes, the other digests them
    from the bounded queue; execution time tracks the slower of the two."""
    shared = SharedQueue(plan.queue_capacity)
    session.begin_window(win, DIGEST_QUEUE, chunk_size if win.length > 0 else 0)
    digester = _Worker(
        lambda: _guarded_digester(session, win, shared, chunk_size)
    )
    try:
        session.send_range(win, 0, win.length, to_queue=shared)
    except QueueClosedError:
        pass  # digester died; its root cause surfaces at join()
    finally:
        shared.close()
    digester.join()


def _guarded_digester(session, win, shared, chunk_size) -> None:
    try:
        session.run_queue_digester(win, shared, chunk_size)
    except BaseException:
        shared.close()  # unblock a mover stuck in push()
        raise


def run_sequential(session: SenderSession, plan: TransferPlan) -> None:
    """Transfer, then checksum by re-reading storage, then compare; the next
    file starts only after the previous file's verification finished."""
    remaining = deque(session.files)
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            return
        win, _ = nxt
        _sequential_window(session, win)


def run_file_pipeline(session: SenderSession, plan: TransferPlan) -> None:
    """Overlap the transfer of each file with the checksum of the previous
    one; exactly one checksum is outstanding at a time."""
    remaining = deque(session.files)
    prev: _Worker | None = None
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            if prev is not None:
                prev.join()
                prev = None
                continue  # the joined checksum may have queued a retransfer
            return
        win, _ = nxt
        session.begin_window(win, DIGEST_REREAD, 0)
        session.send_range(win)
        if prev is not None:
            prev.join()
        prev = _Worker(
            lambda w=win: _reread_unit(
                session, w, _whole_unit(w), chunked=False, is_last=True
            )
        )


def run_block_pipeline(session: SenderSession, plan: TransferPlan) -> None:
    """Split files into blocks and overlap each block's transfer with the
    previous block's checksum; a mismatch retransfers only the failed block."""
    remaining = deque(session.files)
    prev: _Worker | None = None
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            if prev is not None:
                prev.join()
                prev = None
                continue
            return
        win, is_retry = nxt
        block_size = 0 if is_retry else plan.block_size
        session.begin_window(win, DIGEST_REREAD, block_size if win.length > 0 else 0)
        units = chunk_layout(win.length, block_size, win.file_id)
        chunked = block_size > 0 and win.length > 0
        if not units:
            units = [_whole_unit(win)]
        for i, unit in enumerate(units):
            session.send_range(win, unit.offset, unit.length)
            if prev is not None:
                prev.join()
            prev = _Worker(
                lambda w=win, u=unit, c=chunked, last=(i == len(units) - 1):
                    _reread_unit(session, w, u, c, last)
            )


def run_fiver(session: SenderSession, plan: TransferPlan) -> None:
    """Transfer and checksum of the same file run concurrently over the
    shared queue; whole-file digests are exchanged at the end of each file."""
    remaining = deque(session.files)
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            return
        win, _ = nxt
        _concurrent_window(session, plan, win, 0)


def run_fiver_chunked(session: SenderSession, plan: TransferPlan) -> None:
    """Concurrent transfer+checksum with the digest finalized and exchanged
    at every chunk boundary, so a mismatch retransfers one chunk, not the
    whole file."""
    for meta in session.files:
        if meta.chunk_size <= 0 and meta.size > 0:
            raise ValueError(
                f"fiver-chunked needs chunk_size > 0 (file {meta.path!r} has 0)"
            )
    remaining = deque(session.files)
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            return
        win, is_retry = nxt
        _concurrent_window(session, plan, win, 0 if is_retry else win.chunk_size)


def select_hybrid(file: FileMeta, threshold: int) -> StrategyChoice:
    """Route one file: concurrent shared-I/O verification below the memory
    threshold, sequential re-read verification at or above it (the boundary
    file may not fit in cache, so the tie goes to sequential)."""
    if threshold <= 0:
        raise ValueError("hybrid threshold must be positive")
    if file.size < threshold:
        return StrategyChoice.CONCURRENT_SHARED
    return StrategyChoice.SEQUENTIAL_REREAD


def run_fiver_hybrid(session: SenderSession, plan: TransferPlan) -> None:
    if plan.hybrid_threshold <= 0:
        raise ValueError("hybrid strategy requires hybrid_threshold > 0")
    remaining = deque(session.files)
    while True:
        nxt = session.next_window(remaining)
        if nxt is None:
            return
        win, _ = nxt
        choice = select_hybrid(win, plan.hybrid_threshold)
        session.record_choice(win.file_id, choice)
        if choice is StrategyChoice.CONCURRENT_SHARED:
            _concurrent_window(session, plan, win, 0)
        else:
            _sequential_window(session, win)


def run_transfer_only(session: SenderSession, plan: TransferPlan) -> None:
    """Baseline: move the bytes, verify nothing."""
    remaining = deque(session.files)
    while remaining:
        win = remaining.popleft()
        session.begin_window(win, DIGEST_NONE, 0)
        session.send_range(win)
        session.window_resolved(win)


def checksum_only_pass(
    dataset_dir: str | Path,
    files: list[FileMeta],
    hash_alg: HashAlg,
    checksum_rate: int = 0,
    buffer_size: int = DEFAULT_BUFFER_SIZE,
) -> float:
    """Baseline: digest the dataset locally at the checksum rate, no network.
    Returns the elapsed wall time."""
    bucket = TokenBucket(checksum_rate) if checksum_rate else None
    dataset_dir = Path(dataset_dir)
    t0 = time.perf_counter()
    for meta in files:
        state = DigestState(hash_alg)
        with open(dataset_dir / meta.path, "rb") as f:
            f.seek(meta.offset)
            remaining = meta.length
            while remaining > 0:
                buf = f.read(min(buffer_size, remaining))
                if not buf:
                    raise TransportError(f"file {meta.path} shorter than expected")
                if bucket:
                    bucket.acquire(len(buf))
                state.update(buf)
                remaining -= len(buf)
        state.finalize()
    return time.perf_counter() - t0


RUNNERS = {
    Strategy.SEQUENTIAL: run_sequential,
    Strategy.FILE_PIPELINE: run_file_pipeline,
    Strategy.BLOCK_PIPELINE: run_block_pipeline,
    Strategy.FIVER: run_fiver,
    Strategy.FIVER_CHUNKED: run_fiver_chunked,
    Strategy.FIVER_HYBRID: run_fiver_hybrid,
}
