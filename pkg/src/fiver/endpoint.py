"""Sender and receiver network services: session lifecycle, file I/O, digest
exchange, and the recovery loop that services retransfer windows.

The receiver is strategy-agnostic: each FILE_BEGIN tells it how to digest the
window (from the shared queue as bytes arrive, by re-reading the stored file,
or not at all) and at what granularity (chunk_size). All strategy logic lives
on the sender.
"""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import os
import queue as queue_mod
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .bench import ThrottleConfig, TokenBucket
from .faults import FaultInjector, FaultMode, FaultSpec
from .hashio import DigestState, SharedQueue
from .model import (
    DEFAULT_BUFFER_SIZE,
    DEFAULT_QUEUE_CAPACITY,
    ChunkSpec,
    Digest,
    FileMeta,
    FileRecord,
    HashAlg,
    StrategyChoice,
    TransferPlan,
    TransferReport,
    VerifyOutcome,
    chunk_layout,
)
from .wire import FrameChannel, HandshakeError, ProtocolError, TransportError

log = logging.getLogger(__name__)

DIGEST_QUEUE = "queue"
DIGEST_REREAD = "reread"
DIGEST_NONE = "none"

DEFAULT_IO_TIMEOUT = 300.0
DEFAULT_CONNECT_TIMEOUT = 10.0


@dataclass(slots=True)
class TransferOptions:
    """Runtime knobs for one sender session."""

    throttle: ThrottleConfig | None = None
    fault_schedule: list[FaultSpec] = field(default_factory=list)
    faults_persistent: bool = False
    audit: bool = False
    handshake_timeout: float = wire.DEFAULT_HANDSHAKE_TIMEOUT
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    io_timeout: float | None = DEFAULT_IO_TIMEOUT
    protocol_version: int = wire.PROTOCOL_VERSION


class _Abort(Exception):
    """Internal: receiver session must stop (ERROR frame already sent)."""


# --------------------------------------------------------------------------
# Receiver


class _DigestWorker(threading.Thread):
    """Single ordered executor for a session's digest work. One worker per
    session keeps digest emissions in task-submission order, which the sender
    relies on when matching frames to expectations."""

    def __init__(self, on_error):
        super().__init__(name="digest-worker", daemon=True)
        self._tasks: queue_mod.SimpleQueue = queue_mod.SimpleQueue()
        self._on_error = on_error
        self.failed = False

    def submit(self, task) -> None:
        self._tasks.put(task)

    def run(self) -> None:
        while True:
            task = self._tasks.get()
            if task is None:
                return
            if self.failed:
                continue
            try:
                task()
            except Exception as exc:  # noqa: BLE001 - reported to the session
                self.failed = True
                self._on_error(exc)

    def stop(self) -> None:
        self._tasks.put(None)


@dataclass(slots=True)
class _Window:
    file_id: int
    abs_path: str
    size: int
    offset: int
    length: int
    chunk_size: int
    source: str
    hash_alg: HashAlg
    units: list[ChunkSpec]
    fh: object
    queue: SharedQueue | None = None
    received: int = 0
    unit_idx: int = 0


class _ReceiverSession:
    def __init__(self, receiver: "Receiver", channel: FrameChannel):
        self.receiver = receiver
        self.channel = channel
        self.params: wire.SessionParams | None = None
        self.injector: FaultInjector | None = None
        self.bucket = (
            TokenBucket(receiver.checksum_rate) if receiver.checksum_rate else None
        )
        self.worker = _DigestWorker(self._worker_error)
        self.window: _Window | None = None
        self.created_ids: set[int] = set()
        self.data_bytes = 0

    def run(self) -> None:
        try:
            self.params = wire.handshake(
                self.channel,
                "receiver",
                hash_alg=HashAlg.MD5,
                buffer_size=DEFAULT_BUFFER_SIZE,
                timeout=self.receiver.handshake_timeout,
            )
        except (HandshakeError, ProtocolError, TransportError) as exc:
            log.warning("handshake failed: %s", exc)
            return
        self.channel.max_data_length = self.params.buffer_size
        if self.params.post_write_faults:
            schedule = [
                FaultSpec(FaultMode.POST_WRITE, f, o, b)
                for f, o, b in self.params.post_write_faults
            ]
            self.injector = FaultInjector(schedule, self.params.faults_persistent)
        self.worker.start()
        try:
            self._loop()
        except _Abort:
            pass
        except (ProtocolError, TransportError) as exc:
            log.warning("session aborted: %s", exc)
            self._send_error(str(exc))
        except OSError as exc:
            log.warning("session I/O failure: %s", exc)
            self._send_error(f"receiver I/O failure: {exc}")
        finally:
            if self.window is not None:
                if self.window.queue is not None:
                    self.window.queue.close()  # unblock a digest task mid-pop
                with contextlib.suppress(OSError):
                    self.window.fh.close()
            self.worker.stop()
            self.worker.join(timeout=30)
            self.channel.close()

    def _loop(self) -> None:
        while True:
            frame = self.channel.recv()
            if frame.ftype == wire.FILE_BEGIN:
                self._on_file_begin(wire.decode_control(frame.payload))
            elif frame.ftype == wire.DATA:
                self._on_data(frame.payload)
            elif frame.ftype == wire.SESSION_END:
                self._on_session_end(wire.decode_control(frame.payload))
                return
            elif frame.ftype == wire.ERROR:
                message = wire.decode_control(frame.payload).get("message", "")
                log.warning("sender error: %s", message)
                return
            else:
                raise ProtocolError(
                    f"unexpected {wire.FRAME_NAMES[frame.ftype]} frame from sender"
                )

    def _on_file_begin(self, fields: dict) -> None:
        if self.window is not None:
            raise ProtocolError(
                f"FILE_BEGIN for file {fields.get('file_id')} before previous "
                f"window completed ({self.window.received}/{self.window.length} bytes)"
            )
        try:
            file_id = int(fields["file_id"])
            rel_path = fields["path"]
            size = int(fields["size"])
            offset = int(fields["offset"])
            length = int(fields["length"])
            hash_alg = HashAlg(fields["hash_alg"])
            chunk_size = int(fields["chunk_size"])
            source = fields.get("digest_source", DIGEST_REREAD)
        except (KeyError, ValueError) as exc:
            raise ProtocolError(f"bad FILE_BEGIN payload: {exc}") from None
        if source not in (DIGEST_QUEUE, DIGEST_REREAD, DIGEST_NONE):
            raise ProtocolError(f"bad digest_source {source!r}")
        abs_path = self._resolve_path(rel_path)

        self.created_ids.add(file_id)
        whole_file = offset == 0 and length == size
        if whole_file or not os.path.exists(abs_path):
            os.makedirs(os.path.dirname(abs_path), exist_ok=True)
            fh = open(abs_path, "wb", buffering=0)
            fh.truncate(size)  # pre-size so retransfer windows write in place
        else:
            # partial window into an existing file: overwrite exactly the range
            fh = open(abs_path, "r+b", buffering=0)
            if os.fstat(fh.fileno()).st_size != size:
                fh.truncate(size)

        units = chunk_layout(length, chunk_size, file_id)
        if not units:
            units = [ChunkSpec(file_id, 0, 0, 0)]
        w = _Window(
            file_id=file_id,
            abs_path=abs_path,
            size=size,
            offset=offset,
            length=length,
            chunk_size=chunk_size,
            source=source,
            hash_alg=hash_alg,
            units=units,
            fh=fh,
        )
        if source == DIGEST_QUEUE:
            w.queue = SharedQueue(self.receiver.queue_capacity)
            self.worker.submit(lambda: self._task_queue_digest(w))
        self.window = w
        self._advance(w)

    def _resolve_path(self, rel_path: str) -> str:
        root = self.receiver.root_dir
        if os.path.isabs(rel_path) or ".." in Path(rel_path).parts:
            self._send_error(f"path escapes root_dir: {rel_path!r}")
            raise _Abort()
        candidate = os.path.realpath(os.path.join(root, rel_path))
        if candidate != root and not candidate.startswith(root + os.sep):
            self._send_error(f"path escapes root_dir: {rel_path!r}")
            raise _Abort()
        return candidate

    def _on_data(self, payload: bytes) -> None:
        w = self.window
        if w is None:
            raise ProtocolError("DATA frame with no open window")
        if w.received + len(payload) > w.length:
            raise ProtocolError(
                f"window for file {w.file_id} overflows: expected {w.length} bytes"
            )
        disk_buf = payload
        if self.injector is not None:
            disk_buf = self.injector.corrupt(w.file_id, w.offset + w.received, payload)
        w.fh.seek(w.offset + w.received)
        w.fh.write(disk_buf)
        if w.queue is not None:
            w.queue.push(payload)  # digest input is the received bytes, pre-store
        w.received += len(payload)
        self.data_bytes += len(payload)
        self._advance(w)

    def _advance(self, w: _Window) -> None:
        if w.source == DIGEST_REREAD:
            while (
                w.unit_idx < len(w.units)
                and w.units[w.unit_idx].offset + w.units[w.unit_idx].length <= w.received
            ):
                unit = w.units[w.unit_idx]
                w.unit_idx += 1
                self.worker.submit(lambda u=unit: self._task_reread_digest(w, u))
        if w.received >= w.length:
            self._finish_window(w)

    def _finish_window(self, w: _Window) -> None:
        w.fh.close()
        if w.queue is not None:
            w.queue.close()
        if self.params.audit and w.source != DIGEST_NONE:
            self.worker.submit(lambda: self._task_audit(w))
        self.window = None

    def _unit_ftype(self, w: _Window, unit: ChunkSpec) -> tuple[int, dict]:
        if w.chunk_size > 0 and w.length > 0:
            return wire.CHUNK_DIGEST, {"file_id": w.file_id, "chunk_index": unit.index}
        return wire.FILE_DIGEST, {"file_id": w.file_id}

    def _send_unit_digest(self, w: _Window, unit: ChunkSpec, digest: Digest) -> None:
        ftype, fields = self._unit_ftype(w, unit)
        fields["digest_hex"] = digest.hex
        self.channel.send_control(ftype, fields)

    def _task_queue_digest(self, w: _Window) -> None:
        carry = b""
        for unit in w.units:
            state = DigestState(w.hash_alg)
            need = unit.length
            while need > 0:
                if carry:
                    buf, carry = carry, b""
                else:
                    buf = w.queue.pop()
                    if buf is None:
                        raise ProtocolError(
                            f"stream for file {w.file_id} ended {need} bytes short"
                        )
                if len(buf) > need:
                    buf, carry = buf[:need], buf[need:]
                if self.bucket:
                    self.bucket.acquire(len(buf))
                state.update(buf)
                need -= len(buf)
            self._send_unit_digest(w, unit, state.finalize())

    def _task_reread_digest(self, w: _Window, unit: ChunkSpec) -> None:
        digest = self._digest_from_disk(
            w, w.offset + unit.offset, unit.length, self.bucket
        )
        self._send_unit_digest(w, unit, digest)

    def _task_audit(self, w: _Window) -> None:
        # diagnostic pass over the stored bytes; deliberately unthrottled
        digest = self._digest_from_disk(w, w.offset, w.length, None)
        self.channel.send_control(
            wire.FILE_DIGEST,
            {"file_id": w.file_id, "digest_hex": digest.hex, "audit": True},
        )

    def _digest_from_disk(self, w: _Window, start: int, length: int, bucket) -> Digest:
        state = DigestState(w.hash_alg)
        with open(w.abs_path, "rb") as f:
            f.seek(start)
            remaining = length
            while remaining > 0:
                buf = f.read(min(self.params.buffer_size, remaining))
                if not buf:
                    raise ProtocolError(f"stored file {w.abs_path} shorter than window")
                if bucket:
                    bucket.acquire(len(buf))
                state.update(buf)
                remaining -= len(buf)
        return state.finalize()

    def _on_session_end(self, fields: dict) -> None:
        self._drain_worker()
        file_count = int(fields.get("file_count", -1))
        total_bytes = int(fields.get("total_bytes", -1))
        if file_count != len(self.created_ids) or total_bytes != self.data_bytes:
            raise ProtocolError(
                f"SESSION_END totals disagree: sender claims {file_count} files/"
                f"{total_bytes} bytes, received {len(self.created_ids)}/{self.data_bytes}"
            )

    def _drain_worker(self) -> None:
        fence = threading.Event()
        self.worker.submit(fence.set)
        if not fence.wait(timeout=600):
            raise ProtocolError("digest worker stalled at session end")

    def _worker_error(self, exc: Exception) -> None:
        log.warning("digest worker failed: %s", exc)
        self._send_error(f"receiver digest failure: {exc}")
        self.channel.close()  # unblocks the main recv loop

    def _send_error(self, message: str) -> None:
        with contextlib.suppress(TransportError, OSError):
            self.channel.send_control(wire.ERROR, {"message": message})


class Receiver:
    """Accepts transfer sessions one at a time and writes files under
    root_dir, honoring offset windows with positioned writes."""

    def __init__(
        self,
        root_dir: str | Path,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        checksum_rate: int = 0,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        handshake_timeout: float = wire.DEFAULT_HANDSHAKE_TIMEOUT,
    ):
        self.root_dir = os.path.realpath(root_dir)
        os.makedirs(self.root_dir, exist_ok=True)
        if checksum_rate:
            ThrottleConfig(checksum_rate=checksum_rate)  # validate floor
        self.checksum_rate = checksum_rate
        self.queue_capacity = queue_capacity
        self.handshake_timeout = handshake_timeout
        self._listener = socket.create_server((host, port))
        self._stopped = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def serve(self, max_sessions: int = 0) -> None:
        """Accept and handle sessions until stop() or max_sessions served."""
        served = 0
        while not self._stopped.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed by stop()
            try:
                channel = FrameChannel(conn)
                _ReceiverSession(self, channel).run()
            finally:
                with contextlib.suppress(OSError):
                    conn.close()
            served += 1
            if max_sessions and served >= max_sessions:
                return

    def serve_in_thread(self) -> "Receiver":
        self._thread = threading.Thread(target=self.serve, name="receiver", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stopped.set()
        address = None
        with contextlib.suppress(OSError):
            address = self.address
        with contextlib.suppress(OSError):
            self._listener.shutdown(socket.SHUT_RDWR)  # wakes a blocked accept
        with contextlib.suppress(OSError):
            self._listener.close()
        if self._thread is not None:
            self._thread.join(timeout=1)
            if self._thread.is_alive() and address is not None:
                # some platforms leave accept() blocked after close; nudge it
                with contextlib.suppress(OSError):
                    socket.create_connection(address, timeout=1).close()
            self._thread.join(timeout=30)


@contextlib.contextmanager
def receiver_context(root_dir, **kwargs):
    """Loopback helper: a Receiver serving on an ephemeral port."""
    receiver = Receiver(root_dir, **kwargs)
    receiver.serve_in_thread()
    try:
        yield receiver.address
    finally:
        receiver.stop()


# --------------------------------------------------------------------------
# Sender


class _FileTally:
    """Mutable per-file accounting; flushed into a FileRecord at report time."""

    __slots__ = (
        "meta", "t_transfer", "t_checksum", "first_ts", "last_ts", "sent_bytes",
        "retransferred_bytes", "shared_bytes", "reread_bytes", "mismatches",
        "failed", "open_windows", "pending_windows", "started", "audit_ok",
        "choice",
    )

    def __init__(self, meta: FileMeta):
        self.meta = meta
        self.t_transfer = 0.0
        self.t_checksum = 0.0
        self.first_ts = None
        self.last_ts = None
        self.sent_bytes = 0
        self.retransferred_bytes = 0
        self.shared_bytes = 0
        self.reread_bytes = 0
        self.mismatches = 0
        self.failed = False
        self.open_windows = 0
        self.pending_windows = 0
        self.started = False
        self.audit_ok = None
        self.choice = None

    @property
    def complete(self) -> bool:
        return self.started and self.open_windows == 0 and self.pending_windows == 0


class SenderSession:
    """Sender half of one session: connection, digest exchange, counters, and
    the pending-retransfer queue. Strategy drivers sequence these primitives.
    """

    def __init__(
        self,
        channel: FrameChannel,
        dataset_dir: str | Path,
        files: list[FileMeta],
        plan: TransferPlan,
        options: TransferOptions,
    ):
        self.channel = channel
        self.dataset_dir = Path(dataset_dir)
        self.files = files
        self.plan = plan
        self.options = options
        self.audit = options.audit
        throttle = options.throttle or ThrottleConfig()
        self.net_bucket = TokenBucket(throttle.net_rate) if throttle.net_rate else None
        self.checksum_bucket = (
            TokenBucket(throttle.checksum_rate) if throttle.checksum_rate else None
        )
        # fault schedules index into the dataset list; injection keys on the
        # wire-visible file_id, so translate here
        in_flight = [
            dataclasses.replace(s, file_index=files[s.file_index].file_id)
            for s in options.fault_schedule
            if s.mode is FaultMode.IN_FLIGHT
        ]
        self.injector = (
            FaultInjector(in_flight, options.faults_persistent) if in_flight else None
        )
        self.pending: deque[FileMeta] = deque()
        self.tallies: dict[int, _FileTally] = {f.file_id: _FileTally(f) for f in files}
        self.retries: dict[tuple[int, int, int], int] = {}
        self._lock = threading.Lock()
        self._inbox: queue_mod.SimpleQueue = queue_mod.SimpleQueue()
        self._reader: threading.Thread | None = None

    # -- connection plumbing

    def start_reader(self) -> None:
        self._reader = threading.Thread(
            target=self._read_loop, name="sender-reader", daemon=True
        )
        self._reader.start()

    def _read_loop(self) -> None:
        while True:
            try:
                frame = self.channel.recv()
            except (ProtocolError, TransportError) as exc:
                self._inbox.put(exc)
                return
            if frame.ftype in (wire.CHUNK_DIGEST, wire.FILE_DIGEST, wire.ERROR):
                self._inbox.put(frame)
            else:
                self._inbox.put(
                    ProtocolError(
                        f"unexpected {wire.FRAME_NAMES[frame.ftype]} frame from receiver"
                    )
                )
                return

    def await_digest(
        self, file_id: int, chunk_index: int | None = None, audit: bool = False
    ) -> str:
        """Block until the receiver's digest for the given unit arrives."""
        try:
            item = self._inbox.get(timeout=self.options.io_timeout)
        except queue_mod.Empty:
            raise TransportError(
                f"timed out waiting for digest of file {file_id}"
            ) from None
        if isinstance(item, TransportError):
            raise item
        if isinstance(item, Exception):
            raise TransportError(str(item)) from item
        fields = wire.decode_control(item.payload)
        if item.ftype == wire.ERROR:
            raise TransportError(f"receiver error: {fields.get('message', '')}")
        got_audit = bool(fields.get("audit", False))
        if audit:
            expected = item.ftype == wire.FILE_DIGEST and got_audit
        elif chunk_index is None:
            expected = item.ftype == wire.FILE_DIGEST and not got_audit
        else:
            expected = (
                item.ftype == wire.CHUNK_DIGEST
                and fields.get("chunk_index") == chunk_index
            )
        if not expected or fields.get("file_id") != file_id:
            raise ProtocolError(
                f"unexpected digest frame {wire.FRAME_NAMES[item.ftype]} {fields} "
                f"(wanted file {file_id}, chunk {chunk_index}, audit={audit})"
            )
        return fields["digest_hex"]

    # -- window primitives

    def begin_window(self, win: FileMeta, source: str, chunk_size: int) -> None:
        tally = self.tallies[win.file_id]
        now = time.perf_counter()
        with self._lock:
            if tally.first_ts is None:
                tally.first_ts = now
            tally.started = True
            tally.open_windows += 1
        self.channel.send_control(
            wire.FILE_BEGIN,
            {
                "file_id": win.file_id,
                "path": win.path,
                "size": win.size,
                "offset": win.offset,
                "length": win.length,
                "hash_alg": win.hash_alg.value,
                "chunk_size": chunk_size,
                "digest_source": source,
            },
        )

    def send_range(
        self,
        win: FileMeta,
        rel_offset: int = 0,
        length: int | None = None,
        to_queue: SharedQueue | None = None,
    ) -> None:
        """Stream one byte range as DATA frames: read, (maybe corrupt the wire
        copy), send, then enqueue the clean buffer. The send-before-enqueue
        order means the socket stream is never behind the digest stream, which
        is what makes the shared-queue pipeline deadlock-free."""
        if length is None:
            length = win.length
        tally = self.tallies[win.file_id]
        t0 = time.perf_counter()
        with open(self.dataset_dir / win.path, "rb") as f:
            f.seek(win.offset + rel_offset)
            sent = 0
            while sent < length:
                n = min(self.plan.buffer_size, length - sent)
                buf = f.read(n)
                if len(buf) != n:
                    raise TransportError(
                        f"source file {win.path} shorter than expected"
                    )
                wire_buf = buf
                if self.injector is not None:
                    wire_buf = self.injector.corrupt(
                        win.file_id, win.offset + rel_offset + sent, buf
                    )
                if self.net_bucket:
                    self.net_bucket.acquire(len(buf))
                self.channel.send(wire.DATA, wire_buf)
                if to_queue is not None:
                    to_queue.push(buf)
                sent += n
        dt = time.perf_counter() - t0
        with self._lock:
            tally.t_transfer += dt
            tally.sent_bytes += length
            tally.last_ts = time.perf_counter()

    def reread_digest(
        self, win: FileMeta, rel_offset: int = 0, length: int | None = None
    ) -> Digest:
        """Sender-side checksum pass that re-reads the source file from the
        filesystem (the sequential-path access pattern)."""
        if length is None:
            length = win.length
        tally = self.tallies[win.file_id]
        t0 = time.perf_counter()
        state = DigestState(win.hash_alg)
        with open(self.dataset_dir / win.path, "rb") as f:
            f.seek(win.offset + rel_offset)
            remaining = length
            while remaining > 0:
                buf = f.read(min(self.plan.buffer_size, remaining))
                if not buf:
                    raise TransportError(f"source file {win.path} shrank mid-session")
                if self.checksum_bucket:
                    self.checksum_bucket.acquire(len(buf))
                state.update(buf)
                remaining -= len(buf)
        digest = state.finalize()
        dt = time.perf_counter() - t0
        with self._lock:
            tally.t_checksum += dt
            tally.reread_bytes += length
            tally.last_ts = time.perf_counter()
        return digest

    def run_queue_digester(
        self, win: FileMeta, shared: SharedQueue, chunk_size: int
    ) -> None:
        """Digest the window from the shared queue, finalizing at every chunk
        boundary, comparing each unit against the receiver's digest as it
        arrives. Runs in the checksum thread of the concurrent strategies."""
        tally = self.tallies[win.file_id]
        units = chunk_layout(win.length, chunk_size, win.file_id)
        chunked = chunk_size > 0 and win.length > 0
        if not units:
            units = [ChunkSpec(win.file_id, 0, 0, 0)]
        audit_state = DigestState(win.hash_alg) if self.audit else None
        t0 = time.perf_counter()
        carry = b""
        for unit in units:
            state = DigestState(win.hash_alg)
            need = unit.length
            while need > 0:
                if carry:
                    buf, carry = carry, b""
                else:
                    buf = shared.pop()
                    if buf is None:
                        raise TransportError(
                            f"sender queue for file {win.file_id} closed early"
                        )
                if len(buf) > need:
                    buf, carry = buf[:need], buf[need:]
                if self.checksum_bucket:
                    self.checksum_bucket.acquire(len(buf))
                state.update(buf)
                if audit_state is not None:
                    audit_state.update(buf)
                need -= len(buf)
                with self._lock:
                    tally.shared_bytes += len(buf)
            local = state.finalize()
            remote = self.await_digest(
                win.file_id, chunk_index=unit.index if chunked else None
            )
            self.compare_and_recover(win, unit, local, remote)
        with self._lock:
            tally.t_checksum += time.perf_counter() - t0
        if audit_state is not None:
            self._check_audit(win, audit_state.finalize())
        self.window_resolved(win)

    def source_window_digest(self, win: FileMeta) -> Digest:
        """Digest of the window's source bytes, for audit comparison only:
        unthrottled and excluded from the reread counter."""
        state = DigestState(win.hash_alg)
        with open(self.dataset_dir / win.path, "rb") as f:
            f.seek(win.offset)
            remaining = win.length
            while remaining > 0:
                buf = f.read(min(self.plan.buffer_size, remaining))
                if not buf:
                    raise TransportError(f"source file {win.path} shrank mid-session")
                state.update(buf)
                remaining -= len(buf)
        return state.finalize()

    def compare_and_recover(
        self, win: FileMeta, unit: ChunkSpec, local: Digest, remote_hex: str
    ) -> bool:
        """Verdict for one unit: equal digests verify it; unequal digests
        enqueue a retransfer window over exactly that unit, up to the retry
        budget, after which the file is Failed."""
        tally = self.tallies[win.file_id]
        if remote_hex == local.hex:
            with self._lock:
                tally.last_ts = time.perf_counter()
            return True
        abs_offset = win.offset + unit.offset
        key = (win.file_id, abs_offset, unit.length)
        with self._lock:
            tally.mismatches += 1
            tally.last_ts = time.perf_counter()
            self.retries[key] = self.retries.get(key, 0) + 1
            if self.retries[key] > self.plan.retry_limit:
                tally.failed = True
                log.warning(
                    "file %s unit at %d+%d failed verification %d times; giving up",
                    win.path, abs_offset, unit.length, self.retries[key],
                )
                return False
            window = tally.meta.window(abs_offset, unit.length)
            self.pending.append(window)
            tally.pending_windows += 1
            tally.retransferred_bytes += unit.length
        return False

    def _check_audit(self, win: FileMeta, local: Digest) -> None:
        remote_hex = self.await_digest(win.file_id, audit=True)
        ok = remote_hex == local.hex
        with self._lock:
            tally = self.tallies[win.file_id]
            tally.audit_ok = ok if tally.audit_ok is None else (tally.audit_ok and ok)

    def audit_window_reread(self, win: FileMeta, local: Digest) -> None:
        """Audit check for reread-path windows: the sender-side source digest
        doubles as the reference."""
        if self.audit:
            self._check_audit(win, local)

    def window_resolved(self, win: FileMeta) -> None:
        with self._lock:
            tally = self.tallies[win.file_id]
            tally.open_windows -= 1
            tally.last_ts = time.perf_counter()

    def next_window(self, remaining: deque[FileMeta]) -> tuple[FileMeta, bool] | None:
        """Next unit of work: pending retransfer windows take priority over
        not-yet-sent dataset files. Returns (window, is_retransfer)."""
        with self._lock:
            if self.pending:
                win = self.pending.popleft()
                self.tallies[win.file_id].pending_windows -= 1
                return win, True
        if remaining:
            return remaining.popleft(), False
        return None

    def record_choice(self, file_id: int, choice: StrategyChoice) -> None:
        self.tallies[file_id].choice = choice

    def send_session_end(self) -> None:
        total = sum(t.sent_bytes for t in self.tallies.values())
        started = sum(1 for t in self.tallies.values() if t.started)
        self.channel.send_control(
            wire.SESSION_END, {"file_count": started, "total_bytes": total}
        )

    def build_report(
        self, strategy, wall_clock: float, transport_error: str | None
    ) -> TransferReport:
        report = TransferReport(
            strategy=strategy, wall_clock=wall_clock, transport_error=transport_error
        )
        for meta in self.files:
            tally = self.tallies[meta.file_id]
            if tally.failed:
                outcome = VerifyOutcome.FAILED
            elif not tally.complete:
                outcome = VerifyOutcome.FAILED  # interrupted by transport error
            elif tally.mismatches:
                outcome = VerifyOutcome.RETRIED_THEN_VERIFIED
            else:
                outcome = VerifyOutcome.VERIFIED
            t_total = 0.0
            if tally.first_ts is not None and tally.last_ts is not None:
                t_total = tally.last_ts - tally.first_ts
            report.files.append(
                FileRecord(
                    file_id=meta.file_id,
                    path=meta.path,
                    size=meta.size,
                    t_transfer=tally.t_transfer,
                    t_checksum=tally.t_checksum,
                    t_total=t_total,
                    verify_outcome=outcome,
                    retransferred_bytes=tally.retransferred_bytes,
                    shared_bytes=tally.shared_bytes,
                    reread_bytes=tally.reread_bytes,
                    strategy_choice=tally.choice,
                    audit_ok=tally.audit_ok,
                )
            )
        return report


def transfer(
    dataset_dir: str | Path,
    files: list[FileMeta],
    address: tuple[str, int],
    plan: TransferPlan,
    options: TransferOptions | None = None,
    runner=None,
) -> TransferReport:
    """Run one session: connect, handshake, execute the plan's strategy over
    the dataset, exchange digests, service retransfers, SESSION_END.

    A mid-session disconnect marks the unfinished files Failed and returns
    the partial report with transport_error set; a refused connection raises
    TransportError before any report exists.
    """
    from . import strategies  # late import; strategies drive this module

    options = options or TransferOptions()
    if runner is None:
        runner = strategies.RUNNERS[plan.strategy]
    hash_alg = files[0].hash_alg if files else HashAlg.MD5
    post_write = [
        (files[s.file_index].file_id, s.byte_offset, s.bit)
        for s in options.fault_schedule
        if s.mode is FaultMode.POST_WRITE
    ]
    try:
        sock = socket.create_connection(address, timeout=options.connect_timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc
    sock.settimeout(None)
    channel = FrameChannel(sock)
    t0 = time.perf_counter()
    try:
        wire.handshake(
            channel,
            "sender",
            hash_alg=hash_alg,
            buffer_size=plan.buffer_size,
            audit=options.audit,
            post_write_faults=tuple(post_write),
            faults_persistent=options.faults_persistent,
            protocol_version=options.protocol_version,
            timeout=options.handshake_timeout,
        )
    except (HandshakeError, TransportError):
        channel.close()
        raise
    session = SenderSession(channel, dataset_dir, files, plan, options)
    session.start_reader()
    transport_error = None
    try:
        runner(session, plan)
        session.send_session_end()
    except (TransportError, ProtocolError) as exc:
        transport_error = str(exc)
        log.warning("session aborted: %s", exc)
    finally:
        channel.close()
    wall = time.perf_counter() - t0
    report = session.build_report(plan.strategy, wall, transport_error)
    report.fault_schedule = [s.to_dict() for s in options.fault_schedule]
    if options.fault_schedule and session.injector is not None:
        applied = set(session.injector.applied)
        for entry, spec in zip(report.fault_schedule, options.fault_schedule):
            if spec.mode is FaultMode.IN_FLIGHT:
                translated = dataclasses.replace(
                    spec, file_index=files[spec.file_index].file_id
                )
                entry["applied"] = translated in applied
    elif post_write:
        # receiver-side usage is not reported back; infer from coverage
        for entry, spec in zip(report.fault_schedule, options.fault_schedule):
            tally = session.tallies.get(files[spec.file_index].file_id)
            entry["applied"] = bool(tally and tally.sent_bytes > spec.byte_offset)
    return report
