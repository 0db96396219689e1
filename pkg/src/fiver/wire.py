"""Bit-exact framed protocol for one transfer session over a duplex stream.

Frame layout (network byte order): 1-byte type, 8-byte big-endian payload
length, then the payload. Control payloads are UTF-8 JSON. The full byte-level
contract lives in docs/protocol.md.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass

from .model import HashAlg

FILE_BEGIN = 0x01
DATA = 0x02
CHUNK_DIGEST = 0x03
FILE_DIGEST = 0x04
RETRANSFER = 0x05
SESSION_END = 0x06
ERROR = 0x07
HELLO = 0x08

FRAME_NAMES = {
    FILE_BEGIN: "FILE_BEGIN",
    DATA: "DATA",
    CHUNK_DIGEST: "CHUNK_DIGEST",
    FILE_DIGEST: "FILE_DIGEST",
    RETRANSFER: "RETRANSFER",
    SESSION_END: "SESSION_END",
    ERROR: "ERROR",
    HELLO: "HELLO",
}

_HEADER = struct.Struct(">BQ")
HEADER_SIZE = _HEADER.size  # 9 bytes on the wire before the payload

PROTOCOL_VERSION = 1
MAX_CONTROL_LENGTH = 16 << 20
DEFAULT_HANDSHAKE_TIMEOUT = 10.0

# JSON numbers are exact only up to 2^53-1; larger integers travel as
# decimal strings in these fields.
_JSON_SAFE_INT = (1 << 53) - 1
_INT_FIELDS = frozenset(
    {
        "file_id", "size", "offset", "length", "chunk_size", "chunk_index",
        "file_count", "total_bytes", "buffer_size", "protocol_version", "bit",
    }
)


class ProtocolError(RuntimeError):
    """Malformed or unexpected frame traffic."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at stream byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class HandshakeError(ProtocolError):
    pass


class TransportError(RuntimeError):
    """Connection-level failure: refused, reset, or mid-session disconnect."""


@dataclass(frozen=True, slots=True)
class Frame:
    ftype: int
    payload: bytes

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_frame(ftype: int, payload: bytes) -> bytes:
    if ftype not in FRAME_NAMES:
        raise ProtocolError(f"unknown frame type 0x{ftype:02x}")
    return _HEADER.pack(ftype, len(payload)) + payload


def decode_frame(stream, max_data_length: int | None = None, base_offset: int = 0) -> Frame:
    """Read one frame from a stream exposing read(n).

    Truncation, unknown types and oversize lengths raise ProtocolError with
    the stream byte offset where decoding failed.
    """
    header = _read_exact(stream, HEADER_SIZE, base_offset, allow_empty=False)
    ftype, length = _HEADER.unpack(header)
    if ftype not in FRAME_NAMES:
        raise ProtocolError(f"unknown frame type 0x{ftype:02x}", base_offset)
    if ftype == DATA and max_data_length is not None:
        limit = max_data_length
    else:
        limit = MAX_CONTROL_LENGTH
    if length > limit:
        raise ProtocolError(
            f"{FRAME_NAMES[ftype]} frame length {length} exceeds limit {limit}",
            base_offset,
        )
    payload = _read_exact(stream, length, base_offset + HEADER_SIZE, allow_empty=False)
    return Frame(ftype, payload)


def _read_exact(stream, n: int, offset: int, *, allow_empty: bool) -> bytes:
    parts = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ProtocolError(
                f"truncated stream: wanted {n} bytes, got {got}", offset + got
            )
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def encode_control(fields: dict) -> bytes:
    """JSON-encode a control payload, stringifying integers beyond 2^53-1."""
    safe = {}
    for key, value in fields.items():
        if key in _INT_FIELDS and isinstance(value, int) and value > _JSON_SAFE_INT:
            safe[key] = str(value)
        else:
            safe[key] = value
    return json.dumps(safe, separators=(",", ":"), sort_keys=True).encode()


def decode_control(payload: bytes) -> dict:
    try:
        fields = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad control payload: {exc}") from None
    if not isinstance(fields, dict):
        raise ProtocolError("control payload is not a JSON object")
    for key in _INT_FIELDS:
        value = fields.get(key)
        if isinstance(value, str) and value.isdigit():
            fields[key] = int(value)
    return fields


class _SocketStream:
    __slots__ = ("_sock",)

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def read(self, n: int) -> bytes:
        return self._sock.recv(n)


class FrameChannel:
    """One session connection: framed reads and writes over a socket.

    Reads must come from a single thread; writes from any thread are
    serialized by an internal lock so a frame is never interleaved.
    """

    def __init__(self, sock: socket.socket, max_data_length: int | None = None):
        self._sock = sock
        self._stream = _SocketStream(sock)
        self._send_lock = threading.Lock()
        self.max_data_length = max_data_length
        self.bytes_read = 0

    def send(self, ftype: int, payload: bytes) -> None:
        data = encode_frame(ftype, payload)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def send_control(self, ftype: int, fields: dict) -> None:
        self.send(ftype, encode_control(fields))

    def recv(self) -> Frame:
        try:
            frame = decode_frame(self._stream, self.max_data_length, self.bytes_read)
        except socket.timeout as exc:
            raise TransportError(f"receive timed out: {exc}") from exc
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        self.bytes_read += HEADER_SIZE + frame.length
        return frame

    def settimeout(self, timeout: float | None) -> None:
        self._sock.settimeout(timeout)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


@dataclass(frozen=True, slots=True)
class SessionParams:
    """Negotiated session settings; the receiver adopts the sender's values."""

    hash_alg: HashAlg
    buffer_size: int
    audit: bool = False
    post_write_faults: tuple = ()
    faults_persistent: bool = False


def handshake(
    channel: FrameChannel,
    role: str,
    *,
    hash_alg: HashAlg,
    buffer_size: int,
    audit: bool = False,
    post_write_faults: tuple = (),
    faults_persistent: bool = False,
    protocol_version: int = PROTOCOL_VERSION,
    timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
) -> SessionParams:
    """Exchange HELLO frames on a fresh connection.

    The sender speaks first; the receiver adopts the sender's hash_alg and
    buffer_size. A protocol_version mismatch aborts with an ERROR frame.
    """
    if role not in ("sender", "receiver"):
        raise ValueError(f"bad role {role!r}")
    hello = {
        "protocol_version": protocol_version,
        "hash_alg": hash_alg.value,
        "buffer_size": buffer_size,
    }
    if role == "sender":
        if audit:
            hello["audit"] = True
        if post_write_faults:
            hello["post_write_faults"] = [
                {"file_id": f, "offset": o, "bit": b} for f, o, b in post_write_faults
            ]
            if faults_persistent:
                hello["faults_persistent"] = True

    channel.settimeout(timeout)
    try:
        if role == "sender":
            channel.send_control(HELLO, hello)
            peer = _recv_hello(channel)
        else:
            peer = _recv_hello(channel)
            channel.send_control(HELLO, hello)
    except TransportError as exc:
        raise HandshakeError(f"handshake failed: {exc}") from exc
    finally:
        channel.settimeout(None)

    peer_version = peer.get("protocol_version")
    if peer_version != protocol_version:
        channel.send_control(
            ERROR,
            {"message": f"protocol version mismatch: {protocol_version} vs {peer_version}"},
        )
        raise HandshakeError(
            f"protocol version mismatch: local {protocol_version}, peer {peer_version}"
        )

    if role == "sender":
        return SessionParams(hash_alg, buffer_size, audit,
                             tuple(post_write_faults), faults_persistent)
    try:
        negotiated_alg = HashAlg(peer["hash_alg"])
        negotiated_buf = int(peer["buffer_size"])
    except (KeyError, ValueError) as exc:
        raise HandshakeError(f"bad HELLO fields: {exc}") from None
    faults = tuple(
        (int(f["file_id"]), int(f["offset"]), int(f["bit"]))
        for f in peer.get("post_write_faults", ())
    )
    return SessionParams(
        negotiated_alg,
        negotiated_buf,
        bool(peer.get("audit", False)),
        faults,
        bool(peer.get("faults_persistent", False)),
    )


def _recv_hello(channel: FrameChannel) -> dict:
    frame = channel.recv()
    if frame.ftype == ERROR:
        message = decode_control(frame.payload).get("message", "peer error")
        raise HandshakeError(f"peer aborted handshake: {message}")
    if frame.ftype != HELLO:
        raise HandshakeError(
            f"expected HELLO, got {FRAME_NAMES.get(frame.ftype, hex(frame.ftype))}"
        )
    return decode_control(frame.payload)
