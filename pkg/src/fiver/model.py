"""Domain types shared by all modules, the overhead metric, and chunk-layout
arithmetic.

All value types here are immutable and safe to share between threads. Sizes
and rates use binary units throughout (K = KiB, M = MiB, G = GiB).
"""
from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field

KIB = 1 << 10
MIB = 1 << 20
GIB = 1 << 30

MIN_CHUNK_SIZE = MIB        # guards against digest-exchange storms
MIN_BLOCK_SIZE = MIB
MIN_BUFFER_SIZE = 4 * KIB
MIN_QUEUE_CAPACITY = 2
DEFAULT_BLOCK_SIZE = 256 * MIB
DEFAULT_BUFFER_SIZE = MIB
DEFAULT_QUEUE_CAPACITY = 8
RETRY_LIMIT = 3


class DatasetSpecError(ValueError):
    """Malformed dataset spec string."""


class HashAlg(enum.Enum):
    MD5 = "md5"
    SHA1 = "sha1"
    SHA256 = "sha256"

    @property
    def digest_size(self) -> int:
        return {"md5": 16, "sha1": 20, "sha256": 32}[self.value]


class Strategy(enum.Enum):
    SEQUENTIAL = "sequential"
    FILE_PIPELINE = "file-ppl"
    BLOCK_PIPELINE = "block-ppl"
    FIVER = "fiver"
    FIVER_CHUNKED = "fiver-chunked"
    FIVER_HYBRID = "hybrid"


class VerifyOutcome(enum.Enum):
    VERIFIED = "Verified"
    RETRIED_THEN_VERIFIED = "RetriedThenVerified"
    FAILED = "Failed"


class StrategyChoice(enum.Enum):
    """Per-file routing made by the hybrid selector."""

    CONCURRENT_SHARED = "ConcurrentShared"
    SEQUENTIAL_REREAD = "SequentialReread"


@dataclass(frozen=True, slots=True)
class FileMeta:
    """One transferable unit: a file, or a byte window of it for retransfers.

    ``offset``/``length`` describe the window; the initial transfer of a file
    uses offset 0 and length == size. ``chunk_size`` of 0 means whole-window
    digest verification.
    """

    file_id: int
    path: str
    size: int
    offset: int = 0
    length: int | None = None
    hash_alg: HashAlg = HashAlg.MD5
    chunk_size: int = 0

    def __post_init__(self) -> None:
        if self.length is None:
            object.__setattr__(self, "length", self.size)
        if self.size < 0 or self.offset < 0 or self.length < 0:
            raise ValueError("size, offset and length must be non-negative")
        if self.offset + self.length > self.size:
            raise ValueError(
                f"window [{self.offset}, {self.offset + self.length}) exceeds "
                f"file size {self.size}"
            )
        if self.size > 0 and self.length < 1:
            raise ValueError("length must be >= 1 for non-empty files")
        if self.chunk_size != 0 and self.chunk_size < MIN_CHUNK_SIZE:
            raise ValueError(f"chunk_size must be 0 or >= {MIN_CHUNK_SIZE}")

    def window(self, offset: int, length: int) -> "FileMeta":
        """Derive a retransfer window: same metadata except offset/length,
        verified as a single unit."""
        return dataclasses.replace(self, offset=offset, length=length, chunk_size=0)


@dataclass(frozen=True, slots=True)
class ChunkSpec:
    """A contiguous byte range of a file verified as one digest unit."""

    file_id: int
    index: int
    offset: int
    length: int


@dataclass(frozen=True, slots=True)
class Digest:
    alg: HashAlg
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != self.alg.digest_size:
            raise ValueError(
                f"{self.alg.value} digest must be {self.alg.digest_size} bytes, "
                f"got {len(self.value)}"
            )

    @property
    def hex(self) -> str:
        return self.value.hex()


@dataclass(slots=True)
class TransferPlan:
    """Strategy choice plus the knobs every strategy shares."""

    strategy: Strategy
    block_size: int = DEFAULT_BLOCK_SIZE
    hybrid_threshold: int = 0
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    buffer_size: int = DEFAULT_BUFFER_SIZE
    retry_limit: int = RETRY_LIMIT

    def __post_init__(self) -> None:
        if self.block_size < MIN_BLOCK_SIZE:
            raise ValueError(f"block_size must be >= {MIN_BLOCK_SIZE}")
        if self.queue_capacity < MIN_QUEUE_CAPACITY:
            raise ValueError(f"queue_capacity must be >= {MIN_QUEUE_CAPACITY}")
        if self.buffer_size < MIN_BUFFER_SIZE:
            raise ValueError(f"buffer_size must be >= {MIN_BUFFER_SIZE}")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")


@dataclass(slots=True)
class FileRecord:
    """Per-file verification outcome and accounting."""

    file_id: int
    path: str
    size: int
    t_transfer: float = 0.0
    t_checksum: float = 0.0
    t_total: float = 0.0
    verify_outcome: VerifyOutcome = VerifyOutcome.VERIFIED
    retransferred_bytes: int = 0
    shared_bytes: int = 0
    reread_bytes: int = 0
    strategy_choice: StrategyChoice | None = None
    audit_ok: bool | None = None

    def to_dict(self) -> dict:
        d = {
            "file_id": self.file_id,
            "path": self.path,
            "size": self.size,
            "t_transfer": round(self.t_transfer, 6),
            "t_checksum": round(self.t_checksum, 6),
            "t_total": round(self.t_total, 6),
            "verify_outcome": self.verify_outcome.value,
            "retransferred_bytes": self.retransferred_bytes,
            "shared_bytes": self.shared_bytes,
            "reread_bytes": self.reread_bytes,
        }
        if self.strategy_choice is not None:
            d["strategy_choice"] = self.strategy_choice.value
        if self.audit_ok is not None:
            d["audit_ok"] = self.audit_ok
        return d


@dataclass(slots=True)
class TransferReport:
    """Outcome of one session: per-file records plus session totals."""

    strategy: Strategy
    files: list[FileRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    fault_schedule: list[dict] = field(default_factory=list)
    transport_error: str | None = None

    @property
    def total_retransferred_bytes(self) -> int:
        return sum(r.retransferred_bytes for r in self.files)

    @property
    def total_shared_bytes(self) -> int:
        return sum(r.shared_bytes for r in self.files)

    @property
    def total_reread_bytes(self) -> int:
        return sum(r.reread_bytes for r in self.files)

    @property
    def total_t_transfer(self) -> float:
        return sum(r.t_transfer for r in self.files)

    @property
    def total_t_checksum(self) -> float:
        return sum(r.t_checksum for r in self.files)

    @property
    def all_verified(self) -> bool:
        return all(r.verify_outcome is not VerifyOutcome.FAILED for r in self.files)

    def summary_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "file_count": len(self.files),
            "wall_clock": round(self.wall_clock, 6),
            "t_transfer": round(self.total_t_transfer, 6),
            "t_checksum": round(self.total_t_checksum, 6),
            "retransferred_bytes": self.total_retransferred_bytes,
            "shared_bytes": self.total_shared_bytes,
            "reread_bytes": self.total_reread_bytes,
            "all_verified": self.all_verified,
            "transport_error": self.transport_error,
        }


def overhead(t_algorithm: float, t_checksum: float, t_transfer: float) -> float:
    """Percentage increase of an algorithm's total time over the slower of
    standalone checksum and standalone transfer time.

    May be negative when the combined run beat the slower lone phase.
    """
    if t_checksum <= 0 or t_transfer <= 0:
        raise ValueError("t_checksum and t_transfer must both be positive")
    if t_algorithm < 0:
        raise ValueError("t_algorithm must be non-negative")
    base = max(t_checksum, t_transfer)
    return 100.0 * (t_algorithm - base) / base


def chunk_layout(size: int, chunk_size: int, file_id: int = 0) -> list[ChunkSpec]:
    """Contiguous cover of [0, size) by chunk_size-long pieces, short tail last.

    chunk_size 0 yields a single whole-file chunk; size 0 yields no chunks.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    if chunk_size != 0 and chunk_size < MIN_CHUNK_SIZE:
        raise ValueError(f"chunk_size must be 0 or >= {MIN_CHUNK_SIZE}")
    if size == 0:
        return []
    if chunk_size == 0:
        return [ChunkSpec(file_id, 0, 0, size)]
    chunks = []
    offset = 0
    index = 0
    while offset < size:
        length = min(chunk_size, size - offset)
        chunks.append(ChunkSpec(file_id, index, offset, length))
        offset += length
        index += 1
    return chunks


_SIZE_RE = re.compile(r"^(\d+)\s*(?:([kKmMgG])(?:[iI]?[bB])?|[bB])?$")
_SUFFIX = {"k": KIB, "m": MIB, "g": GIB}


def parse_size(text: str, *, allow_zero: bool = False) -> int:
    """Parse a byte size like ``512K``, ``25M``, ``2G`` or ``4096``.

    Suffixes are binary: K = KiB, M = MiB, G = GiB.
    """
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise DatasetSpecError(f"malformed size {text!r}")
    n = int(m.group(1))
    if m.group(2):
        n *= _SUFFIX[m.group(2).lower()]
    if n == 0 and not allow_zero:
        raise DatasetSpecError(f"zero size {text!r}")
    return n


def render_size(n: int) -> str:
    for suffix, unit in (("G", GIB), ("M", MIB), ("K", KIB)):
        if n >= unit and n % unit == 0:
            return f"{n // unit}{suffix}"
    return str(n)


def parse_dataset_spec(text: str) -> list[int]:
    """Expand a ``<count>x<size>[,...]`` spec into an ordered list of file sizes.

    Example: ``"100x10M,4x8G"`` yields 104 sizes.
    """
    sizes: list[int] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            raise DatasetSpecError(f"empty token in {text!r}")
        count_part, sep, size_part = token.partition("x")
        if not sep:
            count_part, sep, size_part = token.partition("X")
        if not sep or not count_part.strip().isdigit():
            raise DatasetSpecError(f"malformed token {token!r} (want <count>x<size>)")
        count = int(count_part.strip())
        if count == 0:
            raise DatasetSpecError(f"zero count in token {token!r}")
        try:
            size = parse_size(size_part)
        except DatasetSpecError as exc:
            raise DatasetSpecError(f"bad token {token!r}: {exc}") from None
        sizes.extend([size] * count)
    return sizes


def render_dataset_spec(sizes: list[int]) -> str:
    """Inverse of parse_dataset_spec: compress consecutive equal sizes back
    into ``<count>x<size>`` tokens."""
    if not sizes:
        return ""
    tokens = []
    run_size = sizes[0]
    run_len = 1
    for s in sizes[1:]:
        if s == run_size:
            run_len += 1
        else:
            tokens.append(f"{run_len}x{render_size(run_size)}")
            run_size, run_len = s, 1
    tokens.append(f"{run_len}x{render_size(run_size)}")
    return ",".join(tokens)
