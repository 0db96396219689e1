"""Deterministic single-bit fault injection for validating detection and
recovery semantics.

Faults are applied in-process by hooks sitting inside the data pipeline:
IN_FLIGHT between the sender's digest input and the socket write, POST_WRITE
between the receiver's digest input and the disk write.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Sequence

from .model import FileMeta


class FaultMode(enum.Enum):
    IN_FLIGHT = "in-flight"
    POST_WRITE = "post-write"


class FaultScheduleError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class FaultSpec:
    mode: FaultMode
    file_index: int
    byte_offset: int
    bit: int

    def __post_init__(self) -> None:
        if not 0 <= self.bit <= 7:
            raise FaultScheduleError(f"bit must be 0-7, got {self.bit}")
        if self.byte_offset < 0:
            raise FaultScheduleError("byte_offset must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "file_index": self.file_index,
            "byte_offset": self.byte_offset,
            "bit": self.bit,
        }


def schedule_faults(
    count: int,
    dataset: Sequence[FileMeta] | Sequence[int],
    seed: int,
    mode: FaultMode = FaultMode.IN_FLIGHT,
) -> list[FaultSpec]:
    """Pick `count` distinct (file, byte, bit) positions uniformly over the
    dataset's bytes. Deterministic for a given seed."""
    sizes = [f.size if isinstance(f, FileMeta) else int(f) for f in dataset]
    total = sum(sizes)
    if count > total:
        raise FaultScheduleError(
            f"cannot place {count} faults in a {total}-byte dataset"
        )
    if count == 0:
        return []
    rng = random.Random(seed)
    # Distinct global byte positions guarantee distinct (file, byte, bit).
    positions = sorted(rng.sample(range(total), count))
    boundaries = []
    acc = 0
    for size in sizes:
        acc += size
        boundaries.append(acc)
    specs = []
    file_index = 0
    for pos in positions:
        while pos >= boundaries[file_index]:
            file_index += 1
        start = boundaries[file_index] - sizes[file_index]
        specs.append(FaultSpec(mode, file_index, pos - start, rng.randrange(8)))
    return specs


def flip_bit(buffer: bytes, index: int, bit: int) -> bytes:
    """Copy of `buffer` with one bit flipped at byte `index`."""
    if not 0 <= index < len(buffer):
        raise IndexError(f"byte index {index} out of range for {len(buffer)}-byte buffer")
    out = bytearray(buffer)
    out[index] ^= 1 << bit
    return bytes(out)


class FaultInjector:
    """Applies a fault schedule to buffers streaming past a hook point.

    Each fault fires once by default: a retransferred range is exempt from
    re-injection. With persistent=True the fault re-fires every time its
    position streams by (exhausts retry budgets). Single-context use only.
    """

    def __init__(self, schedule: Sequence[FaultSpec], persistent: bool = False):
        self.persistent = persistent
        self._by_file: dict[int, list[FaultSpec]] = {}
        for spec in schedule:
            self._by_file.setdefault(spec.file_index, []).append(spec)
        for specs in self._by_file.values():
            specs.sort(key=lambda s: s.byte_offset)
        self._applied: set[FaultSpec] = set()

    def corrupt(self, file_index: int, abs_offset: int, buffer: bytes) -> bytes:
        """Return `buffer` with any scheduled faults inside
        [abs_offset, abs_offset + len) applied; the input is never mutated."""
        specs = self._by_file.get(file_index)
        if not specs:
            return buffer
        end = abs_offset + len(buffer)
        out = None
        for spec in specs:
            if spec.byte_offset < abs_offset or spec.byte_offset >= end:
                continue
            if spec in self._applied and not self.persistent:
                continue
            if out is None:
                out = bytearray(buffer)
            out[spec.byte_offset - abs_offset] ^= 1 << spec.bit
            self._applied.add(spec)
        return bytes(out) if out is not None else buffer

    @property
    def applied(self) -> list[FaultSpec]:
        return sorted(self._applied, key=lambda s: (s.file_index, s.byte_offset))

    def unused(self) -> list[FaultSpec]:
        out = []
        for specs in self._by_file.values():
            out.extend(s for s in specs if s not in self._applied)
        return sorted(out, key=lambda s: (s.file_index, s.byte_offset))
