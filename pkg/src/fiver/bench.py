"""Dataset generation, rate throttling, experiment matrices, and report
emission for desk-scale overhead comparisons between the strategies.

Throttles emulate the fast-network / fast-checksum regimes with token
buckets; page-cache behavior is not measured — the shared/reread byte
counters in transfer reports are the observable proxy for it.
"""
from __future__ import annotations

import csv
import hashlib
import random
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .faults import FaultMode
from .model import (
    KIB,
    MIB,
    DEFAULT_BLOCK_SIZE,
    FileMeta,
    HashAlg,
    Strategy,
    TransferPlan,
    TransferReport,
    overhead,
    parse_dataset_spec,
    parse_size,
)

MIN_RATE = 64 * KIB
DEFAULT_BUCKET_SECONDS = 0.1
DATASET_ORDERS = ("as-given", "shuffled", "sorted-interleave")

CSV_COLUMNS = [
    "dataset", "strategy", "hash", "net_rate", "checksum_rate", "faults",
    "rep", "t_total", "t_transfer", "t_checksum", "overhead_pct",
    "retransferred_bytes", "shared_bytes", "reread_bytes", "outcome",
]


@dataclass(frozen=True, slots=True)
class ThrottleConfig:
    """Byte rates in bytes/second; 0 means unlimited."""

    net_rate: int = 0
    checksum_rate: int = 0

    def __post_init__(self) -> None:
        for name, rate in (("net_rate", self.net_rate), ("checksum_rate", self.checksum_rate)):
            if rate != 0 and rate < MIN_RATE:
                raise ValueError(f"{name} must be 0 or >= {MIN_RATE} B/s, got {rate}")


class TokenBucket:
    """Token-bucket byte limiter. Thread-safe.

    The bucket starts empty and holds at most `bucket_seconds` worth of rate,
    so a stream can never burst more than one bucket ahead nor finish earlier
    than the analytic bytes/rate time.
    """

    def __init__(self, rate: int, bucket_seconds: float = DEFAULT_BUCKET_SECONDS):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = max(1.0, rate * bucket_seconds)
        self._tokens = 0.0
        self._last: float | None = None  # accrual starts at first acquire
        self._lock = threading.Lock()

    def acquire(self, nbytes: int) -> None:
        need = nbytes
        while need > 0:
            with self._lock:
                now = time.monotonic()
                if self._last is None:
                    self._last = now
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                take = min(need, self.capacity)
                if self._tokens >= take:
                    self._tokens -= take
                    need -= take
                    continue
                wait = (take - self._tokens) / self.rate
            time.sleep(wait)


def throttle(stream_op, rate: int):
    """Wrap a bytes-consuming callable so sustained throughput stays within
    the token-bucket rate. rate 0 returns the callable unchanged."""
    if rate == 0:
        return stream_op
    bucket = TokenBucket(rate)

    def limited(data, *args, **kwargs):
        bucket.acquire(len(data))
        return stream_op(data, *args, **kwargs)

    return limited


@dataclass(frozen=True, slots=True)
class ManifestEntry:
    path: str
    size: int
    digest_hex: str


MANIFEST_NAME = "manifest.tsv"
_GEN_BUFFER = 8 * MIB


def order_sizes(sizes: list[int], order: str, seed: int) -> list[int]:
    if order == "as-given":
        return list(sizes)
    if order == "shuffled":
        out = list(sizes)
        random.Random(seed).shuffle(out)
        return out
    if order == "sorted-interleave":
        ranked = sorted(sizes)
        half = len(ranked) // 2
        low, high = ranked[:half], ranked[half:]
        out = []
        for i in range(half):
            out.append(low[i])
            out.append(high[i])
        out.extend(high[half:])
        return out
    raise ValueError(f"unknown order {order!r} (want one of {DATASET_ORDERS})")


def generate_dataset(
    spec: str,
    order: str = "as-given",
    seed: int = 0,
    out_dir: str | Path = ".",
    digest_alg: HashAlg = HashAlg.MD5,
) -> list[ManifestEntry]:
    """Create seeded pseudo-random files per the dataset spec and write a
    manifest (`path<TAB>size<TAB>digest_hex` per line) next to them."""
    sizes = order_sizes(parse_dataset_spec(spec), order, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = sum(sizes)
    free = shutil.disk_usage(out_dir).free
    if free < total + 32 * MIB:
        raise OSError(
            f"insufficient disk space: need {total} bytes plus slack, {free} free"
        )
    entries = []
    for i, size in enumerate(sizes):
        name = f"f{i:05d}.dat"
        rng = np.random.default_rng([seed, i])
        engine = hashlib.new(digest_alg.value)
        with open(out_dir / name, "wb") as f:
            remaining = size
            while remaining > 0:
                block = rng.bytes(min(_GEN_BUFFER, remaining))
                f.write(block)
                engine.update(block)
                remaining -= len(block)
        entries.append(ManifestEntry(name, size, engine.hexdigest()))
    write_manifest(entries, out_dir / MANIFEST_NAME)
    return entries


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.path}\t{e.size}\t{e.digest_hex}\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: malformed manifest line")
            entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
    return entries


def to_file_metas(
    entries: list[ManifestEntry],
    hash_alg: HashAlg = HashAlg.MD5,
    chunk_size: int = 0,
) -> list[FileMeta]:
    return [
        FileMeta(i, e.path, e.size, hash_alg=hash_alg, chunk_size=chunk_size)
        for i, e in enumerate(entries)
    ]


@dataclass(slots=True)
class MatrixCell:
    """One fully specified experiment: dataset x strategy x throttle x faults
    x hash, run `reps` times."""

    dataset: str
    strategy: Strategy
    order: str = "as-given"
    seed: int = 0
    hash_alg: HashAlg = HashAlg.MD5
    net_rate: int = 0
    checksum_rate: int = 0
    faults: int = 0
    fault_mode: FaultMode = FaultMode.IN_FLIGHT
    fault_seed: int = 0
    reps: int = 5
    block_size: int = DEFAULT_BLOCK_SIZE
    chunk_size: int = 0
    hybrid_threshold: int = 0

    def dataset_key(self) -> str:
        tag = hashlib.sha1(
            f"{self.dataset}|{self.order}|{self.seed}".encode()
        ).hexdigest()[:10]
        return f"ds_{tag}"

    def baseline_key(self) -> tuple:
        return (self.dataset_key(), self.hash_alg, self.net_rate, self.checksum_rate)


_CELL_KEYS = {
    "dataset": str,
    "order": str,
    "seed": int,
    "strategy": lambda v: Strategy(v),
    "hash": lambda v: HashAlg(v),
    "net_rate": lambda v: parse_size(v, allow_zero=True),
    "checksum_rate": lambda v: parse_size(v, allow_zero=True),
    "faults": int,
    "fault_mode": lambda v: FaultMode(v),
    "fault_seed": int,
    "reps": int,
    "block_size": parse_size,
    "chunk_size": lambda v: parse_size(v, allow_zero=True),
    "hybrid_threshold": lambda v: parse_size(v, allow_zero=True),
}
_CELL_FIELD_NAMES = {"hash": "hash_alg"}


def parse_matrix(text: str) -> list[MatrixCell]:
    """Parse a line-oriented matrix file: one cell per line, space-separated
    key=value pairs; `#` starts a comment."""
    cells = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kwargs = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep or key not in _CELL_KEYS:
                raise ValueError(f"matrix line {line_no}: bad token {token!r}")
            try:
                kwargs[_CELL_FIELD_NAMES.get(key, key)] = _CELL_KEYS[key](value)
            except ValueError as exc:
                raise ValueError(f"matrix line {line_no}: {token!r}: {exc}") from None
        if "dataset" not in kwargs or "strategy" not in kwargs:
            raise ValueError(f"matrix line {line_no}: dataset= and strategy= are required")
        cells.append(MatrixCell(**kwargs))
    return cells


def run_experiment(
    cells: list[MatrixCell],
    work_dir: str | Path,
    progress=None,
) -> list[dict]:
    """Run every cell in loopback mode, strictly sequentially.

    Returns one row dict per repetition in CSV_COLUMNS order. Baselines
    (transfer-only and checksum-only) are measured once per unique
    (dataset, hash, throttle) group and shared across its cells. A failed
    cell is marked in its `outcome` column but does not abort the matrix.
    """
    from . import endpoint  # late import: endpoint pulls throttling from here
    from .faults import schedule_faults
    from .strategies import checksum_only_pass

    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    dataset_dirs: dict[str, Path] = {}
    baselines: dict[tuple, tuple[float, float]] = {}
    rows: list[dict] = []

    for cell in cells:
        key = cell.dataset_key()
        if key not in dataset_dirs:
            ds_dir = work_dir / "datasets" / key
            if not (ds_dir / MANIFEST_NAME).exists():
                generate_dataset(cell.dataset, cell.order, cell.seed, ds_dir)
            dataset_dirs[key] = ds_dir
        ds_dir = dataset_dirs[key]
        entries = load_manifest(ds_dir / MANIFEST_NAME)
        files = to_file_metas(entries, cell.hash_alg, cell.chunk_size)
        throttle_cfg = ThrottleConfig(cell.net_rate, cell.checksum_rate)

        bkey = cell.baseline_key()
        if bkey not in baselines:
            if progress:
                progress(f"baselines for {cell.dataset} @ net={cell.net_rate} chk={cell.checksum_rate}")
            t_transfer = _measure_transfer_only(ds_dir, files, work_dir, throttle_cfg)
            t_checksum = checksum_only_pass(
                ds_dir, files, cell.hash_alg, cell.checksum_rate
            )
            baselines[bkey] = (t_transfer, t_checksum)
        t_transfer_base, t_checksum_base = baselines[bkey]

        plan = TransferPlan(
            strategy=cell.strategy,
            block_size=cell.block_size,
            hybrid_threshold=cell.hybrid_threshold,
        )
        schedule = (
            schedule_faults(cell.faults, files, cell.fault_seed, cell.fault_mode)
            if cell.faults
            else []
        )
        for rep in range(cell.reps):
            if progress:
                progress(f"{cell.strategy.value} {cell.dataset} rep {rep}")
            report = _loopback_run(
                ds_dir, files, work_dir, plan, throttle_cfg, schedule
            )
            rows.append(
                _result_row(cell, rep, report, t_transfer_base, t_checksum_base)
            )
    return rows


def _loopback_run(ds_dir, files, work_dir, plan, throttle_cfg, schedule) -> TransferReport:
    from . import endpoint

    dest = Path(work_dir) / "dest"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    options = endpoint.TransferOptions(
        throttle=throttle_cfg,
        fault_schedule=list(schedule),
    )
    with endpoint.receiver_context(
        dest, checksum_rate=throttle_cfg.checksum_rate, queue_capacity=plan.queue_capacity
    ) as address:
        return endpoint.transfer(ds_dir, files, address, plan, options)


def _measure_transfer_only(ds_dir, files, work_dir, throttle_cfg) -> float:
    from . import endpoint
    from .strategies import run_transfer_only

    dest = Path(work_dir) / "dest"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    plan = TransferPlan(strategy=Strategy.SEQUENTIAL)
    options = endpoint.TransferOptions(throttle=throttle_cfg)
    with endpoint.receiver_context(dest, checksum_rate=0) as address:
        report = endpoint.transfer(
            ds_dir, files, address, plan, options, runner=run_transfer_only
        )
    return report.wall_clock


def _result_row(cell, rep, report, t_transfer_base, t_checksum_base) -> dict:
    ok = report.all_verified and report.transport_error is None
    return {
        "dataset": cell.dataset,
        "strategy": cell.strategy.value,
        "hash": cell.hash_alg.value,
        "net_rate": cell.net_rate,
        "checksum_rate": cell.checksum_rate,
        "faults": cell.faults,
        "rep": rep,
        "t_total": round(report.wall_clock, 6),
        "t_transfer": round(t_transfer_base, 6),
        "t_checksum": round(t_checksum_base, 6),
        "overhead_pct": round(
            overhead(report.wall_clock, t_checksum_base, t_transfer_base), 2
        ),
        "retransferred_bytes": report.total_retransferred_bytes,
        "shared_bytes": report.total_shared_bytes,
        "reread_bytes": report.total_reread_bytes,
        "outcome": "ok" if ok else "failed",
    }


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Aggregate per-rep rows into one record per cell with mean/min/max."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["dataset"], row["strategy"], row["hash"],
               row["net_rate"], row["checksum_rate"], row["faults"])
        groups.setdefault(key, []).append(row)
    out = []
    for key, group in groups.items():
        totals = [r["t_total"] for r in group]
        out.append(
            {
                "dataset": key[0],
                "strategy": key[1],
                "hash": key[2],
                "net_rate": key[3],
                "checksum_rate": key[4],
                "faults": key[5],
                "reps": len(group),
                "t_total_mean": round(sum(totals) / len(totals), 6),
                "t_total_min": min(totals),
                "t_total_max": max(totals),
                "overhead_pct_mean": round(
                    sum(r["overhead_pct"] for r in group) / len(group), 2
                ),
                "outcome": "ok" if all(r["outcome"] == "ok" for r in group) else "failed",
            }
        )
    return out


def emit_report(rows: list[dict], fmt: str = "csv", path: str | Path = "results.csv") -> Path:
    """Write experiment rows as CSV (one row per repetition, stable column
    order) or as an aggregated fixed-width text table."""
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in CSV_COLUMNS})
    elif fmt == "text-table":
        summary = summarize_rows(rows)
        cols = ["dataset", "strategy", "hash", "net_rate", "checksum_rate",
                "faults", "reps", "t_total_mean", "t_total_min", "t_total_max",
                "overhead_pct_mean", "outcome"]
        widths = {
            c: max(len(c), *(len(str(r[c])) for r in summary)) if summary else len(c)
            for c in cols
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write("  ".join(c.ljust(widths[c]) for c in cols).rstrip() + "\n")
            for r in summary:
                f.write("  ".join(str(r[c]).ljust(widths[c]) for c in cols).rstrip() + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def write_transfer_report(report: TransferReport, path: str | Path) -> Path:
    """Serialize one TransferReport: `.csv` gets a per-file CSV, anything
    else line-delimited JSON (one object per file plus a session summary)."""
    import json

    path = Path(path)
    if path.suffix == ".csv":
        cols = ["file_id", "path", "size", "t_transfer", "t_checksum", "t_total",
                "verify_outcome", "retransferred_bytes", "shared_bytes",
                "reread_bytes", "strategy_choice", "audit_ok"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            for record in report.files:
                row = record.to_dict()
                writer.writerow({c: row.get(c, "") for c in cols})
    else:
        with open(path, "w", encoding="utf-8") as f:
            for record in report.files:
                f.write(json.dumps({"type": "file", **record.to_dict()}) + "\n")
            summary = {"type": "session", **report.summary_dict()}
            if report.fault_schedule:
                summary["fault_schedule"] = report.fault_schedule
            f.write(json.dumps(summary) + "\n")
    return path
