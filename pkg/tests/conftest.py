import shutil
from pathlib import Path

import pytest

from fiver import bench, endpoint
from fiver.model import HashAlg, TransferPlan


@pytest.fixture
def workdir(tmp_path):
    return tmp_path


def make_dataset(root: Path, spec: str, seed: int = 0, order: str = "as-given"):
    src = root / "src"
    entries = bench.generate_dataset(spec, order, seed, src)
    return src, entries


def loopback_transfer(
    src: Path,
    files,
    plan: TransferPlan,
    options: endpoint.TransferOptions | None = None,
    dst: Path | None = None,
    checksum_rate: int = 0,
):
    """Run one transfer against an in-process receiver; returns (report, dst)."""
    dst = dst or src.parent / "dst"
    if dst.exists():
        shutil.rmtree(dst)
    with endpoint.receiver_context(
        dst, checksum_rate=checksum_rate, queue_capacity=plan.queue_capacity
    ) as address:
        report = endpoint.transfer(src, files, address, plan, options)
    return report, dst


def metas(entries, hash_alg=HashAlg.MD5, chunk_size=0):
    return bench.to_file_metas(entries, hash_alg, chunk_size)
