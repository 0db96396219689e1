"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The throttled end-to-end criteria are marked slow (the whole suite runs in
roughly 6-8 minutes); run `pytest tests/test_acceptance.py -s` to watch the
per-criterion lines.

Known hardware caveat: criterion 7's timing-order clause expects MD5 digest
passes to be faster than SHA1, and SHA1 faster than SHA256. CPUs with SHA
extensions (sha_ni) accelerate SHA1/SHA256 past MD5, so that single assertion
fails honestly there; see the README's acceptance notes.
"""
import contextlib
import csv
import filecmp
import hashlib
import io
import random
import threading
import time

import pytest

from conftest import loopback_transfer, metas
from fiver import bench, endpoint, wire
from fiver.faults import FaultMode, FaultSpec, schedule_faults
from fiver.hashio import DigestState, SharedQueue
from fiver.model import (
    GIB,
    MIB,
    HashAlg,
    Strategy,
    TransferPlan,
    VerifyOutcome,
    overhead,
)
from fiver.strategies import checksum_only_pass, select_hybrid


@contextlib.contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {number}: FAIL — {title}")
        raise
    print(f"[acceptance] criterion {number}: PASS — {title}")


@pytest.fixture(scope="session")
def big_file_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept-1g")
    entries = bench.generate_dataset("1x1G", "as-given", 101, root / "src")
    return root, entries


@pytest.fixture(scope="session")
def recovery_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept-recovery")
    entries = bench.generate_dataset("10x64M,5x256M", "as-given", 102, root / "src")
    return root, entries


@pytest.mark.slow
def test_criterion_1_concurrency_benefit(big_file_dataset):
    """1 GiB at net 100 MiB/s vs checksum 50 MiB/s: the concurrent strategy
    tracks the slower phase; sequential pays the sum of both."""
    root, entries = big_file_dataset
    src = root / "src"
    files = metas(entries)
    net, chk = 100 * MIB, 50 * MIB
    total = sum(e.size for e in entries)
    throttle = bench.ThrottleConfig(net_rate=net, checksum_rate=chk)

    with criterion(1, "concurrency benefit (fiver ~ max phase, sequential ~ sum)"):
        fiver_report, _ = loopback_transfer(
            src, files, TransferPlan(Strategy.FIVER),
            endpoint.TransferOptions(throttle=throttle),
            dst=root / "dst-fiver", checksum_rate=chk,
        )
        assert fiver_report.all_verified
        slow_phase = total / chk
        assert 1.0 * slow_phase <= fiver_report.wall_clock <= 1.15 * slow_phase, (
            f"fiver wall {fiver_report.wall_clock:.2f}s outside "
            f"[{slow_phase:.2f}, {1.15 * slow_phase:.2f}]s"
        )

        seq_report, _ = loopback_transfer(
            src, files, TransferPlan(Strategy.SEQUENTIAL),
            endpoint.TransferOptions(throttle=throttle),
            dst=root / "dst-seq", checksum_rate=chk,
        )
        assert seq_report.all_verified
        additive = total / net + total / chk
        assert 0.9 * additive <= seq_report.wall_clock <= 1.1 * additive, (
            f"sequential wall {seq_report.wall_clock:.2f}s outside "
            f"[{0.9 * additive:.2f}, {1.1 * additive:.2f}]s"
        )


def test_criterion_2_overhead_exactness(tmp_path):
    """The worked overhead example is exact to two decimals, both directly
    and recomputed from emitted report columns."""
    with criterion(2, "overhead(130,120,90) = 8.33% exactly"):
        assert round(overhead(130, 120, 90), 2) == 8.33
        row = {
            "dataset": "x", "strategy": "fiver", "hash": "md5",
            "net_rate": 0, "checksum_rate": 0, "faults": 0, "rep": 0,
            "t_total": 130.0, "t_transfer": 90.0, "t_checksum": 120.0,
            "overhead_pct": round(overhead(130.0, 120.0, 90.0), 2),
            "retransferred_bytes": 0, "shared_bytes": 0, "reread_bytes": 0,
            "outcome": "ok",
        }
        path = bench.emit_report([row], "csv", tmp_path / "r.csv")
        with open(path) as f:
            got = next(csv.DictReader(f))
        recomputed = round(
            overhead(float(got["t_total"]), float(got["t_checksum"]),
                     float(got["t_transfer"])),
            2,
        )
        assert recomputed == 8.33
        assert float(got["overhead_pct"]) == 8.33


@pytest.mark.slow
def test_criterion_3_overhead_ordering(tmp_path):
    """Sorted-interleave desk dataset under both throttle regimes: overhead
    ordering fiver <= block-ppl <= file-ppl, fiver <= 10%, averaged over 5
    repetitions via the benchmark harness.

    block_size 12M mirrors the original comparison at desk scale: it splits
    the 25M class into misaligned units (12+12+1) the way 256M blocks
    misalign on a 5M/250M mix. TIE_EPSILON covers measurement ties: the
    ordering chain permits equality, and two strategies whose true overheads
    coincide measure apart by a fraction of a point run to run.
    """
    TIE_EPSILON = 0.25  # percentage points
    regimes = {
        "net-faster": (80 * MIB, 40 * MIB),
        "checksum-faster": (40 * MIB, 80 * MIB),
    }
    lines = []
    for net, chk in regimes.values():
        for strategy in ("fiver", "block-ppl", "file-ppl"):
            lines.append(
                f"dataset=8x512K,8x25M order=sorted-interleave seed=1 "
                f"strategy={strategy} block_size=12M "
                f"net_rate={net} checksum_rate={chk} reps=5"
            )
    cells = bench.parse_matrix("\n".join(lines))
    rows = bench.run_experiment(cells, tmp_path / "work")

    with criterion(3, "overhead ordering fiver <= block-ppl <= file-ppl, fiver <= 10%"):
        for name, (net, chk) in regimes.items():
            means = {}
            for strategy in ("fiver", "block-ppl", "file-ppl"):
                group = [
                    r["overhead_pct"]
                    for r in rows
                    if r["strategy"] == strategy and r["net_rate"] == net
                ]
                assert len(group) == 5
                means[strategy] = sum(group) / len(group)
            assert (
                means["fiver"] <= means["block-ppl"] + TIE_EPSILON
                and means["block-ppl"] <= means["file-ppl"] + TIE_EPSILON
            ), f"{name}: overhead means {means}"
            assert means["fiver"] <= 10.0, f"{name}: fiver overhead {means['fiver']:.2f}%"
        assert all(r["outcome"] == "ok" for r in rows)


@pytest.mark.slow
def test_criterion_4_chunk_recovery(recovery_dataset):
    """15-file dataset, 16 MiB chunks, 8 in-flight faults: chunked recovery
    resends at most 8 chunks while file-level recovery resends whole files;
    both converge byte-exactly. Fault-free chunked runs within 2% of
    whole-file runs (rate-throttled, matching the fixed-rate comparison)."""
    root, entries = recovery_dataset
    src = root / "src"
    chunk = 16 * MIB
    chunked_files = metas(entries, chunk_size=chunk)
    plain_files = metas(entries)
    schedule = schedule_faults(8, plain_files, 1031, FaultMode.IN_FLIGHT)
    faulted_ids = {s.file_index for s in schedule}

    with criterion(4, "chunk-level recovery byte bounds + <=2% no-fault cost"):
        chunked_report, dst = loopback_transfer(
            src, chunked_files, TransferPlan(Strategy.FIVER_CHUNKED),
            endpoint.TransferOptions(fault_schedule=list(schedule)),
            dst=root / "dst-a",
        )
        assert chunked_report.all_verified
        assert chunked_report.total_retransferred_bytes <= 8 * chunk
        assert chunked_report.total_retransferred_bytes > 0
        for e in entries:
            assert filecmp.cmp(src / e.path, dst / e.path, shallow=False)

        file_report, dst = loopback_transfer(
            src, plain_files, TransferPlan(Strategy.FIVER),
            endpoint.TransferOptions(fault_schedule=list(schedule)),
            dst=root / "dst-b",
        )
        assert file_report.all_verified
        full_lengths = sum(entries[i].size for i in faulted_ids)
        assert file_report.total_retransferred_bytes >= full_lengths
        for e in entries:
            assert filecmp.cmp(src / e.path, dst / e.path, shallow=False)

        rate = 128 * MIB  # rate-dominated regime; stable on a 2-core host
        throttle = bench.ThrottleConfig(net_rate=rate, checksum_rate=rate)
        walls = {}
        for label, fs, strategy in (
            ("fiver", plain_files, Strategy.FIVER),
            ("chunked", chunked_files, Strategy.FIVER_CHUNKED),
        ):
            report, _ = loopback_transfer(
                src, fs, TransferPlan(strategy=strategy),
                endpoint.TransferOptions(throttle=throttle),
                dst=root / "dst-c", checksum_rate=rate,
            )
            assert report.all_verified
            assert report.total_retransferred_bytes == 0
            walls[label] = report.wall_clock
        ratio = walls["chunked"] / walls["fiver"]
        assert abs(ratio - 1.0) <= 0.02, (
            f"fault-free chunked {walls['chunked']:.2f}s vs fiver "
            f"{walls['fiver']:.2f}s (ratio {ratio:.4f})"
        )


def test_criterion_5_detection_matrix(tmp_path):
    """POST_WRITE: caught by sequential and by hybrid's large-file route,
    silently missed by pure fiver until --audit; IN_FLIGHT: caught by all
    five strategies, 100/100 randomized trials."""
    src = tmp_path / "src"
    entries = bench.generate_dataset("1x8M", "as-given", 105, src)
    size = entries[0].size
    threshold = 4 * MIB  # below the file's size: hybrid routes it sequential

    with criterion(5, "detection matrix (post-write reread-only; in-flight all, 100/100)"):
        post_fault = FaultSpec(FaultMode.POST_WRITE, 0, 3 * MIB + 11, 5)

        report, _ = loopback_transfer(
            src, metas(entries), TransferPlan(Strategy.SEQUENTIAL),
            endpoint.TransferOptions(fault_schedule=[post_fault]),
            dst=tmp_path / "d1",
        )
        assert report.files[0].verify_outcome is VerifyOutcome.RETRIED_THEN_VERIFIED

        report, _ = loopback_transfer(
            src, metas(entries),
            TransferPlan(Strategy.FIVER_HYBRID, hybrid_threshold=threshold),
            endpoint.TransferOptions(fault_schedule=[post_fault]),
            dst=tmp_path / "d2",
        )
        assert report.files[0].verify_outcome is VerifyOutcome.RETRIED_THEN_VERIFIED

        report, dst = loopback_transfer(
            src, metas(entries), TransferPlan(Strategy.FIVER),
            endpoint.TransferOptions(fault_schedule=[post_fault]),
            dst=tmp_path / "d3",
        )
        assert report.files[0].verify_outcome is VerifyOutcome.VERIFIED  # missed
        assert not filecmp.cmp(src / entries[0].path, dst / entries[0].path,
                               shallow=False)

        report, _ = loopback_transfer(
            src, metas(entries), TransferPlan(Strategy.FIVER),
            endpoint.TransferOptions(fault_schedule=[post_fault], audit=True),
            dst=tmp_path / "d4",
        )
        assert report.files[0].verify_outcome is VerifyOutcome.VERIFIED
        assert report.files[0].audit_ok is False  # only --audit exposes it

        # randomized in-flight trials: 20 per strategy, every one detected
        strategies = [
            Strategy.SEQUENTIAL, Strategy.FILE_PIPELINE, Strategy.BLOCK_PIPELINE,
            Strategy.FIVER, Strategy.FIVER_CHUNKED,
        ]
        trial_src = tmp_path / "trial-src"
        trial_entries = bench.generate_dataset("1x2M", "as-given", 106, trial_src)
        trial_size = trial_entries[0].size
        rng = random.Random(0xACCE55)
        detected = 0
        total_trials = 100
        for i in range(total_trials):
            strategy = strategies[i % len(strategies)]
            fault = FaultSpec(
                FaultMode.IN_FLIGHT, 0, rng.randrange(trial_size), rng.randrange(8)
            )
            files = (
                metas(trial_entries, chunk_size=MIB)
                if strategy is Strategy.FIVER_CHUNKED
                else metas(trial_entries)
            )
            report, dst = loopback_transfer(
                trial_src, files,
                TransferPlan(strategy=strategy, block_size=MIB),
                endpoint.TransferOptions(fault_schedule=[fault]),
                dst=tmp_path / "trial-dst",
            )
            record = report.files[0]
            if (
                record.verify_outcome is VerifyOutcome.RETRIED_THEN_VERIFIED
                and record.retransferred_bytes > 0
                and filecmp.cmp(trial_src / trial_entries[0].path,
                                dst / trial_entries[0].path, shallow=False)
            ):
                detected += 1
        assert detected == total_trials, f"{detected}/{total_trials} detected"


@pytest.mark.slow
def test_criterion_6_hybrid_routing(tmp_path):
    """Mixed dataset under throttling: hybrid lands strictly between fiver
    and sequential; per-file routing and counters match the selector."""
    src = tmp_path / "src"
    entries = bench.generate_dataset("8x8M,2x48M", "as-given", 107, src)
    threshold = 32 * MIB
    throttle = bench.ThrottleConfig(net_rate=80 * MIB, checksum_rate=40 * MIB)

    with criterion(6, "hybrid wall between fiver and sequential; routing + counters"):
        walls = {}
        hybrid_report = None
        for strategy in (Strategy.FIVER, Strategy.FIVER_HYBRID, Strategy.SEQUENTIAL):
            plan = TransferPlan(
                strategy=strategy,
                hybrid_threshold=threshold if strategy is Strategy.FIVER_HYBRID else 0,
            )
            report, _ = loopback_transfer(
                src, metas(entries), plan,
                endpoint.TransferOptions(throttle=throttle),
                checksum_rate=40 * MIB,
            )
            assert report.all_verified
            walls[strategy] = report.wall_clock
            if strategy is Strategy.FIVER_HYBRID:
                hybrid_report = report
        assert walls[Strategy.FIVER] < walls[Strategy.FIVER_HYBRID] < walls[Strategy.SEQUENTIAL], walls

        files = metas(entries)
        for record, meta in zip(hybrid_report.files, files):
            assert record.strategy_choice is select_hybrid(meta, threshold)
            if record.strategy_choice.value == "ConcurrentShared":
                assert record.reread_bytes == 0
                assert record.shared_bytes == record.size
            else:
                assert record.shared_bytes == 0
                assert record.reread_bytes == record.size


def test_criterion_7_hash_vectors_and_streaming(tmp_path):
    """Streaming digests match reference vectors and a one-shot oracle over
    100 random buffers with random split points."""
    with criterion(7, "hash engines: vectors + random-split streaming equivalence"):
        assert DigestState(HashAlg.MD5).finalize().hex == (
            "d41d8cd98f00b204e9800998ecf8427e"
        )
        assert DigestState(HashAlg.SHA1).finalize().hex == (
            "da39a3ee5e6b4b0d3255bfef95601890afd80709"
        )
        s = DigestState(HashAlg.SHA256)
        s.update(b"abc")
        assert s.finalize().hex == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )
        rng = random.Random(0x7A5B)
        for _ in range(100):
            data = rng.randbytes(rng.randrange(0, 1 << 16))
            alg = rng.choice(list(HashAlg))
            state = DigestState(alg)
            view = memoryview(data)
            offset = 0
            while offset < len(data):
                step = rng.randrange(1, 4096)
                state.update(bytes(view[offset:offset + step]))
                offset += step
            assert state.finalize().hex == hashlib.new(alg.value, data).hexdigest()


@pytest.mark.slow
def test_criterion_7_hash_timing_order(tmp_path):
    """Checksum-only time ordering MD5 < SHA1 < SHA256 on a 512 MiB file.

    This encodes the expectation that digest cost grows with hash complexity.
    On CPUs with SHA extensions (sha_ni) the SHA passes beat MD5 and this
    assertion fails; that is a hardware property, not a code defect.
    """
    src = tmp_path / "src"
    entries = bench.generate_dataset("1x512M", "as-given", 108, src)
    with criterion(7, "checksum-only timing order MD5 < SHA1 < SHA256"):
        times = {}
        for alg in (HashAlg.MD5, HashAlg.SHA1, HashAlg.SHA256):
            times[alg] = checksum_only_pass(src, metas(entries, hash_alg=alg), alg)
        assert times[HashAlg.MD5] < times[HashAlg.SHA1] < times[HashAlg.SHA256], (
            "checksum-only seconds: "
            + ", ".join(f"{a.value}={t:.3f}" for a, t in times.items())
        )


def test_criterion_8_protocol_round_trip_and_truncation():
    """10^4 random frames survive encode/decode byte-exactly; truncations
    always raise clean protocol errors, never hang."""
    with criterion(8, "protocol: 10^4 round-trips + clean truncation errors"):
        rng = random.Random(0xF7A3E)
        ftypes = sorted(wire.FRAME_NAMES)
        for _ in range(10_000):
            ftype = rng.choice(ftypes)
            payload = rng.randbytes(rng.randrange(0, 256))
            frame = wire.decode_frame(io.BytesIO(wire.encode_frame(ftype, payload)))
            assert frame.ftype == ftype and frame.payload == payload
        for _ in range(500):
            payload = rng.randbytes(rng.randrange(1, 128))
            raw = wire.encode_frame(rng.choice(ftypes), payload)
            cut = rng.randrange(0, len(raw))
            with pytest.raises(wire.ProtocolError):
                wire.decode_frame(io.BytesIO(raw[:cut]))


def test_criterion_9_queue_stress():
    """SPSC stress: 10^6 random-size buffers cross the queue byte-exactly in
    order, and the producer never leads by more than capacity x buffer_size."""
    with criterion(9, "queue: 10^6-buffer SPSC stress, byte-exact, bounded lead"):
        capacity, buffer_size = 8, 1024
        q = SharedQueue(capacity)
        rng = random.Random(0x5EED)
        n = 1_000_000
        consumer_digest = DigestState(HashAlg.SHA256)
        counts = {"buffers": 0, "bytes": 0}

        def consume():
            while True:
                buf = q.pop()
                if buf is None:
                    return
                consumer_digest.update(buf)
                counts["buffers"] += 1
                counts["bytes"] += len(buf)

        thread = threading.Thread(target=consume, daemon=True)
        thread.start()
        producer_digest = DigestState(HashAlg.SHA256)
        pushed_bytes = 0
        for _ in range(n):
            buf = rng.randbytes(rng.randrange(1, buffer_size + 1))
            producer_digest.update(buf)
            pushed_bytes += len(buf)
            q.push(buf)
        q.close()
        thread.join(timeout=300)
        assert not thread.is_alive()
        assert counts["buffers"] == n
        assert counts["bytes"] == pushed_bytes
        assert consumer_digest.finalize().hex == producer_digest.finalize().hex
        assert q.max_lead <= capacity * buffer_size
