import hashlib
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiver.hashio import DigestState, DigestStateError, QueueClosedError, SharedQueue
from fiver.model import HashAlg

# Reference vectors, frozen from hashlib one-shot digests of the same inputs
# (RFC 1321 / FIPS 180 published values).
EMPTY_MD5 = "d41d8cd98f00b204e9800998ecf8427e"
EMPTY_SHA1 = "da39a3ee5e6b4b0d3255bfef95601890afd80709"
ABC_SHA256 = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class TestDigestState:
    def test_empty_md5(self):
        assert DigestState(HashAlg.MD5).finalize().hex == EMPTY_MD5

    def test_empty_sha1(self):
        assert DigestState(HashAlg.SHA1).finalize().hex == EMPTY_SHA1

    def test_abc_sha256(self):
        s = DigestState(HashAlg.SHA256)
        s.update(b"abc")
        assert s.finalize().hex == ABC_SHA256

    def test_split_equals_whole(self):
        a = DigestState(HashAlg.MD5)
        a.update(b"ab")
        a.update(b"c")
        b = DigestState(HashAlg.MD5)
        b.update(b"abc")
        assert a.finalize().hex == b.finalize().hex

    def test_many_small_updates_equal_one_large(self):
        s = DigestState(HashAlg.SHA256)
        for _ in range(1000):
            s.update(b"\x00" * 1024)
        oracle = hashlib.sha256(b"\x00" * (1000 * 1024)).hexdigest()
        assert s.finalize().hex == oracle

    def test_empty_update_is_noop(self):
        s = DigestState(HashAlg.MD5)
        s.update(b"xyz")
        s.update(b"")
        assert s.bytes_ingested == 3
        assert s.finalize().hex == hashlib.md5(b"xyz").hexdigest()

    def test_bytes_ingested_tracks_updates(self):
        s = DigestState(HashAlg.SHA1)
        s.update(b"12345")
        s.update(b"678")
        assert s.bytes_ingested == 8

    def test_update_after_finalize(self):
        s = DigestState(HashAlg.MD5)
        s.finalize()
        with pytest.raises(DigestStateError):
            s.update(b"x")

    def test_double_finalize(self):
        s = DigestState(HashAlg.MD5)
        s.finalize()
        with pytest.raises(DigestStateError):
            s.finalize()

    def test_unsupported_alg(self):
        with pytest.raises(ValueError):
            DigestState("crc32")

    def test_digest_sizes(self):
        assert len(DigestState(HashAlg.MD5).finalize().value) == 16
        assert len(DigestState(HashAlg.SHA1).finalize().value) == 20
        assert len(DigestState(HashAlg.SHA256).finalize().value) == 32

    @given(
        data=st.binary(max_size=4096),
        cuts=st.lists(st.integers(0, 4096), max_size=8),
        alg=st.sampled_from(list(HashAlg)),
    )
    @settings(max_examples=100)
    def test_any_split_matches_one_shot_oracle(self, data, cuts, alg):
        points = sorted({min(c, len(data)) for c in cuts})
        state = DigestState(alg)
        prev = 0
        for p in points + [len(data)]:
            state.update(data[prev:p])
            prev = p
        assert state.finalize().hex == hashlib.new(alg.value, data).hexdigest()


class TestSharedQueue:
    def test_fifo_order(self):
        q = SharedQueue(8)
        bufs = [bytes([i]) * (i + 1) for i in range(8)]
        for b in bufs:
            q.push(b)
        assert [q.pop() for _ in range(8)] == bufs

    def test_capacity_blocks_third_push(self):
        q = SharedQueue(2)
        q.push(b"a")
        q.push(b"b")
        unblocked = threading.Event()

        def producer():
            q.push(b"c")
            unblocked.set()

        t = threading.Thread(target=producer, daemon=True)
        t.start()
        time.sleep(0.05)
        assert not unblocked.is_set()  # still blocked at capacity
        assert q.pop() == b"a"
        assert unblocked.wait(timeout=2)
        t.join()

    def test_push_after_close(self):
        q = SharedQueue(2)
        q.close()
        with pytest.raises(QueueClosedError):
            q.push(b"x")

    def test_pop_on_closed_empty_queue(self):
        q = SharedQueue(2)
        q.close()
        assert q.pop() is None

    def test_drain_then_end_of_stream(self):
        q = SharedQueue(4)
        for i in range(3):
            q.push(bytes([i]))
        q.close()
        assert [q.pop() for _ in range(3)] == [b"\x00", b"\x01", b"\x02"]
        assert q.pop() is None
        assert q.pop() is None  # idempotent EOS

    def test_blocked_pop_wakes_on_push(self):
        q = SharedQueue(2)
        got = []

        def consumer():
            got.append(q.pop())

        t = threading.Thread(target=consumer, daemon=True)
        t.start()
        time.sleep(0.05)
        q.push(b"hello")
        t.join(timeout=2)
        assert got == [b"hello"]

    def test_close_wakes_blocked_popper(self):
        q = SharedQueue(2)
        got = []
        t = threading.Thread(target=lambda: got.append(q.pop()), daemon=True)
        t.start()
        time.sleep(0.05)
        q.close()
        t.join(timeout=2)
        assert got == [None]

    def test_close_wakes_blocked_pusher(self):
        q = SharedQueue(1)
        q.push(b"a")
        errs = []

        def producer():
            try:
                q.push(b"b")
            except QueueClosedError as exc:
                errs.append(exc)

        t = threading.Thread(target=producer, daemon=True)
        t.start()
        time.sleep(0.05)
        q.close()
        t.join(timeout=2)
        assert len(errs) == 1

    def test_spsc_order_oracle_10k(self):
        # producer pushes 10^4 random-ish buffers; consumer sees the exact
        # byte sequence (count oracle: N pops then end of stream)
        import random

        rng = random.Random(1234)
        bufs = [rng.randbytes(rng.randrange(0, 64) + 1) for _ in range(10_000)]
        q = SharedQueue(16)
        out = []

        def consumer():
            while True:
                b = q.pop()
                if b is None:
                    return
                out.append(b)

        t = threading.Thread(target=consumer, daemon=True)
        t.start()
        for b in bufs:
            q.push(b)
        q.close()
        t.join(timeout=30)
        assert len(out) == len(bufs)
        assert b"".join(out) == b"".join(bufs)

    def test_producer_lead_bounded(self):
        q = SharedQueue(4)
        buffer_size = 128
        done = threading.Event()

        def consumer():
            while q.pop() is not None:
                pass
            done.set()

        t = threading.Thread(target=consumer, daemon=True)
        t.start()
        for i in range(2000):
            q.push(b"x" * buffer_size)
        q.close()
        assert done.wait(timeout=10)
        assert q.max_lead <= q.capacity * buffer_size
