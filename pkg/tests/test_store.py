import numpy as np
import pytest

from latentcd.errors import DuplicateRecordError, VersionError
from latentcd.model import LatentCode
from latentcd.store import HEADER_SIZE, LatentRecord, LatentStore


def record(series="s", a=0, b=0, t=0.0, n=128, seed=None):
    rng = np.random.default_rng(0 if seed is None else seed)
    code = LatentCode(rng.standard_normal(n).astype(np.float32),
                      rng.standard_normal(n).astype(np.float32))
    return LatentRecord(series=series, a=a, b=b, timestamp=t, code=code)


class TestRoundTrip:
    def test_codes_survive_reopen_bit_exact(self, tmp_path):
        path = tmp_path / "codes.rvls"
        rec = record(t=1.0, seed=42)
        with LatentStore(path) as store:
            store.put(rec)
        with LatentStore(path) as store:
            (code,) = store.get_history("s", 0, 0, k=4)
            np.testing.assert_array_equal(code.mu, rec.code.mu)
            np.testing.assert_array_equal(code.log_var, rec.code.log_var)
            assert code.mu.dtype == np.float32

    def test_multiple_locations_independent(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls") as store:
            store.put(record(a=0, b=0, t=1.0, seed=1))
            store.put(record(a=3, b=7, t=1.0, seed=2))
            assert len(store.get_history("s", 0, 0, k=4)) == 1
            assert len(store.get_history("s", 3, 7, k=4)) == 1
            assert store.get_history("s", 9, 9, k=4) == []

    def test_unicode_series_id(self, tmp_path):
        path = tmp_path / "s.rvls"
        with LatentStore(path) as store:
            store.put(record(series="série-αβ", t=1.0))
        with LatentStore(path) as store:
            assert len(store.get_history("série-αβ", 0, 0, k=1)) == 1


class TestRingEviction:
    def test_keeps_k_max_most_recent(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls", k_max=4) as store:
            for t in range(6):
                store.put(record(t=float(t), n=2, seed=t))
            hist = store.get_history("s", 0, 0, k=10)
            assert len(hist) == 4  # timestamps 2..5 survive

    def test_history_newest_first(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls") as store:
            for t in (3.0, 1.0, 2.0):  # out-of-order puts allowed
                store.put(LatentRecord("s", 0, 0, t,
                                       LatentCode(np.full(1, t, np.float32),
                                                  np.zeros(1, np.float32))))
            hist = store.get_history("s", 0, 0, k=3)
            assert [float(c.mu[0]) for c in hist] == [3.0, 2.0, 1.0]

    def test_before_filter_strict(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls") as store:
            for t in (1.0, 2.0, 3.0):
                store.put(LatentRecord("s", 0, 0, t,
                                       LatentCode(np.full(1, t, np.float32),
                                                  np.zeros(1, np.float32))))
            hist = store.get_history("s", 0, 0, k=3, before=2.0)
            assert [float(c.mu[0]) for c in hist] == [1.0]

    def test_eviction_survives_reopen(self, tmp_path):
        path = tmp_path / "s.rvls"
        with LatentStore(path, k_max=2) as store:
            for t in range(5):
                store.put(record(t=float(t), n=2, seed=t))
        with LatentStore(path, k_max=2) as store:
            assert len(store.get_history("s", 0, 0, k=10)) == 2

    def test_duplicate_rejected(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls") as store:
            store.put(record(t=5.0))
            with pytest.raises(DuplicateRecordError):
                store.put(record(t=5.0))

    def test_duplicate_rejected_after_reopen(self, tmp_path):
        path = tmp_path / "s.rvls"
        with LatentStore(path) as store:
            store.put(record(t=5.0))
        with LatentStore(path) as store:
            with pytest.raises(DuplicateRecordError):
                store.put(record(t=5.0))


class TestRecovery:
    def _store_with_two_records(self, path):
        with LatentStore(path) as store:
            store.put(record(t=1.0, n=4, seed=1))
            store.put(record(t=2.0, n=4, seed=2))
        return path.stat().st_size

    def test_torn_trailing_write_dropped(self, tmp_path):
        path = tmp_path / "s.rvls"
        self._store_with_two_records(path)
        data = path.read_bytes()
        path.write_bytes(data[:-9])  # crash mid-way through record two
        with LatentStore(path) as store:
            hist = store.get_history("s", 0, 0, k=4)
            assert len(hist) == 1
        # the bad tail was truncated away
        record_size = (len(data) - HEADER_SIZE) // 2
        assert path.stat().st_size == HEADER_SIZE + record_size

    def test_corrupt_tail_dropped(self, tmp_path):
        path = tmp_path / "s.rvls"
        size = self._store_with_two_records(path)
        data = bytearray(path.read_bytes())
        data[-6] ^= 0xFF  # flip a bit inside record two's payload
        path.write_bytes(bytes(data))
        with LatentStore(path) as store:
            assert len(store.get_history("s", 0, 0, k=4)) == 1
        assert path.stat().st_size < size

    def test_append_after_recovery(self, tmp_path):
        path = tmp_path / "s.rvls"
        self._store_with_two_records(path)
        path.write_bytes(path.read_bytes()[:-3])
        with LatentStore(path) as store:
            store.put(record(t=3.0, n=4, seed=3))
        with LatentStore(path) as store:
            hist = store.get_history("s", 0, 0, k=4)
            assert len(hist) == 2  # t=1.0 and t=3.0

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "s.rvls"
        path.write_bytes(b"XXXX\x01\x00\x00\x00")
        with pytest.raises(VersionError):
            LatentStore(path)

    def test_future_version(self, tmp_path):
        path = tmp_path / "s.rvls"
        path.write_bytes(b"RVLS\x63\x00\x00\x00")
        with pytest.raises(VersionError):
            LatentStore(path)


class TestStats:
    def test_counts_live_records(self, tmp_path):
        with LatentStore(tmp_path / "s.rvls", k_max=2) as store:
            for t in range(3):
                store.put(record(series="x", t=float(t), n=2, seed=t))
            store.put(record(series="y", t=0.0, n=2))
            s = store.stats()
            assert s["record_count"] == 3  # one x record evicted from the ring
            assert s["per_series"] == {"x": 2, "y": 1}

    def test_full_scene_history_size(self, tmp_path):
        # 255 tiles x 4 passes of float32 (mu, log_var) pairs is ~1 MB:
        # 1020 x (2 x 128 x 4) B of codes plus ~25 B of framing per record.
        with LatentStore(tmp_path / "s.rvls") as store:
            for t in range(4):
                for idx in range(255):
                    a, b = divmod(idx, 17)
                    store.put(record(a=a, b=b, t=float(t)))
            payload = 255 * 4 * 2 * 128 * 4
            got = store.stats()["bytes"]
            assert payload < got < payload * 1.05
