"""Append-only latent history store.

Emulates the bounded on-board cache: per (series, row, col) location only
the K_max most recent latent codes stay addressable; older entries are
evicted from the index (the log itself is append-only). Each record is
length-prefixed and CRC-protected so that a crash mid-write loses at most
the trailing partial record.

File layout (little-endian): magic "RVLS", u32 version, then records of
  u32 payload_length | payload | u32 crc32(payload)
where payload =
  u16 series_len | series utf-8 | u16 a | u16 b | f64 timestamp |
  u16 n | f32 mu[n] | f32 log_var[n]
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import DuplicateRecordError, VersionError
from .model import LatentCode

MAGIC = b"RVLS"
VERSION = 1
HEADER_SIZE = 8
DEFAULT_K_MAX = 4  # four before-images retained per location


@dataclass(frozen=True)
class LatentRecord:
    series: str
    a: int
    b: int
    timestamp: float
    code: LatentCode

    @property
    def key(self):
        return (self.series, self.a, self.b)


def _encode_record(rec):
    series = rec.series.encode("utf-8")
    n = rec.code.n
    payload = struct.pack("<H", len(series)) + series
    payload += struct.pack("<HHdH", rec.a, rec.b, rec.timestamp, n)
    payload += np.ascontiguousarray(rec.code.mu, dtype="<f4").tobytes()
    payload += np.ascontiguousarray(rec.code.log_var, dtype="<f4").tobytes()
    return struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def _decode_payload(payload):
    slen, = struct.unpack_from("<H", payload, 0)
    series = payload[2:2 + slen].decode("utf-8")
    a, b, ts, n = struct.unpack_from("<HHdH", payload, 2 + slen)
    off = 2 + slen + 14
    mu = np.frombuffer(payload, dtype="<f4", count=n, offset=off).copy()
    lv = np.frombuffer(payload, dtype="<f4", count=n, offset=off + 4 * n).copy()
    return LatentRecord(series=series, a=a, b=b, timestamp=ts, code=LatentCode(mu, lv))


class LatentStore:
    """Single-writer append-only store with an in-memory index.

    Opening scans the log, drops a trailing torn record if present, and
    rebuilds the per-location rings.
    """

    def __init__(self, path, k_max=DEFAULT_K_MAX):
        self.path = str(path)
        self.k_max = k_max
        self._index = {}  # key -> OrderedDict timestamp -> LatentRecord (oldest first)
        if os.path.exists(self.path):
            self._recover()
        else:
            with open(self.path, "wb") as f:
                f.write(MAGIC + struct.pack("<I", VERSION))
        self._fh = open(self.path, "ab")

    def _recover(self):
        with open(self.path, "rb") as f:
            raw = f.read()
        if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
            raise VersionError(f"{self.path}: not an RVLS store")
        version, = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise VersionError(f"{self.path}: unsupported store version {version}")
        pos = HEADER_SIZE
        good_end = pos
        while pos + 4 <= len(raw):
            plen, = struct.unpack_from("<I", raw, pos)
            end = pos + 4 + plen + 4
            if end > len(raw):
                break  # torn trailing write
            payload = raw[pos + 4:pos + 4 + plen]
            crc, = struct.unpack_from("<I", raw, pos + 4 + plen)
            if zlib.crc32(payload) != crc:
                break  # corrupt tail; discard from here on
            self._admit(_decode_payload(payload))
            pos = end
            good_end = pos
        if good_end < len(raw):
            # truncate the torn/corrupt tail so future appends are clean
            with open(self.path, "r+b") as f:
                f.truncate(good_end)

    def _admit(self, rec):
        ring = self._index.setdefault(rec.key, OrderedDict())
        if rec.timestamp in ring:
            raise DuplicateRecordError(
                f"duplicate record for {rec.key} at timestamp {rec.timestamp}")
        ring[rec.timestamp] = rec
        # keep rings ordered by timestamp; out-of-order puts are allowed
        if next(reversed(ring)) != rec.timestamp:
            self._index[rec.key] = OrderedDict(sorted(ring.items()))
            ring = self._index[rec.key]
        while len(ring) > self.k_max:
            ring.popitem(last=False)  # evict oldest

    def put(self, rec):
        """Durably append one record; evicts the oldest when the ring is full."""
        ring = self._index.get(rec.key)
        if ring is not None and rec.timestamp in ring:
            raise DuplicateRecordError(
                f"duplicate record for {rec.key} at timestamp {rec.timestamp}")
        data = _encode_record(rec)
        self._fh.write(data)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._admit(rec)

    def get_history(self, series, a, b, k, before=None):
        """Up to k most recent codes for a location, newest first.

        `before` (epoch seconds) restricts to records strictly older than
        the query timestamp.
        """
        ring = self._index.get((series, a, b))
        if not ring:
            return []
        recs = [r for ts, r in ring.items() if before is None or ts < before]
        recs.sort(key=lambda r: r.timestamp, reverse=True)
        return [r.code for r in recs[:k]]

    def stats(self):
        per_series = {}
        live = 0
        for (series, _, _), ring in self._index.items():
            per_series[series] = per_series.get(series, 0) + len(ring)
            live += len(ring)
        file_bytes = os.path.getsize(self.path) - HEADER_SIZE
        return {"record_count": live, "bytes": file_bytes, "per_series": per_series}

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
