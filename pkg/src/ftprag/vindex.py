"""Exact inner-product index over chunk embeddings.

File layout (little endian)::

    magic "FTPVIDX\\0" | u32 version | u32 dim | u64 count
    u32 name_len | name bytes (utf-8)
    count x (u64 chunk_id, dim x f32)
    u32 crc32 of everything above
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .embedding import ProviderId

MAGIC = b"FTPVIDX\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")


class VectorIndexError(Exception):
    pass


class DimensionMismatchError(VectorIndexError):
    pass


class DuplicateChunkError(VectorIndexError):
    pass


class IndexFormatError(VectorIndexError):
    pass


class ChecksumError(IndexFormatError):
    pass


@dataclass(frozen=True)
class ScoredHit:
    chunk_id: int
    score: float


class VectorIndex:
    """Flat index; :meth:`search` scans every entry."""

    def __init__(self, provider: ProviderId, capacity: int = 1024):
        self.provider = provider
        self.dim = provider.dim
        self._ids = np.zeros(capacity, dtype=np.uint64)
        self._vecs = np.zeros((capacity, self.dim), dtype=np.float32)
        self._size = 0
        self._id_set: set[int] = set()
        self._f64: np.ndarray | None = None
        self._norm: float | None = None

    def __len__(self) -> int:
        return self._size

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._size]

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: self._size]

    def _grow(self, need: int) -> None:
        cap = self._ids.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap, 16)
        ids = np.zeros(new_cap, dtype=np.uint64)
        vecs = np.zeros((new_cap, self.dim), dtype=np.float32)
        ids[: self._size] = self.ids
        vecs[: self._size] = self.vectors
        self._ids, self._vecs = ids, vecs

    def add(self, chunk_id: int, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DimensionMismatchError(f"vector shape {vec.shape} != ({self.dim},)")
        if chunk_id in self._id_set:
            raise DuplicateChunkError(f"chunk_id {chunk_id} already indexed")
        self._grow(self._size + 1)
        self._ids[self._size] = chunk_id
        self._vecs[self._size] = vec
        self._size += 1
        self._id_set.add(int(chunk_id))
        self._f64 = None
        self._norm = None

    def add_batch(self, chunk_ids, vecs: np.ndarray) -> None:
        for cid, v in zip(chunk_ids, vecs):
            self.add(int(cid), v)

    def _query(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.dim,):
            raise DimensionMismatchError(f"query shape {q.shape} != ({self.dim},)")
        return q.astype(np.float64)

    def _matrix(self) -> np.ndarray:
        if self._f64 is None:
            self._f64 = self.vectors.astype(np.float64)
        return self._f64

    def _max_norm(self) -> float:
        if self._norm is None:
            m = self._matrix()
            self._norm = float(np.sqrt((m * m).sum(axis=1)).max()) if len(m) else 0.0
        return self._norm

    def scores(self, query: np.ndarray) -> np.ndarray:
        """Approximate inner products with every entry (float64 BLAS)."""
        return self._matrix() @ self._query(query)

    def exact_score(self, row: int, query: np.ndarray) -> float:
        """Correctly rounded inner product of one entry with ``query``."""
        # f32 x f32 products are exact in f64; fsum rounds the sum once
        return math.fsum(self._matrix()[row] * self._query(query))

    def search(self, query: np.ndarray, k: int) -> list[ScoredHit]:
        """Top ``min(k, size)`` entries by inner product, ties by ascending chunk id.

        A BLAS pass finds every entry that could reach the top k; those are
        re-scored with correctly rounded sums so that equal inner products
        compare equal regardless of summation order.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        n = self._size
        if n == 0:
            return []
        q = self._query(query)
        approx = self._matrix() @ q
        if k < n:
            kth = np.partition(approx, n - k)[n - k]
            # worst-case BLAS rounding error: dim * eps * |q| * max|row|
            scale = float(np.linalg.norm(q)) * self._max_norm()
            slack = 2 * self.dim * np.finfo(np.float64).eps * scale
            cand = np.flatnonzero(approx >= kth - slack)
        else:
            cand = np.arange(n)
        rows = self._matrix()[cand] * q
        exact = np.fromiter((math.fsum(r) for r in rows), dtype=np.float64, count=len(cand))
        ids = self.ids[cand]
        order = np.lexsort((ids, -exact))[:k]
        return [ScoredHit(int(ids[i]), float(exact[i])) for i in order]

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        name = self.provider.name.encode("utf-8")
        rec = np.zeros(self._size, dtype=[("id", "<u8"), ("v", "<f4", (self.dim,))])
        rec["id"] = self.ids
        rec["v"] = self.vectors
        body = (
            _HEADER.pack(MAGIC, VERSION, self.dim, self._size)
            + struct.pack("<I", len(name))
            + name
            + rec.tobytes()
        )
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, buf: bytes, expected_dim: int | None = None) -> "VectorIndex":
        if len(buf) < _HEADER.size + 8:
            raise ChecksumError("index file truncated")
        body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
        if zlib.crc32(body) != crc:
            raise ChecksumError("index checksum mismatch")
        magic, version, dim, count = _HEADER.unpack_from(body, 0)
        if magic != MAGIC:
            raise IndexFormatError("not an index file")
        if version != VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        if expected_dim is not None and dim != expected_dim:
            raise DimensionMismatchError(f"index dim {dim} != expected {expected_dim}")
        pos = _HEADER.size
        (n,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        dt = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
        if len(body) - pos != count * dt.itemsize:
            raise IndexFormatError("record section length disagrees with header")
        rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
        index = cls(ProviderId(name, dim), capacity=max(count, 1))
        index._ids[:count] = rec["id"]
        index._vecs[:count] = rec["v"]
        index._size = count
        index._id_set = {int(i) for i in rec["id"]}
        if len(index._id_set) != count:
            raise IndexFormatError("duplicate chunk ids in index file")
        return index

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, expected_dim: int | None = None) -> "VectorIndex":
        return cls.from_bytes(Path(path).read_bytes(), expected_dim)


def build_index(chunk_ids, vectors: np.ndarray, provider: ProviderId) -> VectorIndex:
    index = VectorIndex(provider, capacity=max(len(vectors), 1))
    index.add_batch(chunk_ids, vectors)
    return index
