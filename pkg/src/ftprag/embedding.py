"""Embedding providers: a deterministic hashed bag-of-words embedder and an HTTP client.

Every provider returns L2-normalised ``float32`` vectors so inner products
are cosine similarities. Empty text (or text without any word characters)
maps to the zero vector.
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from ._io import atomic_write

logger = logging.getLogger(__name__)

DEFAULT_REMOTE_MODEL = "sentence-transformers/all-MiniLM-L12-v2"

_TOKEN = re.compile(r"[^\W_]+")


class EmbeddingError(Exception):
    pass


class EmbeddingTransportError(EmbeddingError):
    def __init__(self, provider: str, status: int | None, detail: str = ""):
        self.provider = provider
        self.status = status
        msg = f"embedding provider {provider!r} failed"
        if status is not None:
            msg += f" with HTTP {status}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class EmbeddingContractError(EmbeddingError):
    pass


@dataclass(frozen=True)
class ProviderId:
    name: str
    dim: int


class EmbeddingProvider(Protocol):
    provider_id: ProviderId

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.sqrt(np.dot(vec.astype(np.float64), vec.astype(np.float64))))
    if norm == 0.0:
        return np.zeros(vec.shape[0], dtype=np.float32)
    return (vec.astype(np.float64) / norm).astype(np.float32)


def token_bucket(token: str, dim: int, seed: int) -> int:
    """Seeded, process-independent hash of ``token`` into ``[0, dim)``."""
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little") % dim


def local_embed(text: str, dim: int = 384, seed: int = 0) -> np.ndarray:
    """Hashed bag-of-words: lowercase, split on non-alphanumerics, count buckets, normalise."""
    if dim < 8:
        raise ValueError("dim must be >= 8")
    vec = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN.findall(text.lower()):
        vec[token_bucket(token, dim, seed)] += 1.0
    return _normalize(vec)


class LocalEmbedder:
    """Stateless local provider backed by :func:`local_embed`."""

    def __init__(self, dim: int = 384, seed: int = 0, name: str | None = None):
        self.dim = dim
        self.seed = seed
        self.provider_id = ProviderId(name or f"local-d{dim}-s{seed}", dim)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = local_embed(text, self.dim, self.seed)
        return out


class HttpEmbedder:
    """Client for an embeddings endpoint speaking the common ``/embeddings`` JSON shape.

    Request ``{"model": str, "input": [str]}``; response
    ``{"data": [{"index": int, "embedding": [float]}]}``.
    """

    def __init__(
        self,
        base_url: str,
        dim: int,
        model: str = DEFAULT_REMOTE_MODEL,
        api_key: str | None = None,
        batch_size: int = 64,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        name: str | None = None,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.batch_size = batch_size
        self.provider_id = ProviderId(name or model, dim)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, texts: Sequence[str]) -> np.ndarray:
        name = self.provider_id.name
        with self._slots:
            try:
                resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)})
            except httpx.HTTPError as exc:
                raise EmbeddingTransportError(name, None, str(exc)) from exc
        if not 200 <= resp.status_code < 300:
            raise EmbeddingTransportError(name, resp.status_code, resp.text[:200])
        try:
            data = resp.json()["data"]
        except (ValueError, KeyError) as exc:
            raise EmbeddingContractError(f"{name}: response lacks 'data'") from exc
        if len(data) != len(texts):
            raise EmbeddingContractError(f"{name}: expected {len(texts)} embeddings, got {len(data)}")
        out = np.zeros((len(texts), self.provider_id.dim), dtype=np.float32)
        for item in sorted(data, key=lambda d: d["index"]):
            vec = np.asarray(item["embedding"], dtype=np.float64)
            if vec.shape != (self.provider_id.dim,):
                raise EmbeddingContractError(
                    f"{name}: embedding dim {vec.shape[-1]} != declared {self.provider_id.dim}"
                )
            out[item["index"]] = _normalize(vec)
        return out

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.provider_id.dim), dtype=np.float32)
        # empty strings never go over the wire
        todo = [i for i, t in enumerate(texts) if t.strip()]
        for lo in range(0, len(todo), self.batch_size):
            idx = todo[lo : lo + self.batch_size]
            out[idx] = self._post([texts[i] for i in idx])
        return out


_CACHE_MAGIC = b"FTPEMBC1"


class EmbeddingCache:
    """Vectors keyed by ``(provider name, sha256 of text)``, persisted as a flat binary file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._store: dict[tuple[str, bytes], np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    @staticmethod
    def key(provider: str, text: str) -> tuple[str, bytes]:
        return provider, hashlib.sha256(text.encode("utf-8")).digest()

    def get(self, provider: str, text: str) -> np.ndarray | None:
        return self._store.get(self.key(provider, text))

    def put(self, provider: str, text: str, vec: np.ndarray) -> None:
        with self._lock:
            self._store[self.key(provider, text)] = np.asarray(vec, dtype=np.float32)

    def __len__(self) -> int:
        return len(self._store)

    def save(self) -> None:
        if self.path is None:
            raise ValueError("cache has no path")
        parts = [_CACHE_MAGIC, struct.pack("<Q", len(self._store))]
        for (provider, digest), vec in sorted(self._store.items()):
            name = provider.encode("utf-8")
            parts.append(struct.pack("<I", len(name)) + name + digest)
            parts.append(struct.pack("<I", vec.shape[0]) + vec.astype("<f4").tobytes())
        atomic_write(self.path, b"".join(parts))

    def _load(self) -> None:
        buf = self.path.read_bytes()
        if buf[:8] != _CACHE_MAGIC:
            raise EmbeddingError(f"{self.path}: not an embedding cache")
        (count,) = struct.unpack_from("<Q", buf, 8)
        pos = 16
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            digest = buf[pos + n : pos + n + 32]
            pos += n + 32
            (dim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos += 4 * dim
            self._store[(name, digest)] = vec


class CachedEmbedder:
    """Wraps a provider and memoises per-text vectors in an :class:`EmbeddingCache`."""

    def __init__(self, inner: EmbeddingProvider, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.provider_id = inner.provider_id

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        name = self.provider_id.name
        out = np.zeros((len(texts), self.provider_id.dim), dtype=np.float32)
        missing = []
        for i, t in enumerate(texts):
            hit = self.cache.get(name, t)
            if hit is None:
                missing.append(i)
            else:
                out[i] = hit
        if missing:
            fresh = self.inner.embed_batch([texts[i] for i in missing])
            for i, vec in zip(missing, fresh):
                out[i] = vec
                self.cache.put(name, texts[i], vec)
        return out


def embed_batch(texts: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    """Embed ``texts`` with ``provider`` and check the result against its declared shape."""
    vecs = provider.embed_batch(texts)
    expected = (len(texts), provider.provider_id.dim)
    if vecs.shape != expected:
        raise EmbeddingContractError(
            f"{provider.provider_id.name}: got shape {vecs.shape}, expected {expected}"
        )
    return vecs
