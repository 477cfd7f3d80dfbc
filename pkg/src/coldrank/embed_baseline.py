"""Popular-embedding baseline.

Candidates are ordered by cosine similarity between their metadata embedding
and the centroid of the embeddings of recently popular titles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from .catalog import Catalog, EvaluationCase, MovieRecord, Tier, render_metadata
from .metrics import RankedPrediction

logger = logging.getLogger(__name__)

MOCK_DIM = 256
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, movie_id: str | None = None):
        self.movie_id = movie_id
        super().__init__(message)


class EmbeddingBackend(Protocol):
    backend_id: str

    def embed(self, text: str) -> np.ndarray: ...


def _as_vector(v: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("embedding must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding has non-finite components")
    return arr


def centroid(vectors: Sequence[Sequence[float] | np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("centroid of an empty set")
    arrays = [_as_vector(v) for v in vectors]
    dims = {a.shape[0] for a in arrays}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")
    return np.mean(np.stack(arrays), axis=0)


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0:
        raise ValueError("zero-norm vector on the left side")
    if nb == 0:
        raise ValueError("zero-norm vector on the right side")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def mock_embed(text: str, dim: int = MOCK_DIM) -> np.ndarray:
    """L2-normalised hashed bag of lowercase alphanumeric tokens."""
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        vec[_bucket(token, dim)] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("cannot embed text without tokens")
    return vec / norm


class HashEmbeddingBackend:
    backend_id = "mock-hash"

    def __init__(self, dim: int = MOCK_DIM):
        self.dim = dim
        if dim != MOCK_DIM:
            self.backend_id = f"mock-hash-{dim}"

    def embed(self, text: str) -> np.ndarray:
        return mock_embed(text, self.dim)


class HttpEmbeddingBackend:
    """Client for an HTTP embeddings endpoint.

    Sends ``{"model": ..., "input": [text]}`` and accepts either a bare array of
    vectors or ``{"data": [{"embedding": [...]}, ...]}``.
    """

    def __init__(self, url: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0, client: httpx.Client | None = None):
        self.url = url
        self.model = model
        self.backend_id = f"http-embed:{model}"
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls) -> HttpEmbeddingBackend:
        url = os.environ.get("COLDRANK_EMBED_ENDPOINT")
        model = os.environ.get("COLDRANK_EMBED_MODEL")
        if not url or not model:
            raise EmbeddingError("COLDRANK_EMBED_ENDPOINT and COLDRANK_EMBED_MODEL must be set")
        return cls(url, model, os.environ.get("COLDRANK_EMBED_API_KEY"))

    def embed(self, text: str) -> np.ndarray:
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": [text]},
                                     headers=self._headers)
            resp.raise_for_status()
            payload = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if isinstance(payload, dict):
            payload = [row["embedding"] for row in payload.get("data", [])]
        if not payload:
            raise EmbeddingError("embedding response held no vectors")
        return _as_vector(payload[0])


class CachedEmbeddingBackend:
    """Disk cache in front of another embedding backend; one JSON file per text."""

    def __init__(self, inner: EmbeddingBackend, cache_dir: Path | str):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.cache_dir = Path(cache_dir)

    def _path(self, text: str) -> Path:
        key = hashlib.sha256(json.dumps([self.backend_id, text]).encode("utf-8")).hexdigest()
        return self.cache_dir / f"{key}.json"

    def embed(self, text: str) -> np.ndarray:
        path = self._path(text)
        try:
            return _as_vector(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            pass
        except (OSError, ValueError) as exc:
            logger.warning("embedding cache read failed (%s); recomputing", exc)
        vec = self.inner.embed(text)
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump([float(x) for x in vec], fh)
            os.replace(tmp, path)
        except OSError as exc:
            logger.warning("embedding cache write failed (%s)", exc)
        return vec


def _embed_movie(backend: EmbeddingBackend, movie: MovieRecord, tier: Tier) -> np.ndarray:
    text = render_metadata(movie, tier)
    try:
        return _as_vector(backend.embed(text))
    except Exception as exc:
        raise EmbeddingError(f"movie {movie.movie_id}: {exc}", movie.movie_id) from exc


def pe_rank(
    case: EvaluationCase,
    history: Sequence[MovieRecord],
    backend: EmbeddingBackend,
    tier: Tier | str,
    movies: Catalog,
    max_concurrency: int = 1,
) -> RankedPrediction:
    """Order candidates by similarity to the centroid of popular history titles.

    ``history`` must already be sorted by popularity; only the first
    ``case.window_cfg.centroid_top_n`` entries are used.
    """
    tier = Tier(tier)
    history = list(history)[: case.window_cfg.centroid_top_n]
    if not history:
        raise ValueError(f"case {case.case_id}: empty popularity history")
    # Canonical order keeps the reduction independent of completion order.
    hist_sorted = sorted(history, key=lambda m: m.movie_id)
    cand_sorted = sorted(case.candidates)
    work = hist_sorted + [movies[mid] for mid in cand_sorted]
    if max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            vectors = list(pool.map(lambda m: _embed_movie(backend, m, tier), work))
    else:
        vectors = [_embed_movie(backend, m, tier) for m in work]
    center = centroid(vectors[: len(hist_sorted)])
    scores = {
        mid: cosine_similarity(vec, center)
        for mid, vec in zip(cand_sorted, vectors[len(hist_sorted):])
    }
    ordering = tuple(sorted(cand_sorted, key=lambda mid: (-scores[mid], mid)))
    return RankedPrediction(
        case_id=case.case_id,
        ordering=ordering,
        scores=scores,
        strategy="pe",
        provenance={
            "backend_id": backend.backend_id,
            "model_id": backend.backend_id,
            "tier": tier.value,
            "history_size": len(history),
        },
    )
