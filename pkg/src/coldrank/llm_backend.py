"""Chat-completion backends.

``HttpChatBackend`` speaks the common chat-completions wire protocol. The
oracle backends are offline stand-ins that know the hidden ground truth
through their constructor, never through the prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import httpx

if TYPE_CHECKING:
    from .catalog import EvaluationCase
    from .llm_ranker import PromptSpec

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Transport failure that may succeed on retry."""


class FatalBackendError(RuntimeError):
    """Configuration or authorisation failure; retrying will not help."""


@dataclass(frozen=True)
class Completion:
    raw_text: str
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    latency_ms: float = 0.0


class ChatBackend(Protocol):
    backend_id: str
    model_id: str

    def complete(self, spec: PromptSpec) -> Completion: ...


def _rough_usage(spec: PromptSpec, text: str) -> dict[str, int]:
    return {
        "prompt_tokens": len(spec.system_text.split()) + len(spec.user_text.split()),
        "completion_tokens": len(text.split()),
    }


# --- remote ---------------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout_s: float = 120.0
    max_attempts: int = 5
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    max_concurrency: int = 4

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else f"{base}/chat/completions"

    @classmethod
    def from_env(cls, model: str | None = None, **overrides: Any) -> EndpointConfig:
        base = os.environ.get("COLDRANK_ENDPOINT")
        model = model or os.environ.get("COLDRANK_MODEL")
        if not base:
            raise FatalBackendError("COLDRANK_ENDPOINT is not set")
        if not model:
            raise FatalBackendError("no model id: pass --model or set COLDRANK_MODEL")
        return cls(base_url=base, model=model, api_key=os.environ.get("COLDRANK_API_KEY"), **overrides)


def _retryable_status(code: int) -> bool:
    return code >= 500 or code == 429


def http_complete(
    spec: PromptSpec,
    cfg: EndpointConfig,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """POST one chat-completion request and return the assistant text verbatim.

    5xx, 429 and timeouts are retried with exponential backoff up to
    ``cfg.max_attempts``; any other 4xx raises ``FatalBackendError`` at once.
    """
    body: dict[str, Any] = {
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": spec.system_text},
            {"role": "user", "content": spec.user_text},
        ],
        "temperature": spec.decoding.temperature,
        "max_tokens": spec.decoding.max_tokens,
    }
    if spec.decoding.seed is not None:
        body["seed"] = spec.decoding.seed
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"

    owns_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout_s)
    last_error = "no attempt made"
    try:
        for attempt in range(cfg.max_attempts):
            if attempt:
                sleep(cfg.backoff_base_s * cfg.backoff_factor ** (attempt - 1))
            try:
                resp = client.post(cfg.url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.info("attempt %d: transport error %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 400:
                if _retryable_status(resp.status_code):
                    last_error = f"HTTP {resp.status_code}"
                    logger.info("attempt %d: %s", attempt + 1, last_error)
                    continue
                raise FatalBackendError(f"HTTP {resp.status_code} from {cfg.url}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected completion payload: {exc}") from exc
    finally:
        if owns_client:
            client.close()
    raise BackendError(f"gave up after {cfg.max_attempts} attempts ({last_error})")


class HttpChatBackend:
    def __init__(self, cfg: EndpointConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] | None = None):
        self.cfg = cfg
        self.backend_id = "http"
        self.model_id = cfg.model
        self._client = client or httpx.Client(timeout=cfg.timeout_s)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)

    def complete(self, spec: PromptSpec) -> Completion:
        with self._slots:
            t0 = time.perf_counter()
            text = http_complete(spec, self.cfg, self._client, self._sleep or time.sleep)
            latency = (time.perf_counter() - t0) * 1000.0
        return Completion(text, _rough_usage(spec, text), latency)


# --- offline oracles ------------------------------------------------------

def oracle_order(expected_ids: Sequence[str], popularity: Mapping[str, float]) -> list[str]:
    """Labeled ids by popularity descending, then unlabeled ids by id."""
    labeled = sorted((m for m in expected_ids if m in popularity), key=lambda m: (-popularity[m], m))
    rest = sorted(m for m in expected_ids if m not in popularity)
    return labeled + rest


def schema_document(order: Sequence[str]) -> str:
    n = len(order)
    rows = []
    for i, mid in enumerate(order):
        score = 100.0 if n == 1 else 100.0 - 90.0 * i / (n - 1)
        rows.append({"id": mid, "score": round(score, 4), "reason": f"position {i + 1}",
                     "prior_knowledge": False})
    return json.dumps({"ranking": rows})


def oracle_complete(spec: PromptSpec, hidden_truth: Mapping[str, float]) -> str:
    return schema_document(oracle_order(spec.expected_ids, hidden_truth))


def adjacent_swaps(order: Sequence[str], count: int, rng: random.Random) -> list[str]:
    out = list(order)
    if len(out) < 2:
        return out
    for _ in range(count):
        i = rng.randrange(len(out) - 1)
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def noise_seed(seed: int | None, expected_ids: Sequence[str]) -> int:
    material = f"{seed}|{','.join(sorted(expected_ids))}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def noisy_oracle_complete(spec: PromptSpec, hidden_truth: Mapping[str, float], noise: float,
                          seed: int | None) -> str:
    """Oracle order degraded by floor(noise * n(n-1)/2) random adjacent swaps."""
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    order = oracle_order(spec.expected_ids, hidden_truth)
    n = len(order)
    swaps = int(noise * n * (n - 1) // 2)
    rng = random.Random(noise_seed(seed, spec.expected_ids))
    return schema_document(adjacent_swaps(order, swaps, rng))


def popularity_from_cases(cases: Sequence[EvaluationCase]) -> dict[str, float]:
    truth: dict[str, float] = {}
    for case in cases:
        truth.update(case.ground_truth)
    return truth


class OracleBackend:
    backend_id = "oracle"

    def __init__(self, hidden_truth: Mapping[str, float], model_id: str = "oracle"):
        self._truth = dict(hidden_truth)
        self.model_id = model_id

    def complete(self, spec: PromptSpec) -> Completion:
        text = oracle_complete(spec, self._truth)
        return Completion(text, _rough_usage(spec, text))


class NoisyOracleBackend:
    def __init__(self, hidden_truth: Mapping[str, float], noise: float, model_id: str | None = None):
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        self._truth = dict(hidden_truth)
        self.noise = noise
        self.backend_id = f"noisy-oracle:{noise:g}"
        self.model_id = model_id or self.backend_id

    def complete(self, spec: PromptSpec) -> Completion:
        text = noisy_oracle_complete(spec, self._truth, self.noise, spec.decoding.seed)
        return Completion(text, _rough_usage(spec, text))


Script = Callable[["PromptSpec", int], "str | Exception"]


class ScriptedBackend:
    """Replays canned responses, or calls ``script(spec, call_index)``.

    An ``Exception`` instance in the script is raised instead of returned.
    """

    def __init__(self, script: Sequence[str | Exception] | Script, backend_id: str = "scripted",
                 model_id: str = "scripted"):
        self._script = script
        self.backend_id = backend_id
        self.model_id = model_id
        self.calls: list[PromptSpec] = []
        self._lock = threading.Lock()

    def complete(self, spec: PromptSpec) -> Completion:
        with self._lock:
            index = len(self.calls)
            self.calls.append(spec)
        if callable(self._script):
            item = self._script(spec, index)
        else:
            item = self._script[min(index, len(self._script) - 1)]
        if isinstance(item, Exception):
            raise item
        return Completion(item, _rough_usage(spec, item))


# --- cache ----------------------------------------------------------------

def cache_key(backend_id: str, model_id: str, spec: PromptSpec) -> str:
    material = json.dumps(
        [backend_id, model_id, spec.system_text, spec.user_text,
         spec.decoding.temperature, spec.decoding.max_tokens, spec.decoding.seed],
        ensure_ascii=False,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class CachedBackend:
    """Memoises ``inner`` on disk: one file per prompt digest holding the raw text."""

    def __init__(self, inner: ChatBackend, cache_dir: Path | str):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.model_id = inner.model_id
        self.cache_dir = Path(cache_dir)
        self.hits = 0
        self.misses = 0

    def complete(self, spec: PromptSpec) -> Completion:
        path = self.cache_dir / cache_key(self.backend_id, self.model_id, spec)
        try:
            text = path.read_text(encoding="utf-8")
            self.hits += 1
            return Completion(text, _rough_usage(spec, text), 0.0)
        except FileNotFoundError:
            pass
        except OSError as exc:
            logger.warning("cache read failed for %s: %s", path.name, exc)
        self.misses += 1
        result = self.inner.complete(spec)
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, prefix=".tmp-")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(result.raw_text)
            os.replace(tmp, path)
        except OSError as exc:
            logger.warning("cache write failed, continuing uncached: %s", exc)
        return result


def cached(backend: ChatBackend, cache_dir: Path | str) -> CachedBackend:
    return CachedBackend(backend, cache_dir)


def purge_cache(cache_dir: Path | str) -> int:
    removed = 0
    directory = Path(cache_dir)
    if not directory.is_dir():
        return 0
    for entry in sorted(directory.rglob("*"), reverse=True):
        if entry.is_file():
            entry.unlink()
            removed += 1
    return removed
