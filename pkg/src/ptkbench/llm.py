"""Chat-completion gateway: OpenAI-compatible HTTP backend, mock backend, replay cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx

logger = logging.getLogger(__name__)

Messages = Sequence[dict]


class BackendError(RuntimeError):
    """Any failure talking to a completion backend."""


class AuthError(BackendError):
    """Credential rejected; never retried."""


class RetryExhausted(BackendError):
    """Transient failures (rate limit, 5xx, network) persisted past the retry cap."""


class MalformedResponse(BackendError):
    pass


class CacheCorrupt(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    model: str = "gpt-4o-mini"
    temperature: float = 1.0
    seed: int | None = None
    max_tokens: int = 512
    n_choices: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_choices < 1:
            raise ValueError("n_choices must be >= 1")

    def with_seed(self, seed: int | None) -> "GenerationParams":
        return GenerationParams(self.model, self.temperature, seed, self.max_tokens, self.n_choices)

    def to_dict(self) -> dict:
        return asdict(self)


def cache_key(backend_id: str, messages: Messages, params: GenerationParams) -> str:
    blob = json.dumps(
        {
            "backend": backend_id,
            "model": params.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_tokens,
            "n": params.n_choices,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend:
    backend_id = "abstract"

    def __init__(self):
        self.requests = 0  # calls that reached the backend (network calls for HTTP)
        self._lock = threading.Lock()

    def _count(self):
        with self._lock:
            self.requests += 1

    def complete(self, messages: Messages, params: GenerationParams) -> list[str]:
        raise NotImplementedError


class OpenAIChatBackend(Backend):
    """POSTs to ``{base_url}/chat/completions`` with exponential backoff on 429/5xx/network errors."""

    def __init__(self, base_url: str, api_key_env: str = "OPENAI_API_KEY", name: str = "openai",
                 max_retries: int = 5, backoff: float = 1.0, max_backoff: float = 30.0,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        super().__init__()
        self.backend_id = name
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.client = client or httpx.Client(timeout=120.0)
        self.sleep = sleep

    def _payload(self, messages: Messages, params: GenerationParams) -> dict:
        payload = {
            "model": params.model,
            "messages": list(messages),
            "temperature": params.temperature,
            "n": params.n_choices,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        return payload

    def complete(self, messages: Messages, params: GenerationParams) -> list[str]:
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        payload = self._payload(messages, params)
        last_error = "no attempt made"
        for attempt in range(self.max_retries + 1):
            self._count()
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp, params)
                if resp.status_code in (401, 403):
                    raise AuthError(f"{self.backend_id}: HTTP {resp.status_code} (check ${self.api_key_env})")
                if resp.status_code != 429 and resp.status_code < 500:
                    raise BackendError(f"{self.backend_id}: HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            if attempt < self.max_retries:
                delay = min(self.max_backoff, self.backoff * 2 ** attempt)
                logger.warning("%s: %s, retry %d/%d in %.1fs", self.backend_id, last_error,
                               attempt + 1, self.max_retries, delay)
                self.sleep(delay)
        raise RetryExhausted(f"{self.backend_id}: giving up after {self.max_retries + 1} attempts ({last_error})")

    def _parse(self, resp: httpx.Response, params: GenerationParams) -> list[str]:
        try:
            choices = resp.json()["choices"]
            outputs = [c["message"]["content"] for c in choices]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"{self.backend_id}: unexpected response shape ({exc})") from None
        if len(outputs) != params.n_choices or not all(isinstance(o, str) for o in outputs):
            raise MalformedResponse(f"{self.backend_id}: expected {params.n_choices} string choices")
        return outputs


class MockBackend(Backend):
    """Offline backend driven by :func:`ptkbench.mock.mock_complete`.

    With ``perturb=False`` the seed is ignored, so every run is identical.
    """

    def __init__(self, perturb: bool = True):
        super().__init__()
        self.perturb = perturb
        self.backend_id = "mock-perturb" if perturb else "mock-echo"

    def complete(self, messages: Messages, params: GenerationParams) -> list[str]:
        from .mock import mock_complete

        self._count()
        if not self.perturb:
            params = params.with_seed(None)
        return mock_complete(messages, params)


class ChatCache:
    """Append-only JSON-lines cache, one file per backend id.

    Each record holds key, request, response and timestamp. The last record for
    a key wins; :meth:`compact` rewrites the file keeping only those.
    """

    def __init__(self, directory: str | Path, repair: bool = False):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.repair = repair
        self._tables: dict[str, dict[str, list[str]]] = {}
        self._lock = threading.Lock()

    def _path(self, backend_id: str) -> Path:
        return self.dir / f"{backend_id}.jsonl"

    def _table(self, backend_id: str) -> dict[str, list[str]]:
        table = self._tables.get(backend_id)
        if table is not None:
            return table
        table = {}
        path = self._path(backend_id)
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        outputs = rec["response"]
                        if not isinstance(outputs, list) or not all(isinstance(o, str) for o in outputs):
                            raise ValueError("response is not a list of strings")
                        table[rec["key"]] = outputs
                    except (ValueError, KeyError, TypeError) as exc:
                        if not self.repair:
                            raise CacheCorrupt(f"{path}:{lineno}: corrupt cache entry ({exc})") from None
                        logger.warning("%s:%d: corrupt cache entry ignored (%s)", path, lineno, exc)
        self._tables[backend_id] = table
        return table

    def get(self, backend_id: str, key: str) -> list[str] | None:
        with self._lock:
            hit = self._table(backend_id).get(key)
            return list(hit) if hit is not None else None

    def put(self, backend_id: str, key: str, messages: Messages, params: GenerationParams,
            outputs: list[str]) -> None:
        rec = {
            "key": key,
            "request": {"messages": list(messages), "params": params.to_dict()},
            "response": outputs,
            "timestamp": time.time(),
        }
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock:
            self._table(backend_id)[key] = list(outputs)
            with open(self._path(backend_id), "a", encoding="utf-8") as fh:
                fh.write(line)

    def compact(self, backend_id: str) -> int:
        """Rewrite the backend's file with one record per key; returns records kept."""
        path = self._path(backend_id)
        if not path.exists():
            return 0
        with self._lock:
            latest: dict[str, str] = {}
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        latest[json.loads(line)["key"]] = line if line.endswith("\n") else line + "\n"
                    except (ValueError, KeyError, TypeError):
                        continue
            tmp = path.with_suffix(".jsonl.tmp")
            tmp.write_text("".join(latest.values()), encoding="utf-8")
            tmp.replace(path)
            self._tables.pop(backend_id, None)
            return len(latest)


class Gateway:
    """Front door for every LLM call: caching, bounded concurrency, call counting."""

    def __init__(self, backend: Backend, cache: ChatCache | None = None, max_inflight: int = 4):
        self.backend = backend
        self.cache = cache
        self.max_inflight = max_inflight
        self._slots = threading.BoundedSemaphore(max_inflight)
        self._lock = threading.Lock()
        self.calls = 0
        self.cache_hits = 0

    @property
    def backend_calls(self) -> int:
        return self.backend.requests

    def complete(self, messages: Messages, params: GenerationParams) -> list[str]:
        with self._lock:
            self.calls += 1
        return self._backend_complete(messages, params)

    def _backend_complete(self, messages: Messages, params: GenerationParams) -> list[str]:
        with self._slots:
            outputs = self.backend.complete(messages, params)
        if len(outputs) != params.n_choices:
            raise MalformedResponse(f"expected {params.n_choices} outputs, got {len(outputs)}")
        return outputs

    def cached_complete(self, messages: Messages, params: GenerationParams) -> tuple[list[str], bool]:
        with self._lock:
            self.calls += 1
        if self.cache is None:
            return self._backend_complete(messages, params), False
        key = cache_key(self.backend.backend_id, messages, params)
        hit = self.cache.get(self.backend.backend_id, key)
        if hit is not None:
            with self._lock:
                self.cache_hits += 1
            return hit, True
        outputs = self._backend_complete(messages, params)
        self.cache.put(self.backend.backend_id, key, messages, params, outputs)
        return outputs, False

    def generate(self, prompt: str, params: GenerationParams) -> str:
        """Single-prompt convenience used by the reformulation steps."""
        outputs, _ = self.cached_complete([{"role": "user", "content": prompt}], params)
        return outputs[0]
