"""Backend interfaces, request hashing, the on-disk response cache and retries."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union

from PIL import Image

logger = logging.getLogger(__name__)

ImageLike = Union[str, os.PathLike, Image.Image]

PLANNER_TASKS = frozenset(
    {"grounded_plan", "language_plan", "object_identification", "instruction_rewrite"}
)
GROUNDER_TASKS = frozenset({"detect", "track", "point"})


class BackendError(RuntimeError):
    """A backend call failed for good. Carries the request hash for resume."""

    def __init__(self, message: str, request_hash: str | None = None):
        super().__init__(message)
        self.request_hash = request_hash


class TransportError(BackendError):
    """Retryable failure: connection problems, timeouts, 429 and 5xx replies."""


class CapabilityError(BackendError):
    pass


def image_digest(image: ImageLike) -> str:
    if isinstance(image, Image.Image):
        h = hashlib.sha256()
        h.update(f"{image.mode}:{image.size}".encode())
        h.update(image.tobytes())
        return h.hexdigest()
    with open(image, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def image_png_bytes(image: ImageLike) -> tuple[bytes, str]:
    """Encoded bytes and mime type suitable for a data URL."""
    if isinstance(image, Image.Image):
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        return buf.getvalue(), "image/png"
    path = Path(image)
    mime = {".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}.get(
        path.suffix.lower(), "image/png"
    )
    return path.read_bytes(), mime


@dataclass(frozen=True)
class BackendRequest:
    """One model call.

    ``meta`` travels with the request but is not hashed; mock backends read
    episode identifiers from it, real backends ignore it.
    """

    task: str
    prompt: str
    images: tuple = ()
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict, compare=False)


def request_hash(backend_id: str, model_id: str, request: BackendRequest) -> str:
    payload = {
        "backend": backend_id,
        "model": model_id,
        "task": request.task,
        "prompt": request.prompt,
        "images": [image_digest(img) for img in request.images],
        "params": request.params,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendRequestRecord:
    request_hash: str
    backend_id: str
    model_id: str
    task: str
    response: str
    latency_ms: float
    timestamp: float

    def to_json(self) -> dict:
        return {
            "request_hash": self.request_hash,
            "backend_id": self.backend_id,
            "model_id": self.model_id,
            "task": self.task,
            "response": self.response,
            "latency_ms": self.latency_ms,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, data: dict) -> BackendRequestRecord:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


class Backend:
    """Base for planner and grounding backends.

    Subclasses implement ``_complete`` returning the raw response text and may
    report their own latency through ``last_latency_ms``; otherwise wall time
    is measured.
    """

    backend_id = "backend"
    model_id = "none"
    capabilities: frozenset = frozenset()
    measures_latency = True

    def complete(self, request: BackendRequest) -> str:
        if request.task not in self.capabilities:
            raise CapabilityError(f"{self.backend_id} does not support {request.task!r}")
        return self._complete(request)

    def _complete(self, request: BackendRequest) -> str:
        raise NotImplementedError


class PlannerBackend(Backend):
    capabilities = PLANNER_TASKS


class GroundingBackend(Backend):
    capabilities = GROUNDER_TASKS


class RequestCache:
    """Append-only JSONL store of backend responses keyed by request hash.

    One writer appends under a lock; readers see an in-memory index. A torn
    last line from an interrupted run is ignored on load.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._index: dict[str, BackendRequestRecord] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = BackendRequestRecord.from_json(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError):
                    logger.warning("skipping unreadable cache line in %s", self.path)
                    continue
                self._index[rec.request_hash] = rec

    def get(self, key: str) -> BackendRequestRecord | None:
        with self._lock:
            rec = self._index.get(key)
            if rec is None:
                self.misses += 1
            else:
                self.hits += 1
            return rec

    def put(self, rec: BackendRequestRecord):
        with self._lock:
            self._index[rec.request_hash] = rec
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")

    def __len__(self):
        return len(self._index)


@dataclass
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 1.0
    factor: float = 2.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    def delays(self):
        delay = self.base_delay
        for _ in range(self.max_retries):
            yield min(delay, self.max_delay)
            delay *= self.factor


class Client:
    """A backend behind the response cache and retry policy.

    Every call is keyed by :func:`request_hash`; a cached response is served
    without touching the backend.
    """

    def __init__(
        self,
        backend: Backend,
        cache: RequestCache | None = None,
        retry: RetryPolicy | None = None,
    ):
        self.backend = backend
        self.cache = cache if cache is not None else RequestCache()
        self.retry = retry or RetryPolicy()
        self.network_calls = 0
        self._lock = threading.Lock()

    @property
    def capabilities(self) -> frozenset:
        return self.backend.capabilities

    def call(self, request: BackendRequest) -> BackendRequestRecord:
        key = request_hash(self.backend.backend_id, self.backend.model_id, request)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        if request.task not in self.backend.capabilities:
            raise CapabilityError(
                f"{self.backend.backend_id} does not support {request.task!r}", key
            )
        delays = self.retry.delays()
        attempt = 0
        while True:
            attempt += 1
            with self._lock:
                self.network_calls += 1
            start = time.perf_counter()
            try:
                text = self.backend.complete(request)
            except TransportError as exc:
                delay = next(delays, None)
                if delay is None:
                    raise BackendError(
                        f"{self.backend.backend_id}: giving up after {attempt} attempts: {exc}",
                        key,
                    ) from exc
                logger.warning("transport failure (%s); retrying in %.2fs", exc, delay)
                self.retry.sleep(delay)
                continue
            except BackendError as exc:
                exc.request_hash = exc.request_hash or key
                raise
            break
        if self.backend.measures_latency:
            latency = round((time.perf_counter() - start) * 1000.0, 3)
        else:
            latency = 0.0
        rec = BackendRequestRecord(
            key,
            self.backend.backend_id,
            self.backend.model_id,
            request.task,
            text or "",
            latency,
            time.time(),
        )
        self.cache.put(rec)
        return rec


def substitute_prompt(template: str, instruction: str, image_token: str = "<image>") -> str:
    """Fill the ``{I}`` and ``{H}`` placeholders; nothing else is touched."""
    return template.replace("{I}", image_token).replace("{H}", instruction)


def as_json_response(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True)
