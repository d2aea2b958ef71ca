"""Planner and grounding backends plus the paradigm-level request helpers."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping
from urllib.parse import parse_qs, urlparse

from groundplan.adapters.base import (
    Backend,
    BackendError,
    BackendRequest,
    BackendRequestRecord,
    Client,
    GroundingBackend,
    PlannerBackend,
    RequestCache,
    RetryPolicy,
    TransportError,
    request_hash,
)
from groundplan.adapters.http import ChatCompletionPlanner, HttpGrounder
from groundplan.adapters.mock import (
    GtGrounder,
    GtPlanner,
    PerturbedPlanner,
    ReplayPlanner,
    ScriptedGrounder,
    ScriptedPlanner,
)
from groundplan.model import Episode

__all__ = [
    "Backend",
    "BackendError",
    "BackendRequest",
    "BackendRequestRecord",
    "Client",
    "GroundingBackend",
    "PlannerBackend",
    "RequestCache",
    "RetryPolicy",
    "TransportError",
    "make_grounder",
    "make_planner",
    "request_hash",
]


def _query(url) -> dict[str, str]:
    return {k: v[-1] for k, v in parse_qs(url.query).items()}


def _load_script(params: dict) -> dict:
    if "file" not in params:
        raise ValueError("mock://script needs ?file=<script.json>")
    return json.loads(Path(params["file"]).read_text(encoding="utf-8"))


def make_planner(
    spec: str,
    episodes: Mapping[str, Episode] | None = None,
    model: str | None = None,
    decoding: dict | None = None,
) -> PlannerBackend:
    """Build a planner from an endpoint string.

    ``http(s)://...`` is a chat-completions endpoint (``model`` required).
    ``mock://gt``, ``mock://perturb?p=0.5&seed=0``, ``mock://script?file=...``
    and ``mock://replay?file=responses.json`` are in-process mocks.
    """
    url = urlparse(spec)
    if url.scheme in ("http", "https"):
        if not model:
            raise ValueError("an HTTP planner needs a model name")
        return ChatCompletionPlanner(spec, model, decoding)
    if url.scheme != "mock":
        raise ValueError(f"unsupported planner endpoint {spec!r}")
    params = _query(url)
    kind = url.netloc or url.path.lstrip("/")
    if kind == "gt":
        return GtPlanner(episodes or {})
    if kind == "perturb":
        jitter = (float(params.get("bbox_jitter", 0.0)), float(params.get("point_jitter", 0.0)))
        return PerturbedPlanner(episodes or {}, float(params.get("p", 0.5)), int(params.get("seed", 0)), jitter)
    if kind == "script":
        return ScriptedPlanner(_load_script(params))
    if kind == "replay":
        responses = json.loads(Path(params["file"]).read_text(encoding="utf-8"))
        return ReplayPlanner(responses, model=Path(params["file"]).stem)
    if kind == "empty":
        return ReplayPlanner("", model="empty")
    raise ValueError(f"unknown mock planner {kind!r}")


def make_grounder(spec: str, episodes: Mapping[str, Episode] | None = None, model: str | None = None) -> GroundingBackend:
    url = urlparse(spec)
    if url.scheme in ("http", "https"):
        return HttpGrounder(spec, model or "grounder")
    if url.scheme != "mock":
        raise ValueError(f"unsupported grounder endpoint {spec!r}")
    params = _query(url)
    kind = url.netloc or url.path.lstrip("/")
    if kind == "gt":
        return GtGrounder(episodes or {})
    if kind == "script":
        return ScriptedGrounder(_load_script(params))
    raise ValueError(f"unknown mock grounder {kind!r}")
