"""HTTP backends.

Planners speak the chat-completions wire format with base64 data-URL
images. Grounding services use a small JSON protocol:

    POST {endpoint}/detect  {"text": str, "image": data_url}
        -> {"detections": [{"bbox": [x1, y1, x2, y2], "score": float, "label": str}]}
    POST {endpoint}/point   {"text": str, "image": data_url}
        -> {"point": [x, y] | null}
    POST {endpoint}/track   {"text": str, "frames": [data_url, ...]}
        -> {"track": {"<frame offset>": [x1, y1, x2, y2], ...}}

All grounding coordinates are normalized to [0, 1].
"""

from __future__ import annotations

import base64
import json
import os

import requests

from groundplan.adapters.base import (
    BackendError,
    BackendRequest,
    GroundingBackend,
    PlannerBackend,
    TransportError,
    as_json_response,
    image_png_bytes,
)

TOKEN_ENV = "GROUNDPLAN_API_KEY"
GROUNDER_TOKEN_ENV = "GROUNDPLAN_GROUNDER_KEY"


def data_url(image) -> str:
    payload, mime = image_png_bytes(image)
    return f"data:{mime};base64," + base64.b64encode(payload).decode("ascii")


def _post(session, url, body, token, timeout):
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    try:
        resp = session.post(url, json=body, headers=headers, timeout=timeout)
    except (requests.ConnectionError, requests.Timeout) as exc:
        raise TransportError(f"{url}: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransportError(f"{url}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise BackendError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise BackendError(f"{url}: response is not JSON") from exc


class ChatCompletionPlanner(PlannerBackend):
    backend_id = "chat-completions"

    def __init__(
        self,
        endpoint: str,
        model: str,
        decoding: dict | None = None,
        token_env: str = TOKEN_ENV,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model_id = model
        self.decoding = dict(decoding or {"temperature": 0.0})
        self.token_env = token_env
        self.timeout = timeout
        self.session = session or requests.Session()

    def _complete(self, request: BackendRequest) -> str:
        content = [{"type": "text", "text": request.prompt}]
        content += [{"type": "image_url", "image_url": {"url": data_url(img)}} for img in request.images]
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": content}],
            **self.decoding,
            **request.params,
        }
        payload = _post(self.session, self.endpoint, body, os.environ.get(self.token_env), self.timeout)
        try:
            message = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected completion payload: {json.dumps(payload)[:200]}") from exc
        if isinstance(message, list):
            message = "".join(part.get("text", "") for part in message if isinstance(part, dict))
        return message or ""


class HttpGrounder(GroundingBackend):
    backend_id = "grounder-http"

    def __init__(
        self,
        endpoint: str,
        model: str = "grounder",
        token_env: str = GROUNDER_TOKEN_ENV,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model
        self.token_env = token_env
        self.timeout = timeout
        self.session = session or requests.Session()

    def _complete(self, request: BackendRequest) -> str:
        body: dict = {"text": request.prompt}
        if request.task == "track":
            body["frames"] = [data_url(f) for f in request.images]
        else:
            body["image"] = data_url(request.images[0])
        payload = _post(
            self.session,
            f"{self.endpoint}/{request.task}",
            body,
            os.environ.get(self.token_env),
            self.timeout,
        )
        return as_json_response(payload)
