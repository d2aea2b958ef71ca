"""Deterministic in-process backends for tests, dress rehearsals and replay.

Mocks read episode context from ``BackendRequest.meta`` (never hashed) and
report zero latency so results files stay byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Mapping

import numpy as np

from groundplan.adapters.base import (
    BackendRequest,
    GroundingBackend,
    PlannerBackend,
    TransportError,
    as_json_response,
)
from groundplan.dsl import serialize_plan
from groundplan.model import (
    Articulation,
    BBox,
    Episode,
    Manipulation,
    Primitive,
    gt_to_predicted,
    iou,
)


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ReplayPlanner(PlannerBackend):
    """Returns scripted text: a fixed string, a mapping or a callable."""

    backend_id = "mock-replay"
    measures_latency = False

    def __init__(self, responses: str | Mapping[str, str] | Callable[[BackendRequest], str], model: str = "replay"):
        self.responses = responses
        self.model_id = model

    def _complete(self, request: BackendRequest) -> str:
        if isinstance(self.responses, str):
            return self.responses
        if callable(self.responses):
            return self.responses(request)
        eid = request.meta.get("episode_id")
        kind = request.meta.get("instruction_type")
        for key in (f"{eid}/{kind}", str(eid), "*"):
            if key in self.responses:
                return self.responses[key]
        return ""


def _steps_text(steps: list[str]) -> str:
    body = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, 1))
    return "Here is the plan:\n" + body + "\n"


class GtPlanner(PlannerBackend):
    """Answers every planning request with the episode's own GT plan."""

    backend_id = "mock-gt"
    measures_latency = False

    def __init__(self, episodes: Mapping[str, Episode], model: str = "gt"):
        self.episodes = dict(episodes)
        self.model_id = model

    def _episode(self, request: BackendRequest) -> Episode:
        return self.episodes[request.meta["episode_id"]]

    def _complete(self, request: BackendRequest) -> str:
        ep = self._episode(request)
        if request.task == "grounded_plan":
            return serialize_plan(gt_to_predicted(ep.gt_plan), ep.image_width, ep.image_height)
        if request.task == "language_plan":
            if "marks" in request.meta:
                return _steps_text(self._mark_steps(ep, request.meta["marks"]))
            return _steps_text(self._language_steps(ep))
        return ""

    @staticmethod
    def _language_steps(ep: Episode) -> list[str]:
        steps = []
        for u in ep.gt_plan.units:
            if isinstance(u, Manipulation):
                steps.append(f"grasp the {u.grasp.target_text}")
                steps.append(f"place it on the {u.place.target_text}")
            else:
                steps.append(f"{u.action.primitive.value} the {u.action.target_text}")
        return steps

    @staticmethod
    def _mark_steps(ep: Episode, marks) -> list[str]:
        table = [(int(i), BBox(*b)) for i, b in marks]

        def best(box: BBox) -> int:
            return max(table, key=lambda m: (iou(m[1], box), -m[0]))[0]

        steps = []
        for u in ep.gt_plan.units:
            if isinstance(u, Manipulation):
                steps.append(f"grasp mark {best(u.grasp.grounding)}")
                steps.append(f"place on mark {best(u.place.grounding)}")
            else:
                steps.append(f"{u.action.primitive.value} mark {best(u.action.grounding)}")
        return steps


class PerturbedPlanner(PlannerBackend):
    """GT plans corrupted unit by unit with a known success probability."""

    backend_id = "mock-perturb"
    measures_latency = False

    def __init__(
        self,
        episodes: Mapping[str, Episode],
        p_correct: float,
        seed: int = 0,
        jitter: tuple[float, float] = (0.0, 0.0),
    ):
        self.episodes = dict(episodes)
        self.p_correct = p_correct
        self.seed = seed
        self.jitter = jitter
        self.model_id = f"perturb-p{p_correct}-s{seed}-j{jitter[0]},{jitter[1]}"

    def _complete(self, request: BackendRequest) -> str:
        from groundplan.synth import perturbed_planner

        if request.task != "grounded_plan":
            return ""
        eid = request.meta["episode_id"]
        ep = self.episodes[eid]
        rng = np.random.default_rng(
            stable_seed(self.seed, eid, request.meta.get("instruction_type", ""))
        )
        plan = perturbed_planner(ep.gt_plan, self.p_correct, self.jitter, rng)
        return serialize_plan(plan, ep.image_width, ep.image_height)


class ScriptedPlanner(PlannerBackend):
    """Planner driven by a script document (see ``groundplan.synth.gen_demonstration``).

    Handles object identification per (episode, segment) and instruction
    rewrites; plan requests fall back to ``responses`` in the script.
    """

    backend_id = "mock-script"
    measures_latency = False

    def __init__(self, script: Mapping, model: str = "script"):
        self.script = script
        self.model_id = model

    def _complete(self, request: BackendRequest) -> str:
        meta = request.meta
        eid = meta.get("episode_id")
        episode = self.script.get("episodes", {}).get(eid, {})
        if request.task == "object_identification":
            s, e = meta["segment"]
            for seg in episode.get("segments", []):
                if seg["s"] == s and seg["e"] == e:
                    return json.dumps(seg["identity"])
            return "I cannot tell which object is manipulated."
        if request.task == "instruction_rewrite":
            purpose = meta.get("purpose")
            if purpose == "implicit":
                if episode.get("rewrite_empty"):
                    return ""
                return episode.get("implicit") or f"Take care of this: {meta.get('instruction', '')}"
            if purpose == "revise":
                if episode.get("revise_empty"):
                    return ""
                return ", then ".join(meta.get("surviving", [])).capitalize() + "."
            return ""
        responses = self.script.get("responses", {})
        kind = meta.get("instruction_type")
        return responses.get(f"{eid}/{kind}", responses.get(str(eid), ""))


class FlakyPlanner(PlannerBackend):
    """Wraps a planner and raises transport errors for chosen episodes."""

    measures_latency = False

    def __init__(self, inner: PlannerBackend, fail_episodes=(), fail_first: int = 0):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.model_id = inner.model_id
        self.capabilities = inner.capabilities
        self.fail_episodes = set(fail_episodes)
        self.remaining_failures = fail_first
        self.calls = 0

    def _complete(self, request: BackendRequest) -> str:
        self.calls += 1
        if request.meta.get("episode_id") in self.fail_episodes:
            raise TransportError("injected transport failure")
        if self.remaining_failures > 0:
            self.remaining_failures -= 1
            raise TransportError("injected transient failure")
        return self.inner.complete(request)


def _text_match(query: str, name: str) -> bool:
    q, n = query.strip().lower(), name.strip().lower()
    return bool(q) and bool(n) and (q in n or n in q)


class GtGrounder(GroundingBackend):
    """Detects and points at GT targets whose names match the query text."""

    backend_id = "mock-gt-grounder"
    measures_latency = False
    capabilities = frozenset({"detect", "point"})

    def __init__(self, episodes: Mapping[str, Episode], model: str = "gt"):
        self.episodes = dict(episodes)
        self.model_id = model

    def _complete(self, request: BackendRequest) -> str:
        ep = self.episodes[request.meta["episode_id"]]
        actions = [a for u in ep.gt_plan.units for a in u.actions]
        if request.task == "detect":
            found, seen = [], set()
            for a in actions:
                box = tuple(a.grounding.as_list())
                if box in seen:
                    continue
                if request.prompt.strip() == "" or (
                    a.primitive is not Primitive.PLACE and _text_match(request.prompt, a.target_text)
                ):
                    seen.add(box)
                    found.append({"bbox": list(box), "score": 0.9, "label": a.target_text})
            return as_json_response({"detections": found})
        for a in actions:
            if a.primitive is Primitive.PLACE and _text_match(request.prompt, a.target_text):
                return as_json_response({"point": a.grounding.center.as_list()})
        return as_json_response({"point": None})


class ScriptedGrounder(GroundingBackend):
    """Tracks from a script document keyed by (episode, segment)."""

    backend_id = "mock-script-grounder"
    measures_latency = False

    def __init__(self, script: Mapping, model: str = "script"):
        self.script = script
        self.model_id = model

    def _complete(self, request: BackendRequest) -> str:
        if request.task != "track":
            return as_json_response({"detections": []} if request.task == "detect" else {"point": None})
        meta = request.meta
        episode = self.script.get("episodes", {}).get(meta.get("episode_id"), {})
        s, e = meta.get("segment", (None, None))
        for seg in episode.get("segments", []):
            if seg["s"] != s or seg["e"] != e:
                continue
            names = [seg.get("object", ""), seg["identity"].get("description", ""), seg["identity"].get("category", "")]
            names += seg.get("cues", [])
            if any(_text_match(request.prompt, n) for n in names if n):
                return as_json_response({"track": seg["track"]})
        return as_json_response({"track": {}})
