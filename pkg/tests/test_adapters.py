import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from PIL import Image

from groundplan.adapters import (
    BackendError,
    BackendRequest,
    Client,
    RequestCache,
    RetryPolicy,
    TransportError,
    make_grounder,
    make_planner,
    request_hash,
)
from groundplan.adapters.base import CapabilityError, substitute_prompt
from groundplan.adapters.http import ChatCompletionPlanner, HttpGrounder
from groundplan.adapters.mock import FlakyPlanner, ReplayPlanner
from groundplan.adapters.planning import (
    classify_step,
    extract_steps,
    ground_language_step,
    ground_som_step,
    load_template,
    render_som_overlay,
    request_language_plan,
    resolve_mark_reference,
    split_compound_step,
    step_object_phrase,
    track,
)
from groundplan.adapters.base import GroundingBackend, as_json_response
from groundplan.model import BBox, Point2D, Primitive

NO_SLEEP = RetryPolicy(max_retries=3, sleep=lambda s: None)


@pytest.fixture
def image():
    return Image.new("RGB", (64, 48), (128, 128, 128))


def req(prompt="hi", task="grounded_plan", **meta):
    return BackendRequest(task, prompt, (), {"temperature": 0}, meta)


def test_replay_returns_text_verbatim():
    text = 'grasp("cup", [1,2,3,4])\n  trailing  '
    client = Client(ReplayPlanner(text))
    assert client.call(req()).response == text


def test_second_identical_request_served_from_cache(tmp_path):
    cache = RequestCache(tmp_path / "cache.jsonl")
    client = Client(ReplayPlanner("ok"), cache)
    first = client.call(req())
    second = client.call(req())
    assert client.network_calls == 1 and cache.hits == 1
    assert first == second
    # a fresh process reading the same file makes no backend calls at all
    client2 = Client(ReplayPlanner("different"), RequestCache(tmp_path / "cache.jsonl"))
    assert client2.call(req()).response == "ok" and client2.network_calls == 0


def test_cache_skips_torn_line(tmp_path):
    path = tmp_path / "cache.jsonl"
    Client(ReplayPlanner("ok"), RequestCache(path)).call(req())
    with open(path, "a") as fh:
        fh.write('{"request_hash": "abc", "resp')
    assert len(RequestCache(path)) == 1


def test_request_hash_ignores_meta_but_not_params(image):
    a = BackendRequest("grounded_plan", "p", (image,), {"t": 0}, {"episode_id": "1"})
    b = BackendRequest("grounded_plan", "p", (image,), {"t": 0}, {"episode_id": "2"})
    c = BackendRequest("grounded_plan", "p", (image,), {"t": 1})
    assert request_hash("x", "m", a) == request_hash("x", "m", b)
    assert request_hash("x", "m", a) != request_hash("x", "m", c)
    assert request_hash("x", "m", a) != request_hash("x", "m2", a)
    other = Image.new("RGB", (64, 48), (0, 0, 0))
    d = BackendRequest("grounded_plan", "p", (other,), {"t": 0})
    assert request_hash("x", "m", a) != request_hash("x", "m", d)


def test_backend_down_raises_with_hash_after_retries():
    delays = []
    flaky = FlakyPlanner(ReplayPlanner("ok"), fail_episodes={"e1"})
    client = Client(flaky, retry=RetryPolicy(max_retries=3, base_delay=1, factor=2, sleep=delays.append))
    r = req(episode_id="e1")
    with pytest.raises(BackendError) as info:
        client.call(r)
    assert info.value.request_hash == request_hash(flaky.backend_id, flaky.model_id, r)
    assert flaky.calls == 4 and delays == [1, 2, 4]


def test_transient_failure_recovers():
    flaky = FlakyPlanner(ReplayPlanner("ok"), fail_first=2)
    client = Client(flaky, retry=NO_SLEEP)
    assert client.call(req()).response == "ok" and flaky.calls == 3


def test_capability_error():
    with pytest.raises(CapabilityError):
        Client(ReplayPlanner("x")).call(req(task="track"))


def test_prompt_substitution_only_touches_placeholders():
    assert substitute_prompt("{I} do {H} {x}", "it") == "<image> do it {x}"


def test_template_override_lookup(tmp_path):
    packaged = load_template("grounded_plan")
    assert "{H}" in packaged and "{I}" in packaged
    (tmp_path / "grounded_plan.txt").write_text("generic {H}")
    (tmp_path / "m1").mkdir()
    (tmp_path / "m1" / "grounded_plan.txt").write_text("model {H}")
    assert load_template("grounded_plan", tmp_path, "m1") == "model {H}"
    assert load_template("grounded_plan", tmp_path, "m2") == "generic {H}"


def test_extract_steps_examples():
    assert extract_steps("1. grasp the cup\n2. place it on the tray") == ["grasp the cup", "place it on the tray"]
    assert extract_steps("") == []
    text = "Sure, here's how.\n\nStep 1: grab the apple\n- put it in the bowl\n\nLet me know if that helps!"
    assert extract_steps(text) == ["grab the apple", "put it in the bowl"]


def test_language_plan_request(image):
    client = Client(ReplayPlanner("Plan:\n1) open the drawer\n2) close the drawer"))
    steps, rec = request_language_plan(client, image, "tidy", "{I} {H}")
    assert steps == ["open the drawer", "close the drawer"] and rec.task == "language_plan"


@pytest.mark.parametrize(
    "step, prim",
    [
        ("grasp the red cup", Primitive.GRASP),
        ("Pick up the spoon", Primitive.GRASP),
        ("put it on the tray", Primitive.PLACE),
        ("Open the top drawer", Primitive.OPEN),
        ("shut the lid", Primitive.CLOSE),
        ("look around", None),
        ("take the cup and put it on the tray", Primitive.GRASP),
    ],
)
def test_classify_step(step, prim):
    assert classify_step(step) is prim


def test_compound_split_and_object_phrase():
    assert split_compound_step("pick up the cup and place it on the tray") == [
        "pick up the cup",
        "place it on the tray",
    ]
    assert split_compound_step("grasp the salt and pepper shaker") == ["grasp the salt and pepper shaker"]
    assert step_object_phrase("grasp the red cup", Primitive.GRASP) == "red cup"
    assert step_object_phrase("place it on the blue tray.", Primitive.PLACE) == "blue tray"


class StubGrounder(GroundingBackend):
    backend_id = "stub"
    model_id = "stub"

    def __init__(self, detections=(), point=None, track=None):
        self.detections = list(detections)
        self.pt = point
        self.trk = track or {}

    def _complete(self, request):
        if request.task == "detect":
            return as_json_response({"detections": self.detections})
        if request.task == "point":
            return as_json_response({"point": self.pt})
        return as_json_response({"track": self.trk})


def test_ground_language_step_examples(image):
    g = Client(StubGrounder([{"bbox": [0.1, 0.1, 0.3, 0.3], "score": 0.9}], point=[0.5, 0.5]))
    a = ground_language_step(g, image, "grasp the red cup")
    assert a.primitive is Primitive.GRASP and a.grounding == BBox(0.1, 0.1, 0.3, 0.3)
    a = ground_language_step(g, image, "put it on the tray")
    assert a.primitive is Primitive.PLACE and a.grounding == Point2D(0.5, 0.5)
    empty = Client(StubGrounder())
    a = ground_language_step(empty, image, "grasp the red cup")
    assert a.primitive is Primitive.GRASP and a.grounding is None
    assert ground_language_step(empty, image, "wave hello") is None


def test_ground_language_step_score_floor_and_top1(image):
    dets = [
        {"bbox": [0.0, 0.0, 0.1, 0.1], "score": 0.2},
        {"bbox": [0.2, 0.2, 0.3, 0.3], "score": 0.5},
        {"bbox": [0.4, 0.4, 0.5, 0.5], "score": 0.5},
    ]
    a = ground_language_step(Client(StubGrounder(dets)), image, "grab the cup")
    assert a.grounding == BBox(0.2, 0.2, 0.3, 0.3)
    a = ground_language_step(Client(StubGrounder(dets[:1])), image, "grab the cup")
    assert a.grounding is None


def test_track_offsets_become_absolute(image):
    g = Client(StubGrounder(track={"0": [0.1, 0.1, 0.2, 0.2], "2": [0.2, 0.2, 0.3, 0.3], "3": "junk"}))
    assert track(g, [image] * 4, "cup", first_frame=10) == {
        10: BBox(0.1, 0.1, 0.2, 0.2),
        12: BBox(0.2, 0.2, 0.3, 0.3),
    }


def test_som_single_proposal(image):
    b = BBox(0.25, 0.25, 0.75, 0.75)
    ov = render_som_overlay(image, [b])
    assert [(m.id, m.bbox) for m in ov.marks] == [(1, b)]
    # label background drawn at the mark center
    assert ov.image.getpixel((32, 24)) != (128, 128, 128)


def test_som_ordering_and_lookup(image):
    low = BBox(0.1, 0.6, 0.2, 0.7)
    top_right = BBox(0.6, 0.1, 0.7, 0.2)
    top_left = BBox(0.1, 0.1, 0.2, 0.2)
    ov = render_som_overlay(image, [low, top_right, top_left])
    assert [m.bbox for m in ov.marks] == [top_left, top_right, low]
    assert resolve_mark_reference(ov, "grasp mark 2") == top_right
    assert resolve_mark_reference(ov, "grasp [3]") == low
    assert resolve_mark_reference(ov, "grasp mark 9") is None
    a = ground_som_step(ov, "place it on mark 3")
    assert a.grounding == low.center
    assert ground_som_step(ov, "grasp the cup").grounding is None
    with pytest.raises(ValueError):
        render_som_overlay(image, [])


def test_make_planner_specs(tmp_path):
    p = make_planner("mock://perturb?p=0.25&seed=3&bbox_jitter=0.01")
    assert (p.p_correct, p.seed, p.jitter) == (0.25, 3, (0.01, 0.0))
    assert make_planner("mock://empty").complete(req()) == ""
    (tmp_path / "r.json").write_text(json.dumps({"*": "hello"}))
    assert make_planner(f"mock://replay?file={tmp_path / 'r.json'}").complete(req()) == "hello"
    with pytest.raises(ValueError):
        make_planner("https://example.invalid/v1/chat/completions")
    with pytest.raises(ValueError):
        make_planner("ftp://x")
    with pytest.raises(ValueError):
        make_grounder("mock://nope")


# -- HTTP backends against a local server ---------------------------------------


class _Handler(BaseHTTPRequestHandler):
    log = []
    status = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.log.append((self.path, body, self.headers.get("Authorization")))
        code = _Handler.status.pop(0) if _Handler.status else 200
        if code != 200:
            self.send_response(code)
            self.end_headers()
            return
        if self.path == "/v1/chat/completions":
            payload = {"choices": [{"message": {"content": 'grasp("cup", [1,1,5,5])'}}]}
        elif self.path == "/g/detect":
            payload = {"detections": [{"bbox": [0.1, 0.1, 0.2, 0.2], "score": 0.8, "label": body["text"]}]}
        elif self.path == "/g/point":
            payload = {"point": [0.4, 0.6]}
        else:
            payload = {"track": {str(i): [0.1, 0.1, 0.2, 0.2] for i in range(len(body["frames"]))}}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def server():
    _Handler.log.clear()
    _Handler.status.clear()
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


def test_chat_completion_planner(server, image, monkeypatch):
    monkeypatch.setenv("GROUNDPLAN_API_KEY", "secret")
    planner = ChatCompletionPlanner(server + "/v1/chat/completions", "some-model", {"temperature": 0.0})
    rec = Client(planner).call(BackendRequest("grounded_plan", "plan it", (image,), {"seed": 1}))
    assert rec.response == 'grasp("cup", [1,1,5,5])'
    path, body, auth = _Handler.log[-1]
    assert auth == "Bearer secret"
    assert body["model"] == "some-model" and body["temperature"] == 0.0 and body["seed"] == 1
    content = body["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "plan it"}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_retries_on_5xx_and_fails_fast_on_4xx(server):
    planner = ChatCompletionPlanner(server + "/v1/chat/completions", "m")
    _Handler.status.extend([503, 429])
    client = Client(planner, retry=NO_SLEEP)
    assert client.call(req()).response.startswith("grasp") and client.network_calls == 3
    _Handler.status.append(400)
    with pytest.raises(BackendError) as info:
        Client(planner, retry=NO_SLEEP).call(req("other"))
    assert not isinstance(info.value, TransportError) and info.value.request_hash


def test_http_grounder_protocol(server, image):
    g = Client(HttpGrounder(server + "/g"))
    a = ground_language_step(g, image, "grasp the mug")
    assert a.grounding == BBox(0.1, 0.1, 0.2, 0.2) and _Handler.log[-1][1]["text"] == "mug"
    assert ground_language_step(g, image, "place it in the sink").grounding == Point2D(0.4, 0.6)
    assert len(track(g, [image, image], "mug", first_frame=5)) == 2


def test_connection_refused_is_transport_error():
    planner = ChatCompletionPlanner("http://127.0.0.1:9/v1/chat/completions", "m", timeout=2)
    with pytest.raises(BackendError) as info:
        Client(planner, retry=RetryPolicy(max_retries=1, sleep=lambda s: None)).call(req())
    assert "giving up after 2 attempts" in str(info.value)
