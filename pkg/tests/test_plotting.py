from PIL import Image

from conftest import art, grasp, place_pt
from groundplan.model import BBox, PredictedPlan
from groundplan.plotting import COLORS, render_overlay, render_report_figure
from groundplan.runner import build_report
from groundplan.formats import write_jsonl
from groundplan.scoring import EpisodeScore

GREEN, RED = (0, 255, 0), (255, 0, 0)
W, H = 200, 100


def background(tmp_path):
    path = tmp_path / "scene.png"
    Image.new("RGB", (W, H), (40, 40, 40)).save(path)
    return str(path)


def test_grasp_box_and_place_cross(tmp_path):
    img = background(tmp_path)
    # grasp box pixels (40, 20)-(100, 80); place at pixel (150, 50)
    plan = PredictedPlan((grasp((0.2, 0.2, 0.5, 0.8)), place_pt(0.75, 0.5)))
    out = Image.open(render_overlay(img, plan, tmp_path / "o.png")).convert("RGB")
    for xy in [(40, 50), (99, 50), (70, 20), (70, 79)]:  # box edge midpoints
        assert out.getpixel(xy) == GREEN, xy
    assert out.getpixel((70, 50)) == (40, 40, 40)  # box interior untouched
    for xy in [(150, 50), (146, 46), (154, 54), (146, 54), (154, 46)]:  # cross center and arms
        assert out.getpixel(xy) == RED, xy
    assert out.getpixel((150, 40)) == (40, 40, 40)


def test_open_close_use_their_own_colors(tmp_path):
    img = background(tmp_path)
    plan = PredictedPlan((art("open", (0.1, 0.1, 0.3, 0.5)), art("close", (0.6, 0.5, 0.9, 0.9))))
    out = Image.open(render_overlay(img, plan, tmp_path / "o.png")).convert("RGB")
    assert out.getpixel((20, 30)) == COLORS[plan.actions[0].primitive]
    assert out.getpixel((120, 70)) == COLORS[plan.actions[1].primitive]
    assert len({GREEN, RED, *COLORS.values()}) == 4


def test_empty_plan_copies_image(tmp_path):
    img = background(tmp_path)
    out = render_overlay(img, PredictedPlan(), tmp_path / "copy.png")
    assert out.read_bytes() == open(img, "rb").read()


def test_overlay_deterministic(tmp_path):
    img = background(tmp_path)
    plan = PredictedPlan((grasp((0.2, 0.2, 0.5, 0.8)), place_pt(0.75, 0.5), art("open", (0.0, 0.0, 0.1, 0.1))))
    a = render_overlay(img, plan, tmp_path / "a.png").read_bytes()
    b = render_overlay(img, plan, tmp_path / "b.png").read_bytes()
    assert a == b


def test_unreadable_image_skipped(tmp_path, caplog):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    assert render_overlay(str(bad), PredictedPlan(), tmp_path / "x.png") is None
    assert "skipping overlay" in caplog.text


def test_report_figure_written(tmp_path):
    path = tmp_path / "r.jsonl"
    write_jsonl(path, [{"run": "r", "instruction_type": "explicit", "bucket": "short",
                        "score": EpisodeScore(True, 2, 2).to_json()}])
    out = render_report_figure(build_report([path]), tmp_path / "fig.png")
    again = render_report_figure(build_report([path]), tmp_path / "fig2.png")
    assert Image.open(out).size[0] > 0
    assert out.read_bytes() == again.read_bytes()
