import pytest
from hypothesis import strategies as st

from groundplan.model import (
    Articulation,
    BBox,
    GroundedAction,
    GtBlock,
    GtPlan,
    Manipulation,
    Point2D,
    Primitive,
)


def box(*c):
    return BBox(*c)


def grasp(b, name="cup"):
    return GroundedAction(Primitive.GRASP, name, BBox(*b) if not isinstance(b, BBox) else b)


def place_pt(x, y, name="tray"):
    return GroundedAction(Primitive.PLACE, name, Point2D(x, y))


def place_region(b, name="tray"):
    return GroundedAction(Primitive.PLACE, name, BBox(*b) if not isinstance(b, BBox) else b)


def art(prim, b, name="drawer"):
    return GroundedAction(Primitive(prim), name, BBox(*b) if not isinstance(b, BBox) else b)


def manip_gt(obj, region):
    return Manipulation(grasp(obj), place_region(region))


def manip_pred(obj, pt):
    return Manipulation(grasp(obj), place_pt(*pt))


def seq_plan(*units):
    return GtPlan.sequential(units)


@st.composite
def boxes(draw, min_size=0.01):
    x0 = draw(st.floats(0.0, 1.0 - min_size))
    y0 = draw(st.floats(0.0, 1.0 - min_size))
    x1 = draw(st.floats(x0 + min_size, 1.0))
    y1 = draw(st.floats(y0 + min_size, 1.0))
    return BBox(x0, y0, x1, y1)


@pytest.fixture
def tmp_images(tmp_path):
    return tmp_path


# -- acceptance summary ------------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_collection_finish(session):
    for item in session.items:
        for mark in item.iter_markers("criterion"):
            n, title = mark.args
            _criteria.setdefault(n, {"title": title, "outcomes": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n, title in getattr(report, "criterion", []):
        _criteria[n]["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criterion = [m.args for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        ok = bool(c["outcomes"]) and all(o == "passed" for o in c["outcomes"])
        status = "PASS" if ok else ("NOT RUN" if not c["outcomes"] else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {c['title']}")
