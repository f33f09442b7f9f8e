import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toponav import evaluation as ev
from toponav import simworld as sw
from toponav.simworld import AgentPose

from conftest import make_box_world, make_world_from_ascii


@dataclass
class FakeResult:
    success: bool
    agent_path_length: float
    shortest_path_length: float


@dataclass
class FakeItem:
    episode_id: int
    result: object
    error: str = None


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def test_straight_easy_corridor():
    w = make_box_world(width=200, height=40)
    a = AgentPose(3.0, 2.0, 0.0)
    b = AgentPose(5.0, 2.0, 10.0)
    assert ev.classify_episode(w, a, b) == ("straight", "easy")


def test_l_path_is_curved_medium():
    # legs 2 m each around a blocking wall: geodesic ~4, euclid ~2.83
    rows = []
    for r in range(60):
        if r in (0, 59):
            rows.append("#" * 60)
        elif 20 <= r < 58 and True:
            rows.append("#" + "." * 20 + "#" * 20 + "." * 18 + "#")
        else:
            rows.append("#" + "." * 58 + "#")
    w = make_world_from_ascii(rows)
    a = AgentPose(1.9, 3.5, 0.0)
    b = AgentPose(4.3, 3.5, 0.0)
    got = ev.classify_episode(w, a, b)
    assert got is not None
    path_type, difficulty = got
    geo = sw.geodesic_distance(w, a, b)
    euc = math.hypot(b.x - a.x, b.y - a.y)
    assert geo / euc >= 1.2
    assert path_type == "curved"
    assert difficulty == ("medium" if 3.0 <= geo < 5.0 else difficulty)


def test_too_short_rejected(box_world):
    a = AgentPose(3.0, 3.0, 0.0)
    b = AgentPose(3.5, 3.0, 0.0)
    assert ev.classify_episode(box_world, a, b) is None


def test_too_long_rejected():
    w = make_box_world(width=300, height=40)
    a = AgentPose(2.0, 2.0, 0.0)
    b = AgentPose(25.0, 2.0, 0.0)
    assert ev.classify_episode(w, a, b) is None


def test_disconnected_rejected():
    rows = ["#" * 30,
            "#" + "." * 12 + "##" + "." * 14 + "#",
            "#" + "." * 12 + "##" + "." * 14 + "#",
            "#" * 30]
    w = make_world_from_ascii(rows)
    a = AgentPose(0.5, 0.2, 0.0)
    b = AgentPose(2.5, 0.2, 0.0)
    assert ev.classify_episode(w, a, b) is None


def test_heading_difference_flips_type(box_world):
    a = AgentPose(3.0, 3.0, 0.0)
    b = AgentPose(5.0, 3.0, 0.0)        # same heading: straight
    c = AgentPose(5.0, 3.0, 90.0)       # rotated goal: curved
    assert ev.classify_episode(box_world, a, b) == ("straight", "easy")
    assert ev.classify_episode(box_world, a, c) == ("curved", "easy")


def test_difficulty_bin_edges():
    w = make_box_world(width=300, height=60)
    y = 3.0
    for dist, expect in ((2.0, "easy"), (3.5, "medium"), (7.0, "hard")):
        got = ev.classify_episode(w, AgentPose(2.0, y, 0.0), AgentPose(2.0 + dist, y, 0.0))
        assert got == ("straight", expect)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def gen_world():
    return sw.generate_world(60, sw.WorldSpec(200, 200, rooms=6, room_min=45,
                                              room_max=70, corridor_width=20))


def test_generate_episodes_fills_cells(gen_world):
    specs, warning = ev.generate_episodes(gen_world, 5, np.random.default_rng(0))
    assert not warning
    assert len(specs) == 30
    from collections import Counter
    counts = Counter((s.path_type, s.difficulty) for s in specs)
    assert all(v == 5 for v in counts.values())


def test_generated_labels_rederive_exactly(gen_world):
    specs, _ = ev.generate_episodes(gen_world, 4, np.random.default_rng(1))
    for s in specs:
        assert ev.classify_episode(gen_world, s.start, s.goal) == (s.path_type, s.difficulty)
        assert sw.geodesic_distance(gen_world, s.start, s.goal) == pytest.approx(s.geodesic, abs=1e-9)


def test_generation_deterministic(gen_world):
    a, _ = ev.generate_episodes(gen_world, 3, np.random.default_rng(7))
    b, _ = ev.generate_episodes(gen_world, 3, np.random.default_rng(7))
    assert a == b


def test_small_open_room_underfills_with_warning():
    # a 3 m square room cannot produce any hard (5-10 m) episodes
    w = make_box_world(width=32, height=32)
    specs, warning = ev.generate_episodes(w, 4, np.random.default_rng(2), max_goals=40)
    assert warning
    assert not [s for s in specs if s.difficulty == "hard"]
    straight_easy = [s for s in specs if (s.path_type, s.difficulty) == ("straight", "easy")]
    assert len(straight_easy) == 4


# ---------------------------------------------------------------------------
# SPL and reports
# ---------------------------------------------------------------------------


def test_spl_terms():
    assert ev.spl([FakeResult(True, 5.0, 5.0)]) == pytest.approx(1.0)
    assert ev.spl([FakeResult(False, 5.0, 5.0)]) == 0.0
    assert ev.spl([FakeResult(True, 10.0, 5.0)]) == pytest.approx(0.5)
    assert ev.spl([FakeResult(True, 0.0, 0.0)]) == pytest.approx(1.0)  # degenerate term = S


@given(st.lists(st.tuples(st.booleans(), st.floats(0.1, 50), st.floats(0.1, 50)), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_spl_never_exceeds_success(data):
    results = [FakeResult(s, p, l) for s, p, l in data]
    assert ev.spl(results) <= ev.success_rate(results) + 1e-12


def test_report_cells_and_render():
    @dataclass
    class FakeSpec:
        world_id: int
        path_type: str
        difficulty: str

    specs = [FakeSpec(0, "straight", "easy"), FakeSpec(0, "straight", "easy"),
             FakeSpec(0, "curved", "hard")]
    items = [FakeItem(0, FakeResult(True, 2.0, 2.0)),
             FakeItem(1, FakeResult(False, 3.0, 2.0)),
             FakeItem(2, FakeResult(True, 6.0, 5.0))]
    rep = ev.build_report("test", specs, items)
    cell = rep.cells[("straight", "easy")]
    assert cell.count == 2
    assert cell.success == pytest.approx(50.0)
    assert cell.spl == pytest.approx(50.0)
    for (p, d), c in rep.cells.items():
        assert c.spl <= c.success + 1e-9
    csv = ev.render_report_csv([rep])
    assert "straight,easy,2,50.00,50.00" in csv
    text = ev.render_report_text([rep])
    assert "straight/easy" in text


def test_results_csv_round_trip():
    @dataclass
    class FakeSpec:
        world_id: int
        path_type: str
        difficulty: str

    @dataclass
    class FullResult:
        success: bool
        agent_path_length: float
        shortest_path_length: float
        steps: int
        stop_reason: str

    specs = [FakeSpec(0, "straight", "easy"), FakeSpec(1, "curved", "medium")]
    items = [FakeItem(0, FullResult(True, 2.5, 2.0, 14, "stopped_near_goal")),
             FakeItem(1, FullResult(False, 9.0, 4.0, 500, "budget_exhausted"))]
    text = ev.render_results_csv(specs, items)
    rep = ev.report_from_results_csv(text)
    assert rep.cells[("straight", "easy")].success == pytest.approx(100.0)
    assert rep.cells[("curved", "medium")].success == pytest.approx(0.0)


def test_empty_results_rejected():
    with pytest.raises(ValueError):
        ev.report_from_results_csv("")
    with pytest.raises(ValueError):
        ev.report_from_results_csv(ev.RESULTS_HEADER + "\n")
