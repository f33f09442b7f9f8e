import heapq
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toponav import simworld as sw
from toponav.simworld import AgentPose, NoiseModel, WorldSpec

from conftest import make_box_world, make_world_from_ascii


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def march_ray(world, x, y, bearing_deg, max_range=10.0, step=0.001):
    """Brute-force fine-step ray marcher: first sample inside an obstacle cell."""
    rad = math.radians(bearing_deg)
    dx, dy = math.cos(rad), math.sin(rad)
    t = np.arange(step, max_range + step, step)
    xs = x + t * dx
    ys = y + t * dy
    rs = (ys // world.cell_size).astype(int)
    cs = (xs // world.cell_size).astype(int)
    inside = (rs >= 0) & (rs < world.height) & (cs >= 0) & (cs < world.width)
    hit = np.zeros(len(t), dtype=bool)
    hit[inside] = world.occupancy[rs[inside], cs[inside]]
    idx = np.argmax(hit)
    if not hit[idx]:
        return max_range
    return float(t[idx])


def dijkstra_oracle(occupancy, cell_size, src, dst):
    """Plain heapq Dijkstra over free cells, 8-connected, no corner cutting."""
    h, w = occupancy.shape
    dist = {src: 0.0}
    pq = [(0.0, src)]
    diag = cell_size * math.sqrt(2.0)
    while pq:
        d, (r, c) = heapq.heappop(pq)
        if (r, c) == dst:
            return d
        if d > dist.get((r, c), math.inf):
            continue
        for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w) or occupancy[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (occupancy[r + dr, c] or occupancy[r, c + dc]):
                continue
            nd = d + (diag if dr != 0 and dc != 0 else cell_size)
            if nd < dist.get((nr, nc), math.inf):
                dist[(nr, nc)] = nd
                heapq.heappush(pq, (nd, (nr, nc)))
    return math.inf


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


def test_generated_world_invariants(seeded_world):
    w = seeded_world
    assert w.occupancy[0].all() and w.occupancy[-1].all()
    assert w.occupancy[:, 0].all() and w.occupancy[:, -1].all()
    free = ~w.occupancy
    assert free.sum() > 100
    assert (w.surface_color[w.occupancy] >= 0).all()
    assert (w.surface_color[w.occupancy] < w.color_count).all()
    assert (w.surface_color[free] == -1).all()


def test_generation_deterministic():
    a = sw.generate_world(7, WorldSpec(60, 60, rooms=4))
    b = sw.generate_world(7, WorldSpec(60, 60, rooms=4))
    assert a.equals(b)
    c = sw.generate_world(8, WorldSpec(60, 60, rooms=4))
    assert not a.equals(c)


def test_generation_rejects_tiny_spec():
    with pytest.raises(sw.WorldGenError):
        sw.generate_world(1, WorldSpec(12, 12))


def test_big_world_has_curved_pair(big_world):
    # some free-cell pair must need a path 1.2x longer than the straight line
    rng = np.random.default_rng(0)
    best = 0.0
    for _ in range(40):
        a = sw.sample_free_pose(big_world, rng)
        b = sw.sample_free_pose(big_world, rng)
        e = math.hypot(a.x - b.x, a.y - b.y)
        if e < 1.0:
            continue
        g = sw.geodesic_distance(big_world, a, b)
        if math.isfinite(g):
            best = max(best, g / e)
    assert best >= 1.2


def test_all_free_cells_connected(seeded_world):
    rs, cs = seeded_world.free_cells()
    src = (rs[0], cs[0])
    for i in range(1, len(rs), 97):
        d = dijkstra_oracle(seeded_world.occupancy, seeded_world.cell_size, src, (rs[i], cs[i]))
        assert math.isfinite(d)


# ---------------------------------------------------------------------------
# raycast
# ---------------------------------------------------------------------------


def test_center_ray_hits_flat_wall():
    w = make_box_world(width=100, height=40)
    # facing +x, wall at x = 9.9 (last interior col is 98); stand 2 m short of it
    pose = AgentPose(9.9 - 2.0, 2.0, 0.0)
    d = sw.raycast(w, pose)
    center = d.rays[len(d.rays) // 2]
    assert abs(center - 2.0) <= w.cell_size
    assert d.hit_color[len(d.rays) // 2] == 3


def test_ray_clips_at_max_range():
    w = make_box_world(width=300, height=300)
    pose = AgentPose(15.0, 15.0, 45.0)
    d = sw.raycast(w, pose)
    assert (d.rays == 10.0).any()
    assert (d.hit_color[d.rays == 10.0] == -1).all()
    assert (d.rays > 0).all() and (d.rays <= 10.0).all()


def test_raycast_errors_inside_obstacle(seeded_world):
    with pytest.raises(ValueError):
        sw.raycast(seeded_world, AgentPose(0.05, 0.05, 0.0))


def touches_obstacle(world, x, y, tol=1e-6):
    """True when (x, y) lies on or inside an obstacle cell (tangential contact)."""
    for px in (x - tol, x + tol):
        for py in (y - tol, y + tol):
            r, c = world.cell_of(px, py)
            if 0 <= r < world.height and 0 <= c < world.width and world.occupancy[r, c]:
                return True
    return False


def check_ray_against_marcher(world, pose, depth, bearing, step):
    """Depth must match the fine marcher, or be an exact earlier tangential graze
    whose chord is too short for the marcher's step to sample."""
    oracle = march_ray(world, pose.x, pose.y, bearing, step=step)
    if abs(depth - oracle) <= world.cell_size + step:
        return True
    if depth < oracle:
        rad = math.radians(bearing)
        return touches_obstacle(world, pose.x + depth * math.cos(rad), pose.y + depth * math.sin(rad))
    return False


def test_raycast_matches_fine_marcher(seeded_world):
    rng = np.random.default_rng(3)
    for _ in range(60):
        pose = sw.sample_free_pose(seeded_world, rng)
        img = sw.raycast(seeded_world, pose)
        bears = pose.heading + img.bearings()
        for j in range(0, len(bears), 7):
            assert check_ray_against_marcher(seeded_world, pose, img.rays[j], bears[j], 0.001)


def test_raycast_marcher_bulk_invariant(seeded_world, big_world):
    # 1000 random poses across two worlds, every 11th ray against the marcher
    rng = np.random.default_rng(11)
    for world, n in ((seeded_world, 500), (big_world, 500)):
        for _ in range(n):
            pose = sw.sample_free_pose(world, rng)
            img = sw.raycast(world, pose)
            bears = pose.heading + img.bearings()
            for j in range(0, len(bears), 11):
                assert check_ray_against_marcher(world, pose, img.rays[j], bears[j], 0.002)


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def test_descriptor_deterministic_and_normalized(seeded_world):
    rng = np.random.default_rng(5)
    pose = sw.sample_free_pose(seeded_world, rng)
    a = sw.render_descriptor(seeded_world, pose)
    b = sw.render_descriptor(seeded_world, pose)
    assert np.array_equal(a.values, b.values)
    assert abs(np.linalg.norm(a.values) - 1.0) <= 1e-6
    assert len(a.values) == sw.descriptor_dim(seeded_world.color_count)


def test_descriptor_separates_rooms():
    # two rooms with disjoint palettes behind a shared wall
    rows = []
    for r in range(40):
        if r in (0, 39):
            rows.append("#" * 81)
        else:
            rows.append("#" + "." * 38 + "##" + "." * 39 + "#")
    w = make_world_from_ascii(rows)
    col = w.surface_color.copy()
    col[:, :41][w.occupancy[:, :41]] = 2
    col[:, 41:][w.occupancy[:, 41:]] = 9
    w = sw.OccupancyWorld(w.occupancy, col, w.cell_size, w.color_count)
    left = sw.render_descriptor(w, AgentPose(2.0, 2.0, 30.0))
    right = sw.render_descriptor(w, AgentPose(6.0, 2.0, 30.0))
    near = sw.render_descriptor(w, AgentPose(2.25, 2.0, 30.0))
    assert left.cosine(right) < left.cosine(near)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def test_forward_noise_off(box_world):
    pose = AgentPose(4.0, 4.0, 0.0)
    new, collided = sw.step(box_world, pose, "forward")
    assert not collided
    assert new.x == pytest.approx(4.25, abs=1e-12)
    assert new.y == pytest.approx(4.0, abs=1e-12)


def test_rotations_noise_off(box_world):
    pose = AgentPose(4.0, 4.0, 350.0)
    left, _ = sw.step(box_world, pose, "rotate_left")
    assert left.heading == pytest.approx(5.0)
    right, _ = sw.step(box_world, pose, "rotate_right")
    assert right.heading == pytest.approx(335.0)
    stopped, collided = sw.step(box_world, pose, "stop")
    assert stopped == pose and not collided


def test_forward_blocked_by_wall():
    w = make_box_world(width=40, height=40)
    wall_x = 3.9  # obstacle column 39 starts at x = 3.9
    pose = AgentPose(wall_x - 0.10, 2.0, 0.0)
    new, collided = sw.step(w, pose, "forward")
    assert collided
    assert new.x - pose.x <= 0.10
    assert not w.blocked_at(new.x, new.y)


def test_step_rejects_unknown_action(box_world):
    with pytest.raises(ValueError):
        sw.step(box_world, AgentPose(4, 4), "teleport")


def test_observe_pose_identity_cases():
    pose = AgentPose(1.0, 2.0, 90.0)
    drift = sw.PoseDrift()
    assert sw.observe_pose(pose, NoiseModel(enabled=False), drift) == pose
    zero = NoiseModel(pose_translation_sigma=0.0, pose_rotation_sigma=0.0, enabled=True)
    rng = np.random.default_rng(0)
    for _ in range(10):
        drift.advance(zero, rng)
    assert sw.observe_pose(pose, zero, drift) == pose


def test_drift_bound_after_100_steps():
    noise = NoiseModel(enabled=True)
    rng = np.random.default_rng(123)
    drift = sw.PoseDrift()
    for _ in range(100):
        drift.advance(noise, rng)
    bound = 3.0 * noise.pose_translation_sigma * math.sqrt(100)
    assert abs(drift.dx) <= bound
    assert abs(drift.dy) <= bound
    assert abs(drift.dheading) <= 3.0 * noise.pose_rotation_sigma * math.sqrt(100)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_noise_truncation(seed):
    noise = NoiseModel(enabled=True)
    rng = np.random.default_rng(seed)
    s = noise.sample(rng, noise.actuation_translation_sigma)
    assert abs(s) <= 3.0 * noise.actuation_translation_sigma


# ---------------------------------------------------------------------------
# geodesic distance
# ---------------------------------------------------------------------------


def test_geodesic_straight_corridor():
    rows = ["#" * 60, "#" + "." * 58 + "#", "#" + "." * 58 + "#", "#" * 60]
    w = make_world_from_ascii(rows)
    a = AgentPose(0.55, 0.15, 0.0)
    b = AgentPose(3.55, 0.15, 0.0)
    assert sw.geodesic_distance(w, a, b) == pytest.approx(3.0, abs=w.cell_size)


def test_geodesic_identity(box_world):
    a = AgentPose(3.0, 3.0, 0.0)
    assert sw.geodesic_distance(box_world, a, a) == 0.0


def test_geodesic_l_corridor_matches_fine_oracle():
    # two 2 m legs meeting at a corner, corridor 0.5 m wide
    h = w = 26
    occ = np.ones((h, w), dtype=bool)
    occ[2:7, 2:22] = False    # horizontal leg
    occ[2:22, 17:22] = False  # vertical leg
    col = np.where(occ, 1, -1).astype(np.int16)
    world = sw.OccupancyWorld(occ, col, 0.1, 16)
    a = AgentPose(0.25, 0.45, 0.0)
    b = AgentPose(1.95, 2.15, 0.0)
    g = sw.geodesic_distance(world, a, b)
    assert g >= math.hypot(b.x - a.x, b.y - a.y) - world.cell_size
    # fine-resolution oracle: upsample 2x, Dijkstra at 0.05 m
    up = np.kron(occ, np.ones((2, 2), dtype=bool))
    src = (int(a.y // 0.05), int(a.x // 0.05))
    dst = (int(b.y // 0.05), int(b.x // 0.05))
    oracle = dijkstra_oracle(up, 0.05, src, dst)
    assert abs(g - oracle) <= 3 * world.cell_size


def test_geodesic_errors_on_obstacle_endpoint(box_world):
    a = AgentPose(3.0, 3.0, 0.0)
    b = AgentPose(0.05, 0.05, 0.0)  # inside the boundary wall
    with pytest.raises(ValueError):
        sw.geodesic_distance(box_world, a, b)


def test_geodesic_disconnected_is_inf():
    rows = ["#######", "#..#..#", "#..#..#", "#######"]
    w = make_world_from_ascii(rows)
    a = AgentPose(0.15, 0.15, 0.0)
    b = AgentPose(0.55, 0.15, 0.0)
    assert sw.geodesic_distance(w, a, b) == math.inf


def test_geodesic_triangle_inequality(seeded_world):
    rng = np.random.default_rng(17)
    for _ in range(15):
        a, b, c = (sw.sample_free_pose(seeded_world, rng) for _ in range(3))
        gab = sw.geodesic_distance(seeded_world, a, b)
        gbc = sw.geodesic_distance(seeded_world, b, c)
        gac = sw.geodesic_distance(seeded_world, a, c)
        assert gac <= gab + gbc + 2 * seeded_world.cell_size


def test_geodesic_lower_bound(seeded_world):
    rng = np.random.default_rng(23)
    for _ in range(30):
        a = sw.sample_free_pose(seeded_world, rng)
        b = sw.sample_free_pose(seeded_world, rng)
        g = sw.geodesic_distance(seeded_world, a, b)
        assert g >= math.hypot(a.x - b.x, a.y - b.y) - seeded_world.cell_size


# ---------------------------------------------------------------------------
# angles and file format
# ---------------------------------------------------------------------------


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_signed_range(a):
    v = sw.wrap_signed(a)
    assert -180.0 < v <= 180.0


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_heading_range(a):
    v = sw.wrap_heading(a)
    assert 0.0 <= v < 360.0


def test_world_file_round_trip(tmp_path, seeded_world):
    path = tmp_path / "w.bin"
    sw.save_world(seeded_world, path)
    again = sw.load_world(path)
    assert seeded_world.equals(again)


def test_world_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" * 10)
    with pytest.raises(ValueError):
        sw.load_world(path)
