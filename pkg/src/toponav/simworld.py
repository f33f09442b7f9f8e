"""Deterministic 2D occupancy-grid world: geometry, depth sensing, kinematics, geodesics.

Worlds are immutable after generation and safe to share between episode
runners; all per-agent state lives in SimAgent.
"""

from __future__ import annotations

import io
import math
import struct
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

WORLD_MAGIC = b"NRNSW1"
FREE_COLOR = 255  # color byte stored for free cells on disk


class WorldGenError(RuntimeError):
    """Raised when a world spec cannot be satisfied (too small, rooms don't fit)."""


def wrap_heading(deg):
    """Normalize an absolute heading to [0, 360)."""
    h = float(deg) % 360.0
    return 0.0 if h >= 360.0 else h  # float modulo can round up to 360.0


def wrap_signed(deg):
    """Normalize a relative angle to (-180, 180]."""
    v = 180.0 - (180.0 - float(deg)) % 360.0
    return v + 360.0 if v <= -180.0 else v


def bearing_deg(from_x, from_y, to_x, to_y):
    return math.degrees(math.atan2(to_y - from_y, to_x - from_x))


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_heading(self.heading))

    def position(self):
        return np.array([self.x, self.y])

    def offset_to(self, other: "AgentPose"):
        """Polar offset (rho meters, phi degrees relative to own heading)."""
        rho = math.hypot(other.x - self.x, other.y - self.y)
        phi = wrap_signed(bearing_deg(self.x, self.y, other.x, other.y) - self.heading)
        return rho, phi


@dataclass(frozen=True)
class NoiseModel:
    actuation_translation_sigma: float = 0.025
    actuation_rotation_sigma: float = 1.5
    pose_translation_sigma: float = 0.02
    pose_rotation_sigma: float = 1.0
    truncation: float = 3.0
    enabled: bool = False

    def sample(self, rng, sigma):
        if not self.enabled or sigma <= 0.0:
            return 0.0
        raw = rng.normal(0.0, sigma)
        bound = self.truncation * sigma
        return float(np.clip(raw, -bound, bound))


@dataclass(frozen=True)
class SensorConfig:
    rays: int = 120
    fov_deg: float = 120.0
    max_range: float = 10.0


@dataclass(frozen=True)
class DescriptorConfig:
    """Layout of the view descriptor: color/depth histogram + per-sector depth stats."""

    depth_bin_edges: tuple = (1.5, 4.0)  # bins: [0, e0), [e0, e1), [e1, max]
    sectors: int = 8

    def dim(self, color_count):
        return color_count * (len(self.depth_bin_edges) + 1) + 2 * self.sectors


@dataclass
class DepthImage:
    rays: np.ndarray        # meters, shape (R,)
    hit_color: np.ndarray   # int16 color id, -1 when max range reached
    max_range: float
    fov_deg: float

    def bearings(self):
        """Ray bearings relative to heading, degrees, ascending."""
        n = len(self.rays)
        if n == 1:
            return np.zeros(1)
        return np.linspace(-self.fov_deg / 2.0, self.fov_deg / 2.0, n)


@dataclass(frozen=True)
class ViewDescriptor:
    values: np.ndarray

    def cosine(self, other: "ViewDescriptor") -> float:
        return float(np.dot(self.values, other.values))


@dataclass(frozen=True)
class WorldSpec:
    width: int = 200
    height: int = 200
    cell_size: float = 0.1
    rooms: int = 8
    color_count: int = 16
    corridor_width: int | None = None
    room_min: int | None = None
    room_max: int | None = None
    color_block: int = 16
    place_tries: int = 4000


class OccupancyWorld:
    """Closed 2D grid world with per-obstacle-cell color ids.

    occupancy[r, c] is True for obstacle cells; surface_color[r, c] holds a
    color id in [0, color_count) for obstacles and -1 for free cells.
    """

    def __init__(self, occupancy, surface_color, cell_size, color_count, seed=0):
        self.occupancy = np.ascontiguousarray(occupancy, dtype=bool)
        self.surface_color = np.ascontiguousarray(surface_color, dtype=np.int16)
        self.cell_size = float(cell_size)
        self.color_count = int(color_count)
        self.seed = int(seed)
        self.height, self.width = self.occupancy.shape
        self._graph_lock = threading.Lock()
        self._free_graph = None
        self._validate()

    def _validate(self):
        if self.surface_color.shape != self.occupancy.shape:
            raise ValueError("occupancy/color shape mismatch")
        border = np.concatenate(
            [self.occupancy[0], self.occupancy[-1], self.occupancy[:, 0], self.occupancy[:, -1]]
        )
        if not border.all():
            raise ValueError("world boundary must be fully obstacle")
        free = ~self.occupancy
        if free.any():
            lonely = free & ~(
                np.roll(free, 1, 0) | np.roll(free, -1, 0) | np.roll(free, 1, 1) | np.roll(free, -1, 1)
            )
            if lonely.any():
                raise ValueError("isolated free cell present")
        if ((self.surface_color < 0) & self.occupancy).any():
            raise ValueError("obstacle cell without surface color")

    def cell_of(self, x, y):
        return int(y // self.cell_size), int(x // self.cell_size)

    def in_bounds(self, x, y):
        r, c = self.cell_of(x, y)
        return 0 <= r < self.height and 0 <= c < self.width

    def blocked_at(self, x, y):
        r, c = self.cell_of(x, y)
        if not (0 <= r < self.height and 0 <= c < self.width):
            return True
        return bool(self.occupancy[r, c])

    def cell_center(self, r, c):
        return (c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size

    def free_cells(self):
        rs, cs = np.nonzero(~self.occupancy)
        return rs, cs

    def equals(self, other: "OccupancyWorld") -> bool:
        return (
            self.cell_size == other.cell_size
            and self.color_count == other.color_count
            and self.seed == other.seed
            and np.array_equal(self.occupancy, other.occupancy)
            and np.array_equal(self.surface_color, other.surface_color)
        )

    # -- free-space graph (cached, built once, read-only afterwards) --

    def free_graph(self):
        with self._graph_lock:
            if self._free_graph is None:
                self._free_graph = _build_free_graph(self)
            return self._free_graph


def _build_free_graph(world):
    """CSR adjacency over all cells; edges only between free cells.

    8-connected, orthogonal cost cell_size, diagonal cost sqrt(2)*cell_size.
    Diagonal steps require both adjacent orthogonal cells free (no corner cutting).
    """
    free = ~world.occupancy
    h, w = free.shape
    cs = world.cell_size
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, wts = [], [], []

    def link(mask_a, idx_a, idx_b, cost):
        rows.append(idx_a[mask_a])
        cols.append(idx_b[mask_a])
        wts.append(np.full(int(mask_a.sum()), cost))

    right = free[:, :-1] & free[:, 1:]
    link(right, idx[:, :-1], idx[:, 1:], cs)
    down = free[:-1, :] & free[1:, :]
    link(down, idx[:-1, :], idx[1:, :], cs)
    diag = cs * math.sqrt(2.0)
    se = free[:-1, :-1] & free[1:, 1:] & free[:-1, 1:] & free[1:, :-1]
    link(se, idx[:-1, :-1], idx[1:, 1:], diag)
    sw = free[:-1, 1:] & free[1:, :-1] & free[:-1, :-1] & free[1:, 1:]
    link(sw, idx[:-1, 1:], idx[1:, :-1], diag)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    wts = np.concatenate(wts)
    n = h * w
    return coo_matrix((wts, (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# World generation
# ---------------------------------------------------------------------------


def _resolve_spec(spec: WorldSpec):
    side = min(spec.width, spec.height)
    room_min = spec.room_min if spec.room_min is not None else max(6, side // 8)
    room_max = spec.room_max if spec.room_max is not None else max(room_min + 2, side // 3)
    corridor = spec.corridor_width if spec.corridor_width is not None else int(np.clip(side // 12, 3, 20))
    return room_min, room_max, corridor


def generate_world(seed: int, spec: WorldSpec = WorldSpec()) -> OccupancyWorld:
    """Procedurally carve rooms joined by L-shaped corridors into a solid grid."""
    if spec.width < 20 or spec.height < 20:
        raise WorldGenError(f"world spec {spec.width}x{spec.height} below 20x20 minimum")
    if spec.rooms < 2:
        raise WorldGenError("need at least two rooms")
    rng = np.random.default_rng(seed)
    room_min, room_max, corridor = _resolve_spec(spec)
    h, w = spec.height, spec.width
    occ = np.ones((h, w), dtype=bool)

    rooms = []
    for _ in range(spec.place_tries):
        if len(rooms) >= spec.rooms:
            break
        rh = int(rng.integers(room_min, room_max + 1))
        rw = int(rng.integers(room_min, room_max + 1))
        if rh > h - 4 or rw > w - 4:
            continue
        r0 = int(rng.integers(2, h - rh - 1))
        c0 = int(rng.integers(2, w - rw - 1))
        cand = (r0, c0, r0 + rh, c0 + rw)
        # keep a 2-cell wall between rooms so corridors stay meaningful
        if any(not (cand[2] + 2 <= o[0] or o[2] + 2 <= cand[0] or cand[3] + 2 <= o[1] or o[3] + 2 <= cand[1]) for o in rooms):
            continue
        rooms.append(cand)
    if len(rooms) < 2:
        raise WorldGenError(f"could not place two rooms in {w}x{h} with room_min={room_min}")

    for r0, c0, r1, c1 in rooms:
        occ[r0:r1, c0:c1] = False

    centers = [((r0 + r1) // 2, (c0 + c1) // 2) for r0, c0, r1, c1 in rooms]

    def carve_h(r, ca, cb):
        lo, hi = sorted((ca, cb))
        half = corridor // 2
        occ[max(1, r - half):min(h - 1, r + corridor - half), max(1, lo):min(w - 1, hi + 1)] = False

    def carve_v(c, ra, rb):
        lo, hi = sorted((ra, rb))
        half = corridor // 2
        occ[max(1, lo):min(h - 1, hi + 1), max(1, c - half):min(w - 1, c + corridor - half)] = False

    for i in range(1, len(centers)):
        ri, ci = centers[i]
        j = min(range(i), key=lambda k: abs(centers[k][0] - ri) + abs(centers[k][1] - ci))
        rj, cj = centers[j]
        if rng.random() < 0.5:
            carve_h(ri, ci, cj)
            carve_v(cj, ri, rj)
        else:
            carve_v(ci, ri, rj)
            carve_h(rj, ci, cj)

    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True

    # keep only the component containing the first room; stray pockets become walls
    labels, n_comp = ndimage.label(~occ)
    keep = labels[centers[0]]
    if keep == 0:  # pragma: no cover - first room center is always free
        raise WorldGenError("first room center not free")
    occ |= labels != keep

    blocks = rng.integers(0, spec.color_count, (h // spec.color_block + 1, w // spec.color_block + 1))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    color = np.where(occ, blocks[rr // spec.color_block, cc // spec.color_block], -1).astype(np.int16)

    return OccupancyWorld(occ, color, spec.cell_size, spec.color_count, seed=seed)


# ---------------------------------------------------------------------------
# Depth sensing and view descriptors
# ---------------------------------------------------------------------------


def raycast(world: OccupancyWorld, pose: AgentPose, sensor: SensorConfig = SensorConfig()) -> DepthImage:
    """Exact grid-traversal raycast (Amanatides-Woo DDA), vectorized over rays."""
    if world.blocked_at(pose.x, pose.y):
        raise ValueError(f"raycast pose ({pose.x:.3f},{pose.y:.3f}) inside obstacle")
    cs = world.cell_size
    n = sensor.rays
    bear = np.radians(pose.heading + np.linspace(-sensor.fov_deg / 2.0, sensor.fov_deg / 2.0, n))
    dx, dy = np.cos(bear), np.sin(bear)

    r0, c0 = world.cell_of(pose.x, pose.y)
    cr = np.full(n, r0, dtype=np.int64)
    cc = np.full(n, c0, dtype=np.int64)
    step_c = np.where(dx >= 0, 1, -1)
    step_r = np.where(dy >= 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_dx = np.where(dx != 0.0, 1.0 / dx, np.inf)
        inv_dy = np.where(dy != 0.0, 1.0 / dy, np.inf)
        tmax_x = np.where(np.isfinite(inv_dx),
                          (np.where(dx >= 0, (cc + 1) * cs, cc * cs) - pose.x) * inv_dx, np.inf)
        tmax_y = np.where(np.isfinite(inv_dy),
                          (np.where(dy >= 0, (cr + 1) * cs, cr * cs) - pose.y) * inv_dy, np.inf)
    tdx = np.abs(cs * inv_dx)
    tdy = np.abs(cs * inv_dy)

    depth = np.full(n, sensor.max_range)
    color = np.full(n, -1, dtype=np.int16)
    occ = world.occupancy
    # live-ray compaction: finished rays drop out of the working arrays
    idx = np.arange(n)
    for _ in range(2 * (world.width + world.height) + 4):
        if idx.size == 0:
            break
        use_x = tmax_x < tmax_y
        t_enter = np.where(use_x, tmax_x, tmax_y)
        np.add(cc, step_c, out=cc, where=use_x)
        np.add(cr, step_r, out=cr, where=~use_x)
        np.add(tmax_x, tdx, out=tmax_x, where=use_x)
        np.add(tmax_y, tdy, out=tmax_y, where=~use_x)
        out = t_enter >= sensor.max_range
        hit = ~out & occ[cr, cc]
        if hit.any():
            depth[idx[hit]] = np.maximum(t_enter[hit], 1e-9)
            color[idx[hit]] = world.surface_color[cr[hit], cc[hit]]
        done = out | hit
        if done.any():
            live = ~done
            idx, cr, cc = idx[live], cr[live], cc[live]
            tmax_x, tmax_y = tmax_x[live], tmax_y[live]
            tdx, tdy, step_c, step_r = tdx[live], tdy[live], step_c[live], step_r[live]
    return DepthImage(rays=depth, hit_color=color, max_range=sensor.max_range, fov_deg=sensor.fov_deg)


def render_descriptor(
    world: OccupancyWorld,
    pose: AgentPose,
    sensor: SensorConfig = SensorConfig(),
    cfg: DescriptorConfig = DescriptorConfig(),
) -> ViewDescriptor:
    """Deterministic stand-in for image features, computed from the depth image."""
    depth = raycast(world, pose, sensor)
    return descriptor_from_depth(depth, world.color_count, cfg)


def descriptor_from_depth(depth: DepthImage, color_count: int, cfg: DescriptorConfig = DescriptorConfig()) -> ViewDescriptor:
    n = len(depth.rays)
    edges = np.array(cfg.depth_bin_edges)
    n_bins = len(edges) + 1
    hist = np.zeros((color_count, n_bins))
    hit = depth.hit_color >= 0
    if hit.any():
        bins = np.searchsorted(edges, depth.rays[hit], side="right")
        np.add.at(hist, (depth.hit_color[hit], bins), 1.0)
    hist = hist.ravel() / n

    sector = np.array_split(depth.rays, cfg.sectors)
    means = np.array([s.mean() for s in sector]) / depth.max_range
    mins = np.array([s.min() for s in sector]) / depth.max_range

    vec = np.concatenate([hist, means, mins])
    norm = np.linalg.norm(vec)
    if norm <= 0.0:  # pragma: no cover - depth is always positive
        raise ValueError("degenerate all-zero descriptor")
    return ViewDescriptor(values=vec / norm)


def descriptor_dim(color_count: int, cfg: DescriptorConfig = DescriptorConfig()) -> int:
    return cfg.dim(color_count)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

FORWARD_STEP = 0.25
TURN_STEP = 15.0
ACTIONS = ("forward", "rotate_left", "rotate_right", "stop")
CONTACT_BACKOFF = 1e-3  # meters kept between agent and the first obstacle cell


def _single_ray_hit(world, x, y, heading_deg):
    """Distance to the first obstacle cell along one bearing (DDA, unbounded)."""
    cs = world.cell_size
    rad = math.radians(heading_deg)
    dx, dy = math.cos(rad), math.sin(rad)
    r, c = world.cell_of(x, y)
    step_c = 1 if dx >= 0 else -1
    step_r = 1 if dy >= 0 else -1
    tmax_x = ((c + (dx >= 0)) * cs - x) / dx if dx != 0.0 else math.inf
    tmax_y = ((r + (dy >= 0)) * cs - y) / dy if dy != 0.0 else math.inf
    tdx = abs(cs / dx) if dx != 0.0 else math.inf
    tdy = abs(cs / dy) if dy != 0.0 else math.inf
    occ = world.occupancy
    for _ in range(2 * (world.width + world.height)):
        if tmax_x < tmax_y:
            t, c, tmax_x = tmax_x, c + step_c, tmax_x + tdx
        else:
            t, r, tmax_y = tmax_y, r + step_r, tmax_y + tdy
        if not (0 <= r < world.height and 0 <= c < world.width):
            return math.inf
        if occ[r, c]:
            return t
    return math.inf  # pragma: no cover


def step(world, pose: AgentPose, action: str, noise: NoiseModel = NoiseModel(), rng=None):
    """Apply one discrete action; returns (new_pose, collided).

    Forward motion stops at first obstacle contact, no wall sliding.
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if action == "stop":
        return pose, False
    if action in ("rotate_left", "rotate_right"):
        sign = 1.0 if action == "rotate_left" else -1.0
        delta = sign * TURN_STEP + noise.sample(rng, noise.actuation_rotation_sigma)
        return replace(pose, heading=wrap_heading(pose.heading + delta)), False

    dist = max(0.0, FORWARD_STEP + noise.sample(rng, noise.actuation_translation_sigma))
    hit = _single_ray_hit(world, pose.x, pose.y, pose.heading)
    collided = hit <= dist
    travel = min(dist, max(0.0, hit - CONTACT_BACKOFF))
    rad = math.radians(pose.heading)
    new = replace(pose, x=pose.x + travel * math.cos(rad), y=pose.y + travel * math.sin(rad))
    return new, bool(collided)


@dataclass
class PoseDrift:
    """Accumulated pose-estimation error; grows by one truncated sample per step."""

    dx: float = 0.0
    dy: float = 0.0
    dheading: float = 0.0

    def advance(self, noise: NoiseModel, rng):
        self.dx += noise.sample(rng, noise.pose_translation_sigma)
        self.dy += noise.sample(rng, noise.pose_translation_sigma)
        self.dheading += noise.sample(rng, noise.pose_rotation_sigma)


def observe_pose(true_pose: AgentPose, noise: NoiseModel, drift: PoseDrift) -> AgentPose:
    """Pose estimate: exact when noise is disabled, otherwise true pose plus drift."""
    if not noise.enabled:
        return true_pose
    return AgentPose(true_pose.x + drift.dx, true_pose.y + drift.dy, true_pose.heading + drift.dheading)


class SimAgent:
    """Per-episode simulator handle: true pose, drift, and action bookkeeping."""

    def __init__(self, world, pose: AgentPose, noise: NoiseModel = NoiseModel(), rng=None,
                 sensor: SensorConfig = SensorConfig(), desc_cfg: DescriptorConfig = DescriptorConfig()):
        if world.blocked_at(pose.x, pose.y):
            raise ValueError("start pose inside obstacle")
        self.world = world
        self.noise = noise
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.sensor = sensor
        self.desc_cfg = desc_cfg
        self.true_pose = pose
        self.drift = PoseDrift()
        self.actions_taken = 0
        self.collisions = 0
        self.path_length = 0.0
        self.hook = None  # optional per-action callback (action, true_pose, est_pose)

    def observe(self) -> AgentPose:
        return observe_pose(self.true_pose, self.noise, self.drift)

    def depth(self) -> DepthImage:
        return raycast(self.world, self.true_pose, self.sensor)

    def descriptor(self) -> ViewDescriptor:
        return descriptor_from_depth(self.depth(), self.world.color_count, self.desc_cfg)

    def execute(self, action: str) -> bool:
        before = self.true_pose
        self.true_pose, collided = step(self.world, before, action, self.noise, self.rng)
        self.drift.advance(self.noise, self.rng)
        self.actions_taken += 1
        self.collisions += int(collided)
        self.path_length += math.hypot(self.true_pose.x - before.x, self.true_pose.y - before.y)
        if self.hook is not None:
            self.hook(action, self.true_pose, self.observe())
        return collided


# ---------------------------------------------------------------------------
# Geodesic oracle
# ---------------------------------------------------------------------------


def geodesic_field(world: OccupancyWorld, pose: AgentPose) -> np.ndarray:
    """Shortest-path meters from `pose` to every cell (inf where unreachable)."""
    r, c = world.cell_of(pose.x, pose.y)
    if world.occupancy[r, c]:
        raise ValueError("geodesic source inside obstacle")
    dist = _csgraph_dijkstra(world.free_graph(), directed=False, indices=r * world.width + c)
    return dist.reshape(world.height, world.width)


def geodesic_distance(world: OccupancyWorld, a: AgentPose, b: AgentPose) -> float:
    """Obstacle-respecting shortest-path length; inf when disconnected."""
    ra, ca = world.cell_of(a.x, a.y)
    rb, cb = world.cell_of(b.x, b.y)
    for (r, c), name in (((ra, ca), "a"), ((rb, cb), "b")):
        if not (0 <= r < world.height and 0 <= c < world.width) or world.occupancy[r, c]:
            raise ValueError(f"geodesic endpoint {name} inside obstacle")
    if (ra, ca) == (rb, cb):
        return math.hypot(a.x - b.x, a.y - b.y)
    return float(geodesic_field(world, a)[rb, cb])


def clear_cells(world: OccupancyWorld, margin: int = 2):
    """Free cells whose `margin`-neighborhood is also free (spawn-safe positions)."""
    key = f"_clear_cells_{margin}"
    cached = getattr(world, key, None)
    if cached is None:
        free = ~world.occupancy
        ok = free.copy()
        for dr in range(-margin, margin + 1):
            for dc in range(-margin, margin + 1):
                ok &= np.roll(np.roll(free, dr, axis=0), dc, axis=1)
        cached = np.nonzero(ok)
        setattr(world, key, cached)
    return cached


def sample_free_pose(world: OccupancyWorld, rng, margin: int = 2) -> AgentPose:
    """Uniform pose over wall-clear free space; heading uniform.

    The margin keeps spawns an agent-body away from walls, like navmesh
    sampling; pass margin=0 for raw free-cell sampling.
    """
    if margin > 0:
        rs, cs = clear_cells(world, margin)
        if len(rs) == 0:
            rs, cs = world.free_cells()
    else:
        rs, cs = world.free_cells()
    i = int(rng.integers(len(rs)))
    x = (cs[i] + rng.uniform(0.25, 0.75)) * world.cell_size
    y = (rs[i] + rng.uniform(0.25, 0.75)) * world.cell_size
    return AgentPose(x, y, float(rng.uniform(0.0, 360.0)))


def line_of_sight(world: OccupancyWorld, a: AgentPose, b: AgentPose) -> bool:
    """True when the straight segment from a to b crosses no obstacle cell."""
    d = math.hypot(b.x - a.x, b.y - a.y)
    if d < 1e-9:
        return True
    hit = _single_ray_hit(world, a.x, a.y, bearing_deg(a.x, a.y, b.x, b.y))
    return hit > d


# ---------------------------------------------------------------------------
# World file format (magic NRNSW1), little-endian:
#   6s magic | u32 width | u32 height | f64 cell_size | u32 color_count | u64 seed
#   height*width occupancy bytes (0 free, 1 obstacle), row-major
#   height*width color bytes (255 for free cells), row-major
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<6sIIdIQ")


def save_world(world: OccupancyWorld, path) -> None:
    with open(path, "wb") as fh:
        fh.write(world_to_bytes(world))


def world_to_bytes(world: OccupancyWorld) -> bytes:
    if world.color_count > FREE_COLOR - 1:
        raise ValueError("color_count too large for byte encoding")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(WORLD_MAGIC, world.width, world.height, world.cell_size,
                           world.color_count, world.seed))
    buf.write(world.occupancy.astype(np.uint8).tobytes())
    color = np.where(world.occupancy, world.surface_color, FREE_COLOR).astype(np.uint8)
    buf.write(color.tobytes())
    return buf.getvalue()


def load_world(path) -> OccupancyWorld:
    with open(path, "rb") as fh:
        data = fh.read()
    return world_from_bytes(data)


def world_from_bytes(data: bytes) -> OccupancyWorld:
    if len(data) < _HEADER.size or data[:6] != WORLD_MAGIC:
        raise ValueError("not a world file (bad magic)")
    magic, width, height, cell_size, color_count, seed = _HEADER.unpack_from(data)
    n = width * height
    expected = _HEADER.size + 2 * n
    if len(data) != expected:
        raise ValueError(f"world file truncated: {len(data)} bytes, expected {expected}")
    occ = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size).reshape(height, width).astype(bool)
    color_raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size + n).reshape(height, width)
    color = np.where(occ, color_raw.astype(np.int16), -1)
    return OccupancyWorld(occ, color, cell_size, color_count, seed=seed)
