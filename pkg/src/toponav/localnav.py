"""Heuristic point-goal navigation: transient egocentric metric map + grid planning.

A LocalMetricMap lives only for one sub-goal attempt and is anchored at the
pose estimate where the sub-goal was issued; planning and arrival checks all
happen in estimate-frame coordinates.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .simworld import AgentPose, DepthImage, bearing_deg, wrap_signed

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


@dataclass(frozen=True)
class LocalNavConfig:
    extent: float = 10.0          # map side length, meters
    resolution: float = 0.1
    arrival_tol: float = 0.25
    agent_radius: float = 0.15    # occupied cells are inflated by this much
    unknown_cost: float = 3.0     # traversal multiplier for unseen cells
    replan_every: int = 5
    heading_tol: float = 7.5      # degrees; rotate when more misaligned than this
    forward_step: float = 0.25


@dataclass
class LocalNavResult:
    reached: bool
    actions_taken: int
    final_pose: AgentPose
    collision_count: int


class LocalMetricMap:
    """Square occupancy grid around an anchor pose; occupied beats free on conflict."""

    def __init__(self, anchor: AgentPose, extent: float = 10.0, resolution: float = 0.1):
        self.anchor = anchor
        self.extent = extent
        self.resolution = resolution
        self.size = int(round(extent / resolution))
        self.origin_x = anchor.x - extent / 2.0
        self.origin_y = anchor.y - extent / 2.0
        self.grid = np.full((self.size, self.size), UNKNOWN, dtype=np.uint8)

    def cell_of(self, x, y):
        c = int((x - self.origin_x) // self.resolution)
        r = int((y - self.origin_y) // self.resolution)
        return r, c

    def in_grid(self, r, c):
        return 0 <= r < self.size and 0 <= c < self.size

    def contains(self, x, y):
        return self.in_grid(*self.cell_of(x, y))

    def center_of(self, r, c):
        return (self.origin_x + (c + 0.5) * self.resolution,
                self.origin_y + (r + 0.5) * self.resolution)

    def mark_free(self, rs, cs):
        ok = (rs >= 0) & (rs < self.size) & (cs >= 0) & (cs < self.size)
        rs, cs = rs[ok], cs[ok]
        keep = self.grid[rs, cs] != OCCUPIED
        self.grid[rs[keep], cs[keep]] = FREE

    def mark_occupied(self, rs, cs):
        ok = (rs >= 0) & (rs < self.size) & (cs >= 0) & (cs < self.size)
        self.grid[rs[ok], cs[ok]] = OCCUPIED

    def inflated_blocked(self, radius: float):
        """Occupied mask dilated by the agent radius."""
        occ = self.grid == OCCUPIED
        cells = int(math.ceil(radius / self.resolution - 1e-9))
        out = occ.copy()
        for dr in range(-cells, cells + 1):
            for dc in range(-cells, cells + 1):
                if dr == 0 and dc == 0:
                    continue
                if math.hypot(dr, dc) * self.resolution > radius + 1e-9:
                    continue
                shifted = np.zeros_like(occ)
                rs = slice(max(0, dr), min(self.size, self.size + dr))
                rd = slice(max(0, -dr), min(self.size, self.size - dr))
                cs = slice(max(0, dc), min(self.size, self.size + dc))
                cd = slice(max(0, -dc), min(self.size, self.size - dc))
                shifted[rd, cd] = occ[rs, cs]
                out |= shifted
        return out


def integrate_depth(local_map: LocalMetricMap, est_pose: AgentPose, depth: DepthImage):
    """Carve free space along each ray, then stamp hit cells occupied."""
    res = local_map.resolution
    bear = np.radians(est_pose.heading + depth.bearings())
    max_n = max(int(depth.rays.max() / res) + 1, 1)
    steps = (np.arange(max_n) + 0.5) * res  # mid-cell samples avoid boundary rounding
    ts = np.minimum(steps[None, :], (depth.rays - res / 2.0)[:, None])
    ts = np.maximum(ts, 0.0)
    xs = est_pose.x + ts * np.cos(bear)[:, None]
    ys = est_pose.y + ts * np.sin(bear)[:, None]
    cs = ((xs - local_map.origin_x) // res).astype(np.int32).ravel()
    rs = ((ys - local_map.origin_y) // res).astype(np.int32).ravel()
    local_map.mark_free(rs, cs)

    hit = depth.hit_color >= 0
    if hit.any():
        # hits land exactly on cell boundaries; nudge into the obstacle cell
        reach = depth.rays[hit] + res * 0.25
        hx = est_pose.x + reach * np.cos(bear[hit])
        hy = est_pose.y + reach * np.sin(bear[hit])
        local_map.mark_occupied(((hy - local_map.origin_y) // res).astype(int),
                                ((hx - local_map.origin_x) // res).astype(int))

    r, c = local_map.cell_of(est_pose.x, est_pose.y)
    if local_map.in_grid(r, c) and local_map.grid[r, c] == UNKNOWN:
        local_map.grid[r, c] = FREE


def plan_path(local_map: LocalMetricMap, blocked, start_rc, goal_rc, unknown_cost=3.0,
              window_margin=20):
    """A* over the inflated grid; unknown cells cost more to enter. None if no path.

    The search first runs inside a window around the endpoints and widens to
    the whole map only when that fails.
    """
    size = local_map.size
    if not (local_map.in_grid(*start_rc) and local_map.in_grid(*goal_rc)):
        return None
    blocked = blocked.copy()
    # the agent stands here, so its immediate neighborhood is traversable even
    # when wall inflation covers it (e.g. hugging a wall after a collision)
    r0, c0 = start_rc
    blocked[max(0, r0 - 1):r0 + 2, max(0, c0 - 1):c0 + 2] = False
    if blocked[goal_rc]:
        goal_rc = _nearest_open(blocked, goal_rc)
        if goal_rc is None:
            return None
    if window_margin is not None:
        lo_r = max(0, min(start_rc[0], goal_rc[0]) - window_margin)
        hi_r = min(size - 1, max(start_rc[0], goal_rc[0]) + window_margin)
        lo_c = max(0, min(start_rc[1], goal_rc[1]) - window_margin)
        hi_c = min(size - 1, max(start_rc[1], goal_rc[1]) + window_margin)
        path = _astar(local_map.grid, blocked, start_rc, goal_rc, unknown_cost,
                      (lo_r, hi_r, lo_c, hi_c))
        if path is not None:
            return path
    return _astar(local_map.grid, blocked, start_rc, goal_rc, unknown_cost,
                  (0, size - 1, 0, size - 1))


def _astar(grid, blocked, start_rc, goal_rc, unknown_cost, bounds):
    lo_r, hi_r, lo_c, hi_c = bounds
    moves = ((0, 1, 1.0), (0, -1, 1.0), (1, 0, 1.0), (-1, 0, 1.0),
             (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)), (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2)))
    best = {start_rc: 0.0}
    came = {}
    pq = [(0.0, start_rc)]
    while pq:
        f, node = heapq.heappop(pq)
        if node == goal_rc:
            path = [node]
            while path[-1] != start_rc:
                path.append(came[path[-1]])
            return path[::-1]
        r, c = node
        g0 = best[node]
        if f - _octile(node, goal_rc) > g0 + 1e-12:
            continue
        for dr, dc, step in moves:
            nr, nc = r + dr, c + dc
            if not (lo_r <= nr <= hi_r and lo_c <= nc <= hi_c) or blocked[nr, nc]:
                continue
            mult = unknown_cost if grid[nr, nc] == UNKNOWN else 1.0
            g = g0 + step * mult
            if g < best.get((nr, nc), math.inf):
                best[(nr, nc)] = g
                came[(nr, nc)] = node
                heapq.heappush(pq, (g + _octile((nr, nc), goal_rc), (nr, nc)))
    return None


def _octile(a, b):
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dr, dc) + (math.sqrt(2) - 1.0) * min(dr, dc)


def _nearest_open(blocked, rc, max_radius=5):
    for rad in range(1, max_radius + 1):
        for dr in range(-rad, rad + 1):
            for dc in range(-rad, rad + 1):
                if max(abs(dr), abs(dc)) != rad:
                    continue
                r, c = rc[0] + dr, rc[1] + dc
                if 0 <= r < blocked.shape[0] and 0 <= c < blocked.shape[1] and not blocked[r, c]:
                    return (r, c)
    return None


def forward_blocked(local_map: LocalMetricMap, blocked, est_pose: AgentPose, step_len=0.25):
    """True when the inflated map blocks the swept forward segment."""
    rad = math.radians(est_pose.heading)
    for t in np.arange(local_map.resolution, step_len + local_map.resolution / 2, local_map.resolution / 2):
        r, c = local_map.cell_of(est_pose.x + t * math.cos(rad), est_pose.y + t * math.sin(rad))
        if local_map.in_grid(r, c) and blocked[r, c]:
            return True
    return False


def choose_action(local_map: LocalMetricMap, blocked, est_pose: AgentPose, waypoint_xy,
                  cfg: LocalNavConfig = LocalNavConfig(), spin=None):
    """Rotate toward the waypoint if misaligned, otherwise step forward when clear.

    Never emits forward into an inflated-occupied cell; returns (action, escaping).
    `spin` holds the pinned escape-rotation direction while stuck against geometry.
    """
    clear = not forward_blocked(local_map, blocked, est_pose, cfg.forward_step)
    if spin is not None:
        # escape mode: keep turning one way until forward clears, then take
        # that forward step before re-aiming, so aim and escape cannot seesaw
        return ("forward", True) if clear else (spin, True)
    err = wrap_signed(bearing_deg(est_pose.x, est_pose.y, *waypoint_xy) - est_pose.heading)
    if abs(err) > cfg.heading_tol:
        return ("rotate_left" if err > 0 else "rotate_right"), False
    if clear:
        return "forward", False
    return _escape_direction(local_map, blocked, est_pose, cfg), True


def _escape_direction(local_map, blocked, est_pose, cfg):
    """Spin toward whichever side clears the forward sweep in fewer turns."""
    for k in range(1, 13):
        for sign, action in ((1.0, "rotate_left"), (-1.0, "rotate_right")):
            probe = AgentPose(est_pose.x, est_pose.y, est_pose.heading + sign * k * 15.0)
            if not forward_blocked(local_map, blocked, probe, cfg.forward_step):
                return action
    return "rotate_left"


def segment_clear(local_map: LocalMetricMap, blocked, ax, ay, bx, by):
    d = math.hypot(bx - ax, by - ay)
    if d < 1e-9:
        return True
    n = max(2, int(d / (local_map.resolution / 2.0)) + 1)
    for t in np.linspace(0.0, 1.0, n)[1:]:
        r, c = local_map.cell_of(ax + t * (bx - ax), ay + t * (by - ay))
        if local_map.in_grid(r, c) and blocked[r, c]:
            return False
    return True


def pick_waypoint(local_map: LocalMetricMap, blocked, path, est, target, min_lookahead=0.35):
    """Farthest path cell reachable on a straight clear segment (string pulling).

    Falls back to the first cell at least `min_lookahead` out when even nearby
    cells fail the segment test; aims at the exact target once the path is
    consumed within line of sight.
    """
    best = None
    for rc in path:
        wx, wy = local_map.center_of(*rc)
        if not segment_clear(local_map, blocked, est.x, est.y, wx, wy):
            break
        best = (wx, wy)
    if best is not None and segment_clear(local_map, blocked, est.x, est.y, *target) \
            and math.hypot(target[0] - est.x, target[1] - est.y) <= math.hypot(best[0] - est.x, best[1] - est.y) + local_map.resolution:
        return target
    if best is not None and math.hypot(best[0] - est.x, best[1] - est.y) >= min_lookahead:
        return best
    for rc in path:
        wx, wy = local_map.center_of(*rc)
        if math.hypot(wx - est.x, wy - est.y) >= min_lookahead:
            return (wx, wy)
    return target


def navigate_to(sim, start_est: AgentPose, rho: float, phi: float, budget: int,
                cfg: LocalNavConfig = LocalNavConfig()) -> LocalNavResult:
    """Drive toward a (rho, phi) offset from the issuing pose estimate.

    Depth is integrated and the route replanned every action (the A* window is
    small); steering follows the first straight run of the fresh path. The map
    is transient to this call.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rad = math.radians(start_est.heading + phi)
    target = (start_est.x + rho * math.cos(rad), start_est.y + rho * math.sin(rad))
    local_map = LocalMetricMap(start_est, cfg.extent, cfg.resolution)
    margin = cfg.resolution
    half = cfg.extent / 2.0
    if abs(target[0] - start_est.x) > half - margin or abs(target[1] - start_est.y) > half - margin:
        raise ValueError(f"target {target} outside the {cfg.extent} m local map")

    actions = 0
    collisions = 0
    spin = None
    est = sim.observe()
    while actions < budget:
        if math.hypot(est.x - target[0], est.y - target[1]) < cfg.arrival_tol:
            return LocalNavResult(True, actions, est, collisions)
        integrate_depth(local_map, est, sim.depth())
        blocked = local_map.inflated_blocked(cfg.agent_radius)
        # the agent occupies this spot: inflation here must not veto motion
        r0, c0 = local_map.cell_of(est.x, est.y)
        blocked[max(0, r0 - 1):r0 + 2, max(0, c0 - 1):c0 + 2] = False
        path = plan_path(local_map, blocked, local_map.cell_of(est.x, est.y),
                         local_map.cell_of(*target), cfg.unknown_cost)
        if path is None:
            break
        waypoint = pick_waypoint(local_map, blocked, path, est, target)
        action, escaping = choose_action(local_map, blocked, est, waypoint, cfg, spin)
        collided = sim.execute(action)
        actions += 1
        collisions += int(collided)
        if escaping and action.startswith("rotate"):
            spin = action
        else:
            spin = None
        est = sim.observe()
    reached = math.hypot(est.x - target[0], est.y - target[1]) < cfg.arrival_tol
    return LocalNavResult(reached, actions, est, collisions)
