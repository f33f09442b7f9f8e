"""Episode taxonomy, generation, and success/efficiency reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import agent as ag
from . import simworld as sw
from .simworld import AgentPose

PATH_TYPES = ("straight", "curved")
DIFFICULTIES = ("easy", "medium", "hard")
STRAIGHT_RATIO = 1.2
STRAIGHT_HEADING = 45.0
DIFFICULTY_BINS = ((1.5, 3.0), (3.0, 5.0), (5.0, 10.0))


@dataclass(frozen=True)
class EpisodeSpec:
    world_id: int
    start: AgentPose
    goal: AgentPose
    path_type: str
    difficulty: str
    geodesic: float


def _classify(geodesic, euclid, heading_delta):
    if not math.isfinite(geodesic) or geodesic < DIFFICULTY_BINS[0][0] or geodesic > DIFFICULTY_BINS[-1][1]:
        return None
    for name, (lo, hi) in zip(DIFFICULTIES, DIFFICULTY_BINS):
        if lo <= geodesic <= hi and (geodesic < hi or name == "hard"):
            difficulty = name
            break
    straight = euclid > 0 and geodesic / euclid < STRAIGHT_RATIO and heading_delta < STRAIGHT_HEADING
    return ("straight" if straight else "curved"), difficulty


def classify_episode(world, start: AgentPose, goal: AgentPose):
    """(path_type, difficulty) for a pose pair, or None when rejected."""
    try:
        geodesic = sw.geodesic_distance(world, start, goal)
    except ValueError:
        return None
    euclid = math.hypot(goal.x - start.x, goal.y - start.y)
    heading_delta = abs(sw.wrap_signed(goal.heading - start.heading))
    return _classify(geodesic, euclid, heading_delta)


def generate_episodes(world, per_cell: int, rng, world_id: int = 0,
                      max_tries: int = 50_000, starts_per_goal: int = 200,
                      max_goals: int = 500):
    """Rejection-sample pose pairs until every (path_type x difficulty) cell fills.

    One geodesic field per sampled goal screens start cells in the admissible
    distance band, so candidate pairs are cheap; each emitted spec still
    classifies exactly. Returns (specs, warning) with warning set when some
    cell could not fill within the try budget.
    """
    want = {(p, d): per_cell for p in PATH_TYPES for d in DIFFICULTIES}
    out = []
    tries = 0
    budget = max_tries * len(want)
    goals = 0
    lo, hi = DIFFICULTY_BINS[0][0], DIFFICULTY_BINS[-1][1]
    while any(v > 0 for v in want.values()) and tries < budget and goals < max_goals:
        goals += 1
        goal = sw.sample_free_pose(world, rng)
        field = sw.geodesic_field(world, goal)
        rows, cols = np.nonzero((field >= lo) & (field <= hi))
        if len(rows) == 0:
            tries += starts_per_goal
            continue
        picks = rng.integers(len(rows), size=starts_per_goal)
        off_x = rng.uniform(0.02, 0.98, size=starts_per_goal)
        off_y = rng.uniform(0.02, 0.98, size=starts_per_goal)
        headings = rng.uniform(0.0, 360.0, size=starts_per_goal)
        for j in range(starts_per_goal):
            tries += 1
            r, c = rows[picks[j]], cols[picks[j]]
            start = AgentPose((c + off_x[j]) * world.cell_size,
                              (r + off_y[j]) * world.cell_size, headings[j])
            geodesic = float(field[r, c])
            euclid = math.hypot(goal.x - start.x, goal.y - start.y)
            heading_delta = abs(sw.wrap_signed(goal.heading - start.heading))
            cell = _classify(geodesic, euclid, heading_delta)
            if cell is None or want[cell] <= 0:
                continue
            want[cell] -= 1
            out.append(EpisodeSpec(world_id, start, goal, cell[0], cell[1], geodesic))
            if not any(v > 0 for v in want.values()):
                break
    warning = any(v > 0 for v in want.values())
    return out, warning


def spl_terms(results):
    """Per-episode SPL contribution: S * l / max(p, l)."""
    terms = []
    for r in results:
        s = 1.0 if r.success else 0.0
        p, l = r.agent_path_length, r.shortest_path_length
        if p == 0.0 and l == 0.0:
            terms.append(s)
        else:
            terms.append(s * l / max(p, l))
    return terms


def spl(results) -> float:
    terms = spl_terms(results)
    return float(np.mean(terms)) if terms else 0.0


def success_rate(results) -> float:
    return float(np.mean([1.0 if r.success else 0.0 for r in results])) if results else 0.0


@dataclass
class ReportCell:
    count: int = 0
    success: float = 0.0   # percent
    spl: float = 0.0       # percent


@dataclass
class Report:
    label: str
    cells: dict = field(default_factory=dict)  # (path_type, difficulty) -> ReportCell
    config_echo: str = ""
    seed: int = 0

    def overall(self):
        n = sum(c.count for c in self.cells.values())
        if n == 0:
            return ReportCell()
        succ = sum(c.success * c.count for c in self.cells.values()) / n
        s = sum(c.spl * c.count for c in self.cells.values()) / n
        return ReportCell(count=n, success=succ, spl=s)


def build_report(label, specs, items, config_echo="", seed=0) -> Report:
    """Aggregate batch results into the (path_type x difficulty) table."""
    groups = {}
    for spec, item in zip(specs, items):
        if item.result is None:
            continue
        groups.setdefault((spec.path_type, spec.difficulty), []).append(item.result)
    report = Report(label=label, config_echo=config_echo, seed=seed)
    for key, results in sorted(groups.items()):
        report.cells[key] = ReportCell(
            count=len(results),
            success=100.0 * success_rate(results),
            spl=100.0 * spl(results),
        )
    return report


def render_report_csv(reports) -> str:
    lines = ["label,path_type,difficulty,count,success,spl"]
    for rep in reports:
        for (p, d) in sorted(rep.cells):
            c = rep.cells[(p, d)]
            lines.append(f"{rep.label},{p},{d},{c.count},{c.success:.2f},{c.spl:.2f}")
        o = rep.overall()
        lines.append(f"{rep.label},all,all,{o.count},{o.success:.2f},{o.spl:.2f}")
    return "\n".join(lines) + "\n"


def render_report_text(reports) -> str:
    out = []
    for rep in reports:
        out.append(f"== {rep.label} (seed {rep.seed}) ==")
        header = f"{'cell':<18}{'count':>7}{'succ %':>9}{'spl %':>9}"
        out.append(header)
        for (p, d) in sorted(rep.cells):
            c = rep.cells[(p, d)]
            out.append(f"{p + '/' + d:<18}{c.count:>7}{c.success:>9.2f}{c.spl:>9.2f}")
        o = rep.overall()
        out.append(f"{'all':<18}{o.count:>7}{o.success:>9.2f}{o.spl:>9.2f}")
        out.append("")
    return "\n".join(out)


# per-episode results file: one row per episode, consumed by the report command

RESULTS_HEADER = "episode_id,world_id,path_type,difficulty,success,agent_path,shortest_path,steps,stop_reason"


def render_results_csv(specs, items) -> str:
    lines = [RESULTS_HEADER]
    for spec, item in zip(specs, items):
        if item.result is None:
            lines.append(f"{item.episode_id},{spec.world_id},{spec.path_type},{spec.difficulty},"
                         f"error,0,0,0,{item.error}")
            continue
        r = item.result
        lines.append(f"{item.episode_id},{spec.world_id},{spec.path_type},{spec.difficulty},"
                     f"{int(r.success)},{r.agent_path_length:.4f},{r.shortest_path_length:.4f},"
                     f"{r.steps},{r.stop_reason}")
    return "\n".join(lines) + "\n"


def report_from_results_csv(text: str, label: str = "results") -> Report:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError("results file missing header row")
    rows = lines[1:]
    if not rows:
        raise ValueError("results file has no episodes")

    @dataclass
    class Row:
        success: bool
        agent_path_length: float
        shortest_path_length: float

    groups = {}
    for ln in rows:
        parts = ln.split(",")
        if len(parts) < 9 or parts[4] == "error":
            continue
        key = (parts[2], parts[3])
        groups.setdefault(key, []).append(Row(parts[4] == "1", float(parts[5]), float(parts[6])))
    report = Report(label=label)
    for key, results in sorted(groups.items()):
        report.cells[key] = ReportCell(len(results), 100.0 * success_rate(results), 100.0 * spl(results))
    if not report.cells:
        raise ValueError("results file contains no valid episodes")
    return report
