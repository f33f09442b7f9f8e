"""The agent's topological map: explored/unexplored nodes, relative-pose edges,
travel cost, and heuristic frontier expansion from depth."""

from __future__ import annotations

import heapq
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .simworld import AgentPose, DepthImage, ViewDescriptor, bearing_deg, wrap_signed

GRAPH_MAGIC = b"NRNSG1"

EXPLORED = "explored"
UNEXPLORED = "unexplored"

EXPANSION_ANGLES = (-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0)
EXPANSION_RADIUS = 1.0       # meters from the current node to a new frontier node
EXPANSION_WINDOW = 7.5       # degrees of depth rays consulted either side of a test angle
DEFAULT_CLEARANCE = 3.0      # meters of clear depth required for an angle to be explorable
DEFAULT_DEDUPE_RADIUS = 0.5


def pose_matrix(p: AgentPose) -> np.ndarray:
    """World-frame rigid transform of a pose: planar rotation + translation in 4x4."""
    rad = math.radians(p.heading)
    c, s = math.cos(rad), math.sin(rad)
    m = np.eye(4)
    m[0, 0], m[0, 1], m[1, 0], m[1, 1] = c, -s, s, c
    m[0, 3], m[1, 3] = p.x, p.y
    return m


def relative_pose(p_i: AgentPose, p_j: AgentPose) -> np.ndarray:
    """Transform expressing p_j in the frame of p_i; composition-consistent."""
    rad = math.radians(p_i.heading)
    c, s = math.cos(rad), math.sin(rad)
    inv = np.eye(4)
    inv[0, 0], inv[0, 1], inv[1, 0], inv[1, 1] = c, s, -s, c
    inv[0, 3] = -(c * p_i.x + s * p_i.y)
    inv[1, 3] = -(-s * p_i.x + c * p_i.y)
    return inv @ pose_matrix(p_j)


def invert_transform(t: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    r = t[:3, :3]
    inv[:3, :3] = r.T
    inv[:3, 3] = -r.T @ t[:3, 3]
    return inv


@dataclass
class TopoNode:
    id: int
    pose: AgentPose
    status: str = UNEXPLORED
    descriptor: ViewDescriptor | None = None

    @property
    def explored(self):
        return self.status == EXPLORED


@dataclass
class TopoEdge:
    src: int
    dst: int
    delta_pose: np.ndarray  # 4x4 rigid transform, src frame -> dst frame
    length: float

    def feature(self) -> np.ndarray:
        return self.delta_pose.ravel().copy()

    def reverse_feature(self) -> np.ndarray:
        return invert_transform(self.delta_pose).ravel()


class TopoGraph:
    """Sparse place graph; endpoints must exist, (src, dst) pairs are unique."""

    def __init__(self):
        self.nodes: dict[int, TopoNode] = {}
        self.edges: dict[tuple[int, int], TopoEdge] = {}
        self.adj: dict[int, set] = {}
        self.current_node: int | None = None
        self._next_id = 0

    def __len__(self):
        return len(self.nodes)

    def add_node(self, pose: AgentPose, status: str = UNEXPLORED, descriptor=None, node_id=None) -> int:
        if status == EXPLORED and descriptor is None:
            raise ValueError("explored node needs a descriptor")
        if status == UNEXPLORED and descriptor is not None:
            raise ValueError("unexplored node cannot carry a descriptor")
        nid = self._next_id if node_id is None else int(node_id)
        if nid in self.nodes:
            raise ValueError(f"node id {nid} already present")
        self._next_id = max(self._next_id, nid + 1)
        self.nodes[nid] = TopoNode(nid, pose, status, descriptor)
        self.adj[nid] = set()
        return nid

    def add_edge(self, src: int, dst: int) -> TopoEdge:
        if src not in self.nodes or dst not in self.nodes:
            raise KeyError(f"edge endpoints ({src}, {dst}) must exist")
        if not self.nodes[src].explored:
            raise ValueError(f"unexplored node {src} cannot have outgoing edges")
        if (src, dst) in self.edges:
            raise ValueError(f"duplicate edge ({src}, {dst})")
        delta = relative_pose(self.nodes[src].pose, self.nodes[dst].pose)
        edge = TopoEdge(src, dst, delta, float(np.linalg.norm(delta[:2, 3])))
        self.edges[(src, dst)] = edge
        self.adj[src].add(dst)
        self.adj[dst].add(src)
        return edge

    def has_edge(self, a: int, b: int) -> bool:
        return (a, b) in self.edges or (b, a) in self.edges

    def explored_ids(self):
        return sorted(i for i, n in self.nodes.items() if n.explored)

    def unexplored_ids(self):
        return sorted(i for i, n in self.nodes.items() if not n.explored)

    def neighbors(self, nid: int):
        return self.adj[nid]

    def _recompute_incident(self, nid: int):
        for key, edge in self.edges.items():
            if nid in key:
                edge.delta_pose = relative_pose(self.nodes[edge.src].pose, self.nodes[edge.dst].pose)
                edge.length = float(np.linalg.norm(edge.delta_pose[:2, 3]))


def explorable_angles(depth: DepthImage, threshold: float = DEFAULT_CLEARANCE):
    """Test angles whose +-7.5 degree depth window is clear out to `threshold`."""
    if depth.fov_deg < 120.0 - 1e-9:
        raise ValueError(f"explorable_angles needs 120 degree coverage, got {depth.fov_deg}")
    bearings = depth.bearings()
    out = []
    for theta in EXPANSION_ANGLES:
        window = np.abs(bearings - theta) <= EXPANSION_WINDOW
        if window.any() and depth.rays[window].min() >= threshold:
            out.append(theta)
    return out


def expand(graph: TopoGraph, at_node: int, depth: DepthImage,
           dedupe_radius: float = DEFAULT_DEDUPE_RADIUS, threshold: float = DEFAULT_CLEARANCE):
    """Grow the frontier around an explored node.

    For each explorable angle a candidate pose is placed 1 m out. Candidates
    landing within dedupe_radius of a node that existed before this call only
    contribute an edge; fresh candidates become unexplored nodes. Immediate
    re-invocation is a no-op.
    """
    node = graph.nodes.get(at_node)
    if node is None:
        raise KeyError(f"unknown node {at_node}")
    if not node.explored:
        raise ValueError(f"cannot expand unexplored node {at_node}")
    snapshot = [(nid, n.pose.x, n.pose.y) for nid, n in graph.nodes.items()]
    created = []
    for theta in explorable_angles(depth, threshold):
        bearing = node.pose.heading + theta
        rad = math.radians(bearing)
        cx = node.pose.x + EXPANSION_RADIUS * math.cos(rad)
        cy = node.pose.y + EXPANSION_RADIUS * math.sin(rad)
        near = None
        best = dedupe_radius
        for nid, nx, ny in snapshot:
            d = math.hypot(nx - cx, ny - cy)
            if d < best:
                best, near = d, nid
        if near is not None:
            if near != at_node and not graph.has_edge(at_node, near):
                graph.add_edge(at_node, near)
            continue
        nid = graph.add_node(AgentPose(cx, cy, bearing), UNEXPLORED)
        graph.add_edge(at_node, nid)
        created.append(nid)
    return created


def mark_explored(graph: TopoGraph, node_id: int, pose: AgentPose, descriptor: ViewDescriptor):
    """Flip a node to explored with its observed pose; incident edges are recomputed."""
    node = graph.nodes.get(node_id)
    if node is None:
        raise KeyError(f"unknown node {node_id}")
    node.pose = pose
    node.status = EXPLORED
    node.descriptor = descriptor
    graph._recompute_incident(node_id)
    graph.current_node = node_id


def travel_cost(graph: TopoGraph, from_id: int, to_id: int) -> float:
    """Shortest-path meters over the graph, edges traversable both ways; inf if unreachable."""
    costs = travel_costs_from(graph, from_id)
    return costs.get(to_id, math.inf)


def travel_costs_from(graph: TopoGraph, from_id: int) -> dict:
    if from_id not in graph.nodes:
        raise KeyError(f"unknown node {from_id}")
    dist = {from_id: 0.0}
    pq = [(0.0, from_id)]
    lengths = {}
    for (a, b), e in graph.edges.items():
        lengths[(a, b)] = e.length
        lengths[(b, a)] = e.length
    while pq:
        d, nid = heapq.heappop(pq)
        if d > dist.get(nid, math.inf):
            continue
        for nb in graph.adj[nid]:
            nd = d + lengths[(nid, nb)]
            if nd < dist.get(nb, math.inf):
                dist[nb] = nd
                heapq.heappush(pq, (nd, nb))
    return dist


def graph_route(graph: TopoGraph, from_id: int, to_id: int):
    """Node id sequence of the cheapest route, or None when unreachable."""
    if from_id == to_id:
        return [from_id]
    dist = {from_id: 0.0}
    prev = {}
    pq = [(0.0, from_id)]
    while pq:
        d, nid = heapq.heappop(pq)
        if nid == to_id:
            break
        if d > dist.get(nid, math.inf):
            continue
        for nb in graph.adj[nid]:
            e = graph.edges.get((nid, nb)) or graph.edges[(nb, nid)]
            nd = d + e.length
            if nd < dist.get(nb, math.inf):
                dist[nb] = nd
                prev[nb] = nid
                heapq.heappush(pq, (nd, nb))
    if to_id not in prev and from_id != to_id:
        return None
    path = [to_id]
    while path[-1] != from_id:
        path.append(prev[path[-1]])
    return path[::-1]


def induced_subgraph(graph: TopoGraph, node_ids) -> TopoGraph:
    """Subgraph on node_ids with all edges between them; ids are preserved."""
    keep = set(int(i) for i in node_ids)
    missing = keep - set(graph.nodes)
    if missing:
        raise KeyError(f"unknown nodes {sorted(missing)}")
    sub = TopoGraph()
    for nid in sorted(keep):
        n = graph.nodes[nid]
        sub.add_node(n.pose, n.status, n.descriptor, node_id=nid)
    for (a, b) in sorted(graph.edges):
        if a in keep and b in keep:
            sub.add_edge(a, b)
    if graph.current_node in keep:
        sub.current_node = graph.current_node
    return sub


# ---------------------------------------------------------------------------
# Graph file format (magic NRNSG1), little-endian:
#   6s magic | u32 node_count | u32 edge_count | u32 desc_dim | u32 current(+1, 0=none)
#   per node: u32 id | f64 x | f64 y | f64 heading | u8 status(1=explored) |
#             u8 has_desc | f64*desc_dim descriptor when present
#   per edge: u32 src | u32 dst | f64*16 delta_pose | f64 length
# ---------------------------------------------------------------------------


def graph_to_bytes(graph: TopoGraph, desc_dim: int) -> bytes:
    buf = io.BytesIO()
    current = 0 if graph.current_node is None else graph.current_node + 1
    buf.write(GRAPH_MAGIC)
    buf.write(struct.pack("<IIII", len(graph.nodes), len(graph.edges), desc_dim, current))
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        has = n.descriptor is not None
        buf.write(struct.pack("<IdddBB", nid, n.pose.x, n.pose.y, n.pose.heading,
                              1 if n.explored else 0, 1 if has else 0))
        if has:
            if len(n.descriptor.values) != desc_dim:
                raise ValueError(f"descriptor dim {len(n.descriptor.values)} != {desc_dim}")
            buf.write(n.descriptor.values.astype("<f8").tobytes())
    for key in sorted(graph.edges):
        e = graph.edges[key]
        buf.write(struct.pack("<II", e.src, e.dst))
        buf.write(e.delta_pose.astype("<f8").tobytes())
        buf.write(struct.pack("<d", e.length))
    return buf.getvalue()


def graph_from_bytes(data: bytes, offset: int = 0):
    """Returns (TopoGraph, bytes consumed)."""
    if data[offset:offset + 6] != GRAPH_MAGIC:
        raise ValueError("not a graph blob (bad magic)")
    off = offset + 6
    n_nodes, n_edges, desc_dim, current = struct.unpack_from("<IIII", data, off)
    off += 16
    graph = TopoGraph()
    node_head = struct.Struct("<IdddBB")
    for _ in range(n_nodes):
        nid, x, y, heading, status, has = node_head.unpack_from(data, off)
        off += node_head.size
        desc = None
        if has:
            vals = np.frombuffer(data, dtype="<f8", count=desc_dim, offset=off).copy()
            off += 8 * desc_dim
            desc = ViewDescriptor(vals)
        graph.add_node(AgentPose(x, y, heading), EXPLORED if status else UNEXPLORED,
                       desc, node_id=nid)
    for _ in range(n_edges):
        src, dst = struct.unpack_from("<II", data, off)
        off += 8
        delta = np.frombuffer(data, dtype="<f8", count=16, offset=off).reshape(4, 4).copy()
        off += 128
        (length,) = struct.unpack_from("<d", data, off)
        off += 8
        edge = TopoEdge(src, dst, delta, length)
        graph.edges[(src, dst)] = edge
        graph.adj[src].add(dst)
        graph.adj[dst].add(src)
    graph.current_node = current - 1 if current else None
    return graph, off - offset


def save_graph(graph: TopoGraph, desc_dim: int, path):
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(graph, desc_dim))


def load_graph(path) -> TopoGraph:
    with open(path, "rb") as fh:
        graph, _ = graph_from_bytes(fh.read())
    return graph
