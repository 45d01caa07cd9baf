"""Road network and agent-graph representation.

A :class:`TrafficNetwork` holds nodes, single-lane directed links and, for
every signalized node, the list of phases that define which
(incoming lane, outgoing lane) movements may discharge together.  The
signalized nodes form the vertices of an :class:`AgentGraph`; two agents are
adjacent when a lane joins them directly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_SPEED = 13.9  # m/s, 50 km/h
DEFAULT_SATURATION = 0.5  # veh/s per lane
DEFAULT_SENSOR_RANGE = 50.0  # m
VEHICLE_SPACING = 7.5  # m of lane per stored vehicle


class NetworkError(ValueError):
    """Raised for malformed networks or invalid construction arguments."""


@dataclass(frozen=True)
class Lane:
    id: str
    from_node: str
    to_node: str
    length: float
    free_flow_speed: float = DEFAULT_SPEED
    saturation_rate: float = DEFAULT_SATURATION
    sensor_range: float = DEFAULT_SENSOR_RANGE

    def __post_init__(self):
        if self.length <= 0:
            raise NetworkError(f"lane {self.id}: length must be positive")
        if self.free_flow_speed <= 0:
            raise NetworkError(f"lane {self.id}: speed must be positive")
        if self.saturation_rate <= 0:
            raise NetworkError(f"lane {self.id}: saturation rate must be positive")
        if self.sensor_range > self.length:
            object.__setattr__(self, "sensor_range", float(self.length))

    @property
    def capacity(self) -> int:
        return max(1, int(self.length // VEHICLE_SPACING))


@dataclass(frozen=True)
class Phase:
    id: int
    permitted_movements: frozenset  # of (in_lane_id, out_lane_id)

    def permits(self, in_lane: str, out_lane: str) -> bool:
        return (in_lane, out_lane) in self.permitted_movements

    @property
    def served_lanes(self) -> frozenset:
        return frozenset(m[0] for m in self.permitted_movements)


@dataclass(frozen=True)
class Intersection:
    id: str
    x: float
    y: float
    incoming_lanes: tuple = ()
    outgoing_lanes: tuple = ()
    phases: tuple = ()
    signalized: bool = False


@dataclass(frozen=True)
class AgentGraph:
    """Undirected graph over agent ids.

    ``vertices`` is kept sorted so that every neighbourhood listing derived
    from it is deterministic.
    """

    vertices: tuple
    edges: frozenset  # of frozenset({i, j})
    neighbor_threshold: int = 1
    _adj: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        verts = tuple(sorted(set(self.vertices)))
        object.__setattr__(self, "vertices", verts)
        vset = set(verts)
        adj = {v: set() for v in verts}
        for e in self.edges:
            pair = tuple(e)
            if len(pair) != 2:
                raise NetworkError(f"self-loop or malformed edge {sorted(e)}")
            i, j = pair
            if i not in vset or j not in vset:
                raise NetworkError(f"edge {sorted(e)} references unknown vertex")
            adj[i].add(j)
            adj[j].add(i)
        object.__setattr__(self, "_adj", {v: tuple(sorted(n)) for v, n in adj.items()})
        if self.neighbor_threshold < 1:
            raise NetworkError("neighbor_threshold must be >= 1")

    def adjacent(self, i) -> tuple:
        return self._adj[i]

    def _check(self, i):
        if i not in self._adj:
            raise NetworkError(f"unknown agent id {i!r}")

    def neighbors(self, i) -> tuple:
        self._check(i)
        dist = _bfs(self._adj, i, limit=self.neighbor_threshold)
        return tuple(sorted(j for j, d in dist.items() if j != i))

    def local_region(self, i) -> tuple:
        return tuple(sorted(self.neighbors(i) + (i,)))


def _bfs(adj, source, limit=None) -> dict:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if limit is not None and dist[u] >= limit:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_distance(graph: AgentGraph, i, j) -> int | None:
    """Breadth-first hop count between two agents; ``None`` if disconnected."""
    graph._check(i)
    graph._check(j)
    return _bfs(graph._adj, i).get(j)


def local_region(graph: AgentGraph, i) -> tuple:
    return graph.local_region(i)


class TrafficNetwork:
    """Immutable container for nodes, lanes and the derived agent graph."""

    def __init__(self, nodes: Sequence[Intersection], lanes: Sequence[Lane],
                 neighbor_threshold: int = 1):
        self.lanes: dict[str, Lane] = {}
        for lane in lanes:
            if lane.id in self.lanes:
                raise NetworkError(f"duplicate lane id {lane.id}")
            self.lanes[lane.id] = lane
        self.lane_order = {lid: k for k, lid in enumerate(self.lanes)}

        raw = {n.id: n for n in nodes}
        if len(raw) != len(nodes):
            raise NetworkError("duplicate node id")
        for lane in lanes:
            for end in (lane.from_node, lane.to_node):
                if end not in raw:
                    raise NetworkError(f"lane {lane.id} references unknown node {end}")

        incoming = {nid: [] for nid in raw}
        outgoing = {nid: [] for nid in raw}
        for lane in lanes:
            outgoing[lane.from_node].append(lane.id)
            incoming[lane.to_node].append(lane.id)

        self.intersections: dict[str, Intersection] = {}
        for nid, node in raw.items():
            inc, out = tuple(incoming[nid]), tuple(outgoing[nid])
            phases = tuple(node.phases)
            if node.signalized:
                if len(phases) < 2:
                    raise NetworkError(f"signalized node {nid} needs at least 2 phases")
                for ph in phases:
                    if not ph.permitted_movements:
                        raise NetworkError(f"node {nid} phase {ph.id} has no movements")
                    for a, b in ph.permitted_movements:
                        if a not in inc or b not in out:
                            raise NetworkError(
                                f"node {nid} phase {ph.id}: movement {a}->{b} not incident")
                served = set().union(*(p.served_lanes for p in phases))
                missing = [lid for lid in inc if lid not in served]
                if missing:
                    raise NetworkError(f"node {nid}: incoming lanes {missing} in no phase")
            self.intersections[nid] = Intersection(
                nid, node.x, node.y, inc, out, phases, node.signalized)

        # terminal nodes are unsignalized dead ends (sources/sinks)
        nbrs = {nid: set() for nid in raw}
        for lane in lanes:
            nbrs[lane.from_node].add(lane.to_node)
            nbrs[lane.to_node].add(lane.from_node)
        self.terminals = frozenset(nid for nid, n in raw.items()
                                   if not n.signalized and len(nbrs[nid]) <= 1)
        self.entry_lanes = tuple(l.id for l in lanes if l.from_node in self.terminals)
        self.exit_lanes = tuple(l.id for l in lanes if l.to_node in self.terminals)

        agents = sorted(nid for nid, n in self.intersections.items() if n.signalized)
        edges = set()
        for lane in lanes:
            a, b = lane.from_node, lane.to_node
            if a != b and raw[a].signalized and raw[b].signalized:
                edges.add(frozenset((a, b)))
        self.agent_graph = AgentGraph(tuple(agents), frozenset(edges), neighbor_threshold)
        self._successors = self._build_successors()

    @property
    def agents(self) -> tuple:
        return self.agent_graph.vertices

    def movements(self, node_id: str) -> set:
        """All movements usable at ``node_id`` (union of phases if signalized)."""
        node = self.intersections[node_id]
        if node.signalized:
            return set().union(*(p.permitted_movements for p in node.phases))
        lanes = self.lanes
        return {(a, b) for a in node.incoming_lanes for b in node.outgoing_lanes
                if lanes[b].to_node != lanes[a].from_node}

    def _build_successors(self) -> dict:
        succ = {lid: [] for lid in self.lanes}
        for nid in self.intersections:
            for a, b in self.movements(nid):
                succ[a].append(b)
        for lid in succ:
            succ[lid].sort(key=self.lane_order.__getitem__)
        return succ

    def successors(self, lane_id: str) -> list:
        return self._successors[lane_id]

    def shortest_route(self, origin: str, destination: str) -> list | None:
        """Fewest-lane route; ties resolve toward lanes declared first."""
        if origin == destination:
            return [origin]
        parent = {origin: None}
        queue = deque([origin])
        while queue:
            u = queue.popleft()
            for v in self._successors[u]:
                if v in parent:
                    continue
                parent[v] = u
                if v == destination:
                    path = [v]
                    while parent[path[-1]] is not None:
                        path.append(parent[path[-1]])
                    return path[::-1]
                queue.append(v)
        return None

    def od_routes(self) -> list:
        """Every routable (entry, exit) pair with its route, in a stable order."""
        pairs = []
        for o in self.entry_lanes:
            for d in self.exit_lanes:
                route = self.shortest_route(o, d)
                if route is not None and len(route) > 1:
                    pairs.append((o, d, route))
        return pairs

    def incoming_lanes(self, agent: str) -> tuple:
        return self.intersections[agent].incoming_lanes

    def phases(self, agent: str) -> tuple:
        return self.intersections[agent].phases


# ---------------------------------------------------------------------------
# Synthetic grids

_HEADINGS = {"N": (0, 1), "S": (0, -1), "E": (1, 0), "W": (-1, 0)}


def _turn(d_in, d_out) -> str:
    if d_in == d_out:
        return "through"
    if d_in == (-d_out[0], -d_out[1]):
        return "uturn"
    cross = d_in[0] * d_out[1] - d_in[1] * d_out[0]
    return "left" if cross > 0 else "right"


def _heading(nodes, lane) -> tuple:
    a, b = nodes[lane.from_node], nodes[lane.to_node]
    dx, dy = b.x - a.x, b.y - a.y
    return (int(np.sign(dx)), int(np.sign(dy)))


def build_grid(rows: int, cols: int, lane_length: float = 200.0, phases_per_node: int = 2,
               rng_seed: int = 0, neighbor_threshold: int = 1) -> TrafficNetwork:
    """Bidirectional Manhattan grid with every grid node signalized.

    Boundary nodes get stub links to virtual sources/sinks; those are the
    entry and exit lanes.  With ``phases_per_node == 2`` the phases are
    NS-green and EW-green (all non-U-turn movements of that axis); with 4 the
    left turns get their own protected phase per axis.

    ``rng_seed`` is accepted for signature compatibility; the grid layout is
    fully determined by the dimensions.
    """
    if rows < 1 or cols < 1:
        raise NetworkError("grid dimensions must be >= 1")
    if lane_length < 100:
        raise NetworkError("lane_length must be >= 100 m")
    if phases_per_node not in (2, 4):
        raise NetworkError("phases_per_node must be 2 or 4")

    w = max(len(str(rows - 1)), len(str(cols - 1)))

    def gid(r, c):
        return f"n{r:0{w}d}_{c:0{w}d}"

    L = float(lane_length)
    nodes = {}
    for r in range(rows):
        for c in range(cols):
            nodes[gid(r, c)] = Intersection(gid(r, c), c * L, -r * L, signalized=True)
    stubs = []
    for c in range(cols):
        stubs.append((f"sN{c:0{w}d}", c * L, L, gid(0, c)))
        stubs.append((f"sS{c:0{w}d}", c * L, -rows * L, gid(rows - 1, c)))
    for r in range(rows):
        stubs.append((f"sW{r:0{w}d}", -L, -r * L, gid(r, 0)))
        stubs.append((f"sE{r:0{w}d}", cols * L, -r * L, gid(r, cols - 1)))
    for sid, x, y, _ in stubs:
        nodes[sid] = Intersection(sid, x, y)

    lanes = []

    def link(a, b):
        lanes.append(Lane(f"{a}>{b}", a, b, L))

    for sid, _, _, target in stubs:
        link(sid, target)
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                link(gid(r, c), gid(r, c + 1))
                link(gid(r, c + 1), gid(r, c))
            if r + 1 < rows:
                link(gid(r, c), gid(r + 1, c))
                link(gid(r + 1, c), gid(r, c))
    for sid, _, _, target in stubs:
        link(target, sid)

    inc = {n: [l for l in lanes if l.to_node == n] for n in nodes}
    out = {n: [l for l in lanes if l.from_node == n] for n in nodes}
    final_nodes = []
    for nid, node in nodes.items():
        if not node.signalized:
            final_nodes.append(node)
            continue
        groups = {}
        for a in inc[nid]:
            da = _heading(nodes, a)
            axis = "NS" if da[0] == 0 else "EW"
            for b in out[nid]:
                kind = _turn(da, _heading(nodes, b))
                if kind == "uturn":
                    continue
                key = axis if phases_per_node == 2 else (axis, kind == "left")
                groups.setdefault(key, set()).add((a.id, b.id))
        if phases_per_node == 2:
            keys = ["NS", "EW"]
        else:
            keys = [("NS", False), ("NS", True), ("EW", False), ("EW", True)]
        phases = [frozenset(groups.get(k, ())) for k in keys]
        phases = [p for p in phases if p]
        if len(phases) < 2:
            # degenerate geometry (e.g. 1-wide grids with 4 phases): merge by axis
            phases = [frozenset(groups.get(k, set()) | groups.get((k, False), set())
                                | groups.get((k, True), set())) for k in ("NS", "EW")]
        final_nodes.append(Intersection(
            nid, node.x, node.y, phases=tuple(Phase(k, p) for k, p in enumerate(phases)),
            signalized=True))
    return TrafficNetwork(final_nodes, lanes, neighbor_threshold)


# ---------------------------------------------------------------------------
# Text network-description format
#
#   node  <id> <x> <y> <signalized 0|1>
#   lane  <id> <from> <to> <length> <speed> [<saturation>]
#   phase <node> <phase-id> <movement>...
#
# A movement is ``in:out`` (one movement) or a bare incoming lane id (every
# non-U-turn movement out of that lane).  ``#`` starts a comment.

def parse_network(text: str, neighbor_threshold: int = 1) -> TrafficNetwork:
    nodes, lanes, phase_specs = {}, [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            kind = tok[0]
            if kind == "node":
                _, nid, x, y, sig = tok
                nodes[nid] = (float(x), float(y), sig not in ("0", "false", "no"))
            elif kind == "lane":
                lid, a, b, length, speed = tok[1:6]
                extra = {}
                if len(tok) > 6:
                    extra["saturation_rate"] = float(tok[6])
                lanes.append(Lane(lid, a, b, float(length), float(speed), **extra))
            elif kind == "phase":
                phase_specs.append((tok[1], int(tok[2]), tok[3:]))
            else:
                raise NetworkError(f"unknown record {kind!r}")
        except (ValueError, IndexError) as exc:
            raise NetworkError(f"line {lineno}: {exc}") from exc

    lane_by_id = {l.id: l for l in lanes}
    movements = {}
    for node_id, pid, items in phase_specs:
        if node_id not in nodes:
            raise NetworkError(f"phase for unknown node {node_id}")
        mv = set()
        for item in items:
            if ":" in item:
                a, b = item.split(":", 1)
                mv.add((a, b))
            else:
                if item not in lane_by_id:
                    raise NetworkError(f"phase {node_id}/{pid}: unknown lane {item}")
                src = lane_by_id[item]
                for l in lanes:
                    if l.from_node == node_id and l.to_node != src.from_node:
                        mv.add((item, l.id))
        movements.setdefault(node_id, {})[pid] = frozenset(mv)

    built = []
    for nid, (x, y, sig) in nodes.items():
        phases = ()
        if nid in movements:
            phases = tuple(Phase(pid, mv) for pid, mv in sorted(movements[nid].items()))
        built.append(Intersection(nid, x, y, phases=phases, signalized=sig))
    return TrafficNetwork(built, lanes, neighbor_threshold)


def format_network(net: TrafficNetwork) -> str:
    out = ["# atsc-marl network description"]
    for n in net.intersections.values():
        out.append(f"node {n.id} {n.x:g} {n.y:g} {int(n.signalized)}")
    for l in net.lanes.values():
        out.append(f"lane {l.id} {l.from_node} {l.to_node} {l.length:g} "
                   f"{l.free_flow_speed:g} {l.saturation_rate:g}")
    for n in net.intersections.values():
        for ph in n.phases:
            mv = sorted(ph.permitted_movements,
                        key=lambda m: (net.lane_order[m[0]], net.lane_order[m[1]]))
            out.append(f"phase {n.id} {ph.id} " + " ".join(f"{a}:{b}" for a, b in mv))
    return "\n".join(out) + "\n"


def load_network(path, neighbor_threshold: int = 1) -> TrafficNetwork:
    with open(path) as fh:
        return parse_network(fh.read(), neighbor_threshold)


def parse_grid_spec(spec: str) -> tuple:
    """``"3x3"`` -> ``(3, 3)``."""
    try:
        r, c = spec.lower().split("x")
        return int(r), int(c)
    except ValueError as exc:
        raise NetworkError(f"bad grid spec {spec!r}, expected RxC") from exc

