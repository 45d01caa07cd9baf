"""Deterministic point-queue traffic simulator.

Vehicles travel at the lane's free-flow speed until they are
``sensor_range`` metres from the stop line, where they join a vertical FIFO
queue with speed 0.  Each tick (1 s) a queue whose head movement is allowed
by the active signal phase discharges vehicles at the lane saturation rate,
provided the downstream lane has room.  Vehicles on exit lanes leave the
network when they reach the end of the lane.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Phase, TrafficNetwork

YELLOW_TIME = 2

SCENARIOS = {
    "2000/2000": (2000, 2000),
    "3600/3600": (3600, 3600),
    "4000/2000": (4000, 2000),
}


@dataclass
class Vehicle:
    id: int
    route: tuple
    lane_index: int = 0
    position: float | None = 0.0  # metres from lane start; None while queued
    entered_at: int = 0

    @property
    def lane(self) -> str:
        return self.route[self.lane_index]

    @property
    def queued(self) -> bool:
        return self.position is None


@dataclass
class InsertionSchedule:
    events: list  # (time, origin lane, destination lane, route)
    scenario_name: str = ""

    def __len__(self):
        return len(self.events)

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for t, o, d, _ in self.events:
            h.update(f"{t},{o},{d};".encode())
        return h.hexdigest()


def parse_scenario(scenario) -> tuple:
    """Scenario name or ``"count/window"`` or ``(count, window)`` -> ints."""
    if isinstance(scenario, str):
        if scenario in SCENARIOS:
            return SCENARIOS[scenario]
        try:
            count, window = scenario.split("/")
            return int(count), int(window)
        except ValueError as exc:
            raise ValueError(f"bad scenario {scenario!r}") from exc
    count, window = scenario
    return int(count), int(window)


def make_schedule(network: TrafficNetwork, scenario, seed: int,
                  horizon: int = 3600) -> InsertionSchedule:
    """Evenly spaced insertions over ``[0, window)`` with uniform random OD pairs."""
    count, window = parse_scenario(scenario)
    if count < 0 or window < 1:
        raise ValueError("scenario needs count >= 0 and window >= 1")
    if window > horizon:
        raise ValueError(f"insertion window {window} exceeds horizon {horizon}")
    pairs = network.od_routes()
    if not pairs:
        raise ValueError("network has no routable entry/exit pair")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pairs), size=count)
    events = []
    for k in range(count):
        t = (k * window) // count
        o, d, route = pairs[int(picks[k])]
        events.append((t, o, d, tuple(route)))
    name = scenario if isinstance(scenario, str) else f"{count}/{window}"
    return InsertionSchedule(events, name)


@dataclass
class PhaseController:
    phases: tuple
    active: int = 0  # index into phases
    pending: int | None = None
    yellow_remaining: int = 0

    @property
    def in_yellow(self) -> bool:
        return self.yellow_remaining > 0

    @property
    def active_phase(self) -> Phase:
        return self.phases[self.active]


class _LaneState:
    __slots__ = ("lane", "traveling", "queue", "credit", "is_exit", "join_at")

    def __init__(self, lane, is_exit):
        self.lane = lane
        self.traveling = deque()
        self.queue = deque()
        self.credit = 0.0
        self.is_exit = is_exit
        self.join_at = lane.length if is_exit else lane.length - lane.sensor_range

    def occupancy(self) -> int:
        return len(self.traveling) + len(self.queue)


class Simulator:
    """One simulation run; owns its state exclusively."""

    def __init__(self, network: TrafficNetwork, schedule: InsertionSchedule | None = None,
                 yellow_time: int = YELLOW_TIME):
        self.network = network
        self.yellow_time = int(yellow_time)
        self.clock = 0
        exits = set(network.exit_lanes)
        self.lanes = {lid: _LaneState(l, lid in exits) for lid, l in network.lanes.items()}
        self._lane_list = list(self.lanes.values())
        self.controllers = {a: PhaseController(tuple(sorted(network.phases(a), key=lambda p: p.id)))
                            for a in network.agents}
        self._signal_at = {nid: self.controllers.get(nid) for nid in network.intersections}
        self.vehicles: dict[int, Vehicle] = {}
        self.inserted = 0
        self.arrived = 0
        self._next_vid = 0
        self._events = list(schedule.events) if schedule is not None else []
        self._event_ptr = 0
        self._backlog = {lid: deque() for lid in network.entry_lanes}

    # -- control ----------------------------------------------------------
    def phase_index(self, agent: str, phase) -> int:
        ctrl = self.controllers.get(agent)
        if ctrl is None:
            raise ValueError(f"{agent!r} is not a signalized agent")
        if isinstance(phase, Phase):
            for k, p in enumerate(ctrl.phases):
                if p == phase:
                    return k
            raise ValueError(f"phase {phase.id} does not belong to {agent}")
        k = int(phase)
        if not 0 <= k < len(ctrl.phases):
            raise ValueError(f"phase index {k} out of range for {agent}")
        return k

    def apply_action(self, agent: str, phase) -> None:
        """Request ``phase`` (index or :class:`Phase`) at ``agent``.

        A change starts a yellow interval; a request issued during yellow
        replaces the pending phase without restarting the timer.
        """
        ctrl = self.controllers.get(agent)
        k = self.phase_index(agent, phase)
        if ctrl.in_yellow:
            ctrl.pending = None if k == ctrl.active else k
            return
        if k == ctrl.active:
            return
        ctrl.pending = k
        ctrl.yellow_remaining = self.yellow_time
        if self.yellow_time == 0:
            ctrl.active, ctrl.pending = k, None

    # -- dynamics ----------------------------------------------------------
    def place_vehicle(self, route, lane_index=0, position: float | None = 0.0) -> Vehicle:
        """Put a vehicle directly on a lane (counts as an insertion)."""
        v = Vehicle(self._next_vid, tuple(route), lane_index, position, self.clock)
        self._next_vid += 1
        self.vehicles[v.id] = v
        self.inserted += 1
        ls = self.lanes[v.lane]
        if position is None:
            ls.queue.append(v)
        else:
            ls.traveling.append(v)
        return v

    def tick(self) -> None:
        self._move()
        self._discharge()
        self._insert()
        for ctrl in self.controllers.values():
            if ctrl.yellow_remaining > 0:
                ctrl.yellow_remaining -= 1
                if ctrl.yellow_remaining == 0 and ctrl.pending is not None:
                    ctrl.active, ctrl.pending = ctrl.pending, None
        self.clock += 1

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.tick()

    def _move(self):
        for ls in self._lane_list:
            trav = ls.traveling
            if not trav:
                continue
            speed, join_at = ls.lane.free_flow_speed, ls.join_at
            reached = False
            for v in trav:
                v.position += speed
                if v.position >= join_at:
                    reached = True
            if not reached:
                continue
            keep = deque()
            for v in trav:
                if v.position < join_at:
                    keep.append(v)
                elif ls.is_exit:
                    del self.vehicles[v.id]
                    self.arrived += 1
                else:
                    v.position = None
                    ls.queue.append(v)
            ls.traveling = keep

    def _discharge(self):
        lanes = self.lanes
        for ls in self._lane_list:
            q = ls.queue
            if not q:
                ls.credit = 0.0
                continue
            ctrl = self._signal_at[ls.lane.to_node]
            if ctrl is not None and ctrl.yellow_remaining > 0:
                ls.credit = 0.0
                continue
            phase = ctrl.active_phase if ctrl is not None else None
            lid = ls.lane.id
            head = q[0]
            nxt = head.route[head.lane_index + 1]
            if phase is not None and (lid, nxt) not in phase.permitted_movements:
                ls.credit = 0.0
                continue
            ls.credit += ls.lane.saturation_rate
            while ls.credit >= 1.0 and q:
                head = q[0]
                nxt = head.route[head.lane_index + 1]
                if phase is not None and (lid, nxt) not in phase.permitted_movements:
                    break
                down = lanes[nxt]
                if down.occupancy() >= down.lane.capacity:
                    break
                q.popleft()
                head.lane_index += 1
                head.position = 0.0
                down.traveling.append(head)
                ls.credit -= 1.0
            if not q:
                ls.credit = 0.0
            elif ls.credit > 1.0:
                ls.credit = 1.0

    def _insert(self):
        events, n = self._events, len(self._events)
        while self._event_ptr < n and self._events[self._event_ptr][0] <= self.clock:
            _, origin, _, route = events[self._event_ptr]
            self._backlog[origin].append(route)
            self._event_ptr += 1
        for lid, backlog in self._backlog.items():
            if backlog:
                ls = self.lanes[lid]
                if ls.occupancy() < ls.lane.capacity:
                    self.place_vehicle(backlog.popleft())

    # -- sensors ------------------------------------------------------------
    def measure_queue(self, agent: str) -> int:
        """Stopped vehicles (speed 0 < 0.1 m/s) on the agent's incoming lanes."""
        return sum(len(self.lanes[l].queue) for l in self.network.incoming_lanes(agent))

    def lane_queues(self, agent: str) -> np.ndarray:
        return np.array([len(self.lanes[l].queue) for l in self.network.incoming_lanes(agent)],
                        dtype=float)

    def measure_wave(self, agent: str) -> np.ndarray:
        """Vehicles within sensor range of the stop line, per incoming lane."""
        out = []
        for lid in self.network.incoming_lanes(agent):
            ls = self.lanes[lid]
            near = ls.lane.length - ls.lane.sensor_range
            n = len(ls.queue)
            for v in reversed(ls.traveling):
                if v.position >= near:
                    n += 1
            out.append(n)
        return np.array(out, dtype=float)

    def running_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def pending_insertions(self) -> int:
        return sum(len(b) for b in self._backlog.values()) + len(self._events) - self._event_ptr

    def snapshot(self) -> tuple:
        """Hashable summary of the full state, for determinism checks."""
        lanes = tuple((lid, tuple((v.id, v.position) for v in ls.traveling),
                       tuple(v.id for v in ls.queue), ls.credit)
                      for lid, ls in self.lanes.items())
        ctrls = tuple((a, c.active, c.pending, c.yellow_remaining)
                      for a, c in self.controllers.items())
        return (self.clock, self.inserted, self.arrived, lanes, ctrls)
