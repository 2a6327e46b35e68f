"""Discrete-time UAM passenger-delivery world.

One step is ``dt`` seconds. Each agent picks one of seven discrete actions;
afterwards new requests appear, radio links are updated and landed aircraft
board or drop off passengers. All randomness is drawn at :func:`reset`, so a
run is fully determined by the config, the seed and the joint actions.

Functions take a :class:`SimState` and update it in place; they also return it
so calls can be chained.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from uamrl.energy import (
    BatterySpec,
    BatteryState,
    UamSpec,
    charge,
    cruise_power,
    discharge,
    energy_for_step,
    hover_power,
    payload_newtons,
)

MOVE_POS_X, MOVE_NEG_X, MOVE_POS_Y, MOVE_NEG_Y, HOVER, TAKEOFF, LANDING = range(7)
N_ACTIONS = 7
ACTION_NAMES = ("move+x", "move-x", "move+y", "move-y", "hover", "takeoff", "landing")
_MOVE_DIRS = {MOVE_POS_X: (1.0, 0.0), MOVE_NEG_X: (-1.0, 0.0), MOVE_POS_Y: (0.0, 1.0), MOVE_NEG_Y: (0.0, -1.0)}

DEFAULT_VERTIPORTS = ((0.0, 6000.0), (-6000.0, 1000.0), (6000.0, 1000.0), (-4000.0, -6000.0), (4000.0, -6000.0))


class ConfigError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A caller broke an environment precondition (illegal action, wrong arity)."""


class LifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    # Half-width of the square map. The vertiports sit up to 6 km from the
    # centre, so the bound must be at least that for them to be on the map.
    half_extent_m: float = 6000.0
    cruise_altitude_m: float = 600.0
    step_s: float = 60.0
    horizon: int = 100
    n_agents: int = 4
    n_passengers: int = 25
    vertiports: tuple[tuple[float, float], ...] = DEFAULT_VERTIPORTS
    cell_radius_m: float = 3000.0
    passenger_mass_kg: float = 100.0
    seed: int = 0
    uam: UamSpec = field(default_factory=UamSpec)
    battery: BatterySpec = field(default_factory=BatterySpec)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertiports", tuple((float(x), float(y)) for x, y in self.vertiports))
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.n_agents < 1 or self.n_passengers < 1 or len(self.vertiports) < 1:
            raise ConfigError("n_agents, n_passengers and the vertiport count must all be >= 1")
        if len(self.vertiports) < 2:
            raise ConfigError("at least two vertiports are needed for distinct origin/destination pairs")
        for name in ("half_extent_m", "cruise_altitude_m", "step_s", "cell_radius_m"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be > 0, got {value!r}")
        if self.passenger_mass_kg < 0:
            raise ConfigError("passenger_mass_kg must be >= 0")
        for k, (x, y) in enumerate(self.vertiports):
            if abs(x) > self.half_extent_m or abs(y) > self.half_extent_m:
                raise ConfigError(f"vertiport {k} at ({x}, {y}) lies outside the map")

    @property
    def n_vertiports(self) -> int:
        return len(self.vertiports)

    @property
    def seats(self) -> int:
        return self.uam.seat_count

    @property
    def stride_m(self) -> float:
        return self.uam.flight_speed * self.step_s

    @property
    def obs_len(self) -> int:
        return observation_length(self.n_agents, self.n_vertiports, self.seats)


def observation_length(n_agents: int, n_vertiports: int, seats: int) -> int:
    return 3 + (n_agents - 1) + n_vertiports + n_vertiports + seats * (n_vertiports + 2) + 2


class Status(enum.IntEnum):
    DORMANT = 0
    WAITING = 1
    LINKED = 2
    ONBOARD = 3
    DELIVERED = 4


@dataclass
class Vertiport:
    id: int
    x: float
    y: float
    cell_radius: float


@dataclass
class Passenger:
    id: int
    origin: int
    destination: int
    request_time: int
    status: Status = Status.DORMANT
    agent: int | None = None
    seat: int | None = None
    delivery_time: int | None = None
    # Wait at the most recent step and its running sum over steps, in minutes.
    last_wait: float = 0.0
    cum_wait: float = 0.0


@dataclass
class UamAgent:
    id: int
    x: float
    y: float
    z: float
    battery: BatteryState
    seats: list[int | None]
    landed_at: int | None = None
    links: list[int] = field(default_factory=list)
    visited: set[int] = field(default_factory=set)
    delivered: int = 0

    @property
    def airborne(self) -> bool:
        return self.landed_at is None

    @property
    def onboard(self) -> int:
        return sum(1 for s in self.seats if s is not None)

    @property
    def free_capacity(self) -> int:
        return len(self.seats) - self.onboard - len(self.links)


@dataclass
class AgentEvents:
    """What happened to one agent during one step."""

    agent: int
    action: int
    energy_before_kwh: float
    energy_used_kwh: float
    hover_flag: int
    move_flag: int
    depleted: bool = False
    pickups: list[int] = field(default_factory=list)
    dropoffs: list[int] = field(default_factory=list)
    links_made: list[int] = field(default_factory=list)
    links_broken: list[int] = field(default_factory=list)


@dataclass
class SimState:
    config: SimConfig
    clock: int
    agents: list[UamAgent]
    passengers: list[Passenger]
    vertiports: list[Vertiport]
    rng: np.random.Generator
    record: bool = True
    trajectories: list[list[tuple[int, float, float, float]]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    # Per-step energies (kWh) for hover-class and cruise actions, indexed by onboard count.
    hover_kwh: tuple[float, ...] = ()
    cruise_kwh: tuple[float, ...] = ()

    @property
    def done(self) -> bool:
        return self.clock >= self.config.horizon


def _step_energies(config: SimConfig) -> tuple[tuple[float, ...], tuple[float, ...]]:
    hover, cruise = [], []
    for n in range(config.seats + 1):
        payload = payload_newtons(n, config.passenger_mass_kg)
        hover.append(energy_for_step(hover_power(config.uam, payload).total, config.step_s))
        cruise.append(energy_for_step(cruise_power(config.uam, config.uam.flight_speed, payload).total, config.step_s))
    return tuple(hover), tuple(cruise)


def reset(config: SimConfig, seed: int | None = None, record: bool = True) -> SimState:
    """Fresh episode: agents airborne over the map centre with full batteries."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    k = config.n_vertiports
    vertiports = [Vertiport(i, x, y, config.cell_radius_m) for i, (x, y) in enumerate(config.vertiports)]

    request_times = rng.integers(0, config.horizon, size=config.n_passengers)
    origins = rng.integers(0, k, size=config.n_passengers)
    # Shift by 1..k-1 so the destination is uniform over the other vertiports.
    destinations = (origins + rng.integers(1, k, size=config.n_passengers)) % k
    passengers = [
        Passenger(i, int(o), int(d), int(t)) for i, (o, d, t) in enumerate(zip(origins, destinations, request_times))
    ]
    agents = [
        UamAgent(
            id=m,
            x=0.0,
            y=0.0,
            z=config.cruise_altitude_m,
            battery=BatteryState(config.battery.capacity_kwh),
            seats=[None] * config.seats,
        )
        for m in range(config.n_agents)
    ]
    hover_kwh, cruise_kwh = _step_energies(config)
    state = SimState(config, 0, agents, passengers, vertiports, rng, record, hover_kwh=hover_kwh, cruise_kwh=cruise_kwh)
    state.trajectories = [[(0, a.x, a.y, a.z)] for a in agents]
    return state


def _horizontal_distance(agent: UamAgent, port: Vertiport) -> float:
    return math.hypot(agent.x - port.x, agent.y - port.y)


def spawn_requests(state: SimState) -> SimState:
    for p in state.passengers:
        if p.status is Status.DORMANT and p.request_time == state.clock:
            p.status = Status.WAITING
    return state


def update_links(state: SimState, events: Sequence[AgentEvents] | None = None) -> SimState:
    """Break links to agents that left the cell, then link waiting passengers.

    A waiting passenger links to the nearest agent inside the cell radius of its
    vertiport that still has a free seat; ties go to the lowest agent id. Links
    of passengers already on board are kept until delivery.
    """
    ports = state.vertiports
    for agent in state.agents:
        keep = []
        for pid in agent.links:
            p = state.passengers[pid]
            if _horizontal_distance(agent, ports[p.origin]) > ports[p.origin].cell_radius:
                p.status, p.agent = Status.WAITING, None
                if events is not None:
                    events[agent.id].links_broken.append(pid)
            else:
                keep.append(pid)
        agent.links = keep

    waiting = sorted((p for p in state.passengers if p.status is Status.WAITING), key=lambda p: (p.request_time, p.id))
    for p in waiting:
        port = ports[p.origin]
        best = None
        for agent in state.agents:
            if agent.free_capacity <= 0:
                continue
            d = _horizontal_distance(agent, port)
            if d <= port.cell_radius and (best is None or d < best[0]):
                best = (d, agent)
        if best is not None:
            agent = best[1]
            agent.links.append(p.id)
            p.status, p.agent = Status.LINKED, agent.id
            if events is not None:
                events[agent.id].links_made.append(p.id)
    return state


def board_and_alight(state: SimState, events: Sequence[AgentEvents] | None = None) -> SimState:
    for agent in state.agents:
        if agent.airborne:
            continue
        here = agent.landed_at
        for seat, pid in enumerate(agent.seats):
            if pid is None:
                continue
            p = state.passengers[pid]
            if p.destination == here:
                p.status, p.delivery_time, p.seat = Status.DELIVERED, state.clock, None
                agent.seats[seat] = None
                agent.delivered += 1
                if events is not None:
                    events[agent.id].dropoffs.append(pid)
        boarding = sorted(
            (state.passengers[pid] for pid in agent.links if state.passengers[pid].origin == here),
            key=lambda p: (p.request_time, p.id),
        )
        for p in boarding:
            seat = agent.seats.index(None)
            agent.seats[seat] = p.id
            agent.links.remove(p.id)
            p.status, p.seat = Status.ONBOARD, seat
            if events is not None:
                events[agent.id].pickups.append(p.id)
    return state


def _nearest_port_in_cell(state: SimState, agent: UamAgent) -> Vertiport | None:
    best = None
    for port in state.vertiports:
        d = _horizontal_distance(agent, port)
        if d <= port.cell_radius and (best is None or d < best[0]):
            best = (d, port)
    return None if best is None else best[1]


def battery_critical(state: SimState, m: int) -> bool:
    """True when the pack cannot cover one cruise step plus one landing step."""
    agent = state.agents[m]
    n = agent.onboard
    return agent.battery.energy_kwh < state.cruise_kwh[n] + state.hover_kwh[n]


def legal_actions(state: SimState, m: int) -> np.ndarray:
    """Boolean mask over the seven actions for agent ``m``.

    On the ground the hover id means "stay and charge". A battery-critical agent
    may only land (in the air) or stay (on the ground); if it is out of reach
    of every vertiport it keeps its moves so it can get back into a cell.
    """
    agent = state.agents[m]
    mask = np.zeros(N_ACTIONS, dtype=bool)
    critical = battery_critical(state, m)
    if not agent.airborne:
        mask[HOVER] = True
        mask[TAKEOFF] = not critical
        return mask
    can_land = _nearest_port_in_cell(state, agent) is not None
    mask[LANDING] = can_land
    if critical and can_land:
        return mask
    bound, stride = state.config.half_extent_m, state.config.stride_m
    for action, (dx, dy) in _MOVE_DIRS.items():
        mask[action] = abs(agent.x + dx * stride) <= bound and abs(agent.y + dy * stride) <= bound
    mask[HOVER] = not critical
    return mask


def apply_action(state: SimState, m: int, action: int) -> AgentEvents:
    """Execute one agent's action and charge or drain its battery accordingly."""
    if not 0 <= action < N_ACTIONS or not legal_actions(state, m)[action]:
        raise ContractViolation(f"action {action} is illegal for agent {m} at step {state.clock}")
    cfg = state.config
    agent = state.agents[m]
    before = agent.battery.energy_kwh
    n = agent.onboard

    if not agent.airborne:
        if action == HOVER:
            agent.battery = charge(agent.battery, cfg.battery, cfg.step_s)
            return AgentEvents(m, action, before, 0.0, 0, 0)
        # takeoff
        agent.landed_at = None
        agent.z = cfg.cruise_altitude_m
        used, hover_flag, move_flag = state.hover_kwh[n], 1, 0
    elif action in _MOVE_DIRS:
        dx, dy = _MOVE_DIRS[action]
        agent.x += dx * cfg.stride_m
        agent.y += dy * cfg.stride_m
        used, hover_flag, move_flag = state.cruise_kwh[n], 0, 1
    elif action == LANDING:
        port = _nearest_port_in_cell(state, agent)
        agent.x, agent.y, agent.z = port.x, port.y, 0.0
        agent.landed_at = port.id
        agent.visited.add(port.id)
        used, hover_flag, move_flag = state.hover_kwh[n], 1, 0
    else:
        used, hover_flag, move_flag = state.hover_kwh[n], 1, 0
    agent.battery, depleted = discharge(agent.battery, used)
    return AgentEvents(m, action, before, used, hover_flag, move_flag, depleted)


def waiting_time(state: SimState, j: int) -> float:
    """Minutes passenger ``j`` has been waiting (frozen once delivered)."""
    p = state.passengers[j]
    if p.status is Status.DORMANT:
        return 0.0
    end = p.delivery_time if p.status is Status.DELIVERED else state.clock
    return (end - p.request_time) * state.config.step_s / 60.0


def step(state: SimState, joint_action: Sequence[int]) -> tuple[SimState, list[AgentEvents], bool]:
    if state.done:
        raise LifecycleError("episode is over; call reset()")
    if len(joint_action) != len(state.agents):
        raise ContractViolation(f"expected {len(state.agents)} actions, got {len(joint_action)}")
    events = [apply_action(state, m, int(a)) for m, a in enumerate(joint_action)]
    spawn_requests(state)
    update_links(state, events)
    board_and_alight(state, events)
    for p in state.passengers:
        p.last_wait = waiting_time(state, p.id)
        p.cum_wait += p.last_wait
    if state.record:
        _record(state, events)
    state.clock += 1
    for a, track in zip(state.agents, state.trajectories):
        track.append((state.clock, a.x, a.y, a.z))
    return state, events, state.done


def _record(state: SimState, events: Iterable[AgentEvents]) -> None:
    for ev in events:
        a = state.agents[ev.agent]
        state.log.append(
            {
                "step": state.clock,
                "agent": ev.agent,
                "action": ACTION_NAMES[ev.action],
                "x": a.x,
                "y": a.y,
                "z": a.z,
                "energy_kwh": a.battery.energy_kwh,
                "energy_used_kwh": ev.energy_used_kwh,
                "pickups": " ".join(map(str, ev.pickups)),
                "dropoffs": " ".join(map(str, ev.dropoffs)),
                "links_made": " ".join(map(str, ev.links_made)),
                "links_broken": " ".join(map(str, ev.links_broken)),
            }
        )


def observe(state: SimState, m: int) -> np.ndarray:
    """Per-agent observation vector.

    Layout, in order: own position (3); distances to the other agents (M-1);
    distances to every vertiport (K); waiting requests per vertiport, only for
    vertiports whose cell contains the agent (K); one block per seat holding an
    occupancy flag, a one-hot target vertiport and the passenger's wait (K+2
    each); remaining energy (1); airborne flag (1).

    Seat blocks list onboard passengers first (flag 1, target = destination),
    then passengers linked but not yet boarded (flag 0.5, target = origin).
    """
    cfg = state.config
    agents, ports = state.agents, state.vertiports
    me = agents[m]
    k, seats = cfg.n_vertiports, cfg.seats
    h, alt = cfg.half_extent_m, cfg.cruise_altitude_m
    diag = math.sqrt(8.0 * h * h + alt * alt)
    horizon_min = cfg.horizon * cfg.step_s / 60.0

    obs = np.zeros(cfg.obs_len)
    obs[0:3] = (me.x / h, me.y / h, me.z / alt)
    i = 3
    for other in agents:
        if other.id != m:
            obs[i] = math.dist((me.x, me.y, me.z), (other.x, other.y, other.z)) / diag
            i += 1
    for port in ports:
        obs[i] = math.dist((me.x, me.y, me.z), (port.x, port.y, 0.0)) / diag
        i += 1
    waiting = np.zeros(k)
    for p in state.passengers:
        if p.status is Status.WAITING:
            waiting[p.origin] += 1
    for port in ports:
        if _horizontal_distance(me, port) <= port.cell_radius:
            obs[i + port.id] = waiting[port.id] / cfg.n_passengers
    i += k
    slots = [(1.0, state.passengers[pid].destination, pid) for pid in me.seats if pid is not None]
    slots += [(0.5, state.passengers[pid].origin, pid) for pid in me.links]
    for flag, target, pid in slots[:seats]:
        obs[i] = flag
        obs[i + 1 + target] = 1.0
        obs[i + 1 + k] = min(1.0, waiting_time(state, pid) / horizon_min)
        i += k + 2
    i = cfg.obs_len - 2
    obs[i] = me.battery.energy_kwh / cfg.battery.capacity_kwh
    obs[i + 1] = 1.0 if me.airborne else 0.0
    return obs


def observe_all(state: SimState) -> np.ndarray:
    return np.stack([observe(state, m) for m in range(len(state.agents))])


def legal_masks(state: SimState) -> np.ndarray:
    return np.stack([legal_actions(state, m) for m in range(len(state.agents))])


def status_counts(state: SimState) -> dict[Status, int]:
    counts = {s: 0 for s in Status}
    for p in state.passengers:
        counts[p.status] += 1
    return counts


EVENT_COLUMNS = (
    "step", "agent", "action", "x", "y", "z", "energy_kwh", "energy_used_kwh",
    "pickups", "dropoffs", "links_made", "links_broken",
)


def write_event_log(state: SimState, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVENT_COLUMNS)
        writer.writeheader()
        writer.writerows(state.log)
    return path


def write_trajectories(state: SimState, out_dir: str | Path, prefix: str = "trajectory") -> list[Path]:
    """One ``t,x,y,z`` CSV per agent."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, track in enumerate(state.trajectories):
        path = out_dir / f"{prefix}_agent{m}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("t", "x", "y", "z"))
            writer.writerows(track)
        paths.append(path)
    return paths
