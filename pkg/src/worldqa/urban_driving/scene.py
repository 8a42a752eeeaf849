"""Lane-based kinematic traffic scene and its step function.

Positions are longitudinal: a vehicle occupies ``[s, s + length]`` of its
lane, ``s`` being the rear bumper. Lanes carry a lateral index so pedestrians
can cross them; lateral index ``k`` covers ``[k - 0.5, k + 0.5]``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from worldqa.common import Event, canonical_json, content_hash
from worldqa.urban_driving.idm import B_EMERGENCY, IdmParams, idm_acceleration

A_LAT_MAX = 4.0        # lateral acceleration limit on curves, m/s^2
SPEED_STEP = 2.0       # Faster/Slower target-speed increment, m/s
MAX_TARGET = 40.0
MIN_TARGET = 1.0
LANE_CHANGE_ANNOTATION_S = 2.0
EGO = "ego"


class EgoAction(str, Enum):
    LANE_LEFT = "lane_left"
    LANE_RIGHT = "lane_right"
    FASTER = "faster"
    SLOWER = "slower"
    IDLE = "idle"

    def render(self) -> str:
        return f"{self.value}()"


@dataclass(frozen=True)
class LaneGeometry:
    lane_id: int
    length: float
    lateral: float
    segments: tuple[tuple[float, float], ...] = ()  # (length, curvature 1/m)
    left: Optional[int] = None
    right: Optional[int] = None
    successors: tuple[int, ...] = ()
    merge_target: Optional[int] = None
    intersection_id: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise ValueError("lane length must be positive")
        object.__setattr__(self, "segments", tuple(tuple(s) for s in self.segments) or ((self.length, 0.0),))
        object.__setattr__(self, "successors", tuple(self.successors))
        for _, k in self.segments:
            if not math.isfinite(k):
                raise ValueError("curvature must be finite")

    def curvature_at(self, s: float) -> float:
        acc = 0.0
        for seg_len, k in self.segments:
            if s < acc + seg_len:
                return k
            acc += seg_len
        return self.segments[-1][1]

    @property
    def curved(self) -> bool:
        return any(k != 0.0 for _, k in self.segments)

    def to_json(self) -> dict:
        return {f.name: (list(map(list, getattr(self, f.name))) if f.name == "segments"
                         else list(getattr(self, f.name)) if f.name == "successors"
                         else getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_json(cls, d: dict) -> "LaneGeometry":
        return cls(**d)


@dataclass(frozen=True)
class Intersection:
    """Signalized stop lines; phase order green, yellow, red."""

    id: str
    stop_lines: dict  # lane_id -> s of the stop line
    green: float = 30.0
    yellow: float = 3.0
    red: float = 30.0
    offset: float = 0.0

    def phase(self, t: float) -> str:
        x = (t + self.offset) % (self.green + self.yellow + self.red)
        if x < self.green:
            return "green"
        if x < self.green + self.yellow:
            return "yellow"
        return "red"

    def to_json(self) -> dict:
        return {"id": self.id, "stop_lines": {str(k): v for k, v in self.stop_lines.items()},
                "green": self.green, "yellow": self.yellow, "red": self.red, "offset": self.offset}

    @classmethod
    def from_json(cls, d: dict) -> "Intersection":
        d = dict(d)
        d["stop_lines"] = {int(k): v for k, v in d["stop_lines"].items()}
        return cls(**d)


@dataclass(frozen=True)
class Trigger:
    """A one-shot scripted behavior.

    ``condition`` is ``("time", t)`` or ``("ego_gap", meters)``; the latter holds
    when the vehicle is ahead of the ego's front bumper by at most ``meters``.
    ``action`` is one of ``hard_brake``, ``lane_change``, ``straddle``,
    ``set_speed``.
    """

    id: str
    action: str
    condition: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "condition", tuple(self.condition))

    def to_json(self) -> dict:
        return {"id": self.id, "action": self.action, "condition": list(self.condition),
                "params": self.params}

    @classmethod
    def from_json(cls, d: dict) -> "Trigger":
        return cls(d["id"], d["action"], tuple(d["condition"]), dict(d.get("params", {})))


@dataclass
class VehicleState:
    id: str
    lane_id: int
    s: float
    v: float
    length: float = 5.0
    role: str = "npc"
    idm: IdmParams = field(default_factory=IdmParams)
    triggers: tuple[Trigger, ...] = ()
    label: str = ""
    target_speed: Optional[float] = None   # ego only
    fixed_speed: bool = False              # ignore IDM, hold speed
    ignore_signals: bool = False
    forced_accel: Optional[float] = None
    straddle_lane: Optional[int] = None
    straddle_until: Optional[float] = None
    last_lane_change: Optional[tuple] = None  # (t, from_lane, to_lane)

    def __post_init__(self) -> None:
        if self.v < 0:
            raise ValueError("speed must be non-negative")
        if self.role not in ("ego", "npc"):
            raise ValueError(f"bad role {self.role!r}")

    @property
    def front(self) -> float:
        return self.s + self.length

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["idm"] = self.idm.to_json()
        d["triggers"] = [t.to_json() for t in self.triggers]
        d["last_lane_change"] = list(self.last_lane_change) if self.last_lane_change else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "VehicleState":
        d = dict(d)
        d["idm"] = IdmParams.from_json(d["idm"])
        d["triggers"] = tuple(Trigger.from_json(t) for t in d["triggers"])
        if d.get("last_lane_change") is not None:
            d["last_lane_change"] = tuple(d["last_lane_change"])
        return cls(**d)


@dataclass(frozen=True)
class Pedestrian:
    """Walks laterally at ``vy`` lane-widths/s once ``start`` time or gap is met."""

    id: str
    s: float
    y0: float
    vy: float
    start_t: Optional[float] = None
    start_gap: Optional[float] = None
    length: float = 0.8
    label: str = "pedestrian"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Pedestrian":
        return cls(**d)


@dataclass(frozen=True)
class Obstacle:
    id: str
    lane_id: int
    s: float
    length: float = 4.5
    appear_t: float = 0.0
    vanish_t: Optional[float] = None
    label: str = "parked vehicle"

    def active(self, t: float) -> bool:
        return t >= self.appear_t - 1e-9 and (self.vanish_t is None or t < self.vanish_t - 1e-9)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Obstacle":
        return cls(**d)


@dataclass(frozen=True)
class DrivingGoal:
    kind: str  # reach_lane | reach_position | survive_until
    lane_id: Optional[int] = None
    s: Optional[float] = None
    t: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in ("reach_lane", "reach_position", "survive_until"):
            raise ValueError(f"unknown driving goal {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "reach_lane":
            return f"reach lane {self.lane_id} safely"
        if self.kind == "reach_position":
            return f"drive past s={self.s:.0f} m on lane {self.lane_id} safely"
        return f"drive safely until t={self.t:.0f} s"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DrivingGoal":
        return cls(**d)


@dataclass
class TrafficScene:
    lanes: dict[int, LaneGeometry]
    vehicles: dict[str, VehicleState]
    intersections: dict[str, Intersection] = field(default_factory=dict)
    pedestrians: dict[str, Pedestrian] = field(default_factory=dict)
    obstacles: dict[str, Obstacle] = field(default_factory=dict)
    t: float = 0.0
    tick: int = 0
    dt: float = 0.1
    events: list = field(default_factory=list)
    fired: frozenset = frozenset()
    ped_started: dict = field(default_factory=dict)   # pedestrian id -> start time
    active_contacts: frozenset = frozenset()
    offroad_active: bool = False
    goal: Optional[DrivingGoal] = None
    time_limit: float = 60.0
    template: str = ""
    fidelity: str = "perfect"
    ood: bool = False
    seed: int = 0

    @property
    def ego(self) -> Optional[VehicleState]:
        return self.vehicles.get(EGO)

    def copy(self) -> "TrafficScene":
        return replace(
            self,
            vehicles={k: replace(v) for k, v in self.vehicles.items()},
            events=list(self.events),
            ped_started=dict(self.ped_started),
        )

    def pedestrian_y(self, p: Pedestrian, t: Optional[float] = None) -> float:
        t = self.t if t is None else t
        start = self.ped_started.get(p.id)
        if start is None or t < start:
            return p.y0
        return p.y0 + p.vy * (t - start)

    def lanes_at_lateral(self, y: float) -> list[int]:
        return [lid for lid, lane in self.lanes.items() if abs(lane.lateral - y) <= 0.5]

    def occupants(self, lane_id: int) -> list[tuple[str, float, float, float]]:
        """Everything physically on ``lane_id``: (id, s, length, speed)."""
        out = []
        for v in self.vehicles.values():
            if v.lane_id == lane_id or v.straddle_lane == lane_id:
                out.append((v.id, v.s, v.length, v.v))
        for o in self.obstacles.values():
            if o.lane_id == lane_id and o.active(self.t):
                out.append((o.id, o.s, o.length, 0.0))
        lane = self.lanes[lane_id]
        for p in self.pedestrians.values():
            if abs(self.pedestrian_y(p) - lane.lateral) <= 0.5:
                out.append((p.id, p.s, p.length, 0.0))
        return out

    def signal_phases(self) -> dict[str, str]:
        return {iid: x.phase(self.t) for iid, x in sorted(self.intersections.items())}

    def to_json(self) -> dict:
        return {
            "lanes": [self.lanes[k].to_json() for k in sorted(self.lanes)],
            "vehicles": [self.vehicles[k].to_json() for k in sorted(self.vehicles)],
            "intersections": [self.intersections[k].to_json() for k in sorted(self.intersections)],
            "pedestrians": [self.pedestrians[k].to_json() for k in sorted(self.pedestrians)],
            "obstacles": [self.obstacles[k].to_json() for k in sorted(self.obstacles)],
            "t": self.t, "tick": self.tick, "dt": self.dt,
            "events": self.events,
            "fired": sorted(self.fired),
            "ped_started": dict(sorted(self.ped_started.items())),
            "active_contacts": sorted(list(p) for p in self.active_contacts),
            "offroad_active": self.offroad_active,
            "goal": self.goal.to_json() if self.goal else None,
            "time_limit": self.time_limit, "template": self.template,
            "fidelity": self.fidelity, "ood": self.ood, "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrafficScene":
        return cls(
            lanes={l["lane_id"]: LaneGeometry.from_json(l) for l in d["lanes"]},
            vehicles={v["id"]: VehicleState.from_json(v) for v in d["vehicles"]},
            intersections={x["id"]: Intersection.from_json(x) for x in d["intersections"]},
            pedestrians={p["id"]: Pedestrian.from_json(p) for p in d["pedestrians"]},
            obstacles={o["id"]: Obstacle.from_json(o) for o in d["obstacles"]},
            t=d["t"], tick=d["tick"], dt=d["dt"], events=list(d["events"]),
            fired=frozenset(d["fired"]), ped_started=dict(d["ped_started"]),
            active_contacts=frozenset(tuple(p) for p in d["active_contacts"]),
            offroad_active=d["offroad_active"],
            goal=DrivingGoal.from_json(d["goal"]) if d["goal"] else None,
            time_limit=d["time_limit"], template=d["template"], fidelity=d["fidelity"],
            ood=d["ood"], seed=d["seed"],
        )

    def state_hash(self) -> str:
        return content_hash(self.to_json())


# ---------------------------------------------------------------------------
# dynamics


def leader_of(scene: TrafficScene, veh: VehicleState, lane_id: Optional[int] = None
              ) -> tuple[Optional[str], float, float]:
    """Nearest object ahead on ``lane_id``: (id, gap, leader speed)."""
    lane_id = veh.lane_id if lane_id is None else lane_id
    best: tuple[Optional[str], float, float] = (None, math.inf, 0.0)
    for oid, s, length, speed in scene.occupants(lane_id):
        if oid == veh.id:
            continue
        if s < veh.s or (s == veh.s and oid < veh.id):
            continue
        gap = s - veh.front
        if gap < best[1]:
            best = (oid, gap, speed)
    if not veh.ignore_signals:
        for x in scene.intersections.values():
            stop = x.stop_lines.get(lane_id)
            if stop is None or veh.front > stop:
                continue
            phase = x.phase(scene.t)
            dist = stop - veh.front
            must_stop = phase == "red" or (phase == "yellow" and dist > veh.v ** 2 / (2 * veh.idm.b))
            if must_stop and dist < best[1]:
                best = (f"stopline:{x.id}", dist, 0.0)
    return best


def _acceleration(scene: TrafficScene, veh: VehicleState) -> float:
    if veh.forced_accel is not None:
        return veh.forced_accel
    if veh.fixed_speed:
        return 0.0
    params = veh.idm
    if veh.role == "ego" and veh.target_speed is not None:
        params = replace(params, v0=veh.target_speed)
    _, gap, lead_v = leader_of(scene, veh)
    if gap <= 0:
        # already overlapping: brake as hard as allowed
        return -B_EMERGENCY
    return idm_acceleration(veh.v, gap, veh.v - lead_v, params)


def _trigger_holds(scene: TrafficScene, veh: VehicleState, trig: Trigger) -> bool:
    kind, value = trig.condition[0], trig.condition[1]
    if kind == "time":
        return scene.t >= value - 1e-9
    if kind == "ego_gap":
        ego = scene.ego
        if ego is None:
            return False
        ahead = veh.s - ego.front
        return 0.0 <= ahead <= value
    raise ValueError(f"unknown trigger condition {kind!r}")


def _lane_change(scene: TrafficScene, veh: VehicleState, to_lane: int, events: list) -> None:
    frm = veh.lane_id
    veh.lane_id = to_lane
    veh.straddle_lane = None
    veh.last_lane_change = (scene.t, frm, to_lane)
    events.append(Event("LaneChange", vehicle=veh.id, frm=frm, to=to_lane, t=scene.t))


def _fire_triggers(scene: TrafficScene, events: list) -> None:
    fired = set(scene.fired)
    for vid in sorted(scene.vehicles):
        veh = scene.vehicles[vid]
        for trig in veh.triggers:
            if trig.id in fired or not _trigger_holds(scene, veh, trig):
                continue
            fired.add(trig.id)
            p = trig.params
            if trig.action == "hard_brake":
                veh.forced_accel = float(p.get("decel", -6.0))
                events.append(Event("HardBrakeTriggered", vehicle=vid, t=scene.t, decel=veh.forced_accel))
            elif trig.action == "lane_change":
                events.append(Event(p.get("event", "LaneChangeTriggered"), vehicle=vid, t=scene.t,
                                    to=p["to_lane"]))
                _lane_change(scene, veh, int(p["to_lane"]), events)
            elif trig.action == "straddle":
                veh.straddle_lane = int(p["lane"])
                veh.straddle_until = scene.t + float(p.get("duration", 3.0))
                events.append(Event("NudgeTriggered", vehicle=vid, t=scene.t, lane=veh.straddle_lane))
            elif trig.action == "set_speed":
                veh.idm = replace(veh.idm, v0=float(p["v0"]))
                events.append(Event("SpeedChangeTriggered", vehicle=vid, t=scene.t, v0=float(p["v0"])))
            else:
                raise ValueError(f"unknown trigger action {trig.action!r}")
    for p in scene.pedestrians.values():
        if p.id in scene.ped_started:
            continue
        start = False
        if p.start_t is not None and scene.t >= p.start_t - 1e-9:
            start = True
        if p.start_gap is not None and scene.ego is not None and 0 <= p.s - scene.ego.front <= p.start_gap:
            start = True
        if start:
            scene.ped_started[p.id] = scene.t
            events.append(Event("PedestrianEntered", pedestrian=p.id, t=scene.t))
    for o in scene.obstacles.values():
        if o.appear_t > 0 and abs(o.appear_t - scene.t) < scene.dt / 2 and ("appear:" + o.id) not in fired:
            fired.add("appear:" + o.id)
            events.append(Event("ObstacleAppeared", obstacle=o.id, t=scene.t, lane=o.lane_id))
    scene.fired = frozenset(fired)


def _contacts(scene: TrafficScene) -> set[tuple[str, str]]:
    pairs = set()
    for lane_id in scene.lanes:
        occ = sorted(scene.occupants(lane_id), key=lambda o: (o[1], o[0]))
        for i in range(len(occ)):
            for j in range(i + 1, len(occ)):
                a, b = occ[i], occ[j]
                if b[1] >= a[1] + a[2]:
                    break
                if a[0] in scene.vehicles or b[0] in scene.vehicles:
                    pairs.add(tuple(sorted((a[0], b[0]))))
    return pairs


def _ego_action(scene: TrafficScene, action: EgoAction, events: list) -> None:
    ego = scene.ego
    if ego is None:
        return
    action = EgoAction(action)
    lane = scene.lanes[ego.lane_id]
    if action in (EgoAction.LANE_LEFT, EgoAction.LANE_RIGHT):
        to = lane.left if action is EgoAction.LANE_LEFT else lane.right
        if to is None:
            events.append(Event("IllegalLaneChange", vehicle=EGO, direction=action.value, t=scene.t))
            return
        _lane_change(scene, ego, to, events)
    elif action is EgoAction.FASTER:
        ego.target_speed = min(MAX_TARGET, (ego.target_speed or ego.v) + SPEED_STEP)
    elif action is EgoAction.SLOWER:
        ego.target_speed = max(MIN_TARGET, (ego.target_speed or ego.v) - SPEED_STEP)


def step_scene(scene: TrafficScene, ego_action: EgoAction = EgoAction.IDLE, dt: Optional[float] = None
               ) -> tuple[TrafficScene, list]:
    """Advance the scene by one tick; returns the new scene and this tick's events."""
    dt = scene.dt if dt is None else dt
    if not 0 < dt <= 0.5:
        raise ValueError("dt must lie in (0, 0.5]")
    new = scene.copy()
    events: list = []

    _fire_triggers(new, events)
    _ego_action(new, ego_action, events)
    # lane changes into an occupied gap collide at the switch instant
    _record_contacts(new, events)

    for veh in new.vehicles.values():
        if veh.straddle_until is not None and new.t >= veh.straddle_until - 1e-9:
            veh.straddle_lane = None
            veh.straddle_until = None

    accels = {vid: _acceleration(new, new.vehicles[vid]) for vid in sorted(new.vehicles)}
    prev_front = {vid: v.front for vid, v in new.vehicles.items()}
    for vid in sorted(new.vehicles):
        veh = new.vehicles[vid]
        veh.v = max(0.0, veh.v + accels[vid] * dt)
        if veh.forced_accel is not None and veh.v == 0.0:
            # a scripted stop is final
            veh.forced_accel = None
            veh.fixed_speed = True
        veh.s = veh.s + veh.v * dt

    new.tick += 1
    new.t = round(new.tick * dt, 9)

    _signals(new, prev_front, events)
    _lane_ends(new, events)
    _curves(new, events)
    _record_contacts(new, events)

    if new.goal is not None and check_outcome(new, new.goal)[0] == "success" and not any(
            e["kind"] == "GoalReached" for e in new.events):
        events.append(Event("GoalReached", t=new.t))
    new.events.extend(events)
    return new, events


def _record_contacts(scene: TrafficScene, events: list) -> None:
    now = _contacts(scene)
    for a, b in sorted(now - scene.active_contacts):
        events.append(Event("Collision", a=a, b=b, t=scene.t))
    scene.active_contacts = frozenset(now)


def _signals(scene: TrafficScene, prev_front: dict, events: list) -> None:
    for x in scene.intersections.values():
        phase_prev = x.phase(round(scene.t - scene.dt, 9))
        for vid, veh in sorted(scene.vehicles.items()):
            stop = x.stop_lines.get(veh.lane_id)
            if stop is None:
                continue
            if prev_front.get(vid, math.inf) < stop <= veh.front and phase_prev == "red":
                events.append(Event("SignalViolation", vehicle=vid, intersection=x.id, t=scene.t))


def _lane_ends(scene: TrafficScene, events: list) -> None:
    for vid in sorted(scene.vehicles):
        veh = scene.vehicles[vid]
        lane = scene.lanes[veh.lane_id]
        if veh.s <= lane.length:
            continue
        if lane.successors:
            veh.s -= lane.length
            veh.lane_id = lane.successors[0]
        elif veh.role == "ego":
            events.append(Event("OffRoad", vehicle=vid, reason="lane end", t=scene.t))
            veh.s, veh.v = lane.length, 0.0
            veh.fixed_speed = True
        else:
            del scene.vehicles[vid]
            events.append(Event("Exited", vehicle=vid, t=scene.t))


def _curves(scene: TrafficScene, events: list) -> None:
    ego = scene.ego
    if ego is None:
        return
    k = scene.lanes[ego.lane_id].curvature_at(ego.s)
    too_fast = k != 0.0 and ego.v ** 2 * abs(k) > A_LAT_MAX
    if too_fast and not scene.offroad_active:
        events.append(Event("OffRoad", vehicle=EGO, reason="curve overspeed", t=scene.t,
                            speed=round(ego.v, 3)))
    scene.offroad_active = too_fast


# ---------------------------------------------------------------------------
# outcome


FAIL_KINDS = ("Collision", "OffRoad")


def _ego_violation(event: dict) -> bool:
    if event["kind"] == "Collision":
        return EGO in (event["a"], event["b"])
    if event["kind"] == "OffRoad":
        return event["vehicle"] == EGO
    return False


def check_outcome(scene: TrafficScene, goal: Optional[DrivingGoal] = None) -> tuple[str, Optional[dict]]:
    """``("ongoing"|"success"|"failure", first violating event or reason)``."""
    goal = scene.goal if goal is None else goal
    for e in scene.events:
        if _ego_violation(e):
            return "failure", e
    ego = scene.ego
    if goal is not None and ego is not None:
        if goal.kind == "reach_lane" and ego.lane_id == goal.lane_id:
            return "success", None
        if goal.kind == "reach_position" and ego.lane_id == goal.lane_id and ego.s >= goal.s:
            return "success", None
        if goal.kind == "survive_until" and scene.t >= goal.t - 1e-9:
            return "success", None
    if scene.t >= scene.time_limit - 1e-9:
        return "failure", {"kind": "Timeout", "t": scene.t}
    return "ongoing", None


def export_trace(scenes: list[TrafficScene], path) -> None:
    """Write one JSON line per timestep: t, vehicles, events since the previous line."""
    with open(path, "w", encoding="utf-8") as fh:
        prev = 0
        for sc in scenes:
            row = {
                "t": sc.t,
                "vehicles": [{"id": v.id, "lane": v.lane_id, "s": round(v.s, 6), "v": round(v.v, 6)}
                             for v in sorted(sc.vehicles.values(), key=lambda v: v.id)],
                "events": sc.events[prev:],
            }
            prev = len(sc.events)
            fh.write(canonical_json(row) + "\n")


def load_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "DrivingGoal", "EgoAction", "Intersection", "LaneGeometry", "Obstacle", "Pedestrian",
    "TrafficScene", "Trigger", "VehicleState", "check_outcome", "export_trace", "leader_of",
    "load_trace", "step_scene",
]
