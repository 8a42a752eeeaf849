"""The seventeen scenario templates: eight nominal, nine out-of-distribution.

Imperfect fidelity strips every feature the cheap simulator lacks
(intersections, pedestrians, static obstacles, curves) and holds background
density constant, so a template degrades to its straight-highway skeleton.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from worldqa.common import derive_seed
from worldqa.urban_driving.idm import IdmParams
from worldqa.urban_driving.scene import (
    EGO, DrivingGoal, Intersection, LaneGeometry, Obstacle, Pedestrian, TrafficScene,
    Trigger, VehicleState,
)

NOMINAL = ("VehicleFollowing", "Yielding", "CutIn", "Intersection", "MergingLane",
           "RoadCurve", "Occlusion", "RecklessDriver")
OOD = ("ErraticMerging", "OodCutIn", "Nudging", "HardBraking", "LaneDeparture",
       "IntersectionEncroachment", "PedestrianCrossing", "UnexpectedObstacle", "AggressiveDriving")
TEMPLATES = NOMINAL + OOD

ROAD_LENGTH = 2000.0
IMPERFECT_DENSITY = 4
PERFECT_DENSITY = (0, 10)
COLORS = ("red", "blue", "white", "black", "silver", "green")


class UnknownTemplate(ValueError):
    pass


@dataclass
class ScenarioSpec:
    template: str
    seed: int = 0
    fidelity: str = "perfect"
    overrides: dict = field(default_factory=dict)
    goal: Optional[DrivingGoal] = None
    time_limit: float = 30.0
    dt: float = 0.1

    @property
    def ood(self) -> bool:
        return self.template in OOD

    def to_json(self) -> dict:
        return {"template": self.template, "seed": self.seed, "fidelity": self.fidelity,
                "overrides": self.overrides, "goal": self.goal.to_json() if self.goal else None,
                "time_limit": self.time_limit, "dt": self.dt}

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if d.get("goal"):
            d["goal"] = DrivingGoal.from_json(d["goal"])
        return cls(**d)


class _Builder:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.perfect = spec.fidelity == "perfect"
        self.rng = random.Random(derive_seed(spec.seed, "scenario", spec.template))
        self.o = dict(spec.overrides)
        self.lanes: dict[int, LaneGeometry] = {}
        self.vehicles: dict[str, VehicleState] = {}
        self.intersections: dict[str, Intersection] = {}
        self.pedestrians: dict[str, Pedestrian] = {}
        self.obstacles: dict[str, Obstacle] = {}
        self.goal: Optional[DrivingGoal] = spec.goal
        self.n_colors = 0
        self.time_limit = spec.time_limit

    def param(self, name, default):
        return self.o.get(name, default)

    def uniform(self, name, lo, hi):
        return float(self.o[name]) if name in self.o else round(self.rng.uniform(lo, hi), 3)

    def straight_road(self, n_lanes: int, curve: Optional[tuple] = None) -> None:
        for i in range(n_lanes):
            segments = ()
            if curve is not None and self.perfect:
                start, length, k = curve
                segments = ((start, 0.0), (length, k), (ROAD_LENGTH - start - length, 0.0))
            self.lanes[i] = LaneGeometry(
                lane_id=i, length=ROAD_LENGTH, lateral=float(i), segments=segments,
                left=i + 1 if i + 1 < n_lanes else None, right=i - 1 if i > 0 else None)

    def label(self) -> str:
        c = COLORS[self.n_colors % len(COLORS)]
        self.n_colors += 1
        return f"{c} vehicle"

    def ego(self, lane: int, s: float = 50.0, v: float = 20.0, target: float = 25.0) -> VehicleState:
        ego = VehicleState(EGO, lane, s, v, role="ego", target_speed=target, label="ego vehicle")
        self.vehicles[EGO] = ego
        return ego

    def npc(self, vid: str, lane: int, s: float, v: float, v0: Optional[float] = None, **kw) -> VehicleState:
        idm = kw.pop("idm", None) or IdmParams(v0=v0 if v0 is not None else max(v, 1.0))
        veh = VehicleState(vid, lane, s, v, idm=idm, label=kw.pop("label", None) or self.label(), **kw)
        self.vehicles[vid] = veh
        return veh

    def intersection(self, s_stop: float, lanes, offset: float) -> None:
        if not self.perfect:
            return
        self.intersections["X1"] = Intersection(
            "X1", {int(l): s_stop for l in lanes}, green=self.param("green", 30.0),
            yellow=self.param("yellow", 3.0), red=self.param("red", 30.0), offset=offset)
        for l in lanes:
            lane = self.lanes[l]
            self.lanes[l] = LaneGeometry(**{**lane.__dict__, "intersection_id": "X1"})

    def pedestrian(self, pid: str, **kw) -> None:
        if self.perfect:
            self.pedestrians[pid] = Pedestrian(pid, **kw)

    def obstacle(self, oid: str, **kw) -> None:
        if self.perfect:
            self.obstacles[oid] = Obstacle(oid, **kw)

    def background(self, lanes: list[int], s_range=(120.0, 900.0)) -> None:
        if not lanes:
            return
        if self.perfect:
            n = int(self.o.get("density", self.rng.randint(*PERFECT_DENSITY)))
        else:
            n = IMPERFECT_DENSITY
        per_lane: dict[int, list[float]] = {l: [] for l in lanes}
        for i in range(n):
            lane = lanes[i % len(lanes)]
            taken = per_lane[lane]
            for _ in range(20):
                s = round(self.rng.uniform(*s_range), 1)
                if all(abs(s - t) > 60.0 for t in taken) and all(
                        v.lane_id != lane or abs(v.s - s) > 60.0 for v in self.vehicles.values()):
                    taken.append(s)
                    v = round(self.rng.uniform(20.0, 26.0), 2)
                    self.npc(f"bg{i + 1}", lane, s, v, v0=v)
                    break

    def scene(self) -> TrafficScene:
        return TrafficScene(
            lanes=self.lanes, vehicles=self.vehicles, intersections=self.intersections,
            pedestrians=self.pedestrians, obstacles=self.obstacles, dt=self.spec.dt,
            goal=self.goal, time_limit=self.time_limit, template=self.spec.template,
            fidelity=self.spec.fidelity, ood=self.spec.ood, seed=self.spec.seed)


def spawn_scenario(spec: ScenarioSpec) -> TrafficScene:
    """Instantiate ``spec``; deterministic in (template, seed, overrides)."""
    try:
        build = _BUILDERS[spec.template]
    except KeyError:
        raise UnknownTemplate(spec.template) from None
    if spec.fidelity not in ("perfect", "imperfect"):
        raise ValueError(f"bad fidelity {spec.fidelity!r}")
    b = _Builder(spec)
    build(b)
    if b.goal is None:
        b.goal = DrivingGoal("survive_until", t=b.time_limit)
    return b.scene()


# ---------------------------------------------------------------------------
# nominal templates


def _vehicle_following(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0)
    gap = b.uniform("gap", 30.0, 50.0)
    v = b.uniform("lead_speed", 18.0, 24.0)
    b.npc("lead", 0, ego.front + gap, v, v0=v, label="red vehicle")
    b.background([1])


def _yielding(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=22.0, target=22.0)
    ahead = b.uniform("ahead", 25.0, 35.0)
    b.npc("merger", 1, ego.front + ahead, 22.0, v0=22.0, label="red vehicle",
          triggers=(Trigger("merger.cut", "lane_change", ("time", b.uniform("cut_time", 2.0, 4.0)),
                            {"to_lane": 0, "event": "CutInTriggered"}),))
    b.background([1], s_range=(250.0, 900.0))


def _cut_in(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=24.0, target=24.0)
    b.npc("cutter", 1, ego.front + b.uniform("ahead", 50.0, 70.0), 18.0, v0=18.0, label="red vehicle",
          triggers=(Trigger("cutter.cut", "lane_change", ("ego_gap", b.param("cut_gap", 20.0)),
                            {"to_lane": 0, "event": "CutInTriggered"}),))
    b.background([1], s_range=(300.0, 900.0))


def _intersection(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=15.0, target=15.0)
    stop = ego.front + b.uniform("stop_distance", 150.0, 250.0)
    b.intersection(stop, (0, 1), offset=b.uniform("signal_offset", 0.0, 63.0))
    b.npc("lead", 0, ego.front + 30.0, 15.0, v0=15.0)
    b.goal = b.goal or DrivingGoal("reach_position", lane_id=0, s=stop + 50.0)
    b.time_limit = max(b.time_limit, 90.0)
    b.background([1])


def _merging_lane(b: _Builder) -> None:
    # the merge lane lies to the right of lane 0; the imperfect road keeps it open-ended
    merge_len = b.param("merge_length", 250.0) if b.perfect else ROAD_LENGTH
    b.lanes[0] = LaneGeometry(0, ROAD_LENGTH, 0.0, right=1)
    b.lanes[1] = LaneGeometry(1, merge_len, -1.0, left=0, merge_target=0 if b.perfect else None)
    b.ego(1, s=20.0, v=18.0, target=20.0)
    b.npc("main1", 0, b.uniform("gap_vehicle", 80.0, 140.0), 20.0, v0=20.0)
    b.goal = b.goal or DrivingGoal("reach_lane", lane_id=0)
    b.background([0], s_range=(260.0, 900.0))


def _road_curve(b: _Builder) -> None:
    radius = b.uniform("radius", 80.0, 120.0)
    b.straight_road(2, curve=(250.0, 200.0, 1.0 / radius))
    ego = b.ego(0, v=20.0, target=25.0)
    b.npc("lead", 0, ego.front + 60.0, 16.0, v0=16.0)
    b.goal = b.goal or DrivingGoal("reach_position", lane_id=0, s=500.0)
    b.time_limit = max(b.time_limit, 45.0)
    b.background([1])


def _occlusion(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=15.0, target=15.0)
    s_obs = ego.front + b.uniform("obstacle_ahead", 120.0, 180.0)
    b.obstacle("parked1", lane_id=1, s=s_obs, label="parked truck")
    b.pedestrian("ped1", s=s_obs + 6.0, y0=1.0, vy=-0.4, start_gap=b.param("ped_gap", 70.0))
    b.background([], s_range=(0, 0))


def _reckless_driver(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=14.0, target=14.0)
    stop = ego.front + 200.0
    # red when the reckless vehicle arrives
    b.intersection(stop, (0, 1), offset=b.uniform("signal_offset", 40.0, 50.0))
    b.npc("reckless", 1, ego.s + 40.0, 20.0, v0=22.0, ignore_signals=True, label="red vehicle")
    b.goal = b.goal or DrivingGoal("survive_until", t=b.time_limit)


# ---------------------------------------------------------------------------
# out-of-distribution templates


def _erratic_merging(b: _Builder) -> None:
    merge_len = 300.0 if b.perfect else ROAD_LENGTH
    b.lanes[0] = LaneGeometry(0, ROAD_LENGTH, 0.0, right=1)
    b.lanes[1] = LaneGeometry(1, merge_len, -1.0, left=0, merge_target=0 if b.perfect else None)
    ego = b.ego(0, v=24.0, target=24.0)
    b.npc("merger", 1, ego.front + 40.0, 20.0, v0=20.0, label="red vehicle",
          triggers=(Trigger("merger.merge", "lane_change", ("ego_gap", b.param("cut_gap", 8.0)),
                            {"to_lane": 0, "event": "ErraticMerge"}),))


def _ood_cut_in(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=25.0, target=25.0)
    b.npc("cutter", 1, ego.front + 30.0, 19.0, v0=19.0, label="red vehicle",
          triggers=(Trigger("cutter.cut", "lane_change", ("ego_gap", b.param("cut_gap", 6.0)),
                            {"to_lane": 0, "event": "CutInTriggered"}),))


def _nudging(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=22.0, target=22.0)
    b.npc("nudger", 1, ego.front + b.uniform("ahead", 10.0, 20.0), 21.0, v0=21.0, label="white SUV",
          triggers=(Trigger("nudger.nudge", "straddle", ("time", b.uniform("nudge_time", 2.0, 5.0)),
                            {"lane": 0, "duration": 3.0}),))


def _hard_braking(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=22.0, target=22.0)
    b.npc("lead", 0, ego.front + b.uniform("gap", 20.0, 30.0), 22.0, v0=22.0, label="red vehicle",
          triggers=(Trigger("lead.brake", "hard_brake", ("time", float(b.param("brake_time", 5.0))),
                            {"decel": float(b.param("decel", -6.0))}),))
    b.background([1])


def _lane_departure(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=22.0, target=22.0)
    t0 = b.uniform("drift_time", 2.0, 4.0)
    b.npc("drifter", 1, ego.front + 15.0, 21.0, v0=21.0, label="blue truck", length=8.0,
          triggers=(Trigger("drifter.drift", "straddle", ("time", t0), {"lane": 0, "duration": 1.5}),
                    Trigger("drifter.depart", "lane_change", ("time", round(t0 + 1.5, 3)),
                            {"to_lane": 0, "event": "LaneDeparture"})))


def _intersection_encroachment(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=16.0, target=16.0)
    stop = ego.front + 120.0
    b.intersection(stop, (0, 1), offset=0.0)  # green on arrival
    t0 = b.uniform("encroach_time", 4.0, 6.0)
    b.obstacle("crosser", lane_id=0, s=stop + 4.0, length=5.0, appear_t=t0, vanish_t=t0 + 4.0,
               label="crossing vehicle")


def _pedestrian_crossing(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=18.0, target=18.0)
    b.pedestrian("ped1", s=ego.front + b.uniform("ped_ahead", 60.0, 90.0), y0=-0.9, vy=0.5,
                 start_t=b.uniform("cross_time", 1.0, 3.0))


def _unexpected_obstacle(b: _Builder) -> None:
    b.straight_road(2)
    ego = b.ego(0, v=20.0, target=20.0)
    b.obstacle("debris1", lane_id=0, s=ego.front + b.uniform("ahead", 70.0, 110.0), length=1.5,
               appear_t=b.uniform("appear_time", 1.0, 3.0), label="fallen debris")


def _aggressive_driving(b: _Builder) -> None:
    b.straight_road(3)
    ego = b.ego(1, s=80.0, v=22.0, target=22.0)
    tail = IdmParams(v0=34.0, T=0.6, a_max=3.0, b=4.0, s0=1.0)
    b.npc("tailgater", 1, ego.s - 14.0, 24.0, idm=tail, label="black sedan",
          triggers=(Trigger("tailgater.weave1", "lane_change", ("time", b.uniform("weave1", 4.0, 6.0)),
                            {"to_lane": 2, "event": "Weaving"}),
                    Trigger("tailgater.weave2", "lane_change", ("time", b.uniform("weave2", 8.0, 10.0)),
                            {"to_lane": 1, "event": "Weaving"})))


_BUILDERS = {
    "VehicleFollowing": _vehicle_following,
    "Yielding": _yielding,
    "CutIn": _cut_in,
    "Intersection": _intersection,
    "MergingLane": _merging_lane,
    "RoadCurve": _road_curve,
    "Occlusion": _occlusion,
    "RecklessDriver": _reckless_driver,
    "ErraticMerging": _erratic_merging,
    "OodCutIn": _ood_cut_in,
    "Nudging": _nudging,
    "HardBraking": _hard_braking,
    "LaneDeparture": _lane_departure,
    "IntersectionEncroachment": _intersection_encroachment,
    "PedestrianCrossing": _pedestrian_crossing,
    "UnexpectedObstacle": _unexpected_obstacle,
    "AggressiveDriving": _aggressive_driving,
}
