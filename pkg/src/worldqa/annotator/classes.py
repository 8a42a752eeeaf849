"""Question classes: how a template's slots and answer are grounded in an episode.

Each class pairs ``ground`` (pick a moment of an episode, fill slots, compute
the answer by simulation) with ``truth`` (recompute that answer from the
sample's ``meta`` alone, by replaying the recorded actions). Verification is
``truth(meta) == answer``; a class without ``truth`` is never verified.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from worldqa.agent_loop import EpisodeRecord, make_env
from worldqa.agent_world.combat import resolve_combat
from worldqa.agent_world.engine import rules
from worldqa.agent_world.solver import free_region
from worldqa.agent_world.types import (
    DIRECTIONS, MonsterKind, Stats, WorldState, tile_args, tile_kind,
)
from worldqa.annotator.samples import LABELS
from worldqa.textio import default_skills, parse_action
from worldqa.urban_driving.scene import (
    EGO, EgoAction, TrafficScene, check_outcome, leader_of, step_scene,
)

EnvFactory = Callable[[dict], object]


class ReplayMismatch(RuntimeError):
    """A recorded action prefix no longer reproduces the recorded events."""


@dataclass
class Grounded:
    slots: dict
    truth: str
    options: Optional[list[str]] = None
    meta: dict = field(default_factory=dict)
    hint: str = ""          # simulator-side fact offered to the drafter

    def labelled(self) -> tuple[Optional[list[str]], str]:
        """(options, answer) with a choice letter when options exist."""
        if self.options is None:
            return None, self.truth
        return list(self.options), LABELS[self.options.index(self.truth)]


@dataclass
class Ctx:
    record: EpisodeRecord
    rng: random.Random
    store: object = None
    _traj: Optional[tuple] = None

    @property
    def traj(self) -> tuple:
        if self._traj is None:
            self._traj = trajectory(self.record.env_spec, self.record.actions)
        return self._traj


@dataclass(frozen=True)
class QuestionClass:
    name: str
    env_kind: str
    kind: str
    temporal_scale: str
    ground: Callable[[Ctx], Optional[Grounded]]
    truth: Optional[Callable[[dict, EnvFactory], Optional[str]]] = None


REGISTRY: dict[str, QuestionClass] = {}


def register(qc: QuestionClass) -> QuestionClass:
    if qc.name in REGISTRY:
        raise ValueError(f"duplicate question class {qc.name!r}")
    REGISTRY[qc.name] = qc
    return qc


# ---------------------------------------------------------------------------
# replay helpers


def _apply(env, action: Optional[str]) -> list:
    if action is None:
        return [dict(e) for e in env.noop()]
    act = parse_action(action, env.env_kind, default_skills(env.env_kind))
    return [dict(e) for e in env.apply(act)]


def _snapshot(env):
    return env.state if env.env_kind == "agent_world" else env.scene


def trajectory(env_spec: dict, actions: list, factory: EnvFactory = make_env) -> tuple[list, list, str]:
    """(snapshots before each step plus the final one, events per step, final status)."""
    env = factory(env_spec)
    snaps, events = [_snapshot(env)], []
    for a in actions:
        events.append(_apply(env, a))
        snaps.append(_snapshot(env))
    return snaps, events, env.status


def branch(env_spec: dict, actions: list, t: int, alt: str, factory: EnvFactory = make_env):
    """Replay ``actions[:t]``, take ``alt``, then the recorded suffix; returns the final env."""
    env = factory(env_spec)
    for a in actions[:t]:
        _apply(env, a)
    seq = [alt] + list(actions[t + 1:])
    for a in seq:
        if env.status != "ongoing":
            break
        _apply(env, a)
    return env


def _options(rng: random.Random, truth: str, distractors: list[str], n: int) -> list[str]:
    pool = sorted({d for d in distractors if d != truth})
    rng.shuffle(pool)
    opts = [truth] + pool[:n - 1]
    rng.shuffle(opts)
    return opts


def _pos(p) -> str:
    return f"({p[0]}, {p[1]})"


# ---------------------------------------------------------------------------
# agent world


def _monster_truth(meta: dict) -> str:
    p = Stats.from_json(meta["player"])
    m = meta["monster"]
    kind = MonsterKind(m["kind"])
    out = resolve_combat(p, Stats.from_json(m["stats"]), kind, lifesteal_pct=m["lifesteal_pct"],
                         monster_strikes=m["monster_strikes"])
    return str(out.damage_taken) if out.feasible else "You cannot damage it"


def _ground_combat(ctx: Ctx) -> Optional[Grounded]:
    snaps, _, _ = ctx.traj
    cands = []
    for i, s in enumerate(snaps[:-1] or snaps):
        if s.dead:
            continue
        for mid, m in sorted(s.monsters.items()):
            if m.floor == s.current_floor:
                cands.append((i, mid))
    if not cands:
        return None
    i, mid = ctx.rng.choice(cands)
    s: WorldState = snaps[i]
    m = s.monsters[mid]
    r = rules(s)
    pct = m.lifesteal_pct if m.kind is MonsterKind.VAMPIRE else r["lifesteal_pct"]
    meta = {"player": s.player_stats.to_json(),
            "monster": {"id": mid, "kind": m.kind.value, "stats": m.stats.to_json(),
                        "lifesteal_pct": pct, "monster_strikes": r["monster_strikes"]},
            "step": i}
    truth = _monster_truth(meta)
    if truth.isdigit():
        d = int(truth)
        distract = [str(max(d + k, 0)) for k in (-20, -10, 10, 20, 30) if d + k >= 0] + ["You cannot damage it"]
    else:
        distract = ["0", str(m.stats.attack), str(2 * m.stats.attack)]
    st = s.player_stats
    slots = {"life": st.life, "attack": st.attack, "defense": st.defense, "monster": mid,
             "m_life": m.stats.life, "m_attack": m.stats.attack, "m_defense": m.stats.defense}
    return Grounded(slots, truth, _options(ctx.rng, truth, distract, 3), meta,
                    hint=f"the simulator gives damage {truth}")


register(QuestionClass("aw.combat_damage", "agent_world", "MultipleChoice", "Step", _ground_combat,
                       lambda meta, f: _monster_truth(meta)))


ITEM_FOR_STAT = {"defense": "Blue Crystal", "attack": "Red Crystal", "health": "Health Potion"}


def _ground_item(ctx: Ctx) -> Optional[Grounded]:
    s0: WorldState = ctx.traj[0][0]
    present = set()
    for g in s0.floors:
        for row in g:
            for t in row:
                if tile_kind(t) == "crystal":
                    present.add(tile_args(t)[0])
                elif tile_kind(t) == "potion":
                    present.add("health")
    stats = sorted(present & set(ITEM_FOR_STAT)) or sorted(ITEM_FOR_STAT)
    stat = ctx.rng.choice(stats)
    truth = ITEM_FOR_STAT[stat]
    opts = list(ITEM_FOR_STAT.values())
    ctx.rng.shuffle(opts)
    return Grounded({"stat": stat}, truth, opts, {"stat": stat},
                    hint="crystals: Red raises attack, Blue raises defense; potions restore health")


register(QuestionClass("aw.item_priority", "agent_world", "MultipleChoice", "Step", _ground_item,
                       lambda meta, f: ITEM_FOR_STAT[meta["stat"]]))


ENCOUNTER_NAMES = {"altar": "altar", "store": "store", "key": "key", "potion": "health potion",
                   "crystal": "crystal", "stairs": "stairs", "door": "door"}


def _encounters(snaps: list) -> dict[str, tuple[int, tuple]]:
    """category -> (last step it was next to or under the player, (floor, r, c)); ambiguous dropped."""
    latest: dict[str, tuple[int, set]] = {}
    for i, s in enumerate(snaps):
        r, c = s.player_pos
        seen: dict[str, set] = {}
        for dr, dc in [(0, 0)] + list(DIRECTIONS.values()):
            p = (r + dr, c + dc)
            if not s.in_bounds(p):
                continue
            k = tile_kind(s.tile(p))
            if k in ENCOUNTER_NAMES:
                seen.setdefault(k, set()).add((s.current_floor, p[0], p[1]))
        for k, cells in seen.items():
            latest[k] = (i, cells)
    return {k: (i, next(iter(cells))) for k, (i, cells) in latest.items() if len(cells) == 1}


def _last_position_truth(meta: dict, factory: EnvFactory) -> Optional[str]:
    snaps, _, _ = trajectory(meta["env_spec"], meta["actions"], factory)
    enc = _encounters(snaps)
    if meta["category"] not in enc:
        return None
    _, (f, r, c) = enc[meta["category"]]
    return _pos((r, c)) + (f" on floor {f + 1}" if len(snaps[0].floors) > 1 else "")


def _ground_last_position(ctx: Ctx) -> Optional[Grounded]:
    snaps, _, _ = ctx.traj
    enc = _encounters(snaps)
    if not enc:
        return None
    cat = ctx.rng.choice(sorted(enc))
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "category": cat}
    truth = _last_position_truth(meta, make_env)
    return Grounded({"category": ENCOUNTER_NAMES[cat]}, truth, None, meta,
                    hint=f"replaying the episode, the last {ENCOUNTER_NAMES[cat]} seen was at {truth}")


register(QuestionClass("aw.last_position_of", "agent_world", "EpisodicMemory", "Plan",
                       _ground_last_position, _last_position_truth))


TARGET_KINDS = ("key", "potion", "crystal", "stairs", "store", "altar", "door", "item", "orb")


def _target_name(tile: str) -> str:
    k, a = tile_kind(tile), tile_args(tile)
    if k in ("key", "door"):
        return f"{a[0]} {k}"
    if k == "crystal":
        return {"attack": "Red Crystal", "defense": "Blue Crystal", "life": "Green Crystal"}[a[0]]
    if k == "potion":
        return "health potion"
    if k == "item":
        return a[0]
    if k == "orb":
        return "Orb of the Hero"
    return k


def _reachable(s: WorldState, target: tuple) -> bool:
    region = free_region(s)
    if target in region:
        return True
    return any((target[0] - dr, target[1] - dc) in region for dr, dc in DIRECTIONS.values())


def _reach_truth(meta: dict, factory: EnvFactory) -> str:
    snaps, _, _ = trajectory(meta["env_spec"], meta["actions"][:meta["step"]], factory)
    return "Yes" if _reachable(snaps[-1], tuple(meta["target"])) else "No"


def _ground_reachable(ctx: Ctx) -> Optional[Grounded]:
    snaps, _, _ = ctx.traj
    want = ctx.rng.choice(["Yes", "No"])
    cands = {"Yes": [], "No": []}
    for i, s in enumerate(snaps[:-1] or snaps):
        for r, row in enumerate(s.grid):
            for c, t in enumerate(row):
                if tile_kind(t) in TARGET_KINDS and (r, c) != s.player_pos:
                    cands["Yes" if _reachable(s, (r, c)) else "No"].append((i, (r, c), t))
    pick = cands[want] or cands["No" if want == "Yes" else "Yes"]
    if not pick:
        return None
    i, pos, tile = ctx.rng.choice(pick)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i, "target": list(pos)}
    truth = _reach_truth(meta, make_env)
    return Grounded({"step": i, "target": _target_name(tile), "pos": _pos(pos)}, truth, ["Yes", "No"], meta,
                    hint=f"a flood fill over passable tiles says {truth}")


register(QuestionClass("aw.reachable_directly", "agent_world", "MultipleChoice", "Subgoal",
                       _ground_reachable, _reach_truth))


_PRIORITY = ("PlayerDied", "CombatWon", "DoorOpened", "Collected", "ReachedStairs", "FloorChanged",
             "Traded", "WallRemoved", "WingUsed", "OrbInspected", "CombatInfeasible", "IllegalMove",
             "WingBlocked", "TradeRejected", "SkillFailed", "NoOp", "Moved")


def describe_world_events(events: list) -> str:
    by_kind = {}
    for e in events:
        by_kind.setdefault(e["kind"], e)
    for k in _PRIORITY:
        if k not in by_kind:
            continue
        e = by_kind[k]
        if k == "PlayerDied":
            return f"the warrior was defeated by {e['monster']}"
        if k == "CombatWon":
            return f"defeated {e['monster']}"
        if k == "DoorOpened":
            return f"opened a {e['color']} door"
        if k == "Collected":
            return "picked up the " + _target_name(e["item"])
        if k in ("ReachedStairs", "FloorChanged"):
            return "took the stairs"
        if k == "Traded":
            return f"bought a {e['stat']} upgrade"
        if k == "WallRemoved":
            return "broke a wall with the shovel"
        if k == "WingUsed":
            return "flew to the mirrored position"
        if k == "OrbInspected":
            return "checked the predicted combat damage"
        if k == "CombatInfeasible":
            return f"nothing, because {e['monster']} could not be damaged"
        if k in ("IllegalMove", "WingBlocked", "TradeRejected", "SkillFailed", "NoOp"):
            return "nothing, the action was blocked"
        if k == "Moved":
            return f"moved to {_pos(e['to'])}"
    return "nothing happened"


def _rationale_truth(meta: dict, factory: EnvFactory) -> str:
    _, events, _ = trajectory(meta["env_spec"], meta["actions"][:meta["step"] + 1], factory)
    return describe_world_events(events[-1])


_GENERIC_AW = ["picked up the red key", "defeated M1", "opened a yellow door", "took the stairs",
               "picked up the health potion", "nothing, the action was blocked"]


def _ground_world_rationale(ctx: Ctx) -> Optional[Grounded]:
    _, events, _ = ctx.traj
    steps = [i for i, a in enumerate(ctx.record.actions) if a is not None]
    if not steps:
        return None
    notable = [i for i in steps if describe_world_events(events[i]).split()[0] != "moved"]
    i = ctx.rng.choice(notable) if notable and ctx.rng.random() < 0.8 else ctx.rng.choice(steps)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i}
    truth = _rationale_truth(meta, make_env)
    distract = [describe_world_events(e) for e in events] + _GENERIC_AW
    return Grounded({"step": i, "action": ctx.record.actions[i]}, truth,
                    _options(ctx.rng, truth, distract, 4), meta,
                    hint=f"the simulator log shows the warrior {truth}")


register(QuestionClass("aw.next_action_rationale", "agent_world", "Rationale", "Step",
                       _ground_world_rationale, _rationale_truth))


WORLD_OUTCOMES = {"success": "The goal would be reached", "failure": "The warrior would be defeated",
                  "ongoing": "The goal would not yet be reached"}


def _cf_world_truth(meta: dict, factory: EnvFactory) -> str:
    snaps, _, status = trajectory(meta["env_spec"], meta["actions"], factory)
    if status != meta["factual_status"]:
        raise ReplayMismatch(f"factual branch ends {status}, recorded {meta['factual_status']}")
    env = branch(meta["env_spec"], meta["actions"], meta["step"], meta["alt"], factory)
    return WORLD_OUTCOMES[env.status]


def _decision_points(ctx: Ctx) -> list[tuple[int, list[str]]]:
    snaps, _, _ = ctx.traj
    out = []
    env = make_env(ctx.record.env_spec)
    for i, a in enumerate(ctx.record.actions):
        if a is None:
            continue
        if env.env_kind == "agent_world":
            env.state = snaps[i]
        else:
            env.scene = snaps[i]
        alts = sorted({x.render() for x in env.legal_actions()} - {a})
        if alts:
            out.append((i, alts))
    return out


def _ground_cf_world(ctx: Ctx) -> Optional[Grounded]:
    points = _decision_points(ctx)
    if not points:
        return None
    _, events, status = ctx.traj
    fights = [p for p in points if any(e["kind"] in ("CombatWon", "PlayerDied") for e in events[p[0]])]
    i, alts = ctx.rng.choice(fights if fights and ctx.rng.random() < 0.7 else points)
    alt = ctx.rng.choice(alts)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i, "alt": alt,
            "factual_status": status}
    truth = _cf_world_truth(meta, make_env)
    env = branch(meta["env_spec"], meta["actions"], i, alt)
    meta["counterfactual_life"] = env.state.player_stats.life
    meta["factual_life"] = ctx.traj[0][-1].player_stats.life
    return Grounded({"step": i, "action": ctx.record.actions[i], "alt": alt}, truth,
                    list(WORLD_OUTCOMES.values()), meta,
                    hint=(f"replaying the alternative branch ends with {meta['counterfactual_life']} health "
                          f"versus {meta['factual_life']} in the recorded episode"))


register(QuestionClass("aw.counterfactual_outcome", "agent_world", "Counterfactual", "Step",
                       _ground_cf_world, _cf_world_truth))


# ---------------------------------------------------------------------------
# plan comparison (both environments)


def _plan_truth(meta: dict, factory: EnvFactory) -> Optional[str]:
    statuses = []
    for plan in meta["plans"]:
        _, _, status = trajectory(plan["env_spec"], plan["actions"], factory)
        statuses.append(status == "success")
    if statuses.count(True) != 1:
        return None
    return meta["options"][statuses.index(True)]


def _no_direct_grounding(ctx: Ctx) -> Optional[Grounded]:
    return None  # built by generate_plan_comparison, which needs two episodes


register(QuestionClass("aw.plan_comparison", "agent_world", "PlanComparison", "Plan",
                       _no_direct_grounding, _plan_truth))
register(QuestionClass("dr.plan_comparison", "driving", "PlanComparison", "Plan",
                       _no_direct_grounding, _plan_truth))


# ---------------------------------------------------------------------------
# driving

HORIZON = 3.0
MOVES = ("lane change to the left", "lane change to the right", "brake hard", "keep its lane")


def _movement(scene0: TrafficScene, vid: str, events: list) -> str:
    t0 = scene0.t
    for e in events:
        if e.get("vehicle") != vid or not t0 - 1e-9 <= e.get("t", -1) < t0 + HORIZON - 1e-9:
            continue
        if e["kind"] == "LaneChange":
            lat = {l: g.lateral for l, g in scene0.lanes.items()}
            return MOVES[0] if lat[e["to"]] > lat[e["frm"]] else MOVES[1]
        if e["kind"] == "HardBrakeTriggered":
            return MOVES[2]
    return MOVES[3]


def _relpos(scene: TrafficScene, vid: str) -> str:
    ego, v = scene.ego, scene.vehicles[vid]
    if v.lane_id == ego.lane_id:
        return "in front" if v.s > ego.s else "behind"
    side = "left" if scene.lanes[v.lane_id].lateral > scene.lanes[ego.lane_id].lateral else "right"
    return f"{'ahead' if v.s > ego.s else 'behind'} in the {side} lane"


def _flat(events: list) -> list:
    return [e for step in events for e in step]


def _future_truth(meta: dict, factory: EnvFactory) -> Optional[str]:
    snaps, events, _ = trajectory(meta["env_spec"], meta["actions"], factory)
    scene = snaps[meta["step"]]
    if meta["vehicle"] not in scene.vehicles:
        return None
    return _movement(scene, meta["vehicle"], _flat(events[meta["step"]:]))


def _ground_future(ctx: Ctx) -> Optional[Grounded]:
    snaps, events, _ = ctx.traj
    cands, busy = [], []
    for i, sc in enumerate(snaps[:-1]):
        if sc.ego is None:
            continue
        later = _flat(events[i:])
        for vid, v in sorted(sc.vehicles.items()):
            if vid == EGO or abs(v.s - sc.ego.s) > 80.0:
                continue
            cands.append((i, vid))
            if _movement(sc, vid, later) != MOVES[3]:
                busy.append((i, vid))
    if not cands:
        return None
    i, vid = ctx.rng.choice(busy if busy and ctx.rng.random() < 0.75 else cands)
    sc = snaps[i]
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i, "vehicle": vid}
    truth = _future_truth(meta, make_env)
    opts = list(MOVES)
    ctx.rng.shuffle(opts)
    _attach_kinematics(meta, sc)
    return Grounded({"label": sc.vehicles[vid].label or vid, "where": _relpos(sc, vid), "t": f"{sc.t:.1f}"},
                    truth, opts, meta, hint=f"over the next {HORIZON:.0f} s the vehicle's log shows: {truth}")


register(QuestionClass("dr.future_movement", "driving", "MultipleChoice", "Step", _ground_future, _future_truth))


def _idle_rollout_collides(scene: TrafficScene, seconds: float) -> bool:
    sc = scene
    for _ in range(int(round(seconds / sc.dt))):
        sc, evs = step_scene(sc, EgoAction.IDLE)
        for e in evs:
            if (e["kind"] == "Collision" and EGO in (e["a"], e["b"])) or (
                    e["kind"] == "OffRoad" and e["vehicle"] == EGO):
                return True
    return False


def _collision_truth(meta: dict, factory: EnvFactory) -> str:
    snaps, _, _ = trajectory(meta["env_spec"], meta["actions"][:meta["step"]], factory)
    return "Yes" if _idle_rollout_collides(snaps[-1], meta["seconds"]) else "No"


def _ground_collision(ctx: Ctx) -> Optional[Grounded]:
    snaps, _, _ = ctx.traj
    steps = [i for i, sc in enumerate(snaps[:-1]) if sc.ego is not None]
    if not steps:
        return None
    i = ctx.rng.choice(steps)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i, "seconds": HORIZON}
    truth = _collision_truth(meta, make_env)
    _attach_kinematics(meta, snaps[i])
    return Grounded({"t": f"{snaps[i].t:.1f}", "seconds": f"{HORIZON:.0f}"}, truth, ["Yes", "No"], meta,
                    hint=f"an idle rollout from that moment says {truth}")


register(QuestionClass("dr.collision_query", "driving", "MultipleChoice", "Subgoal",
                       _ground_collision, _collision_truth))


def _ego_lanes(env_spec: dict, actions: list, factory: EnvFactory) -> list[tuple[float, Optional[int], list]]:
    """Tick-level replay: (time after the tick, ego lane, events of the tick)."""
    env = factory(env_spec)
    out = []
    for a in actions:
        if env.status != "ongoing":
            break
        first = EgoAction.IDLE if a is None else env._resolve(parse_action(a, "driving", default_skills("driving")))
        if first is None:
            first = EgoAction.IDLE
        for k in range(env.decision_ticks):
            env.scene, evs = step_scene(env.scene, first if k == 0 else EgoAction.IDLE)
            ego = env.scene.ego
            out.append((env.scene.t, ego.lane_id if ego else None, [dict(e) for e in evs]))
            env.status = check_outcome(env.scene)[0]
            if env.status != "ongoing":
                break
    return out


def _last_lane_truth(meta: dict, factory: EnvFactory) -> Optional[str]:
    ticks = _ego_lanes(meta["env_spec"], meta["actions"], factory)
    if meta.get("vehicle"):
        hits = [lane for _, lane, evs in ticks
                if any(e["kind"] == "LaneChange" and e["vehicle"] == meta["vehicle"] for e in evs)]
        lane = hits[-1] if hits else None
    else:
        at = [lane for t, lane, _ in ticks if abs(t - meta["time"]) < 1e-6]
        lane = at[0] if at else None
    return None if lane is None else f"lane {lane}"


def _ground_last_lane(ctx: Ctx) -> Optional[Grounded]:
    ticks = _ego_lanes(ctx.record.env_spec, ctx.record.actions, make_env)
    if not ticks:
        return None
    snaps = ctx.traj[0]
    changers = sorted({e["vehicle"] for _, _, evs in ticks for e in evs
                       if e["kind"] == "LaneChange" and e["vehicle"] != EGO})
    base = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions}
    if changers and ctx.rng.random() < 0.7:
        vid = ctx.rng.choice(changers)
        label = snaps[0].vehicles[vid].label if vid in snaps[0].vehicles else vid
        meta = {**base, "vehicle": vid}
        slots = {"event": f"the {label} changed lanes most recently"}
    else:
        t, _, _ = ctx.rng.choice(ticks)
        meta = {**base, "vehicle": None, "time": t}
        slots = {"event": f"the clock read t={t:.1f} s"}
    truth = _last_lane_truth(meta, make_env)
    if truth is None:
        return None
    return Grounded(slots, truth, None, meta, hint=f"the replayed log puts the ego in {truth}")


register(QuestionClass("dr.last_lane", "driving", "EpisodicMemory", "Plan", _ground_last_lane, _last_lane_truth))


SITUATIONS = ("a traffic signal ahead is not green", "a pedestrian or obstacle is in the lane ahead",
              "the vehicle ahead is close and closing in", "the goal lane is a different lane",
              "the lane ahead is clear")


def classify_situation(scene: TrafficScene) -> str:
    ego = scene.ego
    lead, gap, lead_v = leader_of(scene, ego)
    if lead is not None and lead.startswith("stopline:") and gap < 60.0:
        return SITUATIONS[0]
    if lead is not None and (lead in scene.pedestrians or lead in scene.obstacles) and gap < 60.0:
        return SITUATIONS[1]
    if lead is not None and gap < 2.0 * ego.v + 5.0 and ego.v > lead_v:
        return SITUATIONS[2]
    goal = scene.goal
    if goal is not None and goal.kind in ("reach_lane", "reach_position") and goal.lane_id != ego.lane_id:
        return SITUATIONS[3]
    return SITUATIONS[4]


def _situation_truth(meta: dict, factory: EnvFactory) -> Optional[str]:
    snaps, _, _ = trajectory(meta["env_spec"], meta["actions"][:meta["step"]], factory)
    return classify_situation(snaps[-1]) if snaps[-1].ego is not None else None


def _ground_situation(ctx: Ctx) -> Optional[Grounded]:
    snaps, _, _ = ctx.traj
    steps = [i for i, a in enumerate(ctx.record.actions) if a is not None and snaps[i].ego is not None]
    if not steps:
        return None
    unusual = [i for i in steps if classify_situation(snaps[i]) != SITUATIONS[4]]
    i = ctx.rng.choice(unusual if unusual and ctx.rng.random() < 0.75 else steps)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i}
    truth = _situation_truth(meta, make_env)
    _attach_kinematics(meta, snaps[i])
    return Grounded({"t": f"{snaps[i].t:.1f}", "action": ctx.record.actions[i]}, truth,
                    _options(ctx.rng, truth, list(SITUATIONS), 4), meta,
                    hint=f"the scene at that moment: {truth}")


register(QuestionClass("dr.rationale_action", "driving", "Rationale", "Step", _ground_situation, _situation_truth))


DRIVE_OUTCOMES = {"Collision": "The ego vehicle would collide", "OffRoad": "The ego vehicle would leave the road",
                  "success": "The drive would end safely", "unfinished": "The drive would not finish in time"}


def _drive_outcome(env) -> str:
    status, ev = check_outcome(env.scene)
    if status == "success":
        return DRIVE_OUTCOMES["success"]
    if status == "failure" and ev and ev.get("kind") in ("Collision", "OffRoad"):
        return DRIVE_OUTCOMES[ev["kind"]]
    return DRIVE_OUTCOMES["unfinished"]


def _cf_drive_truth(meta: dict, factory: EnvFactory) -> str:
    _, _, status = trajectory(meta["env_spec"], meta["actions"], factory)
    if status != meta["factual_status"]:
        raise ReplayMismatch(f"factual branch ends {status}, recorded {meta['factual_status']}")
    return _drive_outcome(branch(meta["env_spec"], meta["actions"], meta["step"], meta["alt"], factory))


def _ground_cf_drive(ctx: Ctx) -> Optional[Grounded]:
    points = _decision_points(ctx)
    if not points:
        return None
    snaps, events, status = ctx.traj
    trig = [p for p in points if any(e["kind"].endswith("Triggered") or e["kind"] == "PedestrianEntered"
                                     for e in _flat(events[max(p[0] - 1, 0):p[0] + 1]))]
    i, alts = ctx.rng.choice(trig if trig and ctx.rng.random() < 0.7 else points)
    alt = ctx.rng.choice(alts)
    meta = {"env_spec": ctx.record.env_spec, "actions": ctx.record.actions, "step": i, "alt": alt,
            "factual_status": status}
    truth = _cf_drive_truth(meta, make_env)
    _attach_kinematics(meta, snaps[i])
    return Grounded({"t": f"{snaps[i].t:.1f}", "action": ctx.record.actions[i], "alt": alt}, truth,
                    list(DRIVE_OUTCOMES.values()), meta,
                    hint=f"re-simulating with {alt} gives: {truth}")


register(QuestionClass("dr.counterfactual", "driving", "Counterfactual", "Step", _ground_cf_drive, _cf_drive_truth))


def _attach_kinematics(meta: dict, scene: TrafficScene) -> None:
    from worldqa.experience_store import kinematic_features
    meta["kinematics"] = [round(float(x), 6) for x in kinematic_features(scene)]

