"""Text rendering of simulator states and parsing of LLM actions.

Canonical action grammar (case-insensitive)::

    response  = { prose } , ( call | keyword ) , { prose } ;
    call      = name , "(" , [ arg , { "," , arg } ] , ")" ;
    arg       = integer | identifier ;
    name      = identifier ;
    integer   = [ "-" ] , digit , { digit } ;
    keyword   = "up" | "down" | "left" | "right"                (agent world)
              | "faster" | "slower" | "idle"
              | "lane_left" | "lane_right"                       (driving) ;

When several calls occur, the last well-formed one wins; bare keywords are
only consulted when the text holds no well-formed call.

Agent world calls: ``move(dir)``, ``use_shovel(dir)``, ``use_wing()``,
``trade(attack|defense|life)``, ``inspect_orb()``. Driving calls:
``lane_left()``, ``lane_right()``, ``faster()``, ``slower()``, ``idle()``.
Anything else must be a registered skill, e.g. ``lane_change(2)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from worldqa.agent_world.engine import orb_report
from worldqa.agent_world.types import (
    DIRECTIONS, STATS, AgentAction, Fidelity, InspectOrb, Move, MonsterKind, TaskSpec,
    Trade, UseShovel, UseWing, WorldState, tile_args, tile_kind,
)
from worldqa.urban_driving.scene import (
    EGO, LANE_CHANGE_ANNOTATION_S, EgoAction, TrafficScene, leader_of,
)


@dataclass(frozen=True)
class Section:
    heading: str
    body: str
    level: int = 1


@dataclass(frozen=True)
class ObservationText:
    sections: tuple[Section, ...]

    @property
    def text(self) -> str:
        parts = []
        for s in self.sections:
            parts.append(s.heading if not s.body else f"{s.heading}\n{s.body}")
        return "\n\n".join(parts) + "\n"

    def __str__(self) -> str:
        return self.text

    def headings(self) -> list[str]:
        return [s.heading for s in self.sections]

    def section(self, heading: str) -> Section:
        for s in self.sections:
            if s.heading == heading:
                return s
        raise KeyError(heading)


STATUS = "Status"
MAP_LAYOUT = "Map Layout (Category: Description ID)"
DESCRIPTIONS = "Description IDs and Thorough Descriptions"

# ---------------------------------------------------------------------------
# agent world

_CRYSTAL_NAMES = {"attack": "Red Crystal", "defense": "Blue Crystal", "life": "Green Crystal"}
_MONSTER_PROSE = {
    MonsterKind.NORMAL: "A monster with balanced attack and defense.",
    MonsterKind.WIZARD: "A wizard: high attack but low defense.",
    MonsterKind.GUARDIAN: "A guardian: high defense but low attack.",
    MonsterKind.VAMPIRE: "A vampire that drains a fixed percentage of your life with each exchange.",
    MonsterKind.BOSS: "The boss of this tower. Prepare well before challenging it.",
}
_PREFIX = {"Empty": "E", "Wall": "W", "Door": "D", "Key": "K", "Health Potion": "H",
           "Crystal": "C", "Stairs": "S", "Store": "T", "Altar": "A", "Item": "I", "Orb": "O"}


def _category(tile: str) -> tuple[str, str]:
    """(map category, description variant) of a tile."""
    kind = tile_kind(tile)
    args = tile_args(tile)
    if kind in ("empty", "spawn"):
        return "Empty", "empty"
    if kind == "wall":
        return "Wall", "wall"
    if kind == "door":
        return "Door", args[0]
    if kind == "key":
        return "Key", args[0]
    if kind == "potion":
        return "Health Potion", args[0]
    if kind == "crystal":
        return "Crystal", f"{args[0]}:{args[1]}"
    if kind == "stairs":
        return "Stairs", args[0]
    if kind == "store":
        return "Store", "store"
    if kind == "altar":
        return "Altar", "altar"
    if kind == "item":
        return "Item", args[0]
    if kind == "orb":
        return "Orb", "orb"
    raise ValueError(tile)


def _pos(p) -> str:
    return f"({p[0]}, {p[1]})"


def _describe(category: str, variant: str, state: WorldState) -> tuple[str, list[str]]:
    """Heading name and bullet lines (minus position) for a description id."""
    n_floors = len(state.floors)
    if category == "Empty":
        return "Empty", ["Description: This is an empty tile with no obstacles or monsters. "
                         "You can move freely through these tiles."]
    if category == "Wall":
        extra = " You can destroy the tile with a shovel (if any)." if state.fidelity is Fidelity.PERFECT else ""
        return "Wall", [f"Description: This is a wall tile that cannot be passed.{extra}"]
    if category == "Door":
        c = variant.title()
        return f"{c} Door", [f"Description: This is a door tile that can be opened with a {variant} key."]
    if category == "Key":
        c = variant.title()
        return f"{c} Key", [f"Description: A {variant} key used to unlock {variant} doors.",
                            "Effect: Unlocks a door of the same color; you lose the key once you use it."]
    if category == "Health Potion":
        return "Health Potion", [f"Description: A health potion that restores {variant} health points "
                                 "when collected.", f"Effect: +{variant} Health"]
    if category == "Crystal":
        stat, amount = variant.split(":")
        return _CRYSTAL_NAMES[stat], [f"Description: A crystal that permanently raises your {stat}.",
                                      f"Effect: +{amount} {stat.title()}"]
    if category == "Stairs":
        dest = int(variant)
        if dest >= n_floors:
            prose = "These stairs lead out of this level. Reaching them completes the level."
        else:
            prose = f"These stairs lead to floor {dest + 1}."
        return "Stairs", [f"Description: {prose}"]
    if category == "Store":
        return "Store", ["Description: Trade combat experience for +attack, +defense or +life upgrades; "
                         "each further upgrade of a stat costs twice as much."]
    if category == "Altar":
        return "Altar", ["Description: Donate gold for +attack, +defense or +life upgrades; "
                         "each further upgrade of a stat costs twice as much."]
    if category == "Item":
        if variant == "shovel":
            return "Shovel", ["Description: Breaks one adjacent wall block. Consumed on use."]
        return "Wing", ["Description: Fly to the symmetrical position on the map (through the center)."]
    if category == "Orb":
        return "Orb of the Hero", ["Description: Reveals the predicted damage of every monster on the floor."]
    raise ValueError(category)


def render_agent_world(state: WorldState, task: Optional[TaskSpec] = None) -> ObservationText:
    grid = state.grid
    ids: dict[tuple[str, str], str] = {}
    where: dict[str, list] = {}
    order: list[tuple[str, str, str]] = []  # (id, category, variant)
    counters: dict[str, int] = {}

    def ident(category: str, variant: str) -> str:
        k = (category, variant)
        if k not in ids:
            counters[category] = counters.get(category, 0) + 1
            ids[k] = f"{_PREFIX[category]}{counters[category]}"
            order.append((ids[k], category, variant))
        return ids[k]

    rows = []
    for r, row in enumerate(grid):
        cells = []
        for c, t in enumerate(row):
            if (r, c) == state.player_pos:
                if "P1" not in where:
                    order.append(("P1", "Player", ""))
                where.setdefault("P1", []).append((r, c))
                cells.append("(Player: P1)")
                continue
            if tile_kind(t) == "monster":
                mid = tile_args(t)[0]
                if mid not in where:
                    order.append((mid, "Monster", mid))
                where.setdefault(mid, []).append((r, c))
                cells.append(f"(Monster: {mid})")
                continue
            cat, var = _category(t)
            i = ident(cat, var)
            where.setdefault(i, []).append((r, c))
            cells.append(f"({cat}: {i})")
        rows.append(f"Row {r + 1}: " + ", ".join(cells))

    st, inv = state.player_stats, state.inventory
    status = [f"The player is at position {_pos(state.player_pos)} on floor {state.current_floor + 1} "
              f"of {len(state.floors)}."]
    if task is not None:
        status.append(f"The goal is to {task.describe()}.")
    if state.dead:
        status.append("The player has been defeated.")
    status += ["", f"Health: {st.life}", f"Attack: {st.attack}", f"Defense: {st.defense}", "",
               "Your current backpack:", f"YELLOW KEY: {inv.keys[0]}"]
    perfect = state.fidelity is Fidelity.PERFECT
    if perfect:
        status += [f"BLUE KEY: {inv.keys[1]}", f"RED KEY: {inv.keys[2]}"]
    status.append(f"GOLD: {inv.gold}")
    if perfect:
        status += [f"EXPERIENCE: {inv.experience}", f"SHOVEL: {inv.shovels}", f"WING: {inv.wings}"]
    status.append(f"ORB OF THE HERO: {'yes' if inv.orb else 'no'}")
    if perfect and any(state.store_purchases + state.altar_purchases):
        bought = ", ".join(f"{s} x{n}" for s, n in zip(STATS, map(sum, zip(state.store_purchases,
                                                                            state.altar_purchases))))
        status.append(f"Upgrades bought: {bought}")
    under = state.tile(state.player_pos)
    if tile_kind(under) not in ("empty", "spawn"):
        cat, var = _category(under)
        name, _ = _describe(cat, var, state)
        status.append(f"Standing on: {name}")

    sections = [Section(STATUS, "\n".join(status)), Section(MAP_LAYOUT, "\n".join(rows), 2),
                Section(DESCRIPTIONS, "")]
    for i, cat, var in order:
        if cat == "Player":
            sp = state.spawn_stats
            lines = [f"- Position: {_pos(state.player_pos)}",
                     "- Description: You are the warrior."
                     + (f" Your goal is to {task.describe()}." if task else ""),
                     "- Attributes:", f"  - Health: {sp.life}", f"  - Attack: {sp.attack}",
                     f"  - Defense: {sp.defense}"]
            sections.append(Section("Player (P1)", "\n".join(lines), 2))
        elif cat == "Monster":
            m = state.monsters[var]
            lines = [f"- Position: {_pos(m.pos)}", f"- Description: {_MONSTER_PROSE[m.kind]}",
                     "- Attributes:", f"  - Health: {m.stats.life}", f"  - Attack: {m.stats.attack}",
                     f"  - Defense: {m.stats.defense}"]
            if m.kind is MonsterKind.VAMPIRE:
                lines.append(f"  - Lifesteal: {round(m.lifesteal_pct * 100, 2)}%")
            lines.append(f"  - Reward: {m.reward_gold} gold"
                         + (f", {m.reward_exp} experience" if perfect else ""))
            title = "Boss" if m.kind is MonsterKind.BOSS else "Monster"
            sections.append(Section(f"{title} ({var})", "\n".join(lines), 2))
        else:
            name, bullets = _describe(cat, var, state)
            cells = where[i]
            position = "Various" if cat in ("Empty", "Wall") else "; ".join(_pos(p) for p in cells)
            lines = [f"- Position: {position}"] + [f"- {b}" for b in bullets]
            sections.append(Section(f"{name} ({i})", "\n".join(lines), 2))
    return ObservationText(tuple(sections))


def description_sections(obs: ObservationText) -> list[Section]:
    heads = obs.headings()
    if DESCRIPTIONS not in heads:
        return []
    return list(obs.sections[heads.index(DESCRIPTIONS) + 1:])


def render_orb(state: WorldState) -> str:
    entries = orb_report(state)
    if not entries:
        return "No monsters on this floor."
    return "\n".join(e.describe() for e in entries)


# ---------------------------------------------------------------------------
# driving


def _fmt(x: float, nd: int = 1) -> str:
    return f"{x:.{nd}f}"


def render_driving(scene: TrafficScene) -> ObservationText:
    ego = scene.vehicles.get(EGO)
    lines = []
    if ego is None:
        lines.append("The ego vehicle has left the road.")
    else:
        lane = scene.lanes[ego.lane_id]
        lines += [f"Time: {_fmt(scene.t, 1)} s", f"Lane: {ego.lane_id}", f"Position: {_fmt(ego.s)} m",
                  f"Speed: {_fmt(ego.v)} m/s", f"Target speed: {_fmt(ego.target_speed or 0.0)} m/s"]
        k = lane.curvature_at(ego.s)
        if k:
            lines.append(f"Road curvature here: {k:.4f} 1/m")
        if scene.goal is not None:
            lines.append(f"Goal: {scene.goal.describe()}")
    status = Section("Ego Status", "\n".join(lines))

    layout = []
    for lid in sorted(scene.lanes, key=lambda l: (-scene.lanes[l].lateral, l)):
        ln = scene.lanes[lid]
        bits = [f"Lane {lid}: length {_fmt(ln.length, 0)} m"]
        if ln.left is not None:
            bits.append(f"left neighbor {ln.left}")
        if ln.right is not None:
            bits.append(f"right neighbor {ln.right}")
        if ln.merge_target is not None:
            bits.append(f"merges into lane {ln.merge_target} at its end")
        if ln.curved:
            curves = [f"{k:.4f} 1/m" for _, k in ln.segments if k]
            bits.append("curved section " + ", ".join(curves))
        if ln.intersection_id:
            bits.append(f"signalized intersection {ln.intersection_id}")
        layout.append("; ".join(bits))
    lanes = Section("Lane Layout", "\n".join(layout))

    objs = []
    if ego is not None:
        rows = []
        for v in scene.vehicles.values():
            if v.id == EGO:
                continue
            rows.append((v.lane_id, v.s, v.id, v.label or "vehicle", v.v, v))
        for o in scene.obstacles.values():
            if o.active(scene.t):
                rows.append((o.lane_id, o.s, o.id, o.label, 0.0, None))
        for p in scene.pedestrians.values():
            y = scene.pedestrian_y(p)
            on = scene.lanes_at_lateral(y)
            lane_txt = on[0] if on else None
            rows.append((lane_txt if lane_txt is not None else -1, p.s, p.id, p.label, 0.0, p))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        for lane_id, s, oid, label, speed, obj in rows:
            rel = s - ego.s
            if rel >= 0:
                where = f"ahead by {_fmt(max(s - ego.front, 0.0))} m"
            else:
                length = obj.length if hasattr(obj, "length") else 0.0
                where = f"behind by {_fmt(max(ego.s - (s + length), 0.0))} m"
            closing = (ego.v - speed) if rel >= 0 else (speed - ego.v)
            lane_desc = f"lane {lane_id}" if lane_id >= 0 else "off the roadway"
            txt = f"{oid} ({label}): {lane_desc}, {where}, speed {_fmt(speed)} m/s, closing {_fmt(closing)} m/s"
            if obj is not None and hasattr(obj, "last_lane_change") and obj.last_lane_change:
                t0, frm, to = obj.last_lane_change
                if scene.t - t0 <= LANE_CHANGE_ANNOTATION_S:
                    txt += f" [lane change from lane {frm} to lane {to} at t={_fmt(t0)} s]"
            if obj is not None and getattr(obj, "straddle_lane", None) is not None:
                txt += f" [drifting into lane {obj.straddle_lane}]"
            if obj is not None and getattr(obj, "forced_accel", None) is not None:
                txt += " [braking hard]"
            if obj is not None and hasattr(obj, "vy"):
                txt += " [crossing the road]" if p_started(scene, obj) else " [waiting at the roadside]"
            objs.append(txt)
        lead_id, gap, _ = leader_of(scene, ego)
        if lead_id is not None:
            objs.append(f"Nearest object ahead in your lane: {lead_id}, gap {_fmt(gap)} m")
    objects = Section("Objects", "\n".join(objs) if objs else "No other objects.")

    sig = [f"{iid}: {phase}" for iid, phase in scene.signal_phases().items()]
    signals = Section("Signals", "\n".join(sig) if sig else "No traffic signals.")
    return ObservationText((status, lanes, objects, signals))


def p_started(scene: TrafficScene, ped) -> bool:
    return ped.id in scene.ped_started


# ---------------------------------------------------------------------------
# parsing


class UnparseableAction(ValueError):
    def __init__(self, raw: str, reason: str = "no well-formed action found"):
        super().__init__(f"{reason}: {raw[:200]!r}")
        self.raw = raw
        self.reason = reason


@dataclass(frozen=True)
class SkillCall:
    name: str
    args: tuple = ()

    def render(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass
class SkillRegistry:
    """Skill name -> argument types (``int`` or ``word``)."""

    skills: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def register(self, name: str, *arg_types: str) -> None:
        for t in arg_types:
            if t not in ("int", "word"):
                raise ValueError(f"bad argument type {t!r}")
        self.skills[name.lower()] = tuple(arg_types)

    def __contains__(self, name: str) -> bool:
        return name.lower() in self.skills


def default_skills(env_kind: str) -> SkillRegistry:
    reg = SkillRegistry()
    if env_kind == "driving":
        reg.register("lane_change", "int")
        reg.register("detect_objects")
    else:
        reg.register("go_to", "int", "int")
        reg.register("orb")
    return reg


Action = Union[AgentAction, EgoAction, SkillCall]

_CALL = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*\(([^()]*)\)")
_ARG = re.compile(r"^(-?\d+|[A-Za-z_][A-Za-z0-9_]*)$")
_WORD = re.compile(r"[A-Za-z_]+")
_AW_KEYWORDS = set(DIRECTIONS)
_DR_KEYWORDS = {a.value for a in EgoAction}


def _interpret(name: str, args: list, env_kind: str, skills: SkillRegistry) -> Optional[Action]:
    name = name.lower()
    words = [a.lower() if isinstance(a, str) else a for a in args]
    if env_kind == "agent_world":
        if name == "move" and len(words) == 1 and words[0] in DIRECTIONS:
            return Move(words[0])
        if name == "use_shovel" and len(words) == 1 and words[0] in DIRECTIONS:
            return UseShovel(words[0])
        if name == "use_wing" and not words:
            return UseWing()
        if name == "trade" and len(words) == 1 and words[0] in STATS:
            return Trade(words[0])
        if name == "inspect_orb" and not words:
            return InspectOrb()
    else:
        if name in _DR_KEYWORDS and not words:
            return EgoAction(name)
    if name in skills:
        types = skills.skills[name]
        if len(types) != len(words):
            return None
        for t, a in zip(types, words):
            if (t == "int") != isinstance(a, int):
                return None
        return SkillCall(name, tuple(words))
    return None


def parse_action(text: str, env_kind: str = "agent_world", skills: Optional[SkillRegistry] = None) -> Action:
    """Extract the action an LLM response commits to."""
    if env_kind not in ("agent_world", "driving"):
        raise ValueError(f"unknown env kind {env_kind!r}")
    skills = default_skills(env_kind) if skills is None else skills
    best = None
    for m in _CALL.finditer(text):
        raw_args = [a.strip() for a in m.group(2).split(",")] if m.group(2).strip() else []
        if not all(_ARG.match(a) for a in raw_args):
            continue
        args = [int(a) if re.match(r"^-?\d+$", a) else a for a in raw_args]
        act = _interpret(m.group(1), args, env_kind, skills)
        if act is not None:
            best = act
    if best is not None:
        return best
    keywords = _AW_KEYWORDS if env_kind == "agent_world" else _DR_KEYWORDS
    for m in _WORD.finditer(text):
        w = m.group(0).lower()
        if w in keywords:
            best = Move(w) if env_kind == "agent_world" else EgoAction(w)
    if best is None:
        raise UnparseableAction(text)
    return best


def render_action(action: Action) -> str:
    return action.render()
