"""State-transition function for the puzzle world.

``step`` is pure: it never mutates its input and every misuse is reported as
an event, so episode logs stay total.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from worldqa.agent_world.combat import DEFAULT_LIFESTEAL, CombatOutcome, resolve_combat
from worldqa.agent_world.types import (
    ALTAR, COLORS, DIRECTIONS, EMPTY, ORB, PASSABLE, STATS, STORE, WALL,
    AgentAction, Fidelity, InspectOrb, Move, MonsterKind, TaskSpec, Trade,
    UseShovel, UseWing, WorldState, tile_args, tile_kind,
)
from worldqa.common import Event

ONGOING = "ongoing"
SUCCESS = "success"
FAILURE = "failure"

DEFAULT_RULES = {
    "monster_strikes": "turns",
    "lifesteal_pct": DEFAULT_LIFESTEAL,
    "upgrade_base_cost": 20,
    "upgrade_gain": {"attack": 2, "defense": 2, "life": 50},
}


class NoOrbAccess(Exception):
    pass


def rules(state: WorldState) -> dict:
    merged = dict(DEFAULT_RULES)
    merged.update(state.config.get("rules", {}))
    return merged


def upgrade_cost(k: int, base: int = 20) -> int:
    """Cost of the k-th (1-based) upgrade of a single stat."""
    if k < 1:
        raise ValueError("upgrades are counted from 1")
    return base * 2 ** (k - 1)


def fight(state: WorldState, monster_id: str) -> CombatOutcome:
    m = state.monsters[monster_id]
    r = rules(state)
    pct = m.lifesteal_pct if m.kind is MonsterKind.VAMPIRE else r["lifesteal_pct"]
    return resolve_combat(state.player_stats, m.stats, m.kind, lifesteal_pct=pct,
                          monster_strikes=r["monster_strikes"])


@dataclass(frozen=True)
class OrbEntry:
    monster_id: str
    feasible: bool
    damage: Optional[int]
    lethal: bool

    def describe(self) -> str:
        if not self.feasible:
            return f"{self.monster_id}: Infeasible"
        tag = " (lethal)" if self.lethal else ""
        return f"{self.monster_id}: {self.damage}{tag}"


def has_orb_access(state: WorldState) -> bool:
    return state.inventory.orb or state.tile(state.player_pos) == ORB


def orb_report(state: WorldState) -> list[OrbEntry]:
    """Predicted damage for every monster on the current floor."""
    if not has_orb_access(state):
        raise NoOrbAccess("the player neither holds nor stands on an orb")
    out = []
    for mid in sorted(state.monsters, key=_natural_key):
        if state.monsters[mid].floor != state.current_floor:
            continue
        res = fight(state, mid)
        if res.feasible:
            out.append(OrbEntry(mid, True, res.damage_taken, res.lethal))
        else:
            out.append(OrbEntry(mid, False, None, False))
    return out


def _natural_key(s: str):
    head = s.rstrip("0123456789")
    tail = s[len(head):]
    return (head, int(tail) if tail else -1, s)


def wing_target(state: WorldState) -> tuple[int, int]:
    rows, cols = state.shape
    r, c = state.player_pos
    return rows - 1 - r, cols - 1 - c


def check_goal(state: WorldState, task: TaskSpec) -> str:
    if state.dead:
        return FAILURE
    g, t = task.goal, task.target
    if g == "reach_tile":
        f, r, c = t
        done = state.current_floor == f and state.player_pos == (r, c)
    elif g == "defeat_monster":
        done = t not in state.monsters
    elif g == "reach_floor":
        here = state.tile(state.player_pos)
        dest = int(tile_args(here)[0]) if tile_kind(here) == "stairs" else -1
        on_exit = dest >= len(state.floors) and dest >= int(t)
        done = state.current_floor >= int(t) or on_exit
    elif g == "collect_item":
        inv = state.inventory
        if t == "shovel":
            done = inv.shovels > 0
        elif t == "wing":
            done = inv.wings > 0
        elif t == "orb":
            done = inv.orb
        else:
            done = inv.key_count(t.split(":")[1]) > 0
    else:  # pragma: no cover - TaskSpec validates goals
        raise ValueError(g)
    return SUCCESS if done else ONGOING


def step(state: WorldState, action: AgentAction, task: Optional[TaskSpec] = None
         ) -> tuple[WorldState, list[Event], str]:
    """Apply one action. Returns ``(next_state, events, terminal)``."""
    if state.dead:
        return state, [Event("EpisodeOver")], FAILURE
    nxt, events = _apply(state, action)
    nxt = replace(nxt, turn=state.turn + 1)
    if task is not None:
        terminal = check_goal(nxt, task)
    else:
        terminal = FAILURE if nxt.dead else ONGOING
    return nxt, events, terminal


def _apply(state: WorldState, action: AgentAction) -> tuple[WorldState, list[Event]]:
    if isinstance(action, Move):
        return _move(state, action.direction)
    if isinstance(action, UseWing):
        return _use_wing(state)
    if isinstance(action, UseShovel):
        return _use_shovel(state, action.direction)
    if isinstance(action, Trade):
        return _trade(state, action.stat)
    if isinstance(action, InspectOrb):
        try:
            report = orb_report(state)
        except NoOrbAccess:
            return state, [Event("NoOrbAccess")]
        return state, [Event("OrbInspected", report=[e.describe() for e in report])]
    raise TypeError(f"not an agent action: {action!r}")


def _move(state: WorldState, direction: str) -> tuple[WorldState, list[Event]]:
    dr, dc = DIRECTIONS[direction]
    r, c = state.player_pos
    target = (r + dr, c + dc)
    if not state.in_bounds(target):
        return state, [Event("IllegalMove", reason="edge", target=list(target))]
    t = state.tile(target)
    kind = tile_kind(t)
    moved = replace(state, player_pos=target)
    ev_moved = Event("Moved", to=list(target))

    if t in PASSABLE:
        return moved, [ev_moved]
    if t == WALL:
        return state, [Event("IllegalMove", reason="wall", target=list(target))]
    if kind == "door":
        color = tile_args(t)[0]
        if state.inventory.key_count(color) < 1:
            return state, [Event("IllegalMove", reason="locked", color=color, target=list(target))]
        inv = state.inventory.with_key(color, -1)
        nxt = replace(moved, inventory=inv).with_tile(target, EMPTY)
        return nxt, [Event("DoorOpened", color=color, at=list(target)), ev_moved]
    if kind == "key":
        color = tile_args(t)[0]
        nxt = replace(moved, inventory=state.inventory.with_key(color, +1)).with_tile(target, EMPTY)
        return nxt, [ev_moved, Event("Collected", item=t, at=list(target))]
    if kind == "potion":
        amount = int(tile_args(t)[0])
        stats = replace(state.player_stats, life=state.player_stats.life + amount)
        nxt = replace(moved, player_stats=stats).with_tile(target, EMPTY)
        return nxt, [ev_moved, Event("Collected", item=t, at=list(target))]
    if kind == "crystal":
        stat, amount = tile_args(t)[0], int(tile_args(t)[1])
        stats = replace(state.player_stats, **{stat: getattr(state.player_stats, stat) + amount})
        nxt = replace(moved, player_stats=stats).with_tile(target, EMPTY)
        return nxt, [ev_moved, Event("Collected", item=t, at=list(target))]
    if kind == "item":
        name = tile_args(t)[0]
        inv = state.inventory
        inv = replace(inv, shovels=inv.shovels + 1) if name == "shovel" else replace(inv, wings=inv.wings + 1)
        nxt = replace(moved, inventory=inv).with_tile(target, EMPTY)
        return nxt, [ev_moved, Event("Collected", item=t, at=list(target))]
    if kind == "orb":
        nxt = replace(moved, inventory=replace(state.inventory, orb=True)).with_tile(target, EMPTY)
        return nxt, [ev_moved, Event("Collected", item=t, at=list(target))]
    if kind == "monster":
        return _combat(state, tile_args(t)[0], target)
    if kind == "stairs":
        dest = int(tile_args(t)[0])
        if dest == state.current_floor or not 0 <= dest < len(state.floors):
            # exit stairs: the player stands on them
            return moved, [ev_moved, Event("ReachedStairs", target_floor=dest)]
        arrival = _arrival(state, dest, target)
        nxt = replace(state, current_floor=dest, player_pos=arrival)
        return nxt, [ev_moved, Event("FloorChanged", frm=state.current_floor, to=dest, at=list(arrival))]
    raise AssertionError(f"unhandled tile {t!r}")  # pragma: no cover


def _arrival(state: WorldState, dest: int, fallback: tuple[int, int]) -> tuple[int, int]:
    back = f"stairs:{state.current_floor}"
    for r, row in enumerate(state.floors[dest]):
        for c, t in enumerate(row):
            if t == back:
                return (r, c)
    return fallback


def _combat(state: WorldState, mid: str, target: tuple[int, int]) -> tuple[WorldState, list[Event]]:
    m = state.monsters[mid]
    res = fight(state, mid)
    if not res.feasible:
        return state, [Event("CombatInfeasible", monster=mid)]
    if res.lethal:
        dead = replace(state, player_stats=replace(state.player_stats, life=0), dead=True)
        return dead, [Event("PlayerDied", monster=mid, damage=res.damage_taken)]
    inv = state.inventory
    exp_gain = m.reward_exp if state.fidelity is Fidelity.PERFECT else 0
    inv = replace(inv, gold=inv.gold + m.reward_gold, experience=inv.experience + exp_gain)
    monsters = {k: v for k, v in state.monsters.items() if k != mid}
    nxt = replace(state, player_pos=target, monsters=monsters, inventory=inv,
                  player_stats=replace(state.player_stats, life=res.residual_life)).with_tile(target, EMPTY)
    return nxt, [
        Event("CombatWon", monster=mid, monster_kind=m.kind.value, damage=res.damage_taken,
              turns=res.turns, gold=m.reward_gold, experience=exp_gain),
        Event("Moved", to=list(target)),
    ]


def _use_wing(state: WorldState) -> tuple[WorldState, list[Event]]:
    if state.inventory.wings < 1:
        return state, [Event("ItemMissing", item="wing")]
    target = wing_target(state)
    if state.tile(target) not in PASSABLE:
        return state, [Event("WingBlocked", target=list(target))]
    return replace(state, player_pos=target), [Event("WingUsed", to=list(target))]


def _use_shovel(state: WorldState, direction: str) -> tuple[WorldState, list[Event]]:
    if state.inventory.shovels < 1:
        return state, [Event("ItemMissing", item="shovel")]
    dr, dc = DIRECTIONS[direction]
    target = (state.player_pos[0] + dr, state.player_pos[1] + dc)
    if not state.in_bounds(target) or state.tile(target) != WALL:
        return state, [Event("ShovelNoWall", target=list(target))]
    inv = replace(state.inventory, shovels=state.inventory.shovels - 1)
    nxt = replace(state, inventory=inv).with_tile(target, EMPTY)
    return nxt, [Event("WallRemoved", at=list(target))]


def _trade(state: WorldState, stat: str) -> tuple[WorldState, list[Event]]:
    here = state.tile(state.player_pos)
    if state.fidelity is not Fidelity.PERFECT or here not in (STORE, ALTAR):
        return state, [Event("TradeRejected", reason="no store here")]
    r = rules(state)
    i = STATS.index(stat)
    at_store = here == STORE
    bought = state.store_purchases if at_store else state.altar_purchases
    cost = upgrade_cost(bought[i] + 1, r["upgrade_base_cost"])
    inv = state.inventory
    funds = inv.experience if at_store else inv.gold
    if funds < cost:
        return state, [Event("TradeRejected", reason="insufficient funds", cost=cost)]
    inv = replace(inv, experience=inv.experience - cost) if at_store else replace(inv, gold=inv.gold - cost)
    gain = r["upgrade_gain"][stat]
    stats = replace(state.player_stats, **{stat: getattr(state.player_stats, stat) + gain})
    counts = list(bought)
    counts[i] += 1
    field = "store_purchases" if at_store else "altar_purchases"
    nxt = replace(state, inventory=inv, player_stats=stats, **{field: tuple(counts)})
    return nxt, [Event("Traded", stat=stat, cost=cost, currency="experience" if at_store else "gold",
                       gain=gain)]


def legal_moves(state: WorldState) -> list[AgentAction]:
    """Actions that would not be rejected as no-ops in ``state``."""
    out: list[AgentAction] = []
    for d, (dr, dc) in DIRECTIONS.items():
        target = (state.player_pos[0] + dr, state.player_pos[1] + dc)
        if not state.in_bounds(target):
            continue
        t = state.tile(target)
        if t == WALL:
            if state.inventory.shovels:
                out.append(UseShovel(d))
            continue
        kind = tile_kind(t)
        if kind == "door" and state.inventory.key_count(tile_args(t)[0]) < 1:
            continue
        if kind == "monster" and not fight(state, tile_args(t)[0]).feasible:
            continue
        out.append(Move(d))
    if state.inventory.wings and state.tile(wing_target(state)) in PASSABLE:
        out.append(UseWing())
    if state.fidelity is Fidelity.PERFECT and state.tile(state.player_pos) in (STORE, ALTAR):
        out.extend(Trade(s) for s in STATS)
    return out


def replay(state: WorldState, actions, task: Optional[TaskSpec] = None):
    """Run an action script; returns ``(final_state, event_log, terminal)``."""
    log: list[list[Event]] = []
    terminal = check_goal(state, task) if task else ONGOING
    for a in actions:
        state, events, terminal = step(state, a, task)
        log.append(events)
    return state, log, terminal


__all__ = [
    "COLORS", "FAILURE", "ONGOING", "SUCCESS", "NoOrbAccess", "OrbEntry", "check_goal",
    "fight", "legal_moves", "orb_report", "replay", "step", "upgrade_cost", "wing_target",
]
