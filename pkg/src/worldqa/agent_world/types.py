"""Domain types for the grid puzzle world.

Tiles are short strings (``"wall"``, ``"door:yellow"``, ``"monster:M1"``...)
so grids hash cheaply and serialize canonically without a custom encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Union

from worldqa.common import canonical_json, content_hash


class Fidelity(str, Enum):
    IMPERFECT = "imperfect"
    PERFECT = "perfect"


class MonsterKind(str, Enum):
    NORMAL = "normal"
    WIZARD = "wizard"
    GUARDIAN = "guardian"
    VAMPIRE = "vampire"
    BOSS = "boss"


COLORS = ("yellow", "blue", "red")
STATS = ("attack", "defense", "life")
ITEMS = ("shovel", "wing")
DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}

# ---------------------------------------------------------------------------
# tiles

EMPTY = "empty"
WALL = "wall"
SPAWN = "spawn"
STORE = "store"
ALTAR = "altar"
ORB = "orb"


def door(color: str) -> str:
    assert color in COLORS, color
    return f"door:{color}"


def key(color: str) -> str:
    assert color in COLORS, color
    return f"key:{color}"


def potion(amount: int) -> str:
    return f"potion:{int(amount)}"


def crystal(stat: str, amount: int) -> str:
    assert stat in STATS, stat
    return f"crystal:{stat}:{int(amount)}"


def monster_ref(monster_id: str) -> str:
    return f"monster:{monster_id}"


def stairs(target_floor: int) -> str:
    return f"stairs:{int(target_floor)}"


def item(name: str) -> str:
    assert name in ITEMS, name
    return f"item:{name}"


def tile_kind(tile: str) -> str:
    return tile.split(":", 1)[0]


def tile_args(tile: str) -> list[str]:
    return tile.split(":")[1:]


VALID_KINDS = {"empty", "wall", "spawn", "store", "altar", "orb", "door", "key",
               "potion", "crystal", "monster", "stairs", "item"}

# tiles the player can stand on and walk through without any state change
PASSABLE = {EMPTY, SPAWN, STORE, ALTAR}


class InvalidWorld(ValueError):
    pass


# ---------------------------------------------------------------------------
# entities


@dataclass(frozen=True)
class Stats:
    attack: int
    defense: int
    life: int

    def __post_init__(self) -> None:
        for name in STATS:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    def to_json(self) -> dict:
        return {"attack": self.attack, "defense": self.defense, "life": self.life}

    @classmethod
    def from_json(cls, d: dict) -> "Stats":
        return cls(int(d["attack"]), int(d["defense"]), int(d["life"]))


@dataclass(frozen=True)
class Monster:
    kind: MonsterKind
    stats: Stats
    reward_gold: int
    reward_exp: int
    pos: tuple[int, int]
    floor: int = 0
    lifesteal_pct: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", MonsterKind(self.kind))
        object.__setattr__(self, "pos", tuple(self.pos))
        if self.kind is MonsterKind.WIZARD and not self.stats.attack > self.stats.defense:
            raise ValueError("a wizard needs attack > defense")
        if self.kind is MonsterKind.GUARDIAN and not self.stats.defense > self.stats.attack:
            raise ValueError("a guardian needs defense > attack")
        if self.kind is MonsterKind.VAMPIRE:
            if not 0.0 < self.lifesteal_pct < 1.0:
                raise ValueError("vampire lifesteal_pct must lie in (0, 1)")
        elif self.lifesteal_pct:
            raise ValueError("only vampires carry lifesteal")
        if self.reward_gold < 0 or self.reward_exp < 0:
            raise ValueError("rewards must be non-negative")

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "stats": self.stats.to_json(),
            "reward_gold": self.reward_gold,
            "reward_exp": self.reward_exp,
            "pos": list(self.pos),
            "floor": self.floor,
            "lifesteal_pct": self.lifesteal_pct,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Monster":
        return cls(
            kind=MonsterKind(d["kind"]),
            stats=Stats.from_json(d["stats"]),
            reward_gold=int(d["reward_gold"]),
            reward_exp=int(d["reward_exp"]),
            pos=tuple(d["pos"]),
            floor=int(d.get("floor", 0)),
            lifesteal_pct=float(d.get("lifesteal_pct", 0.0)),
        )


@dataclass(frozen=True)
class Inventory:
    keys: tuple[int, int, int] = (0, 0, 0)  # yellow, blue, red
    gold: int = 0
    experience: int = 0
    shovels: int = 0
    wings: int = 0
    orb: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", tuple(int(k) for k in self.keys))
        if len(self.keys) != 3 or min(self.keys) < 0:
            raise ValueError(f"bad key counts {self.keys}")
        if min(self.gold, self.experience, self.shovels, self.wings) < 0:
            raise ValueError("inventory counts must be non-negative")

    def key_count(self, color: str) -> int:
        return self.keys[COLORS.index(color)]

    def with_key(self, color: str, delta: int) -> "Inventory":
        keys = list(self.keys)
        keys[COLORS.index(color)] += delta
        return replace(self, keys=tuple(keys))

    def to_json(self) -> dict:
        return {
            "keys": dict(zip(COLORS, self.keys)),
            "gold": self.gold,
            "experience": self.experience,
            "items": {"shovel": self.shovels, "wing": self.wings},
            "orb": self.orb,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Inventory":
        return cls(
            keys=tuple(int(d["keys"][c]) for c in COLORS),
            gold=int(d["gold"]),
            experience=int(d["experience"]),
            shovels=int(d["items"]["shovel"]),
            wings=int(d["items"]["wing"]),
            orb=bool(d["orb"]),
        )


Grid = tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class WorldState:
    floors: tuple[Grid, ...]
    current_floor: int
    player_pos: tuple[int, int]
    player_stats: Stats
    inventory: Inventory
    monsters: dict[str, Monster]
    fidelity: Fidelity
    seed: int = 0
    turn: int = 0
    spawn_stats: Optional[Stats] = None
    # number of store upgrades bought per stat: (attack, defense, life)
    store_purchases: tuple[int, int, int] = (0, 0, 0)
    altar_purchases: tuple[int, int, int] = (0, 0, 0)
    dead: bool = False
    config: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "fidelity", Fidelity(self.fidelity))
        object.__setattr__(self, "player_pos", tuple(self.player_pos))
        if self.spawn_stats is None:
            object.__setattr__(self, "spawn_stats", self.player_stats)

    # -- geometry -----------------------------------------------------------
    @property
    def grid(self) -> Grid:
        return self.floors[self.current_floor]

    @property
    def shape(self) -> tuple[int, int]:
        g = self.grid
        return len(g), len(g[0])

    def tile(self, pos: tuple[int, int], floor: Optional[int] = None) -> str:
        g = self.floors[self.current_floor if floor is None else floor]
        return g[pos[0]][pos[1]]

    def in_bounds(self, pos: tuple[int, int]) -> bool:
        rows, cols = self.shape
        return 0 <= pos[0] < rows and 0 <= pos[1] < cols

    def total_cells(self) -> int:
        return sum(len(g) * len(g[0]) for g in self.floors)

    def with_tile(self, pos: tuple[int, int], tile: str, floor: Optional[int] = None) -> "WorldState":
        f = self.current_floor if floor is None else floor
        grid = [list(row) for row in self.floors[f]]
        grid[pos[0]][pos[1]] = tile
        floors = list(self.floors)
        floors[f] = tuple(tuple(row) for row in grid)
        return replace(self, floors=tuple(floors))

    # -- identity -----------------------------------------------------------
    def search_key(self) -> tuple:
        """Everything that affects future dynamics (turn excluded)."""
        return (self.floors, self.current_floor, self.player_pos, self.player_stats,
                self.inventory, self.store_purchases, self.altar_purchases, self.dead)

    def to_json(self) -> dict:
        return {
            "floors": [[list(row) for row in g] for g in self.floors],
            "current_floor": self.current_floor,
            "player_pos": list(self.player_pos),
            "player_stats": self.player_stats.to_json(),
            "spawn_stats": self.spawn_stats.to_json(),
            "inventory": self.inventory.to_json(),
            "monsters": {mid: m.to_json() for mid, m in sorted(self.monsters.items())},
            "fidelity": self.fidelity.value,
            "seed": self.seed,
            "turn": self.turn,
            "store_purchases": list(self.store_purchases),
            "altar_purchases": list(self.altar_purchases),
            "dead": self.dead,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldState":
        return cls(
            floors=tuple(tuple(tuple(row) for row in g) for g in d["floors"]),
            current_floor=int(d["current_floor"]),
            player_pos=tuple(d["player_pos"]),
            player_stats=Stats.from_json(d["player_stats"]),
            spawn_stats=Stats.from_json(d["spawn_stats"]),
            inventory=Inventory.from_json(d["inventory"]),
            monsters={mid: Monster.from_json(m) for mid, m in d["monsters"].items()},
            fidelity=Fidelity(d["fidelity"]),
            seed=int(d["seed"]),
            turn=int(d["turn"]),
            store_purchases=tuple(d.get("store_purchases", (0, 0, 0))),
            altar_purchases=tuple(d.get("altar_purchases", (0, 0, 0))),
            dead=bool(d.get("dead", False)),
            config=dict(d.get("config", {})),
        )

    def canonical(self) -> str:
        return canonical_json(self.to_json())

    def state_hash(self) -> str:
        return content_hash(self.to_json())


def validate_state(state: WorldState) -> None:
    """Raise ``InvalidWorld`` if structural invariants are broken."""
    if not state.floors:
        raise InvalidWorld("no floors")
    if state.fidelity is Fidelity.IMPERFECT and len(state.floors) != 1:
        raise InvalidWorld("imperfect worlds have exactly one floor")
    if not state.in_bounds(state.player_pos):
        raise InvalidWorld(f"player at {state.player_pos} is out of bounds")
    if state.tile(state.player_pos) == WALL:
        raise InvalidWorld("player stands on a wall")
    refs: dict[str, tuple[int, tuple[int, int]]] = {}
    for f, grid in enumerate(state.floors):
        width = len(grid[0])
        for r, row in enumerate(grid):
            if len(row) != width:
                raise InvalidWorld(f"ragged grid on floor {f}")
            for c, t in enumerate(row):
                kind = tile_kind(t)
                if kind not in VALID_KINDS:
                    raise InvalidWorld(f"unknown tile {t!r}")
                if kind == "monster":
                    mid = tile_args(t)[0]
                    if mid in refs:
                        raise InvalidWorld(f"monster {mid} appears twice")
                    refs[mid] = (f, (r, c))
                if kind in ("door", "key") and tile_args(t)[0] not in COLORS:
                    raise InvalidWorld(f"bad color in {t!r}")
    if set(refs) != set(state.monsters):
        raise InvalidWorld("monster tiles and monster table disagree")
    for mid, (f, pos) in refs.items():
        m = state.monsters[mid]
        if m.floor != f or m.pos != pos:
            raise InvalidWorld(f"monster {mid} position mismatch")
    violations = fidelity_violations(state)
    if violations:
        raise InvalidWorld("; ".join(violations))


def fidelity_violations(state: WorldState) -> list[str]:
    """Features forbidden in the imperfect world that occur in ``state``."""
    if state.fidelity is not Fidelity.IMPERFECT:
        return []
    out = []
    n = len(state.floors)
    for f, grid in enumerate(state.floors):
        for row in grid:
            for t in row:
                kind = tile_kind(t)
                if kind in ("door", "key") and tile_args(t)[0] != "yellow":
                    out.append(f"colored {t}")
                elif kind in ("store", "altar", "item"):
                    out.append(t)
                elif kind == "stairs" and int(tile_args(t)[0]) < n:
                    out.append(f"inter-floor {t}")
                elif kind == "orb" and f != 0:
                    out.append("orb beyond first floor")
    for mid, m in state.monsters.items():
        if m.kind not in (MonsterKind.NORMAL, MonsterKind.BOSS):
            out.append(f"{m.kind.value} monster {mid}")
    inv = state.inventory
    if inv.keys[1] or inv.keys[2] or inv.shovels or inv.wings:
        out.append("perfect-only inventory")
    return out


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class Move:
    direction: str

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {self.direction!r}")

    def render(self) -> str:
        return f"move({self.direction})"


@dataclass(frozen=True)
class UseShovel:
    direction: str

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {self.direction!r}")

    def render(self) -> str:
        return f"use_shovel({self.direction})"


@dataclass(frozen=True)
class UseWing:
    def render(self) -> str:
        return "use_wing()"


@dataclass(frozen=True)
class Trade:
    stat: str

    def __post_init__(self) -> None:
        if self.stat not in STATS:
            raise ValueError(f"bad stat {self.stat!r}")

    def render(self) -> str:
        return f"trade({self.stat})"


@dataclass(frozen=True)
class InspectOrb:
    def render(self) -> str:
        return "inspect_orb()"


AgentAction = Union[Move, UseShovel, UseWing, Trade, InspectOrb]


# ---------------------------------------------------------------------------
# tasks


GOAL_KINDS = ("reach_tile", "defeat_monster", "reach_floor", "collect_item")


@dataclass(frozen=True)
class TaskSpec:
    """A goal over a world. ``target`` depends on ``goal``:

    - reach_tile: [floor, row, col]
    - defeat_monster: monster id
    - reach_floor: floor index (0-based; ``len(floors)`` means the exit stairs)
    - collect_item: ``shovel``, ``wing``, ``orb`` or ``key:<color>``
    """

    task_id: str
    goal: str
    target: Any
    description: str = ""

    def __post_init__(self) -> None:
        if self.goal not in GOAL_KINDS:
            raise ValueError(f"unknown goal {self.goal!r}")
        if isinstance(self.target, list):
            object.__setattr__(self, "target", tuple(self.target))

    def to_json(self) -> dict:
        target = list(self.target) if isinstance(self.target, tuple) else self.target
        return {"task_id": self.task_id, "goal": self.goal, "target": target,
                "description": self.description}

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], d["goal"], d["target"], d.get("description", ""))

    def describe(self) -> str:
        if self.description:
            return self.description
        if self.goal == "reach_tile":
            f, r, c = self.target
            return f"reach position ({r}, {c}) on floor {f + 1}"
        if self.goal == "defeat_monster":
            return f"defeat monster {self.target}"
        if self.goal == "reach_floor":
            return f"take the stairs to floor {int(self.target) + 1}"
        return f"collect the {self.target.replace(':', ' ')}"
