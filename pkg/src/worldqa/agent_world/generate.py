"""Procedural world generation by rejection sampling against the solver."""
from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field
from typing import Optional

from worldqa.agent_world.combat import DEFAULT_LIFESTEAL
from worldqa.agent_world.engine import DEFAULT_RULES
from worldqa.agent_world.solver import GridTooLarge, SearchBudgetExceeded, validate_solvable
from worldqa.agent_world.types import (
    ALTAR, EMPTY, ORB, SPAWN, STORE, WALL, Fidelity, Inventory, Monster, MonsterKind,
    Stats, TaskSpec, WorldState, crystal, door, item, key, monster_ref, potion, stairs,
    validate_state,
)
from worldqa.common import derive_seed


class GenerationExhausted(RuntimeError):
    pass


@dataclass
class WorldConfig:
    fidelity: str = "imperfect"
    rows: int = 7
    cols: int = 7
    min_floors: int = 1
    max_floors: int = 1
    wall_density: float = 0.15
    partition_prob: float = 0.7  # chance of a wall line with one door per floor
    monsters: tuple[int, int] = (2, 4)
    potions: tuple[int, int] = (1, 2)
    crystals: tuple[int, int] = (0, 2)
    extra_keys: tuple[int, int] = (0, 1)
    monster_life: tuple[int, int] = (10, 60)
    monster_attack: tuple[int, int] = (8, 18)
    monster_defense: tuple[int, int] = (1, 7)
    potion_amounts: tuple[int, ...] = (20, 50)
    crystal_amount: int = 2
    # perfect-only features
    kind_weights: dict = field(default_factory=lambda: {
        "normal": 5, "wizard": 2, "guardian": 2, "vampire": 1})
    key_color_weights: dict = field(default_factory=lambda: {"yellow": 6, "blue": 3, "red": 1})
    boss: bool = False
    store_prob: float = 0.5
    altar_prob: float = 0.3
    item_prob: float = 0.4
    orb_prob: float = 0.5
    player: dict = field(default_factory=lambda: {"attack": 10, "defense": 5, "life": 100})
    gold_divisor: int = 5
    rules: dict = field(default_factory=lambda: dict(DEFAULT_RULES))
    max_attempts: int = 1000
    solver_node_limit: int = 20_000
    max_cells: int = 400

    def __post_init__(self) -> None:
        Fidelity(self.fidelity)
        if self.rows < 5 or self.cols < 5:
            raise ValueError("worlds are at least 5x5")
        if not 1 <= self.min_floors <= self.max_floors:
            raise ValueError("need 1 <= min_floors <= max_floors")
        if self.fidelity == Fidelity.IMPERFECT.value and self.max_floors != 1:
            raise ValueError("imperfect worlds have a single floor")
        for name in ("monsters", "potions", "crystals", "extra_keys", "monster_life",
                     "monster_attack", "monster_defense"):
            setattr(self, name, tuple(getattr(self, name)))
        self.potion_amounts = tuple(self.potion_amounts)

    @classmethod
    def imperfect(cls, **kw) -> "WorldConfig":
        return cls(fidelity="imperfect", **kw)

    @classmethod
    def perfect(cls, **kw) -> "WorldConfig":
        kw.setdefault("rows", 6)
        kw.setdefault("cols", 6)
        kw.setdefault("min_floors", 2)
        kw.setdefault("max_floors", 2)
        kw.setdefault("boss", True)
        return cls(fidelity="perfect", **kw)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig keys: {sorted(unknown)}")
        return cls(**d)


def default_task(state: WorldState) -> TaskSpec:
    n = len(state.floors)
    return TaskSpec("reach-exit", "reach_floor", n, f"reach the exit stairs on floor {n}")


def generate_world(config: WorldConfig, seed: int) -> WorldState:
    """Sample worlds until one passes the solver (deterministic in config and seed)."""
    rng = random.Random(derive_seed(seed, "generate_world"))
    for _ in range(config.max_attempts):
        state = _sample(config, rng, seed)
        try:
            validate_state(state)
            ok = validate_solvable(state, default_task(state), node_limit=config.solver_node_limit,
                                   max_cells=config.max_cells)
        except (SearchBudgetExceeded, GridTooLarge):
            continue
        if ok:
            return state
    raise GenerationExhausted(f"no solvable world in {config.max_attempts} attempts")


def _weighted(rng: random.Random, weights: dict) -> str:
    names = sorted(weights)
    return rng.choices(names, weights=[weights[n] for n in names])[0]


def _sample(cfg: WorldConfig, rng: random.Random, seed: int) -> WorldState:
    perfect = cfg.fidelity == Fidelity.PERFECT.value
    n_floors = rng.randint(cfg.min_floors, cfg.max_floors)
    R, C = cfg.rows, cfg.cols
    grids = [[[EMPTY] * C for _ in range(R)] for _ in range(n_floors)]
    reserved: list[set] = [set() for _ in range(n_floors)]

    # stairs share coordinates between consecutive floors
    spawn = (rng.randrange(R), rng.randrange(C))
    grids[0][spawn[0]][spawn[1]] = SPAWN
    reserved[0].add(spawn)
    ups = []
    for f in range(n_floors - 1):
        while True:
            u = (rng.randrange(R), rng.randrange(C))
            if u not in reserved[f] and u not in reserved[f + 1]:
                break
        grids[f][u[0]][u[1]] = stairs(f + 1)
        grids[f + 1][u[0]][u[1]] = stairs(f)
        reserved[f].add(u)
        reserved[f + 1].add(u)
        ups.append(u)
    while True:
        exit_cell = (rng.randrange(R), rng.randrange(C))
        if exit_cell not in reserved[-1] and _far(exit_cell, spawn if n_floors == 1 else ups[-1], 3):
            break
    grids[-1][exit_cell[0]][exit_cell[1]] = stairs(n_floors)
    reserved[-1].add(exit_cell)

    monsters: dict[str, Monster] = {}
    counter = [0]
    for f in range(n_floors):
        grid = grids[f]
        entry = spawn if f == 0 else ups[f - 1]
        key_cells: list = []
        if rng.random() < cfg.partition_prob:
            color = _weighted(rng, cfg.key_color_weights) if perfect else "yellow"
            line = _partition(grid, reserved[f], rng, color)
            if line is not None:
                # a matching key somewhere else on the floor
                key_cells.append(key(color))
        # random clutter walls
        for r in range(R):
            for c in range(C):
                if grid[r][c] == EMPTY and (r, c) not in reserved[f] and rng.random() < cfg.wall_density:
                    grid[r][c] = WALL
        free = [(r, c) for r in range(R) for c in range(C) if grid[r][c] == EMPTY]
        rng.shuffle(free)

        def take():
            return free.pop() if free else None

        placements: list[str] = list(key_cells)
        placements += [key(_weighted(rng, cfg.key_color_weights) if perfect else "yellow")
                       for _ in range(rng.randint(*cfg.extra_keys))]
        placements += [potion(rng.choice(cfg.potion_amounts)) for _ in range(rng.randint(*cfg.potions))]
        placements += [crystal(rng.choice(("attack", "defense")), cfg.crystal_amount)
                       for _ in range(rng.randint(*cfg.crystals))]
        if perfect:
            if rng.random() < cfg.store_prob:
                placements.append(STORE)
            if rng.random() < cfg.altar_prob:
                placements.append(ALTAR)
            if rng.random() < cfg.item_prob:
                placements.append(item(rng.choice(("shovel", "wing"))))
        if rng.random() < cfg.orb_prob and f == 0:
            placements.append(ORB)
        for t in placements:
            cell = take()
            if cell is None:
                break
            grid[cell[0]][cell[1]] = t

        n_mon = rng.randint(*cfg.monsters)
        kinds = []
        for _ in range(n_mon):
            kinds.append(MonsterKind(_weighted(rng, cfg.kind_weights)) if perfect else MonsterKind.NORMAL)
        if perfect and cfg.boss and f == n_floors - 1:
            kinds.append(MonsterKind.BOSS)
        for kind in kinds:
            cell = take()
            if cell is None:
                break
            counter[0] += 1
            mid = f"M{counter[0]}"
            st = _monster_stats(cfg, rng, kind)
            monsters[mid] = Monster(
                kind=kind, stats=st, reward_gold=st.life // cfg.gold_divisor, reward_exp=st.attack,
                pos=cell, floor=f,
                lifesteal_pct=cfg.rules.get("lifesteal_pct", DEFAULT_LIFESTEAL) if kind is MonsterKind.VAMPIRE else 0.0,
            )
            grid[cell[0]][cell[1]] = monster_ref(mid)
        del entry

    player = Stats(**{k: int(v) for k, v in cfg.player.items()})
    floors = tuple(tuple(tuple(row) for row in g) for g in grids)
    return WorldState(
        floors=floors, current_floor=0, player_pos=spawn, player_stats=player,
        inventory=Inventory(), monsters=monsters, fidelity=Fidelity(cfg.fidelity), seed=int(seed),
        turn=0, spawn_stats=player, config={"rules": dict(cfg.rules)},
    )


def _far(a, b, dist: int) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) >= dist


def _partition(grid, reserved: set, rng: random.Random, color: str) -> Optional[list]:
    R, C = len(grid), len(grid[0])
    vertical = rng.random() < 0.5
    for _ in range(10):
        idx = rng.randrange(1, (C if vertical else R) - 1)
        cells = [(r, idx) for r in range(R)] if vertical else [(idx, c) for c in range(C)]
        if any(cell in reserved for cell in cells):
            continue
        gap = rng.choice(cells)
        for cell in cells:
            grid[cell[0]][cell[1]] = door(color) if cell == gap else WALL
            reserved.add(cell)
        return cells
    return None


def _monster_stats(cfg: WorldConfig, rng: random.Random, kind: MonsterKind) -> Stats:
    life = rng.randint(*cfg.monster_life)
    lo_a, hi_a = cfg.monster_attack
    lo_d, hi_d = cfg.monster_defense
    if kind is MonsterKind.WIZARD:
        attack = rng.randint((lo_a + hi_a) // 2, hi_a + 4)
        defense = rng.randint(0, max(0, lo_d))
    elif kind is MonsterKind.GUARDIAN:
        attack = rng.randint(2, max(3, lo_a - 2))
        defense = rng.randint(attack + 1, attack + 1 + hi_d)
    elif kind is MonsterKind.BOSS:
        life = cfg.monster_life[1] * 2
        attack = hi_a + 2
        defense = hi_d
    else:
        attack = rng.randint(lo_a, hi_a)
        defense = rng.randint(lo_d, hi_d)
    return Stats(attack=attack, defense=defense, life=life)
